"""Skip-connected denoising autoencoder used as the purification front-end.

Five stride-2 convolutions halve the resolution level by level, five
transposed convolutions restore it. Decoder features are summed with the
encoder features of equal resolution; the raw input is never skip-connected.
Hidden layers use ELU and the output layer a sigmoid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from dapas.types import ImageBatch, ShapeMismatchError, SpecError, check_resolution

CHECKPOINT_FORMAT = "dapas-dae"
CHECKPOINT_VERSION = 1
LEVELS = 5


@dataclass(frozen=True)
class DAEConfig:
    input_channels: int = 3
    base_channels: int = 64
    channel_schedule: tuple[int, ...] | None = None
    kernel_size: int = 4
    resolution: tuple[int, int] = (64, 64)
    use_skips: bool = field(default=True)

    def __post_init__(self) -> None:
        if self.channel_schedule is None:
            b = self.base_channels
            object.__setattr__(self, "channel_schedule", (b, 2 * b, 4 * b, 8 * b, 8 * b))
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))
        if len(self.channel_schedule) != LEVELS:
            raise SpecError(f"channel_schedule needs {LEVELS} entries, got {self.channel_schedule}")
        if self.kernel_size < 2:
            raise SpecError("kernel_size must be >= 2")
        check_resolution(*self.resolution)

    @classmethod
    def from_dict(cls, raw: dict) -> DAEConfig:
        return cls(**raw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _padding(kernel: int) -> tuple[int, int]:
    # exact halving for the conv and exact doubling for the transposed conv
    pad = math.ceil((kernel - 2) / 2)
    return pad, 2 + 2 * pad - kernel


class DAE(nn.Module):
    def __init__(self, config: DAEConfig):
        super().__init__()
        self.config = config
        self.version = CHECKPOINT_VERSION
        self.meta: dict = {}
        k = config.kernel_size
        pad, out_pad = _padding(k)
        widths = list(config.channel_schedule)
        self.encoder = nn.ModuleList()
        prev = config.input_channels
        for w in widths:
            self.encoder.append(nn.Conv2d(prev, w, k, stride=2, padding=pad))
            prev = w
        self.decoder = nn.ModuleList()
        for w in widths[-2::-1] + [config.input_channels]:
            self.decoder.append(
                nn.ConvTranspose2d(prev, w, k, stride=2, padding=pad, output_padding=out_pad)
            )
            prev = w
        self.act = nn.ELU()

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for conv in self.encoder:
            x = self.act(conv(x))
            features.append(x)
        return features

    def forward(self, x: torch.Tensor, use_skips: bool | None = None) -> torch.Tensor:
        if use_skips is None:
            use_skips = self.config.use_skips
        features = self.encode(x)
        skips = features[-2::-1]
        h = features[-1]
        for i, deconv in enumerate(self.decoder[:-1]):
            h = self.act(deconv(h))
            if use_skips:
                h = h + skips[i]
        return torch.sigmoid(self.decoder[-1](h))


def build_dae(config: DAEConfig, seed: int = 0) -> DAE:
    """Initialise a DAE deterministically from ``seed`` (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DAE(config)
    return model


def _check_input(model: DAE, images: ImageBatch) -> None:
    if images.channels != model.config.input_channels:
        raise ShapeMismatchError(
            f"DAE expects {model.config.input_channels} channels, got {images.channels}"
        )


def denoise(model: DAE, images: ImageBatch) -> ImageBatch:
    """Purify ``images``; shape preserved, values in [0, 1]."""
    _check_input(model, images)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            param = next(model.parameters())
            out = model(images.data.to(param.dtype))
    finally:
        model.train(was_training)
    return ImageBatch(out.to(torch.float32))


def save_dae(model: DAE, path: str | Path, meta: dict | None = None) -> Path:
    """Write config, free-form ``meta`` (e.g. the training noise) and weights."""
    path = Path(path)
    if meta is not None:
        model.meta = dict(meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": model.version,
            "config": json.dumps(model.config.to_dict(), sort_keys=True),
            "meta": json.dumps(model.meta, sort_keys=True),
            "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        },
        path,
    )
    return path


def load_dae(path: str | Path) -> DAE:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise SpecError(f"{path} is not a DAE checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise SpecError(f"checkpoint version {blob['version']} is newer than supported")
    model = DAE(DAEConfig.from_dict(json.loads(blob["config"])))
    model.load_state_dict(blob["state_dict"])
    model.meta = json.loads(blob.get("meta", "{}"))
    model.eval()
    return model
