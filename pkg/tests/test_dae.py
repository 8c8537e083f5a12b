import numpy as np
import pytest
import torch

from dapas.dae import DAE, DAEConfig, build_dae, denoise, load_dae, save_dae
from dapas.types import ImageBatch, ResolutionError, ShapeMismatchError, SpecError

SMALL = DAEConfig(base_channels=8)


def _images(n=2, c=3, hw=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, c, hw, hw, generator=g))


def test_default_schedule_and_encoder_sizes():
    cfg = DAEConfig()
    assert cfg.channel_schedule == (64, 128, 256, 512, 512)
    model = build_dae(cfg, seed=0)
    feats = model.encode(_images().data)
    assert [f.shape[-1] for f in feats] == [32, 16, 8, 4, 2]
    assert [f.shape[1] for f in feats] == [64, 128, 256, 512, 512]


def test_no_pooling_and_elu_sigmoid():
    model = build_dae(SMALL)
    kinds = {type(m).__name__ for m in model.modules()}
    assert "MaxPool2d" not in kinds and "AvgPool2d" not in kinds
    assert "ELU" in kinds and "ReLU" not in kinds
    assert all(conv.stride == (2, 2) for conv in model.encoder)


def test_bad_resolution_and_schedule():
    with pytest.raises(ResolutionError):
        DAEConfig(resolution=(48, 48))
    with pytest.raises(SpecError):
        DAEConfig(channel_schedule=(8, 16, 32))


def test_same_seed_same_parameters():
    a, b = build_dae(SMALL, seed=3), build_dae(SMALL, seed=3)
    c = build_dae(SMALL, seed=4)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_dae(SMALL, seed=9)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("hw", [32, 64, 128])
def test_shape_preserved_and_sigmoid_range(hw):
    model = build_dae(DAEConfig(), seed=0)
    x = _images(n=1, hw=hw)
    out = denoise(model, x)
    assert out.shape == x.shape
    assert float(out.data.min()) > 0.0 and float(out.data.max()) < 1.0


def test_non_square_resolution():
    model = build_dae(SMALL)
    x = ImageBatch(torch.rand(1, 3, 32, 96))
    assert denoise(model, x).shape == x.shape


def test_single_channel_model():
    model = build_dae(DAEConfig(input_channels=1, base_channels=8))
    x = _images(c=1, hw=32)
    assert denoise(model, x).shape == x.shape
    with pytest.raises(ShapeMismatchError):
        denoise(model, _images(c=3, hw=32))


def test_untrained_model_is_not_constant():
    model = build_dae(SMALL)
    a = denoise(model, _images(n=1, seed=1)).data
    b = denoise(model, _images(n=1, seed=2)).data
    assert not torch.allclose(a, b)


@pytest.mark.parametrize("kernel", [3, 4, 5])
def test_other_kernel_sizes_preserve_shape(kernel):
    model = build_dae(DAEConfig(base_channels=4, kernel_size=kernel))
    x = _images(n=1, hw=64)
    assert model(x.data).shape == x.data.shape


def test_denoise_keeps_training_flag_and_input():
    model = build_dae(SMALL)
    model.train()
    x = _images()
    before = x.data.clone()
    denoise(model, x)
    assert model.training
    assert torch.equal(x.data, before)


def test_skip_paths_are_wired():
    model = build_dae(SMALL, seed=0)
    x = _images(n=4, seed=5).data
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(10):
        opt.zero_grad()
        torch.nn.functional.mse_loss(model(x), x).backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        with_skips = model(x)
        without = model(x, use_skips=False)
    assert (with_skips - without).abs().max() > 1e-3


def test_input_is_not_skip_connected():
    # the decoder sees the input only through the encoder
    model = build_dae(SMALL)
    assert len(model.decoder) == 5
    assert model.decoder[-1].in_channels == SMALL.channel_schedule[0]


def test_checkpoint_round_trip(tmp_path):
    model = build_dae(DAEConfig(base_channels=16), seed=2)
    path = save_dae(model, tmp_path / "dae.pt", meta={"noise": {"kind": "uniform"}})
    loaded = load_dae(path)
    x = _images(n=2)
    assert loaded.config == model.config
    assert loaded.meta == {"noise": {"kind": "uniform"}}
    diff = (denoise(loaded, x).data - denoise(model, x).data).abs().max()
    assert float(diff) <= 1e-6


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(SpecError):
        load_dae(path)


def test_parameter_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_dae(DAEConfig(), seed=1).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    target = torch.rand(2, 3, 32, 32, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return torch.nn.functional.mse_loss(model(x), target)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(0)
    checked = 0
    h = 1e-5
    while checked < 12:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        if abs(analytic) < 1e-9:
            continue
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic))
        assert rel < 1e-3, (idx, numeric, analytic)
        checked += 1


def test_model_is_a_module():
    assert isinstance(build_dae(SMALL), DAE)
    assert isinstance(build_dae(SMALL), torch.nn.Module)
