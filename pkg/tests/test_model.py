import numpy as np
import pytest

from lmnet.attention import AttentionConfig
from lmnet.checks import randomize_bn
from lmnet.errors import ShapeError
from lmnet.model import (
    FeaturePyramid,
    FeatureTransformer,
    LmNet,
    LmNetConfig,
    MultiBranchModule,
    calibrate_bn,
    feature_shapes,
    lft_levels,
    multi_branch_forward,
    tiny_config,
)
from lmnet.reparam import fuse_model, merge_branches
from lmnet.tensor import Tensor


def image(rng, n=1, size=32, dtype=np.float32):
    return Tensor(rng.random((n, 3, size, size)).astype(dtype))


@pytest.fixture(scope="module")
def net32():
    net = LmNet(tiny_config(input_size=(32, 32)), rng=0)
    return calibrate_bn(net, image(np.random.default_rng(0), 4))


def test_config_validation():
    with pytest.raises(ShapeError):
        LmNetConfig(input_size=(40, 48))
    with pytest.raises(ShapeError):
        LmNetConfig(num_classes=1)
    with pytest.raises(ShapeError):
        LmNetConfig(kernels=((2, 2),))
    with pytest.raises(ValueError):
        LmNetConfig.from_dict({"bogus": 1})
    cfg = tiny_config(num_classes=3)
    assert LmNetConfig.from_dict(cfg.to_dict()) == cfg


def test_level_channels():
    assert LmNetConfig().level_channels == [16, 32, 64, 128, 128]
    assert LmNetConfig(channel_cap=None).level_channels == [16, 32, 64, 128, 256]
    assert tiny_config().level_channels == [8, 16, 32, 64, 64]


def test_lft_level_counts():
    assert [len(lft_levels(i)) for i in (1, 2, 3, 4)] == [2, 3, 3, 2]
    assert lft_levels(1) == [2, 3] and lft_levels(4) == [4, 5]
    with pytest.raises(ShapeError):
        lft_levels(0)


def test_multi_branch_zero_weights():
    m = MultiBranchModule(4, 6, rng=0).eval()
    for p in m.parameters():
        p.data[:] = 0
    out = m(Tensor(np.random.default_rng(1).random((2, 4, 5, 5)).astype(np.float32)))
    assert out.shape == (2, 6, 5, 5) and not out.data.any()


def test_multi_branch_fused_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(5):
        m = MultiBranchModule(8, 8, rng=rng)
        randomize_bn(m, rng)
        m.eval()
        x = Tensor(rng.standard_normal((2, 8, 12, 10)).astype(np.float32))
        ref = multi_branch_forward(x, m, "eval")
        f = MultiBranchModule(8, 8, fused=True, rng=0)
        state = {k: v for k, v in m.state_dict().items() if ".branches." not in k}
        fc = merge_branches(m.dw.branch_specs())
        state["dw.fused.weight"], state["dw.fused.bias"] = fc.weight, fc.bias
        f.load_state_dict(state)
        out = f.eval()(x)
        assert out.shape == x.shape[:1] + (8,) + x.shape[2:]
        assert np.abs(out.data - ref.data).max() < 1e-4


def test_multi_branch_forward_restores_mode():
    m = MultiBranchModule(2, 2, se_reduction=1, rng=0).eval()
    multi_branch_forward(Tensor(np.ones((2, 2, 4, 4), np.float32)), m, "train")
    assert not m.training
    with pytest.raises(ValueError):
        multi_branch_forward(Tensor(np.ones((1, 2, 4, 4), np.float32)), m, "test")


def test_encoder_levels_default_256():
    cfg = LmNetConfig()
    shapes = feature_shapes(cfg)
    assert [shapes[f"x{i}"][2] for i in range(1, 6)] == [256, 128, 64, 32, 16]
    assert shapes["gft"][2:] == (16, 16) and shapes["gft"][2] * shapes["gft"][3] == 256
    assert shapes["logits"] == (1, 2, 256, 256)


def test_all_feature_shapes_match_closed_form(net32):
    cfg = net32.config
    x = image(np.random.default_rng(3), 2)
    want = feature_shapes(cfg, batch=2)
    pyr = net32.encoder_forward(x)
    assert pyr.strides == [1, 2, 4, 8, 16]
    for i in range(5):
        assert pyr[i].shape == want[f"x{i + 1}"]
    g = net32.gft_forward(pyr)
    assert g.shape == want["gft"]
    lfts = [net32.lft_forward(i, pyr) for i in (1, 2, 3, 4)]
    for i, t in enumerate(lfts):
        assert t.shape == want[f"lft{i + 1}"]
    assert net32.decoder_forward(g, lfts, (32, 32)).shape == want["logits"]


def test_rejects_bad_input(net32):
    with pytest.raises(ShapeError):
        net32(Tensor(np.zeros((1, 3, 24, 32), np.float32)))
    with pytest.raises(ShapeError):
        net32(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def test_pyramid_invariants():
    z = lambda s: Tensor(np.zeros((1, 1, s, s)))  # noqa: E731
    FeaturePyramid([1, 2, 4], [z(8), z(4), z(2)])
    with pytest.raises(ShapeError):
        FeaturePyramid([1, 2, 2], [z(8), z(4), z(4)])
    with pytest.raises(ShapeError):
        FeaturePyramid([1, 2], [z(8), z(3)])
    rng = np.random.default_rng(4)
    for _ in range(20):
        cfg = tiny_config(base_channels=int(rng.choice([4, 8])), input_size=(16 * int(rng.integers(1, 4)),) * 2)
        strides = [1, 2, 4, 8, 16]
        shapes = feature_shapes(cfg)
        for i, s in enumerate(strides):
            assert shapes[f"x{i + 1}"][2] * s == cfg.input_size[0]


def test_gft_zero_transformer_is_embedding():
    rng = np.random.default_rng(5)
    ft = FeatureTransformer(6, AttentionConfig(4, 2), rng=rng).to(np.float64)
    for p in ft.blocks.parameters():
        p.data[:] = 0
    maps = [Tensor(rng.standard_normal((1, 2, 8, 8))), Tensor(rng.standard_normal((1, 4, 4, 4)))]
    assert np.array_equal(ft(maps, (2, 2)).data, ft.embed_maps(maps, (2, 2)).data)


def test_saturated_lft_equals_global_block():
    rng = np.random.default_rng(6)
    local = FeatureTransformer(6, AttentionConfig(4, 2, window=15), rng=np.random.default_rng(0)).to(np.float64)
    glob = FeatureTransformer(6, AttentionConfig(4, 2), rng=np.random.default_rng(0)).to(np.float64)
    maps = [Tensor(rng.standard_normal((1, 2, 8, 8))), Tensor(rng.standard_normal((1, 4, 4, 4)))]
    assert np.abs(local(maps, (8, 8)).data - glob(maps, (8, 8)).data).max() < 1e-6


def test_zero_decoder_gives_uniform_softmax(net32):
    net = LmNet(net32.config, rng=0).eval()
    net.load_state_dict(net32.state_dict())
    for m in (net.decoder, net.head):
        for p in m.parameters():
            p.data[:] = 0
    logits = net(image(np.random.default_rng(7))).data
    assert np.all(logits == logits.flat[0])


def test_forward_deterministic_and_pure(net32):
    x = image(np.random.default_rng(8))
    before = {k: v.copy() for k, v in net32.state_dict().items()}
    a, b = net32(x).data, net32(x).data
    assert np.array_equal(a, b)
    after = net32.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_same_seed_same_weights():
    a = LmNet(tiny_config(), rng=3).state_dict()
    b = LmNet(tiny_config(), rng=3).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_fused_network_matches(net32):
    fused = fuse_model(net32)
    x = image(np.random.default_rng(9), 2)
    a, b = net32(x).data, fused(x).data
    assert np.abs(a - b).max() < 1e-3
    assert np.array_equal(a.argmax(1), b.argmax(1))


def test_calibrate_bn_restores_momentum():
    net = LmNet(tiny_config(input_size=(16, 16)), rng=0)
    calibrate_bn(net, image(np.random.default_rng(1), 2, 16))
    assert not net.training
    assert net.stem.bn.momentum == 0.1
    assert not np.all(net.stem.bn.running_var == 1)
