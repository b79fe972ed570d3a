import numpy as np
import pytest

from eegattn import gradcheck as gc
from eegattn.attention import KINDS, AttentionSpec
from eegattn.basenet import (BaseNetConfig, attach_attention, build, forward, load_checkpoint, param_count,
                             save_checkpoint)
from eegattn.exceptions import ConfigError, DataFormatError, ShapeError
from eegattn.tensor import Tensor

REFERENCE = BaseNetConfig(in_channels=22, n_classes=4, n_samples=1000)

# Trainable-parameter deltas for C_feat=16, T_att=62 (the anchored subset is
# also checked in the acceptance suite).
DELTAS = {
    "se": 2 * 16 * 16 // 4,
    "se_l2": 2 * 16 * 16 // 4,
    "gct": 3 * 16,
    "gct_gap": 3 * 16,
    "srm": 2 * 16 + 2 * 16,
    "ge_theta_minus": 0,
    "ge_theta": 16 * 62 + 2 * 16,
    "ge_theta_plus": 16 * 62 + 2 * 16 + 2 * 16 * 16 // 4,
    "fca": 2 * 16 * 16 // 4,
    "eca": 9,
    "cbam": 2 * 16 * 16 // 8 + 2 * 15 + 1,
    "cat": 2 * 16 * 16 // 4 + 8 + 3 + 1,
    "catlite": 2 * 16 * 16 // 4 + 3,
    "encnet": 4 * 16 + 4 + 2 * 4 + 16 * 16 + 16,
    "srm_cross": 32 * 8 + 8 * 16 + 2 * 16,
    "gsop": (4 * 16 + 4) + 2 * 4 + (4 * 4 * 4 + 4 * 4) + (16 * 16 + 16),
}


def _model(attention=None, **kw):
    cfg = BaseNetConfig(**{**REFERENCE.__dict__, "attention": attention, **kw})
    return build(cfg, seed=0)


def test_reference_parameter_count():
    assert param_count(_model()) == (3692, 3692)


def test_reference_layer_ledger():
    # temporal 40*25, BN 80, spatial 40*22, BN 80, projection 40*16+16,
    # depthwise 16*16, pointwise 16*16, BN 32, classifier 16*7*4+4
    assert 1000 + 80 + 880 + 80 + 656 + 256 + 256 + 32 + 452 == 3692
    m = _model()
    counts = {}
    for name, p in m.named_parameters():
        counts[name.split(".")[0]] = counts.get(name.split(".")[0], 0) + p.size
    assert counts == {"stem": 1960, "bn2": 80, "projection": 656, "depthwise": 256, "pointwise": 256,
                      "bn3": 32, "classifier": 452}


@pytest.mark.parametrize("kind", KINDS)
def test_attention_parameter_deltas(kind):
    trainable, total = param_count(_model(kind))
    assert trainable - 3692 == DELTAS[kind]
    assert total - trainable == (992 if kind == "fca" else 0)


def test_se_reference_total():
    assert param_count(_model(AttentionSpec(kind="se", r=4)))[0] == 3820


def test_small_montage_builds():
    m = build(BaseNetConfig(in_channels=3, n_classes=2, n_samples=1000))
    assert m.children["classifier"].params["weight"].shape == (2, 16 * 7)


def test_too_short_input_reports_length_chain():
    with pytest.raises(ConfigError, match="-> pool"):
        BaseNetConfig(n_samples=60).validate()


@pytest.mark.parametrize("kind", [None, *KINDS])
def test_output_shape_unchanged_by_attention(kind):
    m = _model(kind)
    x = np.random.default_rng(0).standard_normal((2, 22, 1000)).astype(np.float32)
    assert forward(m, x, "eval").shape == (2, 4)
    feats = m.features_at_attention(Tensor(x))
    assert feats.shape == (2, 16, 62)
    if kind is not None:
        assert m.attention(feats).shape == feats.shape


def test_zero_input_eval_is_finite():
    out = forward(_model(), np.zeros((2, 22, 1000), dtype=np.float32), "eval")
    assert np.all(np.isfinite(out.data))


def test_batch_of_one_matches_batch_of_four():
    m = _model("cbam")
    x = np.random.default_rng(1).standard_normal((4, 22, 1000)).astype(np.float32)
    full = forward(m, x, "eval").data
    for i in range(4):
        assert np.max(np.abs(forward(m, x[i : i + 1], "eval").data[0] - full[i])) <= 1e-6


def test_eval_forward_is_pure():
    m = _model("se")
    x = np.random.default_rng(2).standard_normal((3, 22, 1000)).astype(np.float32)
    assert np.array_equal(forward(m, x, "eval").data, forward(m, x, "eval").data)


def test_train_forward_reproducible_with_fixed_dropout_seed():
    x = np.random.default_rng(3).standard_normal((3, 22, 1000)).astype(np.float32)
    outs = []
    for _ in range(2):
        m = _model()
        m.set_dropout_seed(11)
        outs.append(forward(m, x, "train").data)
    assert np.array_equal(outs[0], outs[1])


def test_same_seed_same_weights():
    a, b = build(REFERENCE, seed=5), build(REFERENCE, seed=5)
    c = build(REFERENCE, seed=6)
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    assert not np.array_equal(a.state_dict()["classifier.weight"], c.state_dict()["classifier.weight"])


def test_wrong_input_shape():
    with pytest.raises(ShapeError):
        forward(_model(), np.zeros((1, 21, 1000), dtype=np.float32))


def test_attach_and_detach_preserve_weights():
    base = _model()
    with_se = attach_attention(base, AttentionSpec(kind="se", r=4))
    assert param_count(with_se)[0] == 3820
    back = attach_attention(with_se, None)
    assert param_count(back)[0] == 3692
    for k, v in base.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v)
    assert param_count(attach_attention(base, AttentionSpec(kind="ge_theta_minus")))[0] == 3692
    assert param_count(attach_attention(base, AttentionSpec(kind="ge_theta_plus", r=4)))[0] == 3692 + 1152
    assert base.attention is None


def test_attach_invalid_spec():
    with pytest.raises(ConfigError):
        attach_attention(_model(), AttentionSpec(kind="eca", k=4))


def test_fused_stem_matches_composition():
    cfg = BaseNetConfig(**{**gc.MINI_BASENET})
    m = build(cfg, seed=0, dtype=np.float64)
    stem = m.children["stem"]
    x = Tensor(np.random.default_rng(4).standard_normal((3, 4, 200)), requires_grad=True)
    for training in (True, False):
        stem.train(training)
        twin = stem.clone()
        a = stem(x)
        b = twin.forward_unfused(x)
        assert np.max(np.abs(a.data - b.data)) <= 1e-10
        w = Tensor(np.random.default_rng(5).standard_normal(a.shape))
        x.zero_grad()
        (a * w).sum().backward()
        gx = x.grad.copy()
        x.zero_grad()
        (b * w).sum().backward()
        assert np.max(np.abs(gx - x.grad)) <= 1e-10
        for (n1, p1), (_, p2) in zip(stem.named_parameters(), twin.named_parameters()):
            assert np.max(np.abs(p1.grad - p2.grad)) <= 1e-10, n1
        for (n1, s1), (_, s2) in zip(stem.named_state(), twin.named_state()):
            assert np.max(np.abs(s1 - s2)) <= 1e-12, n1


def test_miniature_gradcheck():
    assert gc.basenet_gradcheck() <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    m = _model("fca")
    x = np.random.default_rng(6).standard_normal((2, 22, 1000)).astype(np.float32)
    forward(m, x, "train")  # moves running statistics away from their init
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.config == m.config
    for k, v in m.state_dict().items():
        assert np.array_equal(loaded.state_dict()[k], v)
    assert np.array_equal(forward(loaded, x).data, forward(m, x).data)


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    raw = path.read_bytes()
    for cut in (4, 20, len(raw) - 3):
        path.write_bytes(raw[:cut])
        with pytest.raises(DataFormatError):
            load_checkpoint(path)
