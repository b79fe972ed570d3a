import math

import numpy as np
import pytest

import reference as ref
from eegattn import gradcheck as gc
from eegattn import tensor as T
from eegattn.attention import KINDS, AttentionSpec, build_attention
from eegattn.exceptions import ConfigError
from eegattn.rng import make_rng
from eegattn.tensor import Tensor
from helpers import random_block, random_spec

SIGMOID_GATED = ("se", "se_l2", "gsop", "fca", "encnet", "eca", "ge_theta_minus", "ge_theta", "ge_theta_plus",
                 "srm", "srm_cross", "cbam")


def _zero_params(block):
    for _, p in block.named_parameters():
        p.data[...] = 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_forward_matches_loop_reference(kind):
    rng = np.random.default_rng(abs(hash(kind)) % (1 << 32))
    worst = 0.0
    for _ in range(100):
        B = int(rng.integers(1, 4))
        C = int(rng.choice([2, 4, 6, 8]))
        T_len = int(rng.integers(3, 9))
        spec = random_spec(kind, rng, C)
        block = random_block(spec, C, T_len, rng, training=bool(rng.integers(2)))
        x = rng.standard_normal((B, C, T_len)) * rng.uniform(0.2, 3.0)
        expect = ref.block_forward(block, x, spec)
        got = block(Tensor(x)).data
        assert got.shape == x.shape
        worst = max(worst, float(np.max(np.abs(got - expect))))
    assert worst <= 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_gradcheck(kind):
    assert gc.block_gradcheck(kind) <= 1e-4


@pytest.mark.parametrize("kind", SIGMOID_GATED)
def test_sigmoid_gates_never_amplify(kind):
    rng = np.random.default_rng(7)
    spec = AttentionSpec.default(kind)
    block = random_block(spec, 16, 62, rng, scale=1.0)
    x = rng.standard_normal((200, 16, 62)) * rng.lognormal(0.0, 1.0, (200, 1, 1))
    y = block(Tensor(x)).data
    assert np.all(np.abs(y) <= np.abs(x))


def test_se_zero_weights_halves_input():
    rng = np.random.default_rng(0)
    block = build_attention(AttentionSpec.default("se"), 8, 10, make_rng(0), dtype=np.float64)
    _zero_params(block)
    x = rng.standard_normal((2, 8, 10))
    assert np.array_equal(block(Tensor(x)).data, x / 2)


def test_se_zero_channel_stays_zero():
    rng = np.random.default_rng(1)
    block = random_block(AttentionSpec.default("se"), 8, 10, rng)
    x = rng.standard_normal((2, 8, 10))
    x[:, 1] = 0.0
    assert np.all(block(Tensor(x)).data[:, 1] == 0.0)


def test_gsop_constant_input_gives_time_independent_gate():
    rng = np.random.default_rng(2)
    block = random_block(AttentionSpec.default("gsop"), 8, 10, rng)
    x = np.repeat(rng.standard_normal((3, 8, 1)), 10, axis=2)
    ratio = block(Tensor(x)).data / x
    assert np.allclose(ratio, ratio[..., :1], atol=1e-12)


def test_fca_dc_squeeze_is_scaled_mean():
    block = build_attention(AttentionSpec.default("fca"), 4, 4, make_rng(0), dtype=np.float64)
    x = np.tile(np.array([1.0, 2.0, 3.0, 4.0]), (1, 4, 1))
    assert np.allclose(block.squeeze(Tensor(x)).data, 10.0, atol=1e-12)


def test_fca_dc_gate_equals_se_with_prescaled_weights():
    rng = np.random.default_rng(3)
    C, T_len = 16, 62
    fca = build_attention(AttentionSpec.default("fca"), C, T_len, make_rng(0), dtype=np.float64)
    se = build_attention(AttentionSpec.default("se"), C, T_len, make_rng(1), dtype=np.float64)
    fm, sm = fca.children["mlp"].params, se.children["mlp"].params
    sm["w1"].data[...] = fm["w1"].data * T_len
    sm["w2"].data[...] = fm["w2"].data
    x = rng.standard_normal((5, C, T_len))
    assert np.max(np.abs(fca.gate(Tensor(x)).data - se.gate(Tensor(x)).data)) <= 1e-9


def test_fca_parameter_split():
    block = build_attention(AttentionSpec.default("fca"), 16, 62, make_rng(0))
    assert block.n_trainable() == 128
    assert block.n_fixed() == 992


def test_encnet_single_codeword_sums_residuals():
    rng = np.random.default_rng(4)
    block = random_block(AttentionSpec(kind="encnet", codewords=1), 3, 5, rng)
    x = rng.standard_normal((2, 3, 5))
    d = block.params["codewords"].data[0]
    expect = (x - d[None, :, None]).sum(axis=2)
    assert np.allclose(block.encode(Tensor(x)).data[:, 0], expect, atol=1e-12)


def test_encnet_residuals_vanish_at_codeword():
    rng = np.random.default_rng(5)
    block = random_block(AttentionSpec(kind="encnet", codewords=2), 3, 4, rng)
    d = block.params["codewords"].data
    x = np.repeat(d[1][None, :, None], 4, axis=2)
    block.params["smoothing"].data[...] = 50.0
    e = block.encode(Tensor(x)).data
    assert np.allclose(e[0, 1], 0.0, atol=1e-12)


def test_eca_zero_kernel_halves_input():
    block = build_attention(AttentionSpec.default("eca"), 16, 10, make_rng(0), dtype=np.float64)
    _zero_params(block)
    x = np.random.default_rng(6).standard_normal((2, 16, 10))
    assert np.array_equal(block(Tensor(x)).data, x / 2)


def test_eca_width_one_kernel_is_scalar_map():
    block = build_attention(AttentionSpec(kind="eca", k=1), 5, 7, make_rng(0), dtype=np.float64)
    w = float(block.params["conv_w"].data.ravel()[0])
    x = np.random.default_rng(7).standard_normal((3, 5, 7))
    expect = 1.0 / (1.0 + np.exp(-w * x.mean(axis=2)))
    assert np.allclose(block.gate(Tensor(x)).data, expect, atol=1e-12)


def test_eca_has_k_parameters():
    assert build_attention(AttentionSpec(kind="eca", k=9), 16, 62, make_rng(0)).n_trainable() == 9


def test_ge_theta_minus_on_zero_input():
    block = build_attention(AttentionSpec(kind="ge_theta_minus"), 4, 6, make_rng(0), dtype=np.float64)
    x = np.zeros((2, 4, 6))
    assert np.all(block.gate(Tensor(x)).data == 0.5)
    assert np.all(block(Tensor(x)).data == 0.0)


def test_gct_identity_at_init():
    block = build_attention(AttentionSpec(kind="gct"), 16, 62, make_rng(0), dtype=np.float64)
    x = np.random.default_rng(8).standard_normal((3, 16, 62))
    assert np.array_equal(block(Tensor(x)).data, x)


@pytest.mark.parametrize("kind", ["gct", "gct_gap"])
def test_gct_gate_strictly_between_zero_and_two(kind):
    rng = np.random.default_rng(9)
    block = random_block(AttentionSpec(kind=kind), 16, 62, rng, scale=1.0)
    x = rng.standard_normal((500, 16, 62)) * rng.lognormal(0.0, 1.0, (500, 1, 1))
    g = block.gate(Tensor(x)).data
    assert np.all((g > 0.0) & (g < 2.0))


def test_gct_normalized_embedding_energy():
    rng = np.random.default_rng(10)
    block = random_block(AttentionSpec(kind="gct"), 16, 62, rng)
    x = rng.standard_normal((50, 16, 62))
    s = block.params["alpha"].data * np.sqrt((x**2).sum(axis=2))
    total = (s**2).sum(axis=1)
    energy = (block.normalized_embedding(Tensor(x)).data ** 2).sum(axis=1)
    assert np.all(total >= 1.0)
    assert np.allclose(energy, 16 * total / (total + 1e-5), atol=1e-12)
    assert np.all(np.abs(energy - 16) <= 1e-3)


def test_srm_constant_channel_style():
    rng = np.random.default_rng(11)
    block = random_block(AttentionSpec(kind="srm"), 4, 6, rng)
    x = rng.standard_normal((2, 4, 6))
    x[:, 2] = 1.5
    st = block.styles(Tensor(x)).data
    assert np.allclose(st[:, 2], [1.5, 0.0], atol=1e-15)


def test_srm_is_channel_permutation_equivariant():
    # per-channel CFC and BN parameters are permuted together with the channels
    rng = np.random.default_rng(12)
    C = 8
    block = random_block(AttentionSpec(kind="srm"), C, 10, rng)
    perm = rng.permutation(C)
    other = random_block(AttentionSpec(kind="srm"), C, 10, rng)
    other.params["cfc_w"].data[...] = block.params["cfc_w"].data[perm]
    for name in ("weight", "bias"):
        other.children["bn"].params[name].data[...] = block.children["bn"].params[name].data[perm]
    for name in ("running_mean", "running_var"):
        other.children["bn"].state[name][...] = block.children["bn"].state[name][perm]
    x = rng.standard_normal((3, C, 10))
    assert np.allclose(other(Tensor(x[:, perm])).data, block(Tensor(x)).data[:, perm], atol=1e-14)


def test_cbam_zero_weights_quarter():
    block = build_attention(AttentionSpec.default("cbam"), 16, 20, make_rng(0), dtype=np.float64)
    _zero_params(block)
    x = np.random.default_rng(13).standard_normal((2, 16, 20))
    assert np.max(np.abs(block(Tensor(x)).data - 0.25 * x)) <= 1e-7


def test_cat_zero_weights_identity():
    block = build_attention(AttentionSpec.default("cat"), 16, 20, make_rng(0), dtype=np.float64)
    _zero_params(block)
    block.params["c_w"].data[...] = 1.0
    block.params["t_w"].data[...] = 1.0
    x = np.random.default_rng(14).standard_normal((2, 16, 20))
    assert np.max(np.abs(block(Tensor(x)).data - x)) <= 1e-7


def test_catlite_zero_mlp_kills_output():
    rng = np.random.default_rng(15)
    block = random_block(AttentionSpec.default("catlite"), 16, 20, rng)
    for p in block.children["mlp"].params.values():
        p.data[...] = 0.0
    assert np.all(block(Tensor(rng.standard_normal((2, 16, 20)))).data == 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_eval_mode_batch_independence(kind):
    rng = np.random.default_rng(16)
    block = random_block(AttentionSpec.default(kind), 16, 62, rng)
    x = rng.standard_normal((4, 16, 62))
    full = block(Tensor(x)).data
    for i in range(4):
        assert np.allclose(block(Tensor(x[i : i + 1])).data[0], full[i], atol=1e-12)


def test_unknown_kind_lists_valid_kinds():
    with pytest.raises(ConfigError) as err:
        AttentionSpec(kind="transformer")
    for k in KINDS:
        assert k in str(err.value)


@pytest.mark.parametrize(
    "spec, C, T_len",
    [
        (AttentionSpec(kind="se", r=3), 16, 10),
        (AttentionSpec(kind="se", r=32), 16, 10),
        (AttentionSpec(kind="eca", k=4), 16, 10),
        (AttentionSpec(kind="cbam", r=2, k=2), 16, 10),
        (AttentionSpec(kind="srm_cross", r=64), 16, 10),
        (AttentionSpec(kind="gsop", r=1), 16, 1),
        (AttentionSpec(kind="fca", r=1, dct_frequency_indices=[0, 1, 2]), 16, 10),
        (AttentionSpec(kind="ge_theta", extent="local"), 16, 10),
        (AttentionSpec(kind="encnet", codewords=0), 16, 10),
    ],
)
def test_invalid_specs_rejected(spec, C, T_len):
    with pytest.raises(ConfigError):
        build_attention(spec, C, T_len, make_rng(0))


def test_spec_round_trip():
    spec = AttentionSpec.default("cbam")
    assert AttentionSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        AttentionSpec.from_dict({"kind": "se", "reduction": 4})


def test_entropy_reduction_of_constant_is_log_t():
    x = Tensor(np.full((1, 2, 7), 3.0))
    assert np.allclose(T.reduce_time(x, "entropy").data, math.log(7), atol=1e-14)
