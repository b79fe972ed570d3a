import numpy as np

from eegattn.attention import USES_R, AttentionSpec, build_attention
from eegattn.rng import make_rng


def random_spec(kind, rng, C):
    """A valid spec for width C with randomly chosen r / k / codewords."""
    spec = AttentionSpec.default(kind)
    if kind in USES_R:
        width = 2 * C if kind == "srm_cross" else C
        spec.r = int(rng.choice([r for r in (1, 2, 4) if width % r == 0]))
    if kind == "eca":
        spec.k = int(rng.choice([k for k in (1, 3, 5, 7) if k <= 2 * C - 1]))
    if kind in ("cbam", "cat"):
        spec.k = int(rng.choice([1, 3, 5]))
    if kind == "encnet":
        spec.codewords = int(rng.integers(1, 4))
    if kind == "fca":
        n_groups = int(rng.choice([g for g in (1, 2) if C % g == 0]))
        spec.dct_frequency_indices = [int(u) for u in rng.integers(0, 3, n_groups)]
    return spec


def random_block(spec, C, T, rng, training=False, scale=0.5):
    """f64 block with jittered parameters and random running statistics."""
    block = build_attention(spec, C, T, make_rng(int(rng.integers(1 << 30)), "init"), n_classes=2,
                            dtype=np.float64)
    for _, p in block.named_parameters():
        p.data += scale * rng.standard_normal(p.shape)
    for name, arr in block.named_state():
        if name.endswith("running_mean"):
            arr[...] = rng.standard_normal(arr.shape)
        else:
            arr[...] = rng.uniform(0.5, 2.0, arr.shape)
    block.train(training)
    return block
