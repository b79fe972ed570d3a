"""Channel (and channel + temporal) attention blocks.

Every block maps ``[B, C, T] -> [B, C, T]``: it computes a gate ``a(x)`` and
returns ``a(x) * x`` broadcast over the missing axis. Blocks are built from an
:class:`AttentionSpec` for a known channel count ``C`` and time length ``T``
(the time length matters for the global gather kernel of GE and the DCT bases
of FCA).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from eegattn import tensor as T
from eegattn.exceptions import ConfigError
from eegattn.layers import MLP, BatchNorm, Module, uniform_init
from eegattn.tensor import Tensor

KINDS = (
    "se",
    "gsop",
    "fca",
    "encnet",
    "eca",
    "ge_theta_minus",
    "ge_theta",
    "ge_theta_plus",
    "gct",
    "gct_gap",
    "se_l2",
    "srm",
    "srm_cross",
    "cbam",
    "cat",
    "catlite",
)

# hyperparameters of the BCIC IV 2a configuration column
DEFAULTS = {
    "se": {"r": 4},
    "gsop": {"r": 4},
    "fca": {"r": 4},
    "encnet": {},
    "eca": {"k": 9},
    "ge_theta_plus": {"r": 4},
    "se_l2": {"r": 4},
    "srm_cross": {"r": 4},
    "cbam": {"r": 8, "k": 15},
    "cat": {"r": 4, "k": 3},
    "catlite": {"r": 4},
}

USES_R = {"se", "se_l2", "gsop", "fca", "ge_theta_plus", "srm_cross", "cbam", "cat", "catlite"}
USES_K = {"eca", "cbam", "cat"}

GSOP_ROW_EXPANSION = 4
GCT_EPS = 1e-5


@dataclass
class AttentionSpec:
    kind: str
    r: int = 1
    k: int = 3
    extent: str = "global"
    codewords: Optional[int] = None
    dct_frequency_indices: List[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        kind = str(self.kind).lower().replace("-", "_")
        if kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        self.kind = kind
        self.r = int(self.r)
        self.k = int(self.k)
        self.dct_frequency_indices = [int(i) for i in self.dct_frequency_indices]

    @classmethod
    def default(cls, kind: str, **overrides) -> "AttentionSpec":
        key = str(kind).lower().replace("-", "_")
        return cls(kind=kind, **{**DEFAULTS.get(key, {}), **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionSpec":
        d = dict(d)
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown attention keys {sorted(unknown)}; allowed: {sorted(allowed)}")
        if "kind" not in d:
            raise ConfigError("attention section needs a 'kind'")
        return cls.default(d.pop("kind"), **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, C: int, T_len: int):
        """Raise :class:`ConfigError` if this block configuration cannot act on ``[*, C, T_len]``."""
        kind = self.kind
        if kind in USES_R:
            if self.r < 1:
                raise ConfigError(f"{kind}: reduction rate r must be >= 1, got {self.r}")
            width = 2 * C if kind == "srm_cross" else C
            if self.r > width:
                raise ConfigError(f"{kind}: r={self.r} exceeds the reduced width {width}")
            if width % self.r:
                raise ConfigError(f"{kind}: width {width} not divisible by r={self.r}")
        if kind in USES_K:
            if self.k < 1 or self.k % 2 == 0:
                raise ConfigError(f"{kind}: kernel size k must be odd and positive, got {self.k}")
            if kind == "eca" and self.k > 2 * C - 1:
                raise ConfigError(f"eca: k={self.k} exceeds 2C-1={2 * C - 1}")
        if kind == "gsop" and T_len < 2:
            raise ConfigError("gsop: covariance pooling needs T >= 2")
        if kind == "fca":
            n = len(self.dct_frequency_indices)
            if n == 0 or C % n:
                raise ConfigError(f"fca: C={C} not divisible into {n} DCT frequency groups")
            if any(u < 0 or u >= T_len for u in self.dct_frequency_indices):
                raise ConfigError(f"fca: DCT indices must lie in [0, {T_len})")
        if kind.startswith("ge_") and self.extent != "global":
            raise ConfigError(f"{kind}: only the global extent is supported, got {self.extent!r}")
        if kind == "encnet" and self.codewords is not None and self.codewords < 1:
            raise ConfigError(f"encnet: codewords K must be >= 1, got {self.codewords}")


def _gate_channels(x: Tensor, a: Tensor) -> Tensor:
    return T.mul(x, T.reshape(a, a.shape + (1,)))


class AttentionBlock(Module):
    kind = ""

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel gate ``[B, C]`` (for channel-only blocks)."""
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return _gate_channels(x, self.gate(x))


class SE(AttentionBlock):
    """Squeeze-and-excitation; ``squeeze='l2'`` gives the SE-l2 variant."""

    def __init__(self, C, r, rng, squeeze="mean", dtype=np.float32):
        super().__init__()
        self.kind = "se" if squeeze == "mean" else "se_l2"
        self.squeeze = squeeze
        self.children["mlp"] = MLP(C, C // r, C, rng, dtype)

    def gate(self, x):
        return T.sigmoid(self.children["mlp"](T.reduce_time(x, self.squeeze)))


class GSoP(AttentionBlock):
    """Global second-order pooling.

    1x1 conv (C -> C/r, bias) + BN + ReLU, covariance over time, row-wise
    grouped conv producing ``GSOP_ROW_EXPANSION`` features per row (+ bias),
    ReLU, then a biased FC back to C and a sigmoid.
    """

    kind = "gsop"

    def __init__(self, C, r, rng, dtype=np.float32):
        super().__init__()
        c = C // r
        m = GSOP_ROW_EXPANSION
        self.params["reduce_w"] = uniform_init(rng, (c, C), C, dtype)
        self.params["reduce_b"] = uniform_init(rng, (c,), C, dtype)
        self.children["bn"] = BatchNorm(c, axis=1, dtype=dtype)
        self.params["row_w"] = uniform_init(rng, (c, m, c), c, dtype)
        self.params["row_b"] = uniform_init(rng, (c, m), c, dtype)
        self.params["fc_w"] = uniform_init(rng, (C, c * m), c * m, dtype)
        self.params["fc_b"] = uniform_init(rng, (C,), c * m, dtype)

    def gate(self, x):
        p = self.params
        z = T.einsum("bct,oc->bot", x, p["reduce_w"])
        z = T.add(z, T.reshape(p["reduce_b"], (-1, 1)))
        z = T.relu(self.children["bn"](z))
        cov = T.covariance(z)
        rows = T.add(T.einsum("bil,ijl->bij", cov, p["row_w"]), p["row_b"])
        rows = T.relu(T.reshape(rows, (x.shape[0], -1)))
        return T.sigmoid(T.linear(rows, p["fc_w"], p["fc_b"]))


def dct_basis(C: int, T_len: int, indices) -> np.ndarray:
    """Unnormalized DCT-II basis ``cos(pi*u*(t+0.5)/T)`` per channel group."""
    groups = len(indices)
    per = C // groups
    t = np.arange(T_len)
    basis = np.empty((C, T_len))
    for g, u in enumerate(indices):
        basis[g * per : (g + 1) * per] = np.cos(math.pi * u * (t + 0.5) / T_len)
    return basis


class FCA(AttentionBlock):
    """Frequency channel attention: DCT-weighted squeeze followed by the SE MLP."""

    kind = "fca"

    def __init__(self, C, T_len, r, indices, rng, dtype=np.float32):
        super().__init__()
        self.buffers["dct"] = dct_basis(C, T_len, indices).astype(dtype)
        self.children["mlp"] = MLP(C, C // r, C, rng, dtype)

    def squeeze(self, x):
        return T.einsum("bct,ct->bc", x, Tensor(self.buffers["dct"]))

    def gate(self, x):
        return T.sigmoid(self.children["mlp"](self.squeeze(x)))


class EncNet(AttentionBlock):
    """Context encoding with K codewords; the segmentation loss is not used."""

    kind = "encnet"

    def __init__(self, C, K, rng, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(K * C)
        self.params["codewords"] = Tensor(rng.uniform(-bound, bound, (K, C)).astype(dtype), requires_grad=True)
        self.params["smoothing"] = Tensor(np.zeros(K, dtype=dtype), requires_grad=True)
        self.children["bn"] = BatchNorm(K, axis=1, dtype=dtype)
        self.params["fc_w"] = uniform_init(rng, (C, C), C, dtype)
        self.params["fc_b"] = uniform_init(rng, (C,), C, dtype)

    def encode(self, x):
        """Aggregated residuals ``e_k``, shape ``[B, K, C]``."""
        p = self.params
        xi = T.transpose(x, (0, 2, 1))  # [B, T, C]
        B, T_len, C = xi.shape
        K = p["codewords"].shape[0]
        resid = T.sub(T.reshape(xi, (B, T_len, 1, C)), T.reshape(p["codewords"], (1, 1, K, C)))
        dist = T.tsum(T.square(resid), axis=3)  # [B, T, K]
        assign = T.softmax(T.mul(dist, T.mul(p["smoothing"], -1.0)), axis=2)
        return T.einsum("bik,bikc->bkc", assign, resid)

    def gate(self, x):
        e = T.tsum(T.relu(self.children["bn"](self.encode(x))), axis=1)
        return T.sigmoid(T.linear(e, self.params["fc_w"], self.params["fc_b"]))


class ECA(AttentionBlock):
    """Efficient channel attention: bias-free 1-D conv of size k over the channel axis."""

    kind = "eca"

    def __init__(self, k, rng, dtype=np.float32):
        super().__init__()
        self.params["conv_w"] = uniform_init(rng, (1, 1, k), k, dtype)

    def gate(self, x):
        s = T.reduce_time(x, "mean")
        s = T.reshape(s, (s.shape[0], 1, s.shape[1]))
        z = T.conv_time(s, self.params["conv_w"], padding="same")
        return T.sigmoid(T.reshape(z, (z.shape[0], z.shape[2])))


class GatherExcite(AttentionBlock):
    """Gather-excite with a global extent.

    ``theta_minus`` is parameter free; ``theta`` gathers with a depthwise
    kernel spanning all of T followed by BN; ``theta_plus`` adds the SE MLP.
    """

    def __init__(self, C, T_len, variant, rng, r=1, dtype=np.float32):
        super().__init__()
        if variant not in ("theta_minus", "theta", "theta_plus"):
            raise ConfigError(f"unknown gather-excite variant {variant!r}")
        self.kind = "ge_" + variant
        self.variant = variant
        if variant != "theta_minus":
            self.params["gather_w"] = uniform_init(rng, (C, T_len), T_len, dtype)
            self.children["bn"] = BatchNorm(C, axis=1, dtype=dtype)
        if variant == "theta_plus":
            self.children["mlp"] = MLP(C, C // r, C, rng, dtype)

    def gate(self, x):
        if self.variant == "theta_minus":
            return T.sigmoid(T.reduce_time(x, "mean"))
        g = self.children["bn"](T.einsum("bct,ct->bc", x, self.params["gather_w"]))
        if self.variant == "theta_plus":
            g = self.children["mlp"](g)
        return T.sigmoid(g)


class GCT(AttentionBlock):
    """Gated channel transformation; ``embed='mean'`` gives GCT_GAP."""

    def __init__(self, C, embed="l2", dtype=np.float32):
        super().__init__()
        self.kind = "gct" if embed == "l2" else "gct_gap"
        self.embed = embed
        self.params["alpha"] = Tensor(np.ones(C, dtype=dtype), requires_grad=True)
        self.params["gamma"] = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(C, dtype=dtype), requires_grad=True)

    def normalized_embedding(self, x):
        C = x.shape[1]
        s = T.mul(T.reduce_time(x, self.embed), self.params["alpha"])
        denom = T.sqrt(T.add(T.tsum(T.square(s), axis=1, keepdims=True), GCT_EPS))
        return T.div(T.mul(s, math.sqrt(C)), denom)

    def gate(self, x):
        s_hat = self.normalized_embedding(x)
        return T.add(T.tanh(T.add(T.mul(s_hat, self.params["gamma"]), self.params["beta"])), 1.0)


class SRM(AttentionBlock):
    """Style-based recalibration over [mean, std] style features.

    Non-cross: per-channel weights on the two styles (2C params), BN, sigmoid.
    Cross: FC(2C -> 2C/r), ReLU, FC(-> C), BN, sigmoid.
    """

    def __init__(self, C, rng, cross=False, r=1, dtype=np.float32):
        super().__init__()
        self.kind = "srm_cross" if cross else "srm"
        self.cross = cross
        if cross:
            self.children["mlp"] = MLP(2 * C, 2 * C // r, C, rng, dtype)
        else:
            self.params["cfc_w"] = uniform_init(rng, (C, 2), 2, dtype)
        self.children["bn"] = BatchNorm(C, axis=1, dtype=dtype)

    def styles(self, x):
        return T.stack([T.reduce_time(x, "mean"), T.reduce_time(x, "std")], axis=2)  # [B, C, 2]

    def gate(self, x):
        st = self.styles(x)
        if self.cross:
            z = self.children["mlp"](T.reshape(st, (x.shape[0], -1)))
        else:
            z = T.tsum(T.mul(st, self.params["cfc_w"]), axis=2)
        return T.sigmoid(self.children["bn"](z))


class CBAM(AttentionBlock):
    """Channel gate from shared-MLP(GAP) + MLP(GMP), then a temporal gate
    from a k-tap conv over the stacked channel-mean and channel-max maps."""

    kind = "cbam"

    def __init__(self, C, r, k, rng, dtype=np.float32):
        super().__init__()
        self.children["mlp"] = MLP(C, C // r, C, rng, dtype)
        self.params["conv_w"] = uniform_init(rng, (1, 2, k), 2 * k, dtype)
        self.params["conv_b"] = uniform_init(rng, (1,), 2 * k, dtype)

    def channel_gate(self, x):
        mlp = self.children["mlp"]
        return T.sigmoid(T.add(mlp(T.reduce_time(x, "mean")), mlp(T.reduce_time(x, "max"))))

    def temporal_gate(self, x):
        maps = T.stack([T.reduce_channels(x, "mean"), T.reduce_channels(x, "max")], axis=1)
        z = T.conv_time(maps, self.params["conv_w"], padding="same", bias=self.params["conv_b"])
        return T.sigmoid(z)  # [B, 1, T]

    def forward(self, x):
        x1 = _gate_channels(x, self.channel_gate(x))
        return T.mul(x1, self.temporal_gate(x1))


class CAT(AttentionBlock):
    """Collaborative channel/temporal attention over GAP, GMP and entropy pooling.

    With ``lite=True`` the gate is the weighted channel descriptor itself,
    with no sigmoid and no temporal branch.
    """

    def __init__(self, C, r, k, rng, lite=False, dtype=np.float32):
        super().__init__()
        self.kind = "catlite" if lite else "cat"
        self.lite = lite
        self.children["mlp"] = MLP(C, C // r, C, rng, dtype)
        names = ["c_alpha", "c_beta", "c_gamma"]
        if not lite:
            names += ["t_alpha", "t_beta", "t_gamma", "c_w", "t_w"]
            self.params["conv_w"] = uniform_init(rng, (1, 1, k), k, dtype)
            self.params["conv_b"] = uniform_init(rng, (1,), k, dtype)
        for n in names:
            self.params[n] = Tensor(np.ones(1, dtype=dtype), requires_grad=True)

    def channel_descriptor(self, x):
        mlp, p = self.children["mlp"], self.params
        terms = [T.mul(mlp(T.reduce_time(x, s)), p[w]) for s, w in
                 (("mean", "c_alpha"), ("max", "c_beta"), ("entropy", "c_gamma"))]
        return T.add(T.add(terms[0], terms[1]), terms[2])

    def temporal_descriptor(self, x):
        p = self.params
        terms = [T.mul(T.reduce_channels(x, s), p[w]) for s, w in
                 (("mean", "t_alpha"), ("max", "t_beta"), ("entropy", "t_gamma"))]
        fused = T.add(T.add(terms[0], terms[1]), terms[2])
        fused = T.reshape(fused, (x.shape[0], 1, x.shape[2]))
        return T.conv_time(fused, p["conv_w"], padding="same", bias=p["conv_b"])  # [B, 1, T]

    def forward(self, x):
        c_att = self.channel_descriptor(x)
        if self.lite:
            return _gate_channels(x, c_att)
        ch = T.sigmoid(T.mul(c_att, self.params["c_w"]))
        tm = T.sigmoid(T.mul(self.temporal_descriptor(x), self.params["t_w"]))
        a = T.add(T.reshape(ch, ch.shape + (1,)), tm)
        return T.mul(a, x)


def build_attention(spec: AttentionSpec, C: int, T_len: int, rng, n_classes: Optional[int] = None,
                    dtype=np.float32) -> AttentionBlock:
    """Instantiate the block described by ``spec`` for inputs ``[*, C, T_len]``."""
    spec.validate(C, T_len)
    kind, r, k = spec.kind, spec.r, spec.k
    if kind == "se":
        return SE(C, r, rng, "mean", dtype)
    if kind == "se_l2":
        return SE(C, r, rng, "l2", dtype)
    if kind == "gsop":
        return GSoP(C, r, rng, dtype)
    if kind == "fca":
        return FCA(C, T_len, r, spec.dct_frequency_indices, rng, dtype)
    if kind == "encnet":
        K = spec.codewords if spec.codewords is not None else n_classes
        if K is None or K < 1:
            raise ConfigError("encnet: codewords K must be >= 1 (defaults to n_classes)")
        return EncNet(C, K, rng, dtype)
    if kind == "eca":
        return ECA(k, rng, dtype)
    if kind.startswith("ge_"):
        return GatherExcite(C, T_len, kind[3:], rng, r=r, dtype=dtype)
    if kind == "gct":
        return GCT(C, "l2", dtype)
    if kind == "gct_gap":
        return GCT(C, "mean", dtype)
    if kind == "srm":
        return SRM(C, rng, cross=False, dtype=dtype)
    if kind == "srm_cross":
        return SRM(C, rng, cross=True, r=r, dtype=dtype)
    if kind == "cbam":
        return CBAM(C, r, k, rng, dtype)
    if kind == "cat":
        return CAT(C, r, k, rng, lite=False, dtype=dtype)
    if kind == "catlite":
        return CAT(C, r, k, rng, lite=True, dtype=dtype)
    raise ConfigError(f"unknown attention kind {kind!r}")  # pragma: no cover
