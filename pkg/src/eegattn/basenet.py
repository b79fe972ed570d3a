"""BaseNet: a compact temporal/spatial CNN with one optional attention slot.

Layer sequence for an input ``[B, E, T]`` (E sensors)::

    stem: temporal conv (F1 kernels of length 25, shared across sensors, no bias)
          batchnorm over F1
          spatial conv collapsing the E sensors, one filter per F1 map (groups=F1)
    batchnorm, ELU, avg-pool (75, stride 15), dropout
    1x1 channel projection F1 -> C_feat (with bias)
    depthwise conv (kernel 16, same padding) + pointwise 1x1 conv (no bias)
    batchnorm, ELU
    [attention block]
    avg-pool (8, stride 8), dropout, flatten, linear classifier

With 22 sensors, 1000 samples and 4 classes the trainable parameter count is
3,692::

    temporal conv   40*25       = 1000
    batchnorm       2*40        =   80
    spatial conv    40*22       =  880
    batchnorm       2*40        =   80
    projection      16*40 + 16  =  656
    depthwise       16*16       =  256
    pointwise       16*16       =  256
    batchnorm       2*16        =   32
    classifier      16*7*4 + 4  =  452
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from eegattn import tensor as T
from eegattn.attention import AttentionSpec, build_attention
from eegattn.exceptions import ConfigError, DataFormatError, ShapeError
from eegattn.layers import BatchNorm, Dropout, Linear, Module, uniform_init
from eegattn.rng import make_rng
from eegattn.tensor import Tensor


@dataclass
class BaseNetConfig:
    in_channels: int = 22
    n_samples: int = 1000
    n_classes: int = 4
    temporal_filters: int = 40
    temporal_kernel: int = 25
    spatial_depth_multiplier: int = 1
    projected_channels: int = 16
    separable_kernel: int = 16
    pool1: Tuple[int, int] = (75, 15)
    pool2: Tuple[int, int] = (8, 8)
    dropout: float = 0.5
    attention: Optional[AttentionSpec] = None

    def __post_init__(self):
        self.pool1 = tuple(int(v) for v in self.pool1)
        self.pool2 = tuple(int(v) for v in self.pool2)
        if isinstance(self.attention, dict):
            self.attention = AttentionSpec.from_dict(self.attention)
        elif isinstance(self.attention, str):
            self.attention = None if self.attention.lower() == "none" else AttentionSpec.default(self.attention)

    @property
    def spatial_channels(self) -> int:
        return self.temporal_filters * self.spatial_depth_multiplier

    def lengths(self) -> Tuple[int, int]:
        """(attention-point length, classifier time length)."""
        t_att = T.pooled_length(self.n_samples, *self.pool1)
        t_out = T.pooled_length(t_att, *self.pool2) if t_att > 0 else 0
        return t_att, t_out

    def validate(self):
        for name in ("in_channels", "n_samples", "n_classes", "temporal_filters", "temporal_kernel",
                     "spatial_depth_multiplier", "projected_channels", "separable_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.pool1 + self.pool2) < 1:
            raise ConfigError(f"pool sizes/strides must be positive: pool1={self.pool1}, pool2={self.pool2}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        t_att, t_out = self.lengths()
        if t_att < 1 or t_out < 1:
            raise ConfigError(
                f"non-positive pooled length: n_samples={self.n_samples} -> pool{self.pool1} -> {t_att}"
                f" -> pool{self.pool2} -> {t_out}"
            )
        if self.attention is not None:
            self.attention.validate(self.projected_channels, t_att)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool1"] = list(self.pool1)
        d["pool2"] = list(self.pool2)
        d["attention"] = self.attention.to_dict() if self.attention is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaseNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        return cls(**d)


class TemporalConv(Module):
    """The same F1 temporal kernels applied to every sensor: [B,E,T] -> [B,E,F1,T]."""

    def __init__(self, weight: Tensor):
        super().__init__()
        self.params["weight"] = weight

    def forward(self, x):
        B, E, T_len = x.shape
        h = T.conv_time(T.reshape(x, (B * E, 1, T_len)), self.params["weight"], padding="same")
        return T.reshape(h, (B, E, -1, T_len))


class SpatialConv(Module):
    """Grouped conv over the sensor axis: [B,E,F1,T] -> [B,F1*D,T]."""

    def __init__(self, weight: Tensor):
        super().__init__()
        self.params["weight"] = weight

    def forward(self, h):
        z = T.einsum("beft,fde->bfdt", h, self.params["weight"])
        B, F, D, T_len = z.shape
        return T.reshape(z, (B, F * D, T_len))


class Stem(Module):
    """Temporal conv, batchnorm over the F1 maps, and the spatial conv.

    ``forward`` evaluates the three layers as one fused kernel that never
    materializes the ``[B, E, F1, T]`` intermediate; ``forward_unfused``
    composes the individual layers and serves as the reference.
    """

    def __init__(self, F, K, E, D, rng, dtype):
        super().__init__()
        self.children["temporal_conv"] = TemporalConv(uniform_init(rng, (F, 1, K), K, dtype))
        self.children["bn1"] = BatchNorm(F, axis=2, dtype=dtype)
        self.children["spatial_conv"] = SpatialConv(uniform_init(rng, (F, D, E), E, dtype))

    def forward_unfused(self, x):
        c = self.children
        return c["spatial_conv"](c["bn1"](c["temporal_conv"](x)))

    def forward(self, x):
        c = self.children
        bn = c["bn1"]
        return temporal_spatial(
            x,
            c["temporal_conv"].params["weight"],
            bn.params["weight"],
            bn.params["bias"],
            c["spatial_conv"].params["weight"],
            bn.state["running_mean"],
            bn.state["running_var"],
            self.training,
        )


def _lag_moments(xp: np.ndarray, K: int, T_len: int):
    """First moments m[k] and second moments M[k, k'] of the K shifted views
    ``xp[..., k:k+T]``, averaged over batch, sensors and time (float64)."""
    B, E, Tp = xp.shape
    n = B * E * T_len
    x64 = xp.astype(np.float64)
    col = x64.sum(axis=(0, 1))
    ccol = np.concatenate([[0.0], np.cumsum(col)])
    m = (ccol[T_len : T_len + K] - ccol[:K]) / n
    M = np.empty((K, K))
    for d in range(K):
        prod = np.einsum("bes,bes->s", x64[:, :, : Tp - d], x64[:, :, d:])
        cp = np.concatenate([[0.0], np.cumsum(prod)])
        for k in range(K - d):
            M[k, k + d] = M[k + d, k] = (cp[k + T_len] - cp[k]) / n
    return m, M


def temporal_spatial(x, wt, gamma, beta, ws, running_mean, running_var, training,
                     momentum=T.BN_MOMENTUM, eps=T.BN_EPS):
    """Fused temporal conv (same padding) -> batchnorm over F1 -> spatial conv.

    ``x`` [B,E,T], ``wt`` [F,1,K], ``ws`` [F,D,E]; returns [B, F*D, T].
    Uses that the spatial conv is linear, so with per-map statistics
    (mu, sigma) the output is ``gamma/sigma * (u - mu*S) + beta*S`` where
    ``u`` is the temporal conv of the spatially mixed input and ``S`` the
    row sums of the spatial kernel.
    """
    B, E, T_len = x.shape
    F, _, K = wt.shape
    D = ws.shape[1]
    if ws.shape != (F, D, E):
        raise ShapeError(f"spatial kernel {ws.shape} does not match F={F}, E={E}")
    left = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, K - 1 - left)))
    Tp = T_len + K - 1
    w2 = wt.data[:, 0, :].astype(np.float64)  # [F, K]
    n = B * E * T_len

    if training:
        m, M = _lag_moments(xp, K, T_len)
        mu = w2 @ m
        e2 = np.einsum("fk,kl,fl->f", w2, M, w2)
        var = np.maximum(e2 - mu * mu, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1) if n > 1 else 1.0)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    sigma = np.sqrt(var + eps)
    g64 = gamma.data.astype(np.float64)
    a = g64 / sigma
    b64 = beta.data.astype(np.float64)

    ws_flat = ws.data.reshape(F * D, E)
    v = np.matmul(ws_flat, xp).reshape(B, F, D, Tp)
    u = np.einsum("bfdtk,fk->bfdt", sliding_window_view(v, K, axis=3), wt.data[:, 0, :])
    S = ws.data.astype(np.float64).sum(axis=2)  # [F, D]
    scale = a.astype(x.dtype)[None, :, None, None]
    shift = (b64[:, None] * S - a[:, None] * mu[:, None] * S).astype(x.dtype)[None, :, :, None]
    out = (scale * u + shift).reshape(B, F * D, T_len)

    def backward(g):
        G = g.reshape(B, F, D, T_len)
        Q = G.sum(axis=(0, 3)).astype(np.float64)  # [F, D]
        R = np.einsum("bfdt,bfdt->fd", G, u).astype(np.float64)
        P = (R - mu[:, None] * S * Q).sum(axis=1)
        d_beta = (S * Q).sum(axis=1)
        d_gamma = P / sigma
        dS = Q * (b64 - a * mu)[:, None]
        du = G * scale
        dwt = np.zeros((F, K))
        dxp = np.zeros_like(xp)
        if training:
            d_mu = -a * (S * Q).sum(axis=1)
            d_var = -g64 * P / sigma**2 / (2.0 * sigma)
            d_mu += -2.0 * mu * d_var
            dwt += d_mu[:, None] * m[None, :] + 2.0 * d_var[:, None] * (w2 @ M)
            dm = d_mu @ w2
            dM = np.einsum("f,fk,fl->kl", d_var, w2, w2)
            # d m_k / d xp[tau] = 1/n on k <= tau < k+T
            cm = np.zeros(Tp + 1)
            np.add.at(cm, np.arange(K), dm)
            np.add.at(cm, np.arange(K) + T_len, -dm)
            dxp += (np.cumsum(cm)[:Tp] / n).astype(x.dtype)
            # d M_kl / d xp[tau] pairs xp[tau] with xp[tau + l - k] on k <= tau < k+T
            for dlag in range(-(K - 1), K):
                ks = np.arange(max(0, -dlag), min(K, K - dlag))
                coef = np.zeros(Tp + 1)
                np.add.at(coef, ks, dM[ks, ks + dlag])
                np.add.at(coef, ks + T_len, -dM[ks, ks + dlag])
                c = (2.0 / n) * np.cumsum(coef)[:Tp]
                lo, hi = max(0, -dlag), min(Tp, Tp - dlag)
                dxp[:, :, lo:hi] += (c[lo:hi] * xp[:, :, lo + dlag : hi + dlag]).astype(x.dtype)
        dwt += np.einsum("bfdt,bfdtk->fk", du, sliding_window_view(v, K, axis=3))
        dup = np.pad(du, ((0, 0), (0, 0), (0, 0), (K - 1, K - 1)))
        dv = np.einsum("bfdsj,fj->bfds", sliding_window_view(dup, K, axis=3), wt.data[:, 0, ::-1])
        dv = dv.reshape(B, F * D, Tp)
        dws = np.matmul(dv, xp.transpose(0, 2, 1)).sum(axis=0).reshape(F, D, E) + dS[:, :, None]
        dxp += np.matmul(ws_flat.T, dv)
        dx = dxp[:, :, left : left + T_len]
        dt = x.dtype
        return (dx.astype(dt), dwt[:, None, :].astype(dt), d_gamma.astype(dt), d_beta.astype(dt),
                dws.astype(dt))

    return T._result(out, (x, wt, gamma, beta, ws), backward, "temporal_spatial")


class Pointwise(Module):
    """1x1 convolution across channels."""

    def __init__(self, n_in, n_out, rng, bias, dtype):
        super().__init__()
        self.params["weight"] = uniform_init(rng, (n_out, n_in), n_in, dtype)
        if bias:
            self.params["bias"] = uniform_init(rng, (n_out,), n_in, dtype)

    def forward(self, x):
        z = T.einsum("bct,oc->bot", x, self.params["weight"])
        if "bias" in self.params:
            z = T.add(z, T.reshape(self.params["bias"], (-1, 1)))
        return z


class DepthwiseConv(Module):
    def __init__(self, C, K, rng, dtype):
        super().__init__()
        self.params["weight"] = uniform_init(rng, (C, 1, K), K, dtype)

    def forward(self, x):
        return T.conv_time(x, self.params["weight"], groups=x.shape[1], padding="same")


class Elu(Module):
    def forward(self, x):
        return T.elu(x)


class AvgPool(Module):
    def __init__(self, size, stride):
        super().__init__()
        self.size, self.stride = size, stride

    def forward(self, x):
        return T.avg_pool_time(x, self.size, self.stride)


class Flatten(Module):
    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))


class BaseNet(Module):
    """Ordered layer graph; ``children`` preserves layer order."""

    def __init__(self, config: BaseNetConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = int(seed)
        c = config
        rng = make_rng(seed, "init")
        F, Fs, Cf = c.temporal_filters, c.spatial_channels, c.projected_channels
        t_att, t_out = c.lengths()
        self.t_att = t_att
        layers = [
            ("stem", Stem(F, c.temporal_kernel, c.in_channels, c.spatial_depth_multiplier, rng, dtype)),
            ("bn2", BatchNorm(Fs, axis=1, dtype=dtype)),
            ("elu1", Elu()),
            ("pool1", AvgPool(*c.pool1)),
            ("drop1", Dropout(c.dropout)),
            ("projection", Pointwise(Fs, Cf, rng, True, dtype)),
            ("depthwise", DepthwiseConv(Cf, c.separable_kernel, rng, dtype)),
            ("pointwise", Pointwise(Cf, Cf, rng, False, dtype)),
            ("bn3", BatchNorm(Cf, axis=1, dtype=dtype)),
            ("elu2", Elu()),
            ("pool2", AvgPool(*c.pool2)),
            ("drop2", Dropout(c.dropout)),
            ("flatten", Flatten()),
            ("classifier", Linear(Cf * t_out, c.n_classes, rng, True, dtype)),
        ]
        self.children = dict(layers)
        if c.attention is not None:
            self._insert_attention(
                build_attention(c.attention, Cf, t_att, make_rng(seed, "attention"), c.n_classes, dtype)
            )
        self.set_dropout_seed(seed)

    def _insert_attention(self, block: Optional[Module]):
        layers = [(k, v) for k, v in self.children.items() if k != "attention"]
        if block is not None:
            at = [k for k, _ in layers].index("elu2") + 1
            layers.insert(at, ("attention", block))
        self.children = dict(layers)

    @property
    def attention(self) -> Optional[Module]:
        return self.children.get("attention")

    @property
    def dtype(self):
        return self.children["classifier"].params["weight"].dtype

    def set_dropout_seed(self, seed: int):
        for name, layer in self.children.items():
            if isinstance(layer, Dropout):
                layer.rng = make_rng(seed, "dropout", name)

    def forward(self, x: Tensor) -> Tensor:
        c = self.config
        if x.ndim != 3 or x.shape[1:] != (c.in_channels, c.n_samples):
            raise ShapeError(
                f"expected input [batch, {c.in_channels}, {c.n_samples}], got {tuple(x.shape)}"
            )
        for layer in self.children.values():
            x = layer(x)
        return x

    def features_at_attention(self, x: Tensor) -> Tensor:
        """Activations entering the attention slot, ``[B, C_feat, T_att]``."""
        for name, layer in self.children.items():
            if name in ("attention", "pool2"):
                return x
            x = layer(x)
        return x  # pragma: no cover


def build(config: BaseNetConfig, seed: int = 0, dtype=np.float32) -> BaseNet:
    return BaseNet(config, seed=seed, dtype=dtype)


def forward(model: BaseNet, x, mode: str = "eval") -> Tensor:
    """Logits for ``x`` in ``mode`` ('train' or 'eval')."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    return model(x)


def param_count(model: Module) -> Tuple[int, int]:
    """(trainable, trainable + fixed buffers)."""
    n = model.n_trainable()
    return n, n + model.n_fixed()


def attach_attention(model: BaseNet, spec: Optional[AttentionSpec], seed: Optional[int] = None) -> BaseNet:
    """Copy of ``model`` with the attention slot set to ``spec`` (``None`` removes it).

    All non-attention weights are carried over unchanged.
    """
    if isinstance(spec, (str, dict)):
        spec = BaseNetConfig(attention=spec).attention
    new = model.clone()
    new.config = replace(model.config, attention=spec)
    new.config.validate()
    block = None
    if spec is not None:
        seed = model.seed if seed is None else seed
        c = new.config
        block = build_attention(spec, c.projected_channels, new.t_att, make_rng(seed, "attention"),
                                c.n_classes, model.dtype)
        block.train(model.training)
    new._insert_attention(block)
    return new


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic    8 bytes  b"BNETCKPT"
#   version  uint32   1
#   hlen     uint32   length of the UTF-8 JSON header
#   header   JSON     {"config": ..., "seed": ..., "meta": ...}
#   count    uint32   number of arrays
#   per array: uint16 name length, UTF-8 name, uint8 ndim, ndim x uint32 dims,
#              float32 data (C order)
#   all integers and floats little-endian

MAGIC = b"BNETCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: BaseNet, path, meta: Optional[dict] = None):
    header = json.dumps(
        {"config": model.config.to_dict(), "seed": model.seed, "meta": meta or {}}, sort_keys=True
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    arrays = model.state_dict()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[BaseNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise DataFormatError(f"{path}: not a BaseNet checkpoint (bad magic)")
    view = memoryview(raw)
    try:
        version, hlen = struct.unpack_from("<II", view, 8)
        if version != CKPT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        if pos + hlen > len(raw):
            raise DataFormatError(f"{path}: truncated header")
        try:
            header = json.loads(bytes(view[pos : pos + hlen]).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: corrupt header ({exc})") from None
        pos += hlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise DataFormatError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated checkpoint ({exc})") from None
    model = BaseNet(BaseNetConfig.from_dict(header["config"]), seed=header["seed"], dtype=np.float32)
    model.load_state_dict(arrays)
    model.eval()
    return model, header.get("meta", {})
