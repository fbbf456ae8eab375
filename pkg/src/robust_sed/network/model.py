"""Context-adaptive CNN detector: main branch, auxiliary branch, merge heads.

The main branch maps a clip patch ``(frames, bands)`` to a nonnegative
embedding ``z`` of size 64. The auxiliary branch maps a context slice
``(quantiles, bands)`` to a nonnegative embedding ``z_aux`` of size 64. A merge
formulation combines them into a logit, and ``y = sigmoid(logit)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit as _logit

from . import layers

Y_CLAMP = 1e-7
L2_DENSE = 1e-3


class Formulation(str, enum.Enum):
    STATIC = "static"
    AW = "aw"
    AT = "at"
    MOE = "moe"

    @classmethod
    def parse(cls, value) -> "Formulation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown formulation {value!r}; expected one of {[f.value for f in cls]}"
            ) from None


@dataclass(frozen=True)
class Geometry:
    """Shapes of the detector. Pools follow the first ``len(pools)`` conv layers."""

    n_frames: int = 104
    n_bands: int = 128
    channels: tuple = (24, 24, 48)
    kernel: tuple = (5, 5)
    pools: tuple = ((4, 2), (4, 2))
    n_hidden: int = 64
    n_quantiles: int = 9
    n_ctx_bands: int = 32
    n_aux_kernels: int = 8
    n_experts: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "pools", tuple(tuple(int(v) for v in p) for p in self.pools))
        if self.n_hidden % self.n_experts:
            raise ValueError(
                f"embedding size {self.n_hidden} not divisible by {self.n_experts} experts"
            )
        self.conv_shapes()

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """(height, width, channels) after each conv layer, pooling included."""
        h, w = self.n_frames, self.n_bands
        kh, kw = self.kernel
        out = []
        for i, c in enumerate(self.channels):
            h, w = h - kh + 1, w - kw + 1
            if h <= 0 or w <= 0:
                raise ValueError(f"geometry collapses at conv layer {i + 1}")
            if i < len(self.pools):
                ph, pw = self.pools[i]
                h, w = h // ph, w // pw
                if h <= 0 or w <= 0:
                    raise ValueError(f"geometry collapses at pool layer {i + 1}")
            out.append((h, w, c))
        return out

    @property
    def flat_dim(self) -> int:
        h, w, c = self.conv_shapes()[-1]
        return h * w * c

    @property
    def n_mixture(self) -> int:
        return self.n_hidden // self.n_experts

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames, "n_bands": self.n_bands,
            "channels": list(self.channels), "kernel": list(self.kernel),
            "pools": [list(p) for p in self.pools], "n_hidden": self.n_hidden,
            "n_quantiles": self.n_quantiles, "n_ctx_bands": self.n_ctx_bands,
            "n_aux_kernels": self.n_aux_kernels, "n_experts": self.n_experts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        return cls(**d)


FULL_GEOMETRY = Geometry()
#: Reduced network for CPU-scale experiments: 52x64 patches (150 ms at hop 64),
#: half-width conv layers and 2x2 pooling so that three valid 5x5 convolutions fit.
DESK_GEOMETRY = Geometry(n_frames=52, n_bands=64, channels=(12, 12, 24), pools=((2, 2), (2, 2)))
GEOMETRIES = {"full": FULL_GEOMETRY, "desk": DESK_GEOMETRY}


def tensor_shapes(geometry: Geometry, formulation: Formulation) -> dict[str, tuple]:
    g = geometry
    formulation = Formulation.parse(formulation)
    kh, kw = g.kernel
    shapes = {}
    c_in = 1
    for i, c in enumerate(g.channels, start=1):
        shapes[f"conv{i}_w"] = (c, c_in, kh, kw)
        shapes[f"conv{i}_b"] = (c,)
        c_in = c
    shapes["dense4_w"] = (g.flat_dim, g.n_hidden)
    shapes["dense4_b"] = (g.n_hidden,)
    if formulation != Formulation.STATIC:
        shapes["aux_conv_w"] = (g.n_aux_kernels, g.n_ctx_bands)
        shapes["aux_conv_b"] = (g.n_aux_kernels,)
        shapes["aux_dense_w"] = (g.n_quantiles * g.n_aux_kernels, g.n_hidden)
        shapes["aux_dense_b"] = (g.n_hidden,)
    if formulation in (Formulation.STATIC, Formulation.AT, Formulation.MOE):
        shapes["w"] = (g.n_hidden,)
    if formulation in (Formulation.STATIC, Formulation.AW, Formulation.MOE):
        shapes["b"] = ()
    if formulation == Formulation.AT:
        shapes["w_aux"] = (g.n_hidden,)
    if formulation == Formulation.MOE:
        shapes["moe_w_aux"] = (g.n_mixture, g.n_experts)
        shapes["moe_b_aux"] = (g.n_experts,)
    return shapes


@dataclass
class DetectorParams:
    """Learnable tensors plus the formulation and geometry they belong to.

    ``meta`` carries frontend and normalization settings needed at inference
    (frontend kind, PCEN constants, input standardization, quantile levels).
    """

    formulation: Formulation
    geometry: Geometry
    tensors: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.formulation = Formulation.parse(self.formulation)
        self.validate()

    def validate(self):
        expected = tensor_shapes(self.geometry, self.formulation)
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            raise ValueError(
                f"parameters do not match formulation {self.formulation.value}: "
                f"missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, shape in expected.items():
            got = tuple(np.shape(self.tensors[name]))
            if got != tuple(shape):
                raise ValueError(
                    f"dimension mismatch for {name}: expected {tuple(shape)}, got {got}"
                )

    @property
    def dtype(self):
        return self.tensors["dense4_w"].dtype

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            self.formulation, self.geometry,
            {k: np.array(v, copy=True) for k, v in self.tensors.items()}, dict(self.meta),
        )

    def astype(self, dtype) -> "DetectorParams":
        return DetectorParams(
            self.formulation, self.geometry,
            {k: np.asarray(v, dtype=dtype) for k, v in self.tensors.items()}, dict(self.meta),
        )


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(geometry: Geometry = FULL_GEOMETRY, formulation=Formulation.STATIC,
                seed=0, dtype=np.float64) -> DetectorParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    formulation = Formulation.parse(formulation)
    tensors = {}
    for name, shape in tensor_shapes(geometry, formulation).items():
        if name.endswith("_b") or name in ("b", "moe_b_aux"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif name.startswith("conv"):
            o, c, kh, kw = shape
            tensors[name] = _glorot(rng, shape, c * kh * kw, o * kh * kw, dtype)
        elif name == "aux_conv_w":
            tensors[name] = _glorot(rng, shape, shape[1], shape[0], dtype)
        elif name in ("w", "w_aux"):
            tensors[name] = _glorot(rng, shape, shape[0], 1, dtype)
        else:
            tensors[name] = _glorot(rng, shape, shape[0], shape[1], dtype)
    return DetectorParams(formulation, geometry, tensors)


# -- branches ------------------------------------------------------------------

def forward_main(x, p: DetectorParams, return_cache=False):
    """Embed patches ``x`` of shape ``(B, frames, bands)`` (or one 2-D patch)."""
    g = p.geometry
    t = p.tensors
    single = np.ndim(x) == 2
    x = np.asarray(x, dtype=p.dtype)
    if single:
        x = x[None]
    if x.shape[1:] != (g.n_frames, g.n_bands):
        raise ValueError(
            f"dimension mismatch: network expects patches of shape {(g.n_frames, g.n_bands)}, "
            f"got {x.shape[1:]}"
        )
    h = x[..., None]
    caches = []
    n_layers = len(g.channels)
    for i in range(n_layers):
        pre, conv_cache = layers.conv2d_forward(h, t[f"conv{i + 1}_w"], t[f"conv{i + 1}_b"])
        h = layers.relu(pre)
        pool_cache = None
        if i < len(g.pools):
            h, pool_cache = layers.maxpool_forward(h, g.pools[i], return_cache)
        caches.append((conv_cache, pre, pool_cache))
    flat = h.reshape(len(h), -1)
    pre4 = flat @ t["dense4_w"] + t["dense4_b"]
    z = layers.relu(pre4)
    if single:
        z = z[0]
    if return_cache:
        return z, (caches, h.shape, flat, pre4)
    return z


def backward_main(dz, p: DetectorParams, cache, grads):
    g = p.geometry
    t = p.tensors
    caches, hshape, flat, pre4 = cache
    dpre4 = layers.relu_backward(dz, pre4)
    grads["dense4_w"] = flat.T @ dpre4
    grads["dense4_b"] = dpre4.sum(axis=0)
    dh = (dpre4 @ t["dense4_w"].T).reshape(hshape)
    for i in reversed(range(len(g.channels))):
        conv_cache, pre, pool_cache = caches[i]
        if pool_cache is not None:
            dh = layers.maxpool_backward(dh, g.pools[i], pool_cache)
        dpre = layers.relu_backward(dh, pre)
        dh, dw, db = layers.conv2d_backward(dpre, t[f"conv{i + 1}_w"], conv_cache, need_dx=i > 0)
        grads[f"conv{i + 1}_w"] = dw
        grads[f"conv{i + 1}_b"] = db
    return grads


def forward_aux(c, p: DetectorParams, return_cache=False):
    """Embed context slices ``c`` of shape ``(B, quantiles, bands)`` (or one slice)."""
    g = p.geometry
    t = p.tensors
    if "aux_conv_w" not in t:
        raise ValueError(f"formulation {p.formulation.value} has no auxiliary branch")
    single = np.ndim(c) == 2
    c = np.asarray(c, dtype=p.dtype)
    if single:
        c = c[None]
    if c.shape[1:] != (g.n_quantiles, g.n_ctx_bands):
        raise ValueError(
            f"dimension mismatch: auxiliary branch expects slices of shape "
            f"{(g.n_quantiles, g.n_ctx_bands)}, got {c.shape[1:]}"
        )
    pre1 = c @ t["aux_conv_w"].T + t["aux_conv_b"]  # B, Q, K
    h = layers.relu(pre1).reshape(len(c), -1)
    pre2 = h @ t["aux_dense_w"] + t["aux_dense_b"]
    z_aux = layers.relu(pre2)
    if single:
        z_aux = z_aux[0]
    if return_cache:
        return z_aux, (c, pre1, h, pre2)
    return z_aux


def backward_aux(dz_aux, p: DetectorParams, cache, grads):
    t = p.tensors
    c, pre1, h, pre2 = cache
    dpre2 = layers.relu_backward(dz_aux, pre2)
    grads["aux_dense_w"] = h.T @ dpre2
    grads["aux_dense_b"] = dpre2.sum(axis=0)
    dh = (dpre2 @ t["aux_dense_w"].T).reshape(pre1.shape)
    dpre1 = layers.relu_backward(dh, pre1)
    grads["aux_conv_w"] = np.einsum("bqk,bqf->kf", dpre1, c)
    grads["aux_conv_b"] = dpre1.sum(axis=(0, 1))
    return grads


# -- merge heads -----------------------------------------------------------------

def sigmoid(a):
    return expit(a)


def merge_static(z, w, b):
    return expit(b + np.dot(z, w))


def merge_aw(z, z_aux, b):
    return expit(b + np.sum(np.asarray(z_aux) * np.asarray(z), axis=-1))


def merge_at(z, z_aux, w, w_aux):
    return expit(np.dot(z_aux, w_aux) + np.dot(z, w))


def equivalent_threshold(tau, z_aux, w_aux):
    """Threshold on the context-free score ``sigmoid(w . z)`` matching ``tau`` on ``y``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any((tau <= 0) | (tau >= 1)):
        raise ValueError("tau must lie strictly inside (0, 1)")
    return expit(_logit(tau) - np.dot(z_aux, w_aux))


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def moe_gates(z_aux, moe_w_aux, moe_b_aux):
    M, K = moe_w_aux.shape
    z_aux = np.asarray(z_aux)
    if z_aux.shape[-1] != M * K:
        raise ValueError(f"embedding size {z_aux.shape[-1]} is not {M} x {K}")
    za = z_aux.reshape(z_aux.shape[:-1] + (M, K))
    alpha = moe_b_aux + np.sum(moe_w_aux * za, axis=-2)
    return _softmax(alpha)


def merge_moe(z, z_aux, w, b, moe_w_aux, moe_b_aux):
    """Mixture of experts; embedding index ``n = K * m + k`` (expert ``k``, mixture ``m``)."""
    M, K = moe_w_aux.shape
    z = np.asarray(z)
    if z.shape[-1] % K:
        raise ValueError(f"embedding size {z.shape[-1]} not divisible by {K} experts")
    gates = moe_gates(z_aux, moe_w_aux, moe_b_aux)
    zt = z.reshape(z.shape[:-1] + (M, K))
    experts = np.sum(np.asarray(w).reshape(M, K) * zt, axis=-2)
    return expit(b + np.sum(gates * experts, axis=-1))


def _merge_logit(form, t, z, z_aux):
    if form == Formulation.STATIC:
        return t["b"] + z @ t["w"]
    if form == Formulation.AW:
        return t["b"] + np.sum(z_aux * z, axis=-1)
    if form == Formulation.AT:
        return z_aux @ t["w_aux"] + z @ t["w"]
    M, K = t["moe_w_aux"].shape
    gates = moe_gates(z_aux, t["moe_w_aux"], t["moe_b_aux"])
    experts = np.sum(t["w"].reshape(M, K) * z.reshape(-1, M, K), axis=-2)
    return t["b"] + np.sum(gates * experts, axis=-1)


def _merge_backward(form, t, z, z_aux, da, grads):
    """Returns (dz, dz_aux) and fills merge-parameter gradients."""
    if form == Formulation.STATIC:
        grads["w"] = z.T @ da
        grads["b"] = np.asarray(da.sum())
        return np.outer(da, t["w"]), None
    if form == Formulation.AW:
        grads["b"] = np.asarray(da.sum())
        return da[:, None] * z_aux, da[:, None] * z
    if form == Formulation.AT:
        grads["w"] = z.T @ da
        grads["w_aux"] = z_aux.T @ da
        return np.outer(da, t["w"]), np.outer(da, t["w_aux"])
    W_aux, b_aux = t["moe_w_aux"], t["moe_b_aux"]
    M, K = W_aux.shape
    B = len(z)
    zt = z.reshape(B, M, K)
    zat = z_aux.reshape(B, M, K)
    W = t["w"].reshape(M, K)
    gates = moe_gates(z_aux, W_aux, b_aux)
    experts = np.sum(W * zt, axis=1)
    grads["b"] = np.asarray(da.sum())
    dexp = da[:, None] * gates
    dgate = da[:, None] * experts
    dalpha = gates * (dgate - np.sum(gates * dgate, axis=1, keepdims=True))
    grads["w"] = np.einsum("bk,bmk->mk", dexp, zt).reshape(-1)
    grads["moe_w_aux"] = np.einsum("bk,bmk->mk", dalpha, zat)
    grads["moe_b_aux"] = dalpha.sum(axis=0)
    dz = (dexp[:, None, :] * W).reshape(B, -1)
    dz_aux = (dalpha[:, None, :] * W_aux).reshape(B, -1)
    return dz, dz_aux


def forward(p: DetectorParams, x, c=None, return_cache=False):
    """Logits for a batch of patches ``x`` and context slices ``c``."""
    main_cache = aux_cache = z_aux = None
    if return_cache:
        z, main_cache = forward_main(x, p, return_cache=True)
    else:
        z = forward_main(x, p)
    if p.formulation != Formulation.STATIC:
        if c is None:
            raise ValueError(f"formulation {p.formulation.value} requires context slices")
        if return_cache:
            z_aux, aux_cache = forward_aux(c, p, return_cache=True)
        else:
            z_aux = forward_aux(c, p)
        if len(z_aux) != len(z):
            raise ValueError("patch and context batch sizes differ")
    a = _merge_logit(p.formulation, p.tensors, z, z_aux)
    if return_cache:
        return a, (z, z_aux, main_cache, aux_cache)
    return a


def predict(x, c, p: DetectorParams):
    """Probability of presence for one patch (2-D) or a batch (3-D)."""
    single = np.ndim(x) == 2
    if single:
        x = np.asarray(x)[None]
        if c is not None:
            c = np.asarray(c)[None]
    y = expit(forward(p, x, c))
    return y[0] if single else y


# -- loss and gradients ------------------------------------------------------------

def bce_loss(y, y_true, p: DetectorParams | None = None, l2: float = L2_DENSE):
    """Mean binary cross-entropy on clamped probabilities plus L2 on the dense layer."""
    y = np.clip(np.asarray(y, dtype=np.float64), Y_CLAMP, 1 - Y_CLAMP)
    t = np.asarray(y_true, dtype=np.float64)
    loss = float(np.mean(-(t * np.log(y) + (1 - t) * np.log1p(-y))))
    if p is not None and l2:
        loss += l2 * float(np.sum(np.asarray(p.tensors["dense4_w"], dtype=np.float64) ** 2))
    return loss


def loss_and_grads(p: DetectorParams, x, c, y_true, l2: float = L2_DENSE):
    """Mean batch loss and its exact gradient with respect to every tensor."""
    y_true = np.asarray(y_true, dtype=p.dtype).reshape(-1)
    a, (z, z_aux, main_cache, aux_cache) = forward(p, x, c, return_cache=True)
    y = expit(a)
    loss = bce_loss(y, y_true, p, l2)
    inside = (y > Y_CLAMP) & (y < 1 - Y_CLAMP)
    da = ((y - y_true) * inside / len(y)).astype(p.dtype)
    grads: dict = {}
    dz, dz_aux = _merge_backward(p.formulation, p.tensors, z, z_aux, da, grads)
    backward_main(dz, p, main_cache, grads)
    if dz_aux is not None:
        backward_aux(dz_aux, p, aux_cache, grads)
    if l2:
        grads["dense4_w"] = grads["dense4_w"] + 2 * l2 * p.tensors["dense4_w"]
    for k, v in grads.items():
        grads[k] = np.asarray(v, dtype=p.dtype).reshape(np.shape(p.tensors[k]))
    return loss, grads


def accuracy(y, y_true) -> float:
    """Fraction of clips with ``|y - y_true| < 0.5``."""
    y = np.asarray(y)
    return float(np.mean(np.abs(y - np.asarray(y_true)) < 0.5)) if len(y) else 0.0
