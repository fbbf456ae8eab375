"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import layers
from .model import (
    DESK_GEOMETRY, Y_CLAMP, DetectorParams, Formulation, Geometry, _merge_logit, forward,
    forward_aux, init_params, loss_and_grads,
)

#: Largest acceptable relative error between analytic and numerical gradients.
GRADCHECK_TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    formulation: str
    max_rel_error: float
    n_checked: int
    worst_tensor: str


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor guards vanishing gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_instance(geometry: Geometry, formulation, rng, batch=3):
    """Random f64 parameters and a batch whose predictions stay away from the clamp."""
    p = init_params(geometry, formulation, seed=int(rng.integers(2**31)), dtype=np.float64)
    for k, v in p.tensors.items():
        if v.ndim <= 1:
            p.tensors[k] = rng.normal(0, 0.1, size=v.shape)
    x = rng.normal(size=(batch, geometry.n_frames, geometry.n_bands))
    c = rng.normal(size=(batch, geometry.n_quantiles, geometry.n_ctx_bands))
    y = rng.integers(0, 2, size=batch)
    y[0], y[-1] = 0, 1
    # keep the sigmoid out of saturation: large logits inflate finite-difference
    # roundoff well past the size of small gradients
    a = forward(p, x, None if p.formulation == Formulation.STATIC else c)
    scale = max(1.0, float(np.sqrt(np.mean(a**2))))
    p.tensors["dense4_w"] /= scale
    p.tensors["dense4_b"] /= scale
    return p, x, c, y


def check_gradients(p: DetectorParams, x, c, y, h=1e-5, max_per_tensor=None, rng=None,
                    l2=1e-3, max_redraws=50):
    """Max relative error between analytic and central-difference gradients.

    ``max_per_tensor`` limits the number of coordinates probed in each tensor;
    ``None`` probes every coordinate. A probe whose +/-h steps change the
    activation pattern (a ReLU sign, a max-pool winner or the probability clamp)
    straddles a kink where the loss is not differentiable; such coordinates are
    skipped and, when sampling, replaced by fresh draws.

    Returns ``(max_error, worst_tensor, n_checked, n_skipped)``.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_and_grads(p, x, c, y, l2=l2)
    prefix = []
    stack = _conv_stack(p, x, prefix=prefix)
    loss0, base = _loss_and_pattern(p, x, c, y, l2, stack)
    # f64 central differences carry about eps*|L|/h of roundoff, so gradients
    # smaller than that over the tolerance cannot be resolved to the tolerance
    floor = max(1e-6, np.finfo(np.float64).eps * max(abs(loss0), 1.0) / (h * GRADCHECK_TOLERANCE))
    worst, worst_name, count, skipped = 0.0, "", 0, 0
    for name, tensor in p.tensors.items():
        size = max(tensor.size, 1)
        if max_per_tensor is None or size <= max_per_tensor:
            candidates = list(range(size))
            want = size
        else:
            candidates = list(rng.permutation(size)[: max_per_tensor + max_redraws])
            want = max_per_tensor
        done = 0
        for i in candidates:
            if done == want:
                break
            reuse = _ConvResume(prefix, _conv_layer(name)) if name.startswith("conv") else stack
            lp, pat_p = _probe(p, name, i, +h, x, c, y, l2, reuse)
            lm, pat_m = _probe(p, name, i, -h, x, c, y, l2, reuse)
            if pat_p != base or pat_m != base:
                skipped += 1
                continue
            analytic = grads[name].reshape(-1)[i]
            numeric = (lp - lm) / (2 * h)
            err = float(relative_error(analytic, numeric, floor))
            count += 1
            done += 1
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name, count, skipped


def _probe(p, name, i, step, x, c, y, l2, stack=None):
    tensor = p.tensors[name]
    if tensor.ndim == 0:
        orig = float(tensor)
        p.tensors[name] = np.asarray(orig + step)
        out = _loss_and_pattern(p, x, c, y, l2, stack)
        p.tensors[name] = np.asarray(orig)
        return out
    flat = tensor.reshape(-1)
    orig = flat[i]
    flat[i] = orig + step
    out = _loss_and_pattern(p, x, c, y, l2, stack)
    flat[i] = orig
    return out


class _ConvResume:
    """Recompute the conv stack from layer ``start`` on, reusing cached inputs."""

    def __init__(self, prefix, start):
        self.prefix, self.start = prefix, start


def _conv_layer(name):
    return int(name[4:name.index("_")]) - 1


def _conv_stack(p, x, start=0, prefix=None):
    """Flattened conv features and a digest of their activation pattern.

    Filling ``prefix`` caches each layer's input and the digest state before it,
    which lets a later call resume at ``start`` with those cached values.
    """
    g = p.geometry
    if start:
        h, digest = prefix[start]
        digest = digest.copy()
    else:
        h = np.asarray(x, dtype=p.dtype)[..., None]
        digest = hashlib.sha1()
    for k in range(start, len(g.channels)):
        if prefix is not None and not start:
            prefix.append((h, digest.copy()))
        pre, _ = layers.conv2d_forward(h, p.tensors[f"conv{k + 1}_w"], p.tensors[f"conv{k + 1}_b"])
        digest.update(np.packbits(pre > 0).tobytes())
        h = layers.relu(pre)
        if k < len(g.pools):
            h, (arg, _) = layers.maxpool_forward(h, g.pools[k])
            digest.update(arg.tobytes())
    return h.reshape(len(h), -1), digest.digest()


def _loss_and_pattern(p, x, c, y, l2, stack=None):
    """Loss and activation-pattern digest; ``stack`` reuses unperturbed conv features."""
    if isinstance(stack, _ConvResume):
        stack = _conv_stack(p, x, stack.start, stack.prefix if stack.start else None)
    flat, conv_digest = stack if stack is not None else _conv_stack(p, x)
    pre4 = flat @ p.tensors["dense4_w"] + p.tensors["dense4_b"]
    z = layers.relu(pre4)
    digest = hashlib.sha1(conv_digest)
    digest.update(np.packbits(pre4 > 0).tobytes())
    z_aux = None
    if p.formulation != Formulation.STATIC:
        z_aux, (_, pre1, _, pre2) = forward_aux(c, p, return_cache=True)
        digest.update(np.packbits(pre1 > 0).tobytes())
        digest.update(np.packbits(pre2 > 0).tobytes())
    a = _merge_logit(p.formulation, p.tensors, z, z_aux)
    yhat = expit(a)
    digest.update(np.packbits((yhat > Y_CLAMP) & (yhat < 1 - Y_CLAMP)).tobytes())
    return _stable_loss(a, y, p, l2), digest.hexdigest()


def _stable_loss(a, y, p, l2):
    # equals the clamped BCE while no probe crosses the clamp, but evaluated from
    # the logit so that saturated predictions keep their significant digits
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64)
    nll = t * np.logaddexp(0.0, -a) + (1 - t) * np.logaddexp(0.0, a)
    return float(np.mean(nll)) + l2 * float(np.sum(p.tensors["dense4_w"] ** 2))


def run_gradcheck(formulations=tuple(Formulation), n_instances=20, geometry=DESK_GEOMETRY,
                  max_per_tensor=6, seed=0, h=1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for form in formulations:
        worst, worst_name, total = 0.0, "", 0
        for _ in range(n_instances):
            p, x, c, y = random_instance(geometry, form, rng)
            if Formulation.parse(form) == Formulation.STATIC:
                c = None
            err, name, n, _ = check_gradients(p, x, c, y, h=h, max_per_tensor=max_per_tensor,
                                              rng=rng)
            total += n
            if err > worst:
                worst, worst_name = err, name
        results.append(GradCheckResult(Formulation.parse(form).value, worst, total, worst_name))
    return results
