import numpy as np
from dataclasses import dataclass, field


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(tensors: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``tensors`` in place."""
    if set(grads) != set(tensors):
        raise ValueError(
            f"gradient keys {sorted(grads)} do not match parameters {sorted(tensors)}"
        )
    for k, g in grads.items():
        if np.shape(g) != np.shape(tensors[k]):
            raise ValueError(
                f"shape mismatch for {k}: parameter {np.shape(tensors[k])}, gradient {np.shape(g)}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        p = tensors[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if np.ndim(p) == 0:
            tensors[k] = np.asarray(p - update, dtype=np.asarray(p).dtype)
        else:
            p -= update.astype(p.dtype, copy=False)
    return tensors, state
