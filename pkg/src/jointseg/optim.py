"""Adam with bias correction, applied in-place to named parameters.

Moment decay rates and the denominator epsilon are fixed; only the
learning rate is a knob. All buffer math happens in each parameter's
own dtype so float32 training is bit-reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers per parameter name, plus the step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(named: dict[str, Tensor]) -> AdamState:
    state = AdamState()
    for name, t in named.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(state: AdamState, named: dict[str, Tensor],
              learning_rate: float) -> None:
    """One update over every named parameter, consuming their gradients.

    A parameter without a gradient means backward never reached it,
    which is a wiring bug, not a no-op.
    """
    state.step += 1
    t = state.step
    for name, p in named.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        dt = p.data.dtype.type
        grad = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= dt(BETA1)
        m += dt(1.0 - BETA1) * grad
        v *= dt(BETA2)
        v += dt(1.0 - BETA2) * grad * grad
        m_hat = m / dt(1.0 - BETA1 ** t)
        v_hat = v / dt(1.0 - BETA2 ** t)
        p.data -= dt(learning_rate) * m_hat / (np.sqrt(v_hat) + dt(EPS))
