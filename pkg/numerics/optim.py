from dataclasses import dataclass, field

import numpy as np

from numerics.errors import ShapeError


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators keyed like the parameters they track."""

    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(
        cls,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        return cls(
            first_moment={name: np.zeros_like(value) for name, value in params.items()},
            second_moment={name: np.zeros_like(value) for name, value in params.items()},
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ShapeError("params, grads and Adam moments must share the same names")

    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        m_prev = state.first_moment[name]
        v_prev = state.second_moment[name]
        if not (value.shape == grad.shape == m_prev.shape == v_prev.shape):
            raise ShapeError(
                f"{name}: param {value.shape}, grad {grad.shape}, moments "
                f"{m_prev.shape}/{v_prev.shape} disagree"
            )
        m = state.beta1 * m_prev + (1.0 - state.beta1) * grad
        v = state.beta2 * v_prev + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name] = m
        new_v[name] = v

    new_state = AdamState(
        first_moment=new_m,
        second_moment=new_v,
        step=step,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_params, new_state
