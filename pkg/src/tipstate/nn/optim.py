"""First-order update rules with their published default hyperparameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch

RULES = ("SGD", "Adam", "RMSprop", "Adadelta", "Adagrad")

DEFAULTS = {
    "SGD": {},
    "Adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "RMSprop": {"rho": 0.9, "eps": 1e-8},
    "Adagrad": {"eps": 1e-8},
    "Adadelta": {"rho": 0.95, "eps": 1e-6},
}

_ALIASES = {r.lower(): r for r in RULES}


def canonical_rule(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {RULES}") from None


@dataclass
class OptimizerState:
    rule: str
    learning_rate: float
    accumulators: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        self.rule = canonical_rule(self.rule)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")

    @property
    def hyper(self) -> dict:
        return DEFAULTS[self.rule]


def _slot(state, key, name, like):
    acc = state.accumulators.setdefault(key, {})
    if name not in acc:
        acc[name] = np.zeros_like(like)
    elif acc[name].shape != like.shape:
        raise ShapeMismatch(f"accumulator {key}/{name} shape {acc[name].shape} != {like.shape}")
    return acc[name]


def optimizer_step(state: OptimizerState, params: dict, grads: dict, lr: float | None = None):
    """Apply one update to every array in ``params`` in place and return it.

    ``lr`` overrides ``state.learning_rate`` for this step (used by the
    per-epoch decay schedule).
    """
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    t = state.step_count
    hp = state.hyper
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad {key} shape {g.shape} != param shape {p.shape}")
        if state.rule == "SGD":
            p -= lr * g
        elif state.rule == "Adam":
            m = _slot(state, key, "m", p)
            v = _slot(state, key, "v", p)
            m *= hp["beta1"]
            m += (1 - hp["beta1"]) * g
            v *= hp["beta2"]
            v += (1 - hp["beta2"]) * g * g
            m_hat = m / (1 - hp["beta1"] ** t)
            v_hat = v / (1 - hp["beta2"] ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + hp["eps"])
        elif state.rule == "RMSprop":
            v = _slot(state, key, "v", p)
            v *= hp["rho"]
            v += (1 - hp["rho"]) * g * g
            p -= lr * g / (np.sqrt(v) + hp["eps"])
        elif state.rule == "Adagrad":
            s = _slot(state, key, "sum_sq", p)
            s += g * g
            p -= lr * g / (np.sqrt(s) + hp["eps"])
        else:  # Adadelta
            eg = _slot(state, key, "avg_sq_grad", p)
            ed = _slot(state, key, "avg_sq_delta", p)
            eg *= hp["rho"]
            eg += (1 - hp["rho"]) * g * g
            delta = np.sqrt(ed + hp["eps"]) / np.sqrt(eg + hp["eps"]) * g
            ed *= hp["rho"]
            ed += (1 - hp["rho"]) * delta * delta
            p -= lr * delta
    return params


def lr_schedule(initial_lr: float, epoch: int, decay: float = 1.0) -> float:
    """Exponential per-epoch decay, ``initial_lr * decay**epoch``."""
    if not 0 < decay <= 1:
        raise ValueError("decay must lie in (0, 1]")
    return initial_lr * decay ** epoch
