"""Adafactor without momentum and with a fixed learning rate.

Matrices (and the trailing two axes of higher-rank tensors) keep exponential
averages of squared-gradient row and column sums; the second moment is their
normalised outer product. Vectors and scalars keep the full average. Updates
are clipped so their RMS never exceeds ``clip_threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def decay_rate(step: int, exponent: float = 0.8) -> float:
    """beta2 at 1-based ``step``: 1 - step^-exponent (0 on the first step)."""
    return 1.0 - step ** (-exponent)


def _factored(shape) -> bool:
    return len(shape) >= 2


def init_state(shape) -> dict[str, np.ndarray]:
    if _factored(shape):
        return {"row": np.zeros(shape[:-1]), "col": np.zeros(shape[:-2] + shape[-1:])}
    return {"v": np.zeros(shape)}


def second_moment(state: dict) -> np.ndarray:
    if "v" in state:
        return state["v"]
    row, col = state["row"], state["col"]
    return row[..., :, None] * col[..., None, :] / row.sum(axis=-1)[..., None, None]


def adafactor_step(param: np.ndarray, grad: np.ndarray, state: dict, step: int, lr: float,
                   eps1: float = 1e-30, clip_threshold: float = 1.0,
                   decay_exponent: float = 0.8) -> tuple[np.ndarray, dict, np.ndarray]:
    """One update; returns ``(new_param, new_state, applied_update)``."""
    beta2 = decay_rate(step, decay_exponent)
    sq = grad * grad + eps1
    if "v" in state:
        new_state = {"v": beta2 * state["v"] + (1.0 - beta2) * sq}
    else:
        new_state = {
            "row": beta2 * state["row"] + (1.0 - beta2) * sq.sum(axis=-1),
            "col": beta2 * state["col"] + (1.0 - beta2) * sq.sum(axis=-2),
        }
    u = grad / np.sqrt(second_moment(new_state))
    rms = np.sqrt(np.mean(u * u))
    u = u / max(1.0, rms / clip_threshold)
    update = lr * u
    return param - update, new_state, update


@dataclass
class Adafactor:
    params: dict[str, Tensor]
    lr: float = 1e-4
    eps1: float = 1e-30
    clip_threshold: float = 1.0
    decay_exponent: float = 0.8
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.state.get(name) or init_state(p.shape)
            p.data, self.state[name], _ = adafactor_step(
                p.data, g, st, self.step_count, lr, self.eps1, self.clip_threshold, self.decay_exponent
            )
