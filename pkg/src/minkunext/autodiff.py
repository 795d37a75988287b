"""Tape-based reverse-mode differentiation, Adam, and the step LR schedule.

The tape is a Wengert list: every recorded node stores its output variable,
its input variables and a vector-Jacobian closure. Nodes are appended in
execution order, so the list is topologically sorted and a single reverse
sweep propagates gradients to the leaves.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np


class Var:
    """A value tracked by the tape. Parameters are named Vars."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = self.name or "var"
        return f"Var({label}, shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Records op applications and replays their VJPs in reverse."""

    def __init__(self):
        self._nodes: list[tuple[Var, tuple[Var, ...], object]] = []

    def record(self, out: Var, inputs, vjp):
        """Append a node. ``vjp(grad_out)`` must return one gradient (or None)
        per input, in order."""
        self._nodes.append((out, tuple(inputs), vjp))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Reverse sweep from a scalar loss. Returns gradients keyed by Var;
        leaves never reached simply do not appear (gradient zero)."""
        if loss.data.size != 1:
            raise ValueError("loss must be scalar")
        grads: dict[Var, np.ndarray] = {loss: np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.get(out)
            if g is None:
                continue
            input_grads = vjp(g)
            for var, gv in zip(inputs, input_grads):
                if gv is None:
                    continue
                acc = grads.get(var)
                grads[var] = gv if acc is None else acc + gv
        return grads


def adam_update(theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                weight_decay=0.0):
    """One Adam step with bias correction; L2 decay is folded into the gradient.

    ``t`` is the 1-based step count. Returns (theta, m, v) as new arrays.
    """
    g = grad + weight_decay * theta if weight_decay else grad
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class Adam:
    """Adam over a list of parameter Vars. State is per parameter."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._state: dict[Var, dict] = {
            p: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for p in self.params
        }

    def step(self, grads: dict[Var, np.ndarray]):
        """Apply one update; parameters missing from ``grads`` are untouched."""
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            st = self._state[p]
            st["t"] += 1
            p.data, st["m"], st["v"] = adam_update(
                p.data, np.asarray(g, dtype=p.data.dtype), st["m"], st["v"], st["t"],
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment tensors keyed by parameter name, for checkpointing."""
        out = {}
        for p in self.params:
            if p.name is None:
                continue
            st = self._state[p]
            out[p.name + ".m"] = st["m"]
            out[p.name + ".v"] = st["v"]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int):
        for p in self.params:
            if p.name is None:
                continue
            st = self._state[p]
            if p.name + ".m" in tensors:
                st["m"] = tensors[p.name + ".m"].astype(p.data.dtype)
                st["v"] = tensors[p.name + ".v"].astype(p.data.dtype)
                st["t"] = t

    @property
    def step_count(self) -> int:
        return max((st["t"] for st in self._state.values()), default=0)


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: the rate is divided by 1/factor at each milestone epoch."""

    initial_lr: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        ms = tuple(self.milestones)
        if list(ms) != sorted(set(ms)):
            raise ValueError("milestones must be strictly increasing")
        object.__setattr__(self, "milestones", ms)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate in effect at a given epoch (milestone epochs use the
    reduced rate)."""
    k = bisect.bisect_right(schedule.milestones, epoch)
    return schedule.initial_lr * schedule.factor**k
