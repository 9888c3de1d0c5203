"""Adam with AMSGrad, bias/weight parameter groups and a multi-step LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.layers import Module


@dataclass(frozen=True)
class LRSchedule:
    initial: float = 0.00012
    milestones: tuple[int, ...] = (5, 15, 25, 65, 100)
    factor: float = 0.5
    multipliers: dict = field(default_factory=lambda: {"weight": 1.0, "bias": 2.0})

    def lr_at(self, epoch: int, group: str = "weight") -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be non-negative, got {epoch}")
        drops = sum(1 for m in self.milestones if m <= epoch)
        return self.initial * self.factor**drops * self.multipliers[group]


def lr_at(epoch: int, group: str = "weight", schedule: LRSchedule = LRSchedule()) -> float:
    return schedule.lr_at(epoch, group)


def is_bias(name: str) -> bool:
    return name == "bias" or name.endswith(".bias")


class AdamAMSGrad:
    """Adam keeping the running elementwise max of the second moment.

    Weight decay is coupled by default (lambda * param added to the gradient
    before the moment updates); ``decoupled=True`` instead shrinks the
    parameter by lr * lambda after the Adam step.  Bias parameters form their
    own group with no decay.
    """

    def __init__(self, named_params, schedule: LRSchedule = LRSchedule(), weight_decay: float = 5e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8, decoupled: bool = False):
        if isinstance(named_params, Module):
            named_params = named_params.named_parameters()
        self.params = list(named_params)
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decoupled = decoupled
        self.t = 0
        self.epoch = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v_max = {n: np.zeros_like(p.data) for n, p in self.params}

    def group(self, name: str) -> str:
        return "bias" if is_bias(name) else "weight"

    def lr(self, name: str) -> float:
        return self.schedule.lr_at(self.epoch, self.group(name))

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            bias = is_bias(name)
            lr = self.lr(name)
            decay = 0.0 if bias else self.weight_decay
            if decay and not self.decoupled:
                g = g + decay * p.data
            m, v, vmax = self.m[name], self.v[name], self.v_max[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            np.maximum(vmax, v, out=vmax)
            m_hat = m / (1 - b1**t)
            v_hat = vmax / (1 - b2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if decay and self.decoupled:
                p.data -= lr * decay * p.data

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"optim.t": np.asarray(float(self.t)), "optim.epoch": np.asarray(float(self.epoch))}
        for name, _ in self.params:
            state[f"optim.m.{name}"] = self.m[name]
            state[f"optim.v.{name}"] = self.v[name]
            state[f"optim.v_max.{name}"] = self.v_max[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(state["optim.t"])
        self.epoch = int(state["optim.epoch"])
        for name, _ in self.params:
            self.m[name][...] = state[f"optim.m.{name}"]
            self.v[name][...] = state[f"optim.v.{name}"]
            self.v_max[name][...] = state[f"optim.v_max.{name}"]
