from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedsim.datagen import Dataset
from fedsim.errors import ConfigError, StructuralError
from fedsim.fedcore.strategy import (
    FedKd,
    FedProx,
    Fedr,
    Strategy,
    base_strategy,
    prox_penalty_flat,
    reg_penalty_flat,
)
from fedsim.models import Model, Task, task_loss, task_output
from fedsim.tensor import ParamVector, Tensor, kl_divergence, mul, softmax_with_temperature


@dataclass
class ClientData:
    """A client's local dataset split into train and test index sets."""

    dataset: Dataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    task: Task

    @property
    def num_samples(self) -> int:
        return int(self.train_idx.size)


@dataclass
class ClientState:
    """Per-client mutable state across rounds.

    ``weights`` holds the client's latest local copy of the shared model;
    ``personal`` is the distilled model, present only under ``FedKd`` and
    never sent to the server.
    """

    client_id: int
    data: ClientData
    weights: Optional[ParamVector] = None
    personal: Optional[ParamVector] = None
    personal_model: Optional[Model] = None


@dataclass(frozen=True)
class LocalPlan:
    lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    clip_norm: float = 0.0  # 0 disables global-norm gradient clipping

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"must be >= 0, got {self.lr}", "train.lr")
        if self.local_epochs < 1:
            raise ConfigError("must be >= 1", "train.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if not self.clip_norm >= 0:
            raise ConfigError(f"must be >= 0, got {self.clip_norm}", "train.clip_norm")

    def step(self, flat: np.ndarray, g: np.ndarray) -> np.ndarray:
        """One SGD step, rescaling ``g`` to norm ``clip_norm`` when it is longer."""
        if self.lr == 0:
            return flat
        if self.clip_norm > 0:
            norm = float(np.sqrt(g @ g))
            if norm > self.clip_norm:
                g = g * (self.clip_norm / norm)
        return flat - self.lr * g


@dataclass
class LocalResult:
    weights: ParamVector
    train_loss: float
    reg_loss: float
    steps: int
    aborted: bool = False
    error: str = ""
    kd_loss: float = float("nan")
    personal: Optional[ParamVector] = field(default=None, repr=False)


def data_loss_and_grad(model: Model, params: ParamVector, inputs, targets, task: Task) -> tuple[float, ParamVector]:
    leaves = params.leaves()
    loss = task_loss(model.forward(leaves, inputs), targets, task)
    loss.backward()
    return loss.item(), params.gradient_from(leaves)


def _batches(idx: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(idx)
    for start in range(0, order.size, batch_size):
        yield np.sort(order[start : start + batch_size])


def client_update(
    model: Model,
    data: ClientData,
    w_t: ParamVector,
    delta_t: Optional[ParamVector],
    strategy: Strategy,
    plan: LocalPlan,
    rng: np.random.Generator,
    client_id: int = 0,
) -> LocalResult:
    """Train a fresh copy of ``w_t`` for ``plan.local_epochs`` epochs of minibatch SGD.

    The objective is the task loss plus the strategy's penalty: none for
    FedAvg, the proximal term for FedProx, the filtered delta penalty for
    Fedr. A non-finite loss aborts the client and returns ``aborted=True``.
    """
    inner = base_strategy(strategy)
    w0 = w_t.flatten()
    if isinstance(inner, Fedr):
        if delta_t is None:
            raise StructuralError("Fedr client update needs the broadcast delta")
        w_t.check_congruent(delta_t, "delta")
        d0 = delta_t.flatten()
    mu = inner.mu_for(client_id) if isinstance(inner, (FedProx, Fedr)) else 0.0
    flat = w0.copy()
    losses, regs = [], []
    targets = data.dataset.targets
    for _ in range(plan.local_epochs):
        for batch in _batches(data.train_idx, plan.batch_size, rng):
            params = w_t.unflatten(flat)
            loss, grad = data_loss_and_grad(model, params, data.dataset.inputs(batch), targets[batch], data.task)
            g = grad.flatten()
            reg = 0.0
            if isinstance(inner, Fedr):
                reg, g_reg = reg_penalty_flat(flat, w0, d0, mu)
                g = g + g_reg
            elif isinstance(inner, FedProx):
                reg, g_reg = prox_penalty_flat(flat, w0, mu)
                g = g + g_reg
            if not (math.isfinite(loss) and math.isfinite(reg) and np.all(np.isfinite(g))):
                return LocalResult(w_t.copy(), loss, reg, len(losses), aborted=True, error="non-finite loss")
            losses.append(loss)
            regs.append(reg)
            flat = plan.step(flat, g)
    return LocalResult(
        w_t.unflatten(flat),
        float(np.mean(losses)) if losses else 0.0,
        float(np.mean(regs)) if regs else 0.0,
        len(losses),
    )


def frozen_forward(model: Model, params: ParamVector, inputs) -> Tensor:
    """Forward pass with no gradient bookkeeping (teacher predictions)."""
    return model.forward({name: Tensor(arr) for name, arr in params}, inputs)


def kd_loss(personal_out: Tensor, teacher_out: Tensor, targets: np.ndarray, task: Task, alpha: float, temperature: float) -> Tensor:
    """``(1 - alpha) * L_task + alpha * KL(softmax(pred_p / T) || softmax(pred / T))``.

    The KL term compares the task's output columns. A regression task reads a
    single column, whose softmax is identically 1, so its KL term is zero.
    """
    base = task_loss(personal_out, targets, task)
    loss = mul(base, 1.0 - alpha)
    if task.kind == "cls" and alpha != 0:
        student = softmax_with_temperature(task_output(personal_out, task), temperature)
        teacher = softmax_with_temperature(task_output(teacher_out, task).detach(), temperature)
        loss = loss + mul(kl_divergence(student, teacher), alpha)
    return loss


def kd_local_step(
    personal_model: Model,
    personal: ParamVector,
    teacher_model: Model,
    teacher: ParamVector,
    inputs,
    targets: np.ndarray,
    task: Task,
    alpha: float,
    temperature: float,
) -> tuple[float, ParamVector]:
    """Distillation loss for the personal model and its gradient.

    The teacher (the client's copy of the broadcast global model) is frozen:
    no gradient flows into it.
    """
    if not 0 <= alpha <= 1:
        raise ConfigError(f"must lie in [0, 1], got {alpha}", "strategy.fedkd.alpha")
    if not temperature > 0:
        raise ConfigError(f"must be > 0, got {temperature}", "strategy.fedkd.temperature")
    teacher_out = frozen_forward(teacher_model, teacher, inputs)
    leaves = personal.leaves()
    loss = kd_loss(personal_model.forward(leaves, inputs), teacher_out, targets, task, alpha, temperature)
    loss.backward()
    return loss.item(), personal.gradient_from(leaves)


def personal_update(
    personal_model: Model,
    personal: ParamVector,
    teacher_model: Model,
    teacher: ParamVector,
    data: ClientData,
    strategy: FedKd,
    plan: LocalPlan,
    rng: np.random.Generator,
) -> tuple[ParamVector, float, bool]:
    """Run ``plan.local_epochs`` epochs of distillation on the personal model.

    Returns the new personal weights, the mean loss and an abort flag; an
    aborted update leaves the personal model unchanged.
    """
    flat = personal.flatten()
    losses = []
    targets = data.dataset.targets
    for _ in range(plan.local_epochs):
        for batch in _batches(data.train_idx, plan.batch_size, rng):
            loss, grad = kd_local_step(
                personal_model, personal.unflatten(flat), teacher_model, teacher,
                data.dataset.inputs(batch), targets[batch], data.task, strategy.alpha, strategy.temperature,
            )
            g = grad.flatten()
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                return personal, loss, True
            losses.append(loss)
            flat = plan.step(flat, g)
    return personal.unflatten(flat), float(np.mean(losses)) if losses else 0.0, False
