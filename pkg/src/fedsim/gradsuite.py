"""Finite-difference checks over every differentiable component.

Each :class:`Check` builds a ``params -> (loss, grad)`` closure on small
random inputs. Inputs that would put a kink (relu, max, the delta filter)
within a step of the probe are avoided by construction, so a failing check
means a wrong gradient rather than an unlucky sample.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from fedsim.datagen import GraphTaskSpec, make_graph_tasks
from fedsim.fedcore.client import kd_local_step
from fedsim.fedcore.strategy import prox_penalty, reg_penalty
from fedsim.models import GinConfig, LinearConfig, MlpConfig, Task, build_model, task_loss
from fedsim.tensor import (
    ParamVector,
    Tensor,
    autodiff,
    cross_entropy,
    dense_forward,
    grad_check,
    kl_divergence,
    mse,
    softmax_with_temperature,
)
from fedsim.tensor.gradcheck import LossAndGrad

TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator], "tuple[LossAndGrad, ParamVector]"]


@dataclass(frozen=True)
class Check:
    name: str
    build: Builder


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _dense(rng):
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 3))
    params = ParamVector({"w": rng.normal(size=(4, 3)), "b": rng.normal(size=3)})
    return autodiff(lambda p: mse(dense_forward(x, p["w"], p["b"]), target)), params


def _model_check(config, inputs, targets, task):
    def build(rng):
        model = build_model(config)
        params = model.init_params(rng)
        return autodiff(lambda p: task_loss(model.forward(p, inputs), targets, task)), params

    return build


def _linear(rng):
    x = rng.normal(size=(8, 5))
    return _model_check(LinearConfig(5, 3), x, rng.integers(0, 3, 8), Task("cls", 3))(rng)


def _mlp(rng):
    x = rng.normal(size=(8, 5))
    return _model_check(MlpConfig(5, (7, 6), 3), x, rng.integers(0, 3, 8), Task("cls", 3))(rng)


def _cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    params = ParamVector({"logits": rng.normal(size=(5, 4)) * 2})
    return autodiff(lambda p: cross_entropy(p["logits"], labels)), params


def _temperature_kl(rng):
    params = ParamVector({"student": rng.normal(size=(4, 3)) * 3, "teacher": rng.normal(size=(4, 3)) * 3})

    def forward(p):
        return kl_divergence(softmax_with_temperature(p["student"], 2.5), softmax_with_temperature(p["teacher"], 2.5))

    return autodiff(forward), params


def _mse(rng):
    target = rng.normal(size=7)
    params = ParamVector({"pred": rng.normal(size=7)})
    return autodiff(lambda p: mse(p["pred"], target)), params


def _graphs(rng, n=4):
    spec = GraphTaskSpec("count_nodes", 2, 6, 0.5)
    return list(make_graph_tasks(spec, n, int(rng.integers(2**31))).graphs)


def _gin(readout: str) -> Builder:
    def build(rng):
        graphs = _graphs(rng)
        config = GinConfig(3, 2, 4, readout, "multitask", 2)
        model = build_model(config)
        params = model.init_params(rng)
        # non-zero biases keep relu units off their kink at the probe point
        params = params.unflatten(params.flatten() + rng.normal(scale=0.1, size=params.size))
        labels = rng.integers(0, 2, len(graphs))
        targets = rng.normal(size=len(graphs))

        def forward(p):
            out = model.forward(p, graphs)
            return task_loss(out, labels, Task("cls", 2)) + task_loss(out, targets, Task("reg", offset=2))

        return autodiff(forward), params

    return build


def _away_from_zero(rng, size, low=0.1):
    return rng.choice([-1.0, 1.0], size) * rng.uniform(low, 1.0, size)


def _reg_penalty(rng):
    # |w_k - w_t| >= 0.1 per coordinate keeps the sign filter fixed under a 1e-5 probe
    w_t = rng.normal(size=12)
    w_k = w_t + _away_from_zero(rng, 12)
    delta = _away_from_zero(rng, 12)
    anchor, blended = ParamVector({"w": w_t}), ParamVector({"w": delta})
    return (lambda p: reg_penalty(p, anchor, blended, 0.3)), ParamVector({"w": w_k})


def _prox_penalty(rng):
    anchor = ParamVector({"w": rng.normal(size=9)})
    return (lambda p: prox_penalty(p, anchor, 0.7)), ParamVector({"w": rng.normal(size=9)})


def _kd_mlp(rng):
    x = rng.normal(size=(6, 4))
    labels = rng.integers(0, 3, 6)
    student = build_model(MlpConfig(4, (5,), 3))
    teacher = build_model(MlpConfig(4, (6, 6), 3))
    teacher_params = teacher.init_params(rng)

    def loss_and_grad(p):
        return kd_local_step(student, p, teacher, teacher_params, x, labels, Task("cls", 3), 0.5, 3.0)

    return loss_and_grad, student.init_params(rng)


def _kd_gin(rng):
    graphs = _graphs(rng)
    labels = rng.integers(0, 2, len(graphs)).astype(float)
    student = build_model(GinConfig(3, 1, 4, "mix", "multitask", 2))
    teacher = build_model(GinConfig(3, 1, 4, "mean", "multitask", 2))
    teacher_params = teacher.init_params(rng)
    params = student.init_params(rng)
    params = params.unflatten(params.flatten() + rng.normal(scale=0.1, size=params.size))

    def loss_and_grad(p):
        return kd_local_step(student, p, teacher, teacher_params, graphs, labels, Task("cls", 2), 0.5, 10.0)

    return loss_and_grad, params


CHECKS: list[Check] = [
    Check("dense", _dense),
    Check("linear", _linear),
    Check("mlp", _mlp),
    Check("cross_entropy", _cross_entropy),
    Check("temperature_kl", _temperature_kl),
    Check("mse", _mse),
    *(Check(f"gin_{mode}", _gin(mode)) for mode in ("sum", "mean", "max", "mix")),
    Check("reg_penalty", _reg_penalty),
    Check("prox_penalty", _prox_penalty),
    Check("kd_local_step_mlp", _kd_mlp),
    Check("kd_local_step_gin", _kd_gin),
]


def run_checks(checks: list[Check] | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    for check in CHECKS if checks is None else checks:
        start = time.perf_counter()
        loss_and_grad, params = check.build(np.random.default_rng([seed, len(results)]))
        error = grad_check(loss_and_grad, params)
        results.append(CheckResult(check.name, error, time.perf_counter() - start))
    return results
