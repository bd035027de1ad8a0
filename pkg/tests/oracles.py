"""Independent reference computations for frozen expectations.

Nothing here imports ``fedsim``: each function recomputes a quantity from
its definition with plain Python floats (or the minimum of numpy needed to
reproduce a documented RNG stream).
"""

from __future__ import annotations

import math

import numpy as np


def lda_reference(labels, alpha: float, num_clients: int, seed: int, attempts: int = 100) -> list[int]:
    """Owner client of every sample under per-class Dirichlet splitting.

    Documented stream: one ``default_rng(seed)``; per attempt and per class in
    ascending order, ``permutation`` of the class's ascending indices, then
    ``dirichlet([alpha] * K)``; piece boundaries at ``floor(running_sum * n_c)``
    except the last, which runs to the end. Redraw while a client is empty.
    """
    rng = np.random.default_rng(seed)
    classes = sorted(set(int(v) for v in labels))
    members = {c: [i for i, v in enumerate(labels) if int(v) == c] for c in classes}
    for _ in range(attempts):
        owner = [-1] * len(labels)
        counts = [0] * num_clients
        for c in classes:
            shuffled = [int(i) for i in rng.permutation(np.array(members[c]))]
            props = [float(p) for p in rng.dirichlet([alpha] * num_clients)]
            n_c = len(shuffled)
            bounds = []
            running = 0.0
            for p in props[:-1]:
                running += p
                bounds.append(int(running * n_c))
            bounds.append(n_c)
            start = 0
            for client, end in enumerate(bounds):
                end = max(end, start)
                for i in shuffled[start:end]:
                    owner[i] = client
                    counts[client] += 1
                start = end
        if min(counts) >= 1:
            return owner
    raise RuntimeError("no valid draw")


def softmax(values, tau: float = 1.0) -> list[float]:
    top = max(values)
    exps = [math.exp((v - top) / tau) for v in values]
    total = math.fsum(exps)
    return [e / total for e in exps]


def cross_entropy(rows, labels) -> float:
    losses = []
    for row, label in zip(rows, labels):
        top = max(row)
        lse = top + math.log(math.fsum(math.exp(v - top) for v in row))
        losses.append(lse - row[label])
    return math.fsum(losses) / len(losses)


def kl(p, q, floor: float = 1e-12) -> float:
    return math.fsum(pi * math.log(pi / max(qi, floor)) for pi, qi in zip(p, q) if pi > 0)


def weighted_mean(vectors, weights) -> list[float]:
    total = math.fsum(weights)
    return [math.fsum(w * v[j] for v, w in zip(vectors, weights)) / total for j in range(len(vectors[0]))]


def option_ii_closed_form(raw_deltas_oldest_first, a: float) -> list[float]:
    """``a * sum_i (1 - a)^i d^{t-i}`` with the initial blended delta zero."""
    t = len(raw_deltas_oldest_first)
    dim = len(raw_deltas_oldest_first[0])
    return [
        math.fsum(a * (1 - a) ** i * raw_deltas_oldest_first[t - 1 - i][j] for i in range(t))
        for j in range(dim)
    ]


def filtered_penalty(diff, delta, mu: float) -> tuple[float, list[float]]:
    total, grad = [], []
    for d, e in zip(diff, delta):
        if d * e < 0:
            r = d - e
            total.append(r * r)
            grad.append(mu * r)
        else:
            grad.append(0.0)
    return mu / 2 * math.fsum(total), grad


def hand_trace_two_clients(w0, clients, lr, epochs, mu, a, rounds):
    """Fedr (Option II) on a one-weight model ``y ~ w * x`` with full-batch MSE.

    ``clients`` is a list of ``(xs, ys)``. Returns per-round global weights,
    blended deltas and per-client local weights.
    """
    w = w0
    blended = 0.0
    history = []
    out = []
    for _ in range(rounds):
        blended = (1 - a) * blended + a * history[0] if history else 0.0
        locals_ = []
        for xs, ys in clients:
            wk = w
            for _ in range(epochs):
                n = len(xs)
                grad = math.fsum(2 * x * (wk * x - y) for x, y in zip(xs, ys)) / n
                diff = wk - w
                if diff * blended < 0:
                    grad += mu * (diff - blended)
                wk = wk - lr * grad
            locals_.append(wk)
        sizes = [len(xs) for xs, _ in clients]
        new_w = math.fsum(n * v for n, v in zip(sizes, locals_)) / sum(sizes)
        history = [new_w - w]
        out.append({"blended": blended, "locals": locals_, "weights": new_w})
        w = new_w
    return out
