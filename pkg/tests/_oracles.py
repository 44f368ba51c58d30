"""Independent reference computations used by several test modules."""

from __future__ import annotations

import math

import torch


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """d fn(x) / dx by symmetric differences, one coordinate at a time (float64)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn(x))
            flat[i] = orig - eps
            down = float(fn(x))
            flat[i] = orig
            grad.view(-1)[i] = (up - down) / (2 * eps)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    scale = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / scale).max())


# Error counts of the 10-step CIFAR100-B0 baseline (DEA + rehearsal), per step.
BASELINE_ERRORS = {
    "wtc": [75, 133, 169, 164, 191, 169, 226, 182, 207, 254],
    "onc": [0, 162, 450, 750, 856, 1034, 1597, 1834, 2053, 2943],
    "itc": [0, 0, 67, 237, 524, 794, 824, 1200, 1481, 1538],
}


def synthesize_log(counts=BASELINE_ERRORS, classes_per_task=10, per_class=100):
    """Prediction rows ``(sample_id, true, pred, step)`` with prescribed error counts.

    Class ``c`` belongs to task ``c // classes_per_task + 1``. At step ``s``
    every test sample of tasks ``1..s`` is predicted once. Errors are built
    directly from their definitions: WTC predicts another class of the same
    task, ONC an old sample predicted as a latest-task class, ITC an old sample
    predicted as a class of a different old task. Everything else is correct.
    """
    steps = len(counts["wtc"])
    class_to_task = {c: c // classes_per_task + 1 for c in range(steps * classes_per_task)}
    rows = []
    for s in range(1, steps + 1):
        samples = [
            (c * per_class + k, c)
            for c in range(s * classes_per_task)
            for k in range(per_class)
        ]
        old = [x for x in samples if class_to_task[x[1]] < s]
        latest = [x for x in samples if class_to_task[x[1]] == s]
        # WTC draws from latest-task samples first, then old; ONC and ITC need old samples
        pool_old = iter(old)
        pool_wtc = iter(latest + old[::-1])
        assigned = {}
        for _ in range(counts["onc"][s - 1]):
            sid, c = next(pool_old)
            assigned[sid] = (s - 1) * classes_per_task + (c % classes_per_task)
        for _ in range(counts["itc"][s - 1]):
            sid, c = next(pool_old)
            other_task = class_to_task[c] % (s - 1) + 1  # a different old task
            assigned[sid] = (other_task - 1) * classes_per_task + (c % classes_per_task)
        for _ in range(counts["wtc"][s - 1]):
            sid, c = next(pool_wtc)
            assert sid not in assigned
            base = c - c % classes_per_task
            assigned[sid] = base + (c + 1) % classes_per_task
        for sid, c in samples:
            rows.append((sid, c, assigned.get(sid, c), s))
    return rows, class_to_task


def herding_oracle(points, k, ids):
    """Brute-force greedy: at every prefix length try every unused candidate."""
    pts = [list(map(float, p)) for p in points]
    d = len(pts[0])
    mean = [sum(p[j] for p in pts) / len(pts) for j in range(d)]
    chosen = []
    for size in range(1, k + 1):
        best = None
        for pos in sorted(range(len(pts)), key=lambda i: ids[i]):
            if pos in chosen:
                continue
            members = chosen + [pos]
            m = [sum(pts[i][j] for i in members) / size for j in range(d)]
            dist = math.sqrt(sum((m[j] - mean[j]) ** 2 for j in range(d)))
            if best is None or dist < best[0]:
                best = (dist, pos)
        chosen.append(best[1])
    return [ids[i] for i in chosen]
