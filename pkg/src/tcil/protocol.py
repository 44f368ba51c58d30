"""Incremental task streams and the rehearsal exemplar memory.

A stream splits a labelled dataset into ordered class batches with pairwise
disjoint label sets. Two split conventions are supported:

* ``B0``: all classes are divided evenly over ``num_steps`` steps.
* ``B50``: the first step holds half of the classes; ``num_steps`` further
  steps split the remaining half evenly (so the stream has ``num_steps + 1``
  steps in total).
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ProtocolConfigError

logger = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    B0 = "B0"
    B50 = "B50"


class SelectionMethod(str, enum.Enum):
    HERDING = "herding"
    RANDOM = "random"


@dataclass(frozen=True)
class TaskStream:
    """Ordered class batches ``C_1..C_T`` and the sample ids of each ``D_t``.

    Steps are 1-indexed throughout: ``class_batches[0]`` is step 1.
    """

    class_batches: tuple[tuple[int, ...], ...]
    sample_index: Mapping[int, tuple[int, ...]]
    protocol: Protocol
    class_order_seed: int
    class_order: tuple[int, ...] = ()

    @property
    def num_steps(self) -> int:
        return len(self.class_batches)

    def classes_at(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.class_batches[t - 1]

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """Union of the label sets of steps ``1..t``, in stream order."""
        self._check_step(t)
        return tuple(c for batch in self.class_batches[:t] for c in batch)

    def samples_at(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.sample_index[t]

    @property
    def class_to_task(self) -> dict[int, int]:
        return {c: t for t, batch in enumerate(self.class_batches, start=1) for c in batch}

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise InputError(f"step {t} outside 1..{self.num_steps}")

    def validate(self, dataset_labels: Mapping[int, int] | None = None) -> None:
        seen: set[int] = set()
        for batch in self.class_batches:
            overlap = seen.intersection(batch)
            if overlap:
                raise ProtocolConfigError(f"label sets overlap on classes {sorted(overlap)}")
            seen.update(batch)
        ids = [i for t in range(1, self.num_steps + 1) for i in self.sample_index[t]]
        if len(ids) != len(set(ids)):
            raise ProtocolConfigError("a sample id appears in more than one step")
        if dataset_labels is not None and set(ids) != set(dataset_labels):
            raise ProtocolConfigError("stream does not cover every sample exactly once")


def split_sizes(num_classes: int, protocol: Protocol | str, num_steps: int) -> list[int]:
    """Class counts per step under ``protocol``; raises if the split is uneven."""
    protocol = Protocol(protocol)
    if num_steps < 1:
        raise ProtocolConfigError(f"num_steps must be >= 1, got {num_steps}")
    if protocol is Protocol.B0:
        if num_classes % num_steps:
            raise ProtocolConfigError(
                f"B0: {num_classes} classes are not divisible into {num_steps} steps"
            )
        return [num_classes // num_steps] * num_steps
    if num_classes % 2:
        raise ProtocolConfigError(f"B50: cannot take exactly half of {num_classes} classes")
    base = num_classes // 2
    if base % num_steps:
        raise ProtocolConfigError(
            f"B50: remaining {base} classes are not divisible into {num_steps} steps"
        )
    return [base] + [base // num_steps] * num_steps


def read_class_order(path: str | Path) -> list[int]:
    """Read a class-order file: one integer class id per line, blanks ignored."""
    order = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            order.append(int(line))
        except ValueError:
            raise InputError(f"{path}:{lineno}: not a class id: {line!r}") from None
    return order


def write_class_order(order: Sequence[int], path: str | Path) -> None:
    Path(path).write_text("".join(f"{c}\n" for c in order))


def build_stream(
    dataset_labels: Mapping[int, int],
    protocol: Protocol | str,
    num_steps: int,
    seed: int,
    class_order: Sequence[int] | None = None,
) -> TaskStream:
    """Split ``dataset_labels`` (sample id -> class id) into a task stream.

    The class order is a seeded permutation of the sorted class ids unless an
    explicit ``class_order`` is given. For ``B50`` the stream holds
    ``num_steps + 1`` steps.
    """
    if not dataset_labels:
        raise InputError("empty dataset")
    protocol = Protocol(protocol)
    classes = sorted(set(dataset_labels.values()))
    sizes = split_sizes(len(classes), protocol, num_steps)

    if class_order is None:
        rng = np.random.default_rng(seed)
        order = [classes[i] for i in rng.permutation(len(classes))]
    else:
        order = [int(c) for c in class_order]
        if sorted(order) != classes:
            raise ProtocolConfigError("class order file does not list every class exactly once")

    batches = []
    start = 0
    for size in sizes:
        batches.append(tuple(order[start : start + size]))
        start += size

    task_of = {c: t for t, batch in enumerate(batches, start=1) for c in batch}
    per_step: dict[int, list[int]] = {t: [] for t in range(1, len(batches) + 1)}
    for sample_id in sorted(dataset_labels):
        per_step[task_of[dataset_labels[sample_id]]].append(sample_id)

    stream = TaskStream(
        class_batches=tuple(batches),
        sample_index={t: tuple(ids) for t, ids in per_step.items()},
        protocol=protocol,
        class_order_seed=seed,
        class_order=tuple(order),
    )
    stream.validate(dataset_labels)
    return stream


def select_exemplars(
    features: np.ndarray | Sequence[Sequence[float]],
    k: int,
    sample_ids: Sequence[int] | None = None,
) -> list[int]:
    """Greedy herding selection.

    At iteration ``j`` the sample whose inclusion brings the mean of the
    ``j`` selected features closest to the class mean is picked (without
    replacement). Ties go to the lowest sample id. The result is prefix
    consistent: the first ``j`` ids of a ``k``-selection equal a direct
    ``j``-selection.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise InputError(f"features must be a 2-D array, got shape {feats.shape}")
    n = feats.shape[0]
    ids = list(range(n)) if sample_ids is None else [int(i) for i in sample_ids]
    if len(ids) != n:
        raise InputError("sample_ids and features differ in length")
    if k < 0:
        raise InputError(f"k must be >= 0, got {k}")
    if k > n:
        warnings.warn(f"requested {k} exemplars but only {n} samples; clamping", stacklevel=2)
        k = n

    # Scan candidates in ascending id so argmin's first hit is the lowest id.
    order = np.argsort(ids, kind="stable")
    feats = feats[order]
    ids = [ids[i] for i in order]

    class_mean = feats.mean(axis=0) if n else None
    running = np.zeros(feats.shape[1])
    available = np.ones(n, dtype=bool)
    chosen: list[int] = []
    for j in range(1, k + 1):
        candidate_means = (running[None, :] + feats) / j
        dist = np.linalg.norm(candidate_means - class_mean[None, :], axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        available[pick] = False
        running += feats[pick]
        chosen.append(ids[pick])
    return chosen


@dataclass
class ExemplarMemory:
    """Fixed-budget store of reserved sample ids, balanced across classes.

    ``reads`` counts every call that hands stored ids out; a non-rehearsal run
    must finish with it at zero.
    """

    budget: int
    entries: dict[int, list[int]] = field(default_factory=dict)
    selection_method: SelectionMethod = SelectionMethod.HERDING
    reads: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise InputError(f"memory budget must be non-negative, got {self.budget}")
        self.selection_method = SelectionMethod(self.selection_method)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def sample_ids(self) -> list[int]:
        self.reads += 1
        return [i for c in sorted(self.entries) for i in self.entries[c]]

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "selection_method": self.selection_method.value,
            "entries": {str(c): list(map(int, ids)) for c, ids in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ExemplarMemory":
        return cls(
            budget=int(payload["budget"]),
            entries={int(c): [int(i) for i in ids] for c, ids in payload["entries"].items()},
            selection_method=SelectionMethod(payload.get("selection_method", "herding")),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExemplarMemory":
        return cls.from_dict(json.loads(Path(path).read_text()))


def class_quotas(budget: int, classes: Sequence[int]) -> dict[int, int]:
    """floor(budget / n) per class; the remainder goes to the lowest class ids."""
    if not classes:
        return {}
    base, extra = divmod(budget, len(classes))
    ranked = sorted(classes)
    return {c: base + (1 if rank < extra else 0) for rank, c in enumerate(ranked)}


def rebalance_memory(
    memory: ExemplarMemory,
    new_classes: Sequence[int],
    per_class_features: Mapping[int, tuple[Sequence[int], np.ndarray]],
    seed: int = 0,
) -> ExemplarMemory:
    """Shrink stored classes to their new quota and fill in ``new_classes``.

    ``per_class_features`` maps each new class to ``(sample_ids, features)``.
    Stored lists keep their selection order, so truncation drops the least
    representative exemplars first.
    """
    all_classes = sorted(set(memory.entries) | set(new_classes))
    quotas = class_quotas(memory.budget, all_classes)
    entries: dict[int, list[int]] = {}
    for c, ids in memory.entries.items():
        if c not in new_classes:
            entries[c] = list(ids[: quotas[c]])
    for c in new_classes:
        quota = quotas[c]
        if quota == 0:
            entries[c] = []
            continue
        ids, feats = per_class_features[c]
        if memory.selection_method is SelectionMethod.HERDING:
            entries[c] = select_exemplars(feats, quota, ids)
        else:
            rng = np.random.default_rng([seed, int(c)])
            picked = rng.permutation(len(ids))[: min(quota, len(ids))]
            entries[c] = [int(ids[i]) for i in picked]
    if memory.budget == 0:
        entries = {}
    out = ExemplarMemory(memory.budget, entries, memory.selection_method)
    out.reads = memory.reads
    return out
