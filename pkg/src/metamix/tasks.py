"""Task pools: synthetic memorization-prone generators and CSV ingestion.

Two synthetic generators are provided:

* ``make_nme_classification_pool``: classes are Gaussian blobs split into
  ``n_sets`` sets. A task draws one class from each set and labels it by
  its set index, so a class keeps the same label in every task
  (non-mutually-exclusive). A network can therefore solve every
  meta-training task without looking at the support set.
* ``make_ambiguous_regression_pool``: a *finite* pool of sinusoid tasks.
  Each input row carries a fixed task code, so the pool can be memorized
  task by task. This is a stand-in regression benchmark, not a dataset
  from the literature.

For classification pools, ``k_support``/``k_query`` are shots *per class*.
For regression they are row counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass
class Task:
    xs: np.ndarray
    ys: np.ndarray
    xq: np.ndarray
    yq: np.ndarray
    task_id: str
    kind: str

    def __post_init__(self):
        if len(self.xs) < 1 or len(self.xq) < 1:
            raise ValueError(f"task {self.task_id}: empty support or query")
        if self.xs.shape[1] != self.xq.shape[1]:
            raise ValueError(f"task {self.task_id}: support/query feature widths differ")

    @property
    def k_support(self) -> int:
        return len(self.xs)

    @property
    def k_query(self) -> int:
        return len(self.xq)

    @property
    def class_s(self) -> np.ndarray:
        return np.argmax(self.ys, axis=1)

    @property
    def class_q(self) -> np.ndarray:
        return np.argmax(self.yq, axis=1)


@dataclass
class TaskSource:
    """All rows available to one task, before the support/query draw."""

    x: np.ndarray
    y: np.ndarray
    task_id: str
    row_class: np.ndarray | None = None
    # 0 = support, 1 = query when the split is fixed by the data (CSV pools)
    fixed_split: np.ndarray | None = None


@dataclass
class TaskPool:
    kind: str
    generator: str
    splits: dict[str, list[TaskSource]]
    n_way: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        for sources in self.splits.values():
            if sources:
                return sources[0].x.shape[1]
        raise ValueError("empty pool")

    @property
    def out_dim(self) -> int:
        for sources in self.splits.values():
            if sources:
                return sources[0].y.shape[1]
        raise ValueError("empty pool")

    def n_tasks(self, split: str) -> int:
        return len(self.splits.get(split, []))


def set_sizes(n_classes: int, n_sets: int) -> list[int]:
    """Sizes when ``n_classes`` are dealt into ``n_sets`` as evenly as possible, larger sets first."""
    base, extra = divmod(n_classes, n_sets)
    return [base + 1 if i < extra else base for i in range(n_sets)]


def make_nme_classification_pool(
    n_sets: int,
    classes_per_set: int,
    dim: int,
    n_T: int,
    seed: int,
    *,
    val_classes_per_set: int = 2,
    test_classes_per_set: int = 4,
    samples_per_class: int = 20,
    center_scale: float = 1.0,
    within_sd: float = 0.5,
    n_eval_tasks: int = 200,
    mutually_exclusive: bool = False,
) -> TaskPool:
    if n_sets < 2 or classes_per_set < 2:
        raise ValueError("need n_sets >= 2 and classes_per_set >= 2")
    if val_classes_per_set < 1 or test_classes_per_set < 1:
        raise ValueError(
            "insufficient classes for a disjoint meta-train/val/test split: "
            "every set needs at least one held-out class for val and for test"
        )
    if n_T < 1:
        raise ValueError("n_T must be >= 1")
    rng = np.random.default_rng(seed)
    per_set = classes_per_set + val_classes_per_set + test_classes_per_set

    # samples[s][c] holds the fixed rows of class c in set s
    samples = []
    for _ in range(n_sets):
        blobs = []
        for _ in range(per_set):
            center = rng.normal(0.0, center_scale, size=dim)
            blobs.append(center + within_sd * rng.normal(size=(samples_per_class, dim)))
        samples.append(blobs)

    ranges = {
        "train": range(0, classes_per_set),
        "val": range(classes_per_set, classes_per_set + val_classes_per_set),
        "test": range(classes_per_set + val_classes_per_set, per_set),
    }
    counts = {"train": n_T, "val": n_eval_tasks, "test": n_eval_tasks}
    splits = {}
    for split in SPLITS:
        cls = list(ranges[split])
        sources = []
        for t in range(counts[split]):
            choice = [int(rng.choice(cls)) for _ in range(n_sets)]
            labels = rng.permutation(n_sets) if mutually_exclusive else np.arange(n_sets)
            xs, ys, rc = [], [], []
            for s, c in enumerate(choice):
                xs.append(samples[s][c])
                onehot = np.zeros((samples_per_class, n_sets))
                onehot[:, labels[s]] = 1.0
                ys.append(onehot)
                rc.append(np.full(samples_per_class, s * per_set + c))
            sources.append(
                TaskSource(
                    x=np.concatenate(xs),
                    y=np.concatenate(ys),
                    task_id=f"{split}-{t}",
                    row_class=np.concatenate(rc),
                )
            )
        splits[split] = sources
    return TaskPool(
        kind="classification",
        generator="nme_classification",
        splits=splits,
        n_way=n_sets,
        params=dict(
            n_sets=n_sets,
            classes_per_set=classes_per_set,
            dim=dim,
            n_T=n_T,
            seed=seed,
            samples_per_class=samples_per_class,
            mutually_exclusive=mutually_exclusive,
        ),
    )


def make_ambiguous_regression_pool(
    n_T: int,
    input_dim: int,
    noise_sd: float,
    seed: int,
    *,
    samples_per_task: int = 40,
    n_eval_tasks: int = 200,
    amplitude_range: tuple[float, float] = (0.1, 5.0),
    phase_range: tuple[float, float] = (0.0, np.pi),
    x_range: tuple[float, float] = (-5.0, 5.0),
) -> TaskPool:
    """Finite sinusoid pool ``y = A_t sin(x + phase_t) + noise``.

    Column 0 of each input is ``x``; the remaining ``input_dim - 1`` columns
    are a fixed Gaussian code for the task.
    """
    if n_T < 2:
        raise ValueError("n_T must be >= 2")
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    counts = {"train": n_T, "val": n_eval_tasks, "test": n_eval_tasks}
    splits = {}
    for split in SPLITS:
        sources = []
        for t in range(counts[split]):
            amp = rng.uniform(*amplitude_range)
            phase = rng.uniform(*phase_range)
            code = rng.normal(size=input_dim - 1)
            x = rng.uniform(*x_range, size=samples_per_task)
            y = amp * np.sin(x + phase) + noise_sd * rng.normal(size=samples_per_task)
            inputs = np.column_stack([x, np.tile(code, (samples_per_task, 1))])
            src = TaskSource(x=inputs, y=y[:, None], task_id=f"{split}-{t}")
            src.amplitude, src.phase = amp, phase  # type: ignore[attr-defined]
            sources.append(src)
        splits[split] = sources
    return TaskPool(
        kind="regression",
        generator="ambiguous_regression",
        splits=splits,
        params=dict(n_T=n_T, input_dim=input_dim, noise_sd=noise_sd, seed=seed),
    )


def sample_task(
    pool: TaskPool,
    split: str,
    k_support: int | None,
    k_query: int | None,
    rng: np.random.Generator,
    index: int | None = None,
) -> Task:
    """Draw a task from ``split`` and split its rows into disjoint support and query sets."""
    sources = pool.splits.get(split, [])
    if not sources:
        raise ValueError(f"split {split!r} has no tasks")
    if index is None:
        index = int(rng.integers(len(sources)))
    src = sources[index]

    if src.fixed_split is not None:
        s_idx = np.flatnonzero(src.fixed_split == 0)
        q_idx = np.flatnonzero(src.fixed_split == 1)
        if k_support is not None:
            s_idx = _take(s_idx, k_support, src.task_id, "support")
        if k_query is not None:
            q_idx = _take(q_idx, k_query, src.task_id, "query")
    elif pool.kind == "classification":
        labels = np.argmax(src.y, axis=1)
        s_parts, q_parts = [], []
        for c in range(src.y.shape[1]):
            rows = np.flatnonzero(labels == c)
            if len(rows) < k_support + k_query:
                raise ValueError(
                    f"split exhausted: class {c} of task {src.task_id} has {len(rows)} rows, "
                    f"need {k_support + k_query}"
                )
            perm = rng.permutation(rows)
            s_parts.append(perm[:k_support])
            q_parts.append(perm[k_support:k_support + k_query])
        # row order is shuffled so index-aligned support/query pairs span classes
        s_idx = rng.permutation(np.concatenate(s_parts))
        q_idx = rng.permutation(np.concatenate(q_parts))
    else:
        if len(src.x) < k_support + k_query:
            raise ValueError(
                f"split exhausted: task {src.task_id} has {len(src.x)} rows, need {k_support + k_query}"
            )
        perm = rng.permutation(len(src.x))
        s_idx, q_idx = perm[:k_support], perm[k_support:k_support + k_query]

    return Task(
        xs=src.x[s_idx],
        ys=src.y[s_idx],
        xq=src.x[q_idx],
        yq=src.y[q_idx],
        task_id=src.task_id,
        kind=pool.kind,
    )


def _take(idx, k, task_id, which):
    if k > len(idx):
        raise ValueError(f"split exhausted: task {task_id} has {len(idx)} {which} rows, need {k}")
    return idx[:k]


# ---------------------------------------------------------------------------
# CSV: task_id,split,feat_0..feat_{d-1},target


class CSVFormatError(ValueError):
    pass


def write_csv_tasks(path, sources: list[TaskSource]) -> None:
    """Write regression tasks with fixed splits. Floats use ``repr`` so a reload is bit-exact."""
    if not sources:
        raise ValueError("nothing to write")
    d = sources[0].x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "split"] + [f"feat_{i}" for i in range(d)] + ["target"])
        for src in sources:
            for row in range(len(src.x)):
                split = "support" if src.fixed_split[row] == 0 else "query"
                w.writerow([src.task_id, split] + [repr(float(v)) for v in src.x[row]] + [repr(float(src.y[row, 0]))])


def load_csv_tasks(path, split_name: str = "train") -> TaskPool:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV file: {path}")
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file, header row required") from None
        for col in ("task_id", "split", "target"):
            if col not in header:
                raise CSVFormatError(f"{path}: missing required column '{col}'")
        if header[0] != "task_id" or header[1] != "split" or header[-1] != "target":
            raise CSVFormatError(f"{path}: columns must be task_id,split,feat_*,target")
        d = len(header) - 3
        if d < 1:
            raise CSVFormatError(f"{path}: no feature columns")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            split = rec[1].strip()
            if split not in ("support", "query"):
                raise CSVFormatError(f"{path}:{lineno}: split must be 'support' or 'query', got {split!r}")
            try:
                vals = [float(v) for v in rec[2:]]
            except ValueError:
                raise CSVFormatError(f"{path}:{lineno}: non-numeric feature or target") from None
            rows.setdefault(rec[0], []).append((0 if split == "support" else 1, vals))
    sources = []
    for task_id, recs in rows.items():
        flags = np.array([r[0] for r in recs])
        if not (flags == 0).any() or not (flags == 1).any():
            raise CSVFormatError(f"{path}: task {task_id!r} has an empty support or query set")
        data = np.array([r[1] for r in recs], dtype=np.float64)
        sources.append(TaskSource(x=data[:, :-1], y=data[:, -1:], task_id=task_id, fixed_split=flags))
    return TaskPool(kind="regression", generator="csv", splits={split_name: sources}, params={"path": str(path)})
