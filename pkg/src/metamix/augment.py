"""Task augmentation strategies for the outer loop.

Everything here is a pure function of its inputs plus an explicit
``numpy.random.Generator``. Feature matrices may be arrays or graph nodes;
mixing and shuffling are built from differentiable ops so gradients reach
the parameters that produced the features.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .tasks import Task


class Strategy(str, Enum):
    NONE = "None"
    METAMIX = "MetaMix"
    CHANNEL_SHUFFLE = "ChannelShuffle"
    MMCF = "MMCF"
    MIX_SS = "MixSS"
    MIX_QQ = "MixQQ"
    CONCAT = "Concat"
    SET_SHUFFLE = "SetShuffle"
    META_AUG = "MetaAug"
    MIX_ALL = "MixAll"
    # symmetric mixup over the concatenated support+query set
    MIX_COB = "MixCob"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        for s in cls:
            if s.value == name:
                return s
        raise ValueError(f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}")


MIXING = {Strategy.METAMIX, Strategy.MMCF, Strategy.MIX_SS, Strategy.MIX_QQ, Strategy.MIX_ALL, Strategy.MIX_COB}
SHUFFLING = {Strategy.CHANNEL_SHUFFLE, Strategy.MMCF}
LAYERED = MIXING | SHUFFLING


@dataclass(frozen=True)
class AugmentSpec:
    strategy: Strategy = Strategy.NONE
    alpha: float = 0.5
    beta: float = 0.5
    layers: tuple[int, ...] | None = None  # None: every layer 0..L-1
    delta: float = 0.8
    noise_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.strategy, str) and not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta parameters must be positive")
        if not 0.5 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0.5, 1]")
        if self.layers is not None:
            if len(self.layers) == 0:
                raise ValueError("candidate layer set must be nonempty")
            object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))

    def candidate_layers(self, n_layers: int) -> tuple[int, ...]:
        layers = self.layers if self.layers is not None else tuple(range(n_layers))
        bad = [l for l in layers if not 0 <= l <= n_layers - 1]
        if bad:
            raise ValueError(f"candidate layers {bad} outside [0, {n_layers - 1}]")
        return layers


# ---------------------------------------------------------------------------
# Beta sampling through Gamma variates


def sample_gamma(shape: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Marsaglia-Tsang squeeze/rejection sampler, unit scale.

    Shapes below one are boosted: ``G(a) = G(a + 1) * U**(1/a)``.
    """
    if shape <= 0:
        raise ValueError("gamma shape must be positive")
    if shape < 1.0:
        g = sample_gamma(shape + 1.0, rng, size)
        u = rng.random(size)
        return g * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        n = int(need * 1.1) + 16
        x = rng.standard_normal(n)
        v = (1.0 + c * x) ** 3
        u = rng.random(n)
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            logv = np.log(np.where(ok, v, 1.0))
        accept = ok & (
            (u < 1.0 - 0.0331 * x**4) | (np.log(u) < 0.5 * x**2 + d * (1.0 - v + logv))
        )
        got = (d * v)[accept][:need]
        out[filled:filled + len(got)] = got
        filled += len(got)
    return out


def sample_beta(alpha: float, beta: float, rng: np.random.Generator, size: int | None = None):
    """Beta(alpha, beta) draws as ``X / (X + Y)`` with independent Gamma variates."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta parameters must be positive")
    n = 1 if size is None else int(size)
    x = sample_gamma(alpha, rng, n)
    y = sample_gamma(beta, rng, n)
    lam = x / (x + y)
    return float(lam[0]) if size is None else lam


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixedBatch:
    """``x[j] = lam[j] * a[idx_a[j]] + (1 - lam[j]) * b[idx_b[j]]``, same for ``y``."""

    x: object
    y: np.ndarray
    layer: int
    lam: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray


def _as_node(h) -> Node:
    return h if isinstance(h, Node) else ad.constant(h)


def _width(h) -> int:
    return (h.value if isinstance(h, Node) else np.asarray(h)).shape[1]


def mix_pairs(ha, ya, idx_a, hb, yb, idx_b, lam, layer: int = 0) -> MixedBatch:
    if _width(ha) != _width(hb):
        raise ValueError(f"cannot mix representations of width {_width(ha)} and {_width(hb)}")
    lam = np.asarray(lam, dtype=np.float64)
    idx_a = np.asarray(idx_a, dtype=np.int64)
    idx_b = np.asarray(idx_b, dtype=np.int64)
    x = ad.mix_rows(ad.index_rows(_as_node(ha), idx_a), ad.index_rows(_as_node(hb), idx_b), lam)
    y = lam[:, None] * np.asarray(ya)[idx_a] + (1.0 - lam[:, None]) * np.asarray(yb)[idx_b]
    return MixedBatch(x, y, layer, lam, idx_a, idx_b)


def metamix_partners(k_support: int, k_query: int, rng: np.random.Generator) -> np.ndarray:
    """Support row paired with each query row: aligned when sizes match, else uniform resampling."""
    if k_support == k_query:
        return np.arange(k_query)
    return rng.integers(k_support, size=k_query)


def metamix(hs, ys, hq, yq, lam, rng: np.random.Generator, layer: int = 0) -> MixedBatch:
    """Mix support into query row by row; one output row per query row."""
    ks = (hs.value if isinstance(hs, Node) else np.asarray(hs)).shape[0]
    kq = len(yq)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (kq,):
        raise ValueError(f"need {kq} mixing coefficients, got {lam.shape}")
    partner = metamix_partners(ks, kq, rng)
    return mix_pairs(hs, ys, partner, hq, yq, np.arange(kq), lam, layer)


def within_set_mixup(h, y, lam, rng: np.random.Generator, layer: int = 0) -> MixedBatch:
    """Mixup of a set with itself; each row's partner is uniform over the set."""
    n = len(y)
    partner = rng.integers(n, size=n)
    return mix_pairs(h, y, np.arange(n), h, y, partner, lam, layer)


# ---------------------------------------------------------------------------
# channel shuffle


def draw_pairing(classes, rng: np.random.Generator) -> dict[int, int]:
    """Pair every class with a uniformly drawn different class."""
    classes = sorted(int(c) for c in np.unique(classes))
    if len(classes) < 2:
        raise ValueError("channel shuffle needs at least two classes")
    pairing = {}
    for c in classes:
        others = [o for o in classes if o != c]
        pairing[c] = others[int(rng.integers(len(others)))]
    return pairing


def draw_masks(pairing: dict[int, int], width: int, delta: float, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Keep-masks ``r_t ~ Bernoulli(delta)``, one per (c, c') pair, keyed by ``c``."""
    return {c: (rng.random(width) < delta).astype(np.float64) for c in sorted(pairing)}


@dataclass
class Shuffled:
    h: object
    y: np.ndarray
    partner: np.ndarray
    mask: np.ndarray  # per-row keep mask, shape (n, width)


def channel_shuffle(h, y, classes, pairing, masks, rng: np.random.Generator) -> Shuffled:
    """Replace the channels dropped by each class's mask with those of a random row of its paired class.

    Labels pass through unchanged.
    """
    classes = np.asarray(classes)
    width = _width(h)
    n = len(classes)
    partner = np.empty(n, dtype=np.int64)
    row_mask = np.empty((n, width))
    rows_of = {int(c): np.flatnonzero(classes == c) for c in np.unique(classes)}
    for c, rows in rows_of.items():
        if c not in pairing:
            raise ValueError(f"class {c} has no pairing")
        mate = rows_of.get(pairing[c])
        if mate is None or len(mate) == 0:
            raise ValueError(f"paired class {pairing[c]} of class {c} has no rows")
        m = masks[c]
        if m.shape != (width,):
            raise ValueError(f"mask width {m.shape} does not match representation width {width}")
        partner[rows] = mate[rng.integers(len(mate), size=len(rows))]
        row_mask[rows] = m
    node = _as_node(h)
    out = ad.add(ad.mul_const(node, row_mask), ad.mul_const(ad.index_rows(node, partner), 1.0 - row_mask))
    return Shuffled(out, np.asarray(y), partner, row_mask)


def mmcf(hs, ys, cs, hq, yq, cq, lam, pairing, masks, rng, shuffle_rng, layer: int = 0) -> MixedBatch:
    """Channel-shuffle both sets with shared masks, then MetaMix the shuffled sets.

    MetaMix randomness comes from ``rng`` and is drawn first; shuffle
    randomness comes from ``shuffle_rng``.
    """
    partner = metamix_partners(len(ys), len(yq), rng)
    s = channel_shuffle(hs, ys, cs, pairing, masks, shuffle_rng)
    q = channel_shuffle(hq, yq, cq, pairing, masks, shuffle_rng)
    return mix_pairs(s.h, s.y, partner, q.h, q.y, np.arange(len(yq)), lam, layer)


# ---------------------------------------------------------------------------
# per-task planning and outer-batch dispatch


@dataclass
class TaskPlan:
    task: Task
    layer: int = 0
    lam: np.ndarray | None = None
    pairing: dict | None = None
    masks: dict | None = None


def set_shuffle(task: Task, rng: np.random.Generator) -> Task:
    """Re-draw support/query membership, keeping set sizes (per class for classification)."""
    x = np.concatenate([task.xs, task.xq])
    y = np.concatenate([task.ys, task.yq])
    if task.kind == "classification":
        labels = np.argmax(y, axis=1)
        ks = np.bincount(task.class_s, minlength=y.shape[1])
        s_idx, q_idx = [], []
        for c in range(y.shape[1]):
            rows = rng.permutation(np.flatnonzero(labels == c))
            s_idx.append(rows[:ks[c]])
            q_idx.append(rows[ks[c]:])
        s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    else:
        perm = rng.permutation(len(x))
        s_idx, q_idx = perm[:task.k_support], perm[task.k_support:]
    return replace(task, xs=x[s_idx], ys=y[s_idx], xq=x[q_idx], yq=y[q_idx])


def meta_aug(task: Task, noise_scale: float, rng: np.random.Generator) -> Task:
    """Apply one shared label transform to support and query.

    Regression: a single Gaussian offset added to every target. Classification:
    a single random permutation of the label indices.
    """
    if task.kind == "classification":
        perm = rng.permutation(task.ys.shape[1])
        return replace(task, ys=task.ys[:, perm], yq=task.yq[:, perm])
    shift = noise_scale * rng.standard_normal()
    return replace(task, ys=task.ys + shift, yq=task.yq + shift)


def _lam_rows(strategy: Strategy, task: Task) -> int:
    if strategy in (Strategy.METAMIX, Strategy.MMCF, Strategy.MIX_QQ, Strategy.MIX_ALL):
        return task.k_query
    if strategy is Strategy.MIX_SS:
        return task.k_support
    if strategy is Strategy.MIX_COB:
        return task.k_support + task.k_query
    return 0


def plan_task(spec: AugmentSpec, task: Task, n_layers: int, rng, shuffle_rng) -> TaskPlan:
    """Draw the per-task augmentation randomness that must exist before adaptation.

    SetShuffle and MetaAug rewrite the task itself here, since they change
    what the inner loop sees.
    """
    s = spec.strategy
    if s in SHUFFLING and task.kind != "classification":
        raise ValueError(f"{s.value} requires a classification task")
    if s is Strategy.SET_SHUFFLE:
        return TaskPlan(set_shuffle(task, rng))
    if s is Strategy.META_AUG:
        return TaskPlan(meta_aug(task, spec.noise_scale, rng))
    if s not in LAYERED:
        return TaskPlan(task)
    layers = spec.candidate_layers(n_layers)
    layer = layers[int(rng.integers(len(layers)))]
    lam = None
    if s in MIXING:
        lam = sample_beta(spec.alpha, spec.beta, rng, size=_lam_rows(s, task))
    pairing = masks = None
    if s in SHUFFLING:
        pairing = draw_pairing(task.class_s, shuffle_rng)
        masks = None  # width known only once features exist; drawn lazily
    return TaskPlan(task, layer, lam, pairing, masks)


def ensure_masks(plan: TaskPlan, width: int, delta: float, shuffle_rng) -> dict:
    if plan.masks is None:
        plan.masks = draw_masks(plan.pairing, width, delta, shuffle_rng)
    return plan.masks


@dataclass
class OuterBatch:
    h: object
    y: np.ndarray
    layer: int
    mixed: MixedBatch | None = None


Tap = Callable[[np.ndarray, int], Node]


def build_outer_batch(
    spec: AugmentSpec,
    plan: TaskPlan,
    tap: Tap,
    rng: np.random.Generator,
    shuffle_rng: np.random.Generator,
    batch_pool: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[OuterBatch]:
    """Outer-loop batch(es) for one task under the adapted parameters.

    ``tap(X, l)`` forwards raw inputs to layer ``l`` under the task's adapted
    parameters. ``batch_pool`` is the (X, Y) of every task in the meta-batch,
    needed only by MixAll.
    """
    s = spec.strategy
    t = plan.task
    l = plan.layer
    if s in (Strategy.NONE, Strategy.SET_SHUFFLE, Strategy.META_AUG):
        return [OuterBatch(tap(t.xq, 0), t.yq, 0)]
    if s is Strategy.CONCAT:
        return [OuterBatch(tap(np.concatenate([t.xq, t.xs]), 0), np.concatenate([t.yq, t.ys]), 0)]

    hs, hq = tap(t.xs, l), tap(t.xq, l)
    if s is Strategy.METAMIX:
        mb = metamix(hs, t.ys, hq, t.yq, plan.lam, rng, l)
    elif s is Strategy.MIX_SS:
        mb = within_set_mixup(hs, t.ys, plan.lam, rng, l)
    elif s is Strategy.MIX_QQ:
        mb = within_set_mixup(hq, t.yq, plan.lam, rng, l)
    elif s is Strategy.MIX_COB:
        mb = within_set_mixup(ad.concat_rows(hs, hq), np.concatenate([t.ys, t.yq]), plan.lam, rng, l)
    elif s is Strategy.MIX_ALL:
        if batch_pool is None:
            raise ValueError("MixAll needs the meta-batch pool")
        px, py = batch_pool
        hp = tap(px, l)
        partner = rng.integers(len(py), size=t.k_query)
        mb = mix_pairs(hq, t.yq, np.arange(t.k_query), hp, py, partner, plan.lam, l)
    elif s in SHUFFLING:
        masks = ensure_masks(plan, _width(hq), spec.delta, shuffle_rng)
        if s is Strategy.MMCF:
            mb = mmcf(hs, t.ys, t.class_s, hq, t.yq, t.class_q, plan.lam, plan.pairing, masks, rng, shuffle_rng, l)
        else:
            q = channel_shuffle(hq, t.yq, t.class_q, plan.pairing, masks, shuffle_rng)
            return [OuterBatch(q.h, q.y, l)]
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unhandled strategy {s}")
    return [OuterBatch(mb.x, mb.y, l, mb)]
