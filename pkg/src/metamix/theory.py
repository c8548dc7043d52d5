"""Numerical checks of the mixup and channel-shuffle regularization results.

The analysed model is ``f(x) = phi^T sigma(W x)`` with a fixed first layer.
Features ``F[j] = sigma(W x_j)`` are precomputed, so every loss here is
exactly quadratic in the mixed or shuffled features and the second-order
expansions can be checked to Monte-Carlo precision.

Loss conventions: the mixup side uses ``0.5 * (f - y)**2`` (the constant
``c`` carries the matching one half); the channel-shuffle side uses
``(f - y)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .augment import sample_beta

_ACTIVATIONS = {
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
    "leaky_relu": lambda z: np.where(z > 0, z, 0.01 * z),
}


@dataclass
class TwoLayerInstance:
    W: np.ndarray  # p x d
    phi: np.ndarray  # p
    X: np.ndarray  # K x d
    y: np.ndarray  # K
    classes: np.ndarray | None = None  # K ints in {0, 1}
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64).ravel()
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.W.shape != (self.phi.size, self.X.shape[1]):
            raise ValueError(f"W shape {self.W.shape} incompatible with phi {self.phi.shape} and X {self.X.shape}")
        if len(self.y) != len(self.X):
            raise ValueError("X and y lengths differ")
        if self.classes is not None:
            self.classes = np.asarray(self.classes, dtype=np.int64)
            if len(self.classes) != len(self.y):
                raise ValueError("classes and y lengths differ")
        for name in ("W", "phi", "X", "y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def features(self) -> np.ndarray:
        return _ACTIVATIONS[self.activation](self.X @ self.W.T)

    @property
    def residuals(self) -> np.ndarray:
        return self.features @ self.phi - self.y

    def with_phi(self, phi) -> "TwoLayerInstance":
        return TwoLayerInstance(self.W, phi, self.X, self.y, self.classes, self.activation)


def centered_instance(rng: np.random.Generator, k: int = 12, p: int = 5, d: int | None = None) -> TwoLayerInstance:
    """Random identity-activation instance whose features have zero mean."""
    d = p if d is None else d
    W = rng.normal(size=(p, d))
    X = rng.normal(size=(k, d))
    X -= X.mean(0)
    return TwoLayerInstance(W, rng.normal(size=p), X, rng.normal(size=k))


def class_centered_instance(rng: np.random.Generator, k0: int = 7, k1: int = 5, p: int = 6) -> TwoLayerInstance:
    """Two-class identity-activation instance with zero per-class feature means and labels 0/1."""
    X0 = rng.normal(size=(k0, p))
    X1 = 1.5 * rng.normal(size=(k1, p))
    X0 -= X0.mean(0)
    X1 -= X1.mean(0)
    W = np.eye(p)
    classes = np.r_[np.zeros(k0, dtype=np.int64), np.ones(k1, dtype=np.int64)]
    return TwoLayerInstance(W, rng.normal(size=p), np.vstack([X0, X1]), classes.astype(float), classes)


@dataclass
class TheoryReport:
    name: str
    direct_loss: float
    predicted: float
    mc_mean: float
    mc_stderr: float
    tolerance: float
    passed: bool
    c: float | None = None
    gamma: float | None = None
    rank: int | None = None
    b_proxy: float | None = None
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [
            f"[{status}] {self.name}",
            f"  L(Z)         = {self.direct_loss:.10g}",
            f"  predicted    = {self.predicted:.10g}",
            f"  monte carlo  = {self.mc_mean:.10g} +- {self.mc_stderr:.3g}",
            f"  |mc - pred|  = {abs(self.mc_mean - self.predicted):.4g} (bound {self.tolerance:.4g})",
        ]
        for key in ("c", "gamma", "rank", "b_proxy"):
            v = getattr(self, key)
            if v is not None:
                out.append(f"  {key:<12} = {v:.6g}")
        out += [f"  note: {n}" for n in self.notes]
        return out


# ---------------------------------------------------------------------------
# mixup side


def mixup_direct_loss(inst: TwoLayerInstance) -> float:
    return float(0.5 * np.mean(inst.residuals**2))


def second_moment(F: np.ndarray) -> np.ndarray:
    return F.T @ F / len(F)


def _mixture_weights(alpha: float, beta: float) -> tuple[float, tuple, tuple]:
    w = alpha / (alpha + beta)
    return w, (alpha + 1.0, beta), (beta + 1.0, alpha)


def _check_clamp(alpha, beta, eps_clamp):
    if eps_clamp < 0 or eps_clamp >= 0.5:
        raise ValueError("eps_clamp must lie in [0, 0.5)")
    if min(alpha, beta) <= 1.0 and eps_clamp == 0.0:
        raise ValueError(
            f"c = E[(1-lam)^2 / (2 lam^2)] diverges for min(alpha, beta) = {min(alpha, beta)} <= 1; pass eps_clamp > 0"
        )


def _c_integrand(lam):
    return (1.0 - lam) ** 2 / (2.0 * lam**2)


def mixup_constant(alpha: float, beta: float, eps_clamp: float = 1e-6, n_samples: int = 10**6,
                   rng: np.random.Generator | None = None) -> float:
    """Monte-Carlo ``c`` under the two-component Beta mixture, lambda clamped to ``[eps, 1 - eps]``.

    Plain sampling from ``Beta(a, b)`` has infinite variance here (the
    integrand grows like ``lam**-2``), so each component with ``a > 2`` is
    importance-sampled from ``Beta(a - 2, b + 2)``, which absorbs the
    ``(1 - lam)^2 / lam^2`` factor. Components with ``a <= 2`` only have a
    finite constant because of the clamp and are sampled directly.
    """
    _check_clamp(alpha, beta, eps_clamp)
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng() if rng is None else rng
    w, comp_a, comp_b = _mixture_weights(alpha, beta)
    n_a = int(round(w * n_samples))
    total = 0.0
    for n, (a, b), weight in ((n_a, comp_a, w), (n_samples - n_a, comp_b, 1.0 - w)):
        if n == 0:
            continue
        if a > 2.0:
            lam = sample_beta(a - 2.0, b + 2.0, rng, size=n)
            ratio = np.exp(special.betaln(a - 2.0, b + 2.0) - special.betaln(a, b))
            # importance weight p/q = ratio * lam^2 / (1 - lam)^2
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = _c_integrand(np.clip(lam, eps_clamp, 1.0 - eps_clamp)) * ratio * lam**2 / (1.0 - lam) ** 2
            vals = np.where(lam < 1.0, vals, 0.0)
        else:
            vals = _c_integrand(np.clip(sample_beta(a, b, rng, size=n), eps_clamp, 1.0 - eps_clamp))
        total += weight * float(np.mean(vals))
    return total


def mixup_constant_quad(alpha: float, beta: float, eps_clamp: float = 0.0) -> float:
    """Quadrature value of the (clamped) constant; independent of the sampler above."""
    _check_clamp(alpha, beta, eps_clamp)
    w, comp_a, comp_b = _mixture_weights(alpha, beta)
    total = 0.0
    for (a, b), weight in ((comp_a, w), (comp_b, 1.0 - w)):
        logB = special.betaln(a, b)
        pdf = lambda t, a=a, b=b, logB=logB: np.exp((a - 1) * np.log(t) + (b - 1) * np.log1p(-t) - logB)  # noqa: E731
        lo, hi = eps_clamp, 1.0 - eps_clamp
        inner, _ = integrate.quad(lambda t: _c_integrand(t) * pdf(t), lo, hi, limit=200, points=[0.5])
        if eps_clamp > 0:
            inner += _c_integrand(lo) * special.betainc(a, b, lo)
            inner += _c_integrand(hi) * (1.0 - special.betainc(a, b, hi))
        total += weight * inner
    return total


def mixup_constant_closed_form(alpha: float, beta: float) -> float:
    """Unclamped ``c`` from ``E_Beta(a,b)[(1 - t)^2 / t^2] = b (b + 1) / ((a - 1)(a - 2))``; needs ``min(alpha, beta) > 1``."""
    if min(alpha, beta) <= 1.0:
        return float("inf")
    w = alpha / (alpha + beta)
    first = beta * (beta + 1) / (alpha * (alpha - 1))
    second = alpha * (alpha + 1) / (beta * (beta - 1))
    return 0.5 * (w * first + (1.0 - w) * second)


def clamp_bias_bound(alpha: float, beta: float, eps_clamp: float) -> float:
    """``|c_clamped - c|`` when the unclamped constant is finite, else ``inf``."""
    if min(alpha, beta) <= 1.0:
        return float("inf")
    if eps_clamp == 0.0:
        return 0.0
    return abs(mixup_constant_quad(alpha, beta, eps_clamp) - mixup_constant_quad(alpha, beta, 0.0))


def mixup_regularizer_prediction(inst: TwoLayerInstance, alpha: float, beta: float, eps_clamp: float = 1e-6,
                                 mc_samples_for_c: int = 10**6, rng: np.random.Generator | None = None):
    """``(L(Z) + c * phi^T Sigma phi, c)`` with ``Sigma`` the empirical feature second moment."""
    c = mixup_constant(alpha, beta, eps_clamp, mc_samples_for_c, rng)
    F = inst.features
    reg = float(inst.phi @ second_moment(F) @ inst.phi)
    return mixup_direct_loss(inst) + c * reg, c


def _mc_summary(draws: np.ndarray) -> tuple[float, float]:
    if draws.size < 2:
        return float(draws.mean()), 0.0
    return float(draws.mean()), float(draws.std(ddof=1) / np.sqrt(draws.size))


def mixup_mc_loss(inst: TwoLayerInstance, alpha: float, beta: float, mc_samples: int,
                  rng: np.random.Generator, lam: float | None = None, chunk: int = 20000) -> tuple[float, float]:
    """Monte-Carlo symmetric mixup loss over the combined set.

    Each draw takes one ``lam ~ Beta(alpha, beta)`` (or the fixed ``lam``) and,
    for every row ``j``, a uniform partner ``j'``; the draw's value is the
    mean over ``j`` of ``0.5 * (phi^T x_mix - y_mix)^2``.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    e = inst.residuals  # the loss is quadratic in residuals after mixing
    k = len(e)
    out = np.empty(mc_samples)
    done = 0
    while done < mc_samples:
        n = min(chunk, mc_samples - done)
        lam_d = np.full(n, float(lam)) if lam is not None else sample_beta(alpha, beta, rng, size=n)
        partner = rng.integers(k, size=(n, k))
        mixed = lam_d[:, None] * e[None, :] + (1.0 - lam_d[:, None]) * e[partner]
        out[done:done + n] = 0.5 * np.mean(mixed**2, axis=1)
        done += n
    return _mc_summary(out)


def mixup_exact_loss(inst: TwoLayerInstance, alpha: float, beta: float) -> float:
    """Closed-form expectation of :func:`mixup_mc_loss` using Beta moments."""
    e = inst.residuals
    s = alpha + beta
    m1 = alpha / s
    m2 = alpha * (alpha + 1) / (s * (s + 1))  # E[lam^2]
    e_l2 = m2
    e_1ml2 = 1.0 - 2 * m1 + m2
    e_cross = m1 - m2
    return float(0.5 * ((e_l2 + e_1ml2) * np.mean(e**2) + 2 * e_cross * np.mean(e) ** 2))


def sample_mixture_lambda(alpha: float, beta: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from ``alpha/(alpha+beta) Beta(alpha+1, beta) + beta/(alpha+beta) Beta(beta+1, alpha)``."""
    w, (a1, b1), (a2, b2) = _mixture_weights(alpha, beta)
    pick = rng.random(size) < w
    return np.where(pick, sample_beta(a1, b1, rng, size), sample_beta(a2, b2, rng, size))


def mixup_reweighted_mc_loss(inst: TwoLayerInstance, alpha: float, beta: float, mc_samples: int,
                             rng: np.random.Generator, eps_clamp: float = 1e-6, chunk: int = 20000):
    """Monte-Carlo loss in the reweighted form behind the quadratic expansion.

    Each row keeps its own residual and receives the perturbation
    ``((1 - t) / t) * phi^T x_j'`` with ``t`` drawn from the Beta mixture.
    Its expectation is ``L(Z) + c * phi^T Sigma phi`` on centered features.
    The tail of ``(1 - t) / t`` is heavy, so the stderr is only indicative.
    """
    _check_clamp(alpha, beta, eps_clamp)
    e = inst.residuals
    g = inst.features @ inst.phi
    k = len(e)
    out = np.empty(mc_samples)
    done = 0
    while done < mc_samples:
        n = min(chunk, mc_samples - done)
        t = np.clip(sample_mixture_lambda(alpha, beta, rng, n), eps_clamp, 1 - eps_clamp)
        partner = rng.integers(k, size=(n, k))
        val = e[None, :] + ((1 - t) / t)[:, None] * g[partner]
        out[done:done + n] = 0.5 * np.mean(val**2, axis=1)
        done += n
    return _mc_summary(out)


# ---------------------------------------------------------------------------
# channel-shuffle side


def cf_direct_loss(inst: TwoLayerInstance) -> float:
    return float(np.mean(inst.residuals**2))


def _class_blocks(inst: TwoLayerInstance):
    if inst.classes is None:
        raise ValueError("instance has no class split")
    F = inst.features
    blocks = [F[inst.classes == k] for k in (0, 1)]
    for k, b in enumerate(blocks):
        if len(b) == 0:
            raise ValueError(f"class {k} is empty")
    return F, blocks


def class_mean_norms(inst: TwoLayerInstance) -> list[float]:
    _, blocks = _class_blocks(inst)
    return [float(np.linalg.norm(b.mean(0))) for b in blocks]


def cf_regularizer_prediction(inst: TwoLayerInstance, delta: float, form: str = "exact", atol: float = 1e-9) -> float:
    """Expected shuffled loss on class-centered features.

    ``form="exact"`` is the full expectation: with ``a = (1 - delta) / delta``
    and ``M_k`` the class-``k`` feature second moment,

        L(Z) + a phi^T diag(mean_j x_j^2) phi + a^2 phi^T Mbar phi + a phi^T diag(Mbar) phi,

    where ``Mbar = (K0 M1 + K1 M0) / K`` weights each class's partner moment
    by the rows that draw from it. ``form="paper"`` gives the published
    two-term expression ``L(Z) + a phi^T diag(mean_j x_j^2) phi + a phi^T (M0 + M1) phi``
    for comparison; it differs from the expectation in general.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    F, blocks = _class_blocks(inst)
    norms = [float(np.linalg.norm(b.mean(0))) for b in blocks]
    scale = max(1.0, float(np.abs(F).max()))
    if max(norms) > atol * scale:
        raise ValueError(f"class feature means are not zero (norms {norms[0]:.3g}, {norms[1]:.3g})")
    a = (1.0 - delta) / delta
    phi = inst.phi
    L = cf_direct_loss(inst)
    diag_all = np.mean(F**2, axis=0)
    M0, M1 = (second_moment(b) for b in blocks)
    if form == "paper":
        return float(L + a * phi @ (diag_all * phi) + a * phi @ (M0 + M1) @ phi)
    if form != "exact":
        raise ValueError("form must be 'exact' or 'paper'")
    k0, k1 = len(blocks[0]), len(blocks[1])
    Mbar = (k0 * M1 + k1 * M0) / (k0 + k1)
    return float(L + a * phi @ (diag_all * phi) + a * a * phi @ Mbar @ phi + a * phi @ (np.diag(Mbar) * phi))


def shuffled_features(inst: TwoLayerInstance, delta: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws of the scaled shuffled feature matrix, shape ``(n, K, p)``.

    Each draw uses one mask ``r_t ~ Bernoulli(delta)`` and, per row, a uniform
    partner from the other class.
    """
    F, blocks = _class_blocks(inst)
    K, p = F.shape
    R = (rng.random((n, 1, p)) < delta).astype(np.float64)
    partner_feats = np.empty((n, K, p))
    for k in (0, 1):
        rows = np.flatnonzero(inst.classes == k)
        other = blocks[1 - k]
        idx = rng.integers(len(other), size=(n, len(rows)))
        partner_feats[:, rows, :] = other[idx]
    return (R * F[None] + (1.0 - R) * partner_feats) / delta


def cf_enumerated_loss(inst: TwoLayerInstance, delta: float, max_p: int = 12) -> float:
    """Exact ``E L(Z^cf)`` by enumerating every mask and partner; exponential in ``p``."""
    F, blocks = _class_blocks(inst)
    p = F.shape[1]
    if p > max_p:
        raise ValueError(f"enumeration over 2^{p} masks refused (max_p={max_p})")
    masks = ((np.arange(2**p)[:, None] >> np.arange(p)) & 1).astype(np.float64)
    probs = np.prod(np.where(masks == 1.0, delta, 1.0 - delta), axis=1)
    total = 0.0
    for j in range(len(F)):
        other = blocks[1 - int(inst.classes[j])]
        x = (masks[:, None, :] * F[j] + (1.0 - masks[:, None, :]) * other[None]) / delta
        sq = ((x @ inst.phi) - inst.y[j]) ** 2  # masks x partners
        total += float(probs @ sq.mean(axis=1))
    return total / len(F)


def cf_mc_loss(inst: TwoLayerInstance, delta: float, mc_samples: int, rng: np.random.Generator,
               chunk: int = 5000) -> tuple[float, float]:
    """Monte-Carlo ``E L(Z^cf)`` with the squared loss."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    _class_blocks(inst)
    out = np.empty(mc_samples)
    done = 0
    while done < mc_samples:
        n = min(chunk, mc_samples - done)
        X = shuffled_features(inst, delta, rng, n)
        out[done:done + n] = np.mean((X @ inst.phi - inst.y[None, :]) ** 2, axis=1)
        done += n
    return _mc_summary(out)


# ---------------------------------------------------------------------------
# capacity quantities


def capacity_quantities(H: np.ndarray, head: np.ndarray, cutoff: float = 1e-10) -> tuple[float, int, float]:
    """``(gamma, rank, B-proxy)`` for features ``H`` (n x p) and head ``head`` (p or p x o).

    ``gamma = tr(head^T Sigma head)`` with ``Sigma = H^T H / n``; ``rank``
    counts eigenvalues above ``cutoff * max eigenvalue``; the B-proxy is
    ``|| Sigma^{+1/2} mean(H) ||`` through the same truncated eigensystem.
    """
    H = np.asarray(H, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    if head.ndim == 1:
        head = head[:, None]
    sigma = second_moment(H)
    gamma = float(np.trace(head.T @ sigma @ head))
    vals, vecs = np.linalg.eigh(sigma)
    top = vals.max() if vals.size else 0.0
    if top <= 0:
        return max(gamma, 0.0), 0, 0.0
    keep = vals > cutoff * top
    rank = int(keep.sum())
    mu = H.mean(0)
    proj = vecs[:, keep].T @ mu
    b = float(np.linalg.norm(proj / np.sqrt(vals[keep])))
    return max(gamma, 0.0), rank, b


@dataclass
class CapacityTrack:
    gammas: list[float]
    ranks: list[int]
    b_proxies: list[float]

    @property
    def median_gamma(self) -> float:
        return float(np.median(self.gammas))


def track_capacity(model, phis, tasks) -> CapacityTrack:
    """Capacity quantities per task from query features under each adapted parameter set.

    Features are the penultimate-layer activations and the head is the last
    weight matrix (its bias is excluded, matching the bias-free analysed model).
    """
    from . import autodiff as ad

    gammas, ranks, bs = [], [], []
    last = model.n_layers - 1
    for phi, task in zip(phis, tasks):
        with ad.no_graph():
            H = model.forward_to_layer(phi, task.xq, last).value
        head = phi.arrays()[2 * last]
        g, r, b = capacity_quantities(H, head)
        gammas.append(g)
        ranks.append(r)
        bs.append(b)
    return CapacityTrack(gammas, ranks, bs)


# ---------------------------------------------------------------------------
# suite runners


def verify_lemma1(n_instances: int = 10, alpha: float = 2.0, beta: float = 2.0, mc_samples: int = 10**6,
                  eps_clamp: float = 1e-6, seed: int = 0, k_max: int = 16, p_max: int = 8) -> list[TheoryReport]:
    """Literal Monte-Carlo mixup loss against ``L(Z) + c phi^T Sigma phi`` on random centered instances."""
    _check_clamp(alpha, beta, eps_clamp)
    rng = np.random.default_rng([seed, 101])
    mc_rng = np.random.default_rng([seed, 201])
    bias = clamp_bias_bound(alpha, beta, eps_clamp)
    reports = []
    for i in range(n_instances):
        k = int(rng.integers(6, k_max + 1))
        p = int(rng.integers(2, p_max + 1))
        inst = centered_instance(rng, k, p)
        pred, c = mixup_regularizer_prediction(inst, alpha, beta, eps_clamp, rng=mc_rng)
        mean, se = mixup_mc_loss(inst, alpha, beta, mc_samples, mc_rng)
        tol = 3 * se + bias * float(inst.phi @ second_moment(inst.features) @ inst.phi)
        zero = inst.with_phi(np.zeros_like(inst.phi))
        pred0, _ = mixup_regularizer_prediction(zero, alpha, beta, eps_clamp, mc_samples_for_c=1000, rng=mc_rng)
        exact_zero = abs(pred0 - mixup_direct_loss(zero)) <= 1e-12
        reweighted, rw_se = mixup_reweighted_mc_loss(inst, alpha, beta, min(mc_samples, 200000), mc_rng, eps_clamp)
        gamma, rank, b = capacity_quantities(inst.features, inst.phi)
        reports.append(TheoryReport(
            name=f"mixup regularizer, instance {i} (K={k}, p={p}, alpha={alpha}, beta={beta})",
            direct_loss=mixup_direct_loss(inst), predicted=pred, mc_mean=mean, mc_stderr=se, tolerance=tol,
            passed=abs(mean - pred) <= tol and exact_zero, c=c, gamma=gamma, rank=rank, b_proxy=b,
            notes=[
                f"closed-form mixed loss {mixup_exact_loss(inst, alpha, beta):.10g}",
                f"reweighted-form MC {reweighted:.6g} +- {rw_se:.2g}",
                f"phi=0 prediction equals L(Z): {exact_zero}",
            ],
        ))
    return reports


def verify_theorem2(n_instances: int = 10, deltas=(0.6, 0.8, 0.95), mc_samples: int = 10**6, seed: int = 0,
                    form: str = "exact") -> list[TheoryReport]:
    rng = np.random.default_rng([seed, 102])
    mc_rng = np.random.default_rng([seed, 202])
    reports = []
    for i in range(n_instances):
        k0, k1 = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        p = int(rng.integers(2, 9))
        inst = class_centered_instance(rng, k0, k1, p)
        L = cf_direct_loss(inst)
        exact_one = abs(cf_regularizer_prediction(inst, 1.0, form) - L) <= 1e-12
        for d in deltas:
            pred = cf_regularizer_prediction(inst, d, form)
            mean, se = cf_mc_loss(inst, d, mc_samples, mc_rng)
            reports.append(TheoryReport(
                name=f"channel-shuffle regularizer, instance {i} (K0={k0}, K1={k1}, p={p}, delta={d})",
                direct_loss=L, predicted=pred, mc_mean=mean, mc_stderr=se, tolerance=3 * se,
                passed=abs(mean - pred) <= 3 * se and exact_one,
                notes=[f"published two-term form {cf_regularizer_prediction(inst, d, 'paper'):.10g}",
                       f"delta=1 prediction equals L(Z): {exact_one}"],
            ))
    return reports
