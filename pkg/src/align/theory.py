"""Exact numerical checks of the feature-selection lemmas on small toy
constructions.

Every expectation is an exact sum over a finite support, so the only error
is floating-point rounding. Each ``check_*`` returns a :class:`LemmaReport`;
the ``run_*`` helpers draw many random constructions and aggregate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

TOL = 1e-12
STRICT_MARGIN = 1e-9


@dataclass
class LemmaReport:
    lemma: str
    trials: int = 0
    violations: int = 0
    slacks: list = field(default_factory=list, repr=False)
    vacuous: int = 0
    details: dict = field(default_factory=dict)

    def merge(self, other: "LemmaReport") -> "LemmaReport":
        self.trials += other.trials
        self.violations += other.violations
        self.slacks.extend(other.slacks)
        self.vacuous += other.vacuous
        return self

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        s = np.asarray(self.slacks, dtype=np.float64)
        stats = {"min": float(s.min()), "mean": float(s.mean()), "max": float(s.max())} if s.size else \
            {"min": None, "mean": None, "max": None}
        return {"lemma": self.lemma, "trials": self.trials, "violations": self.violations,
                "vacuous": self.vacuous, "slack": stats, "details": self.details}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- sensitivity of models that ignore the background ------------------------------


@dataclass
class LinearPairModels:
    """Three scalar models ``squash(w . x)`` on ``x in [-1, 1]^d``.

    ``w1`` may use any coordinate, ``w2`` only object coordinates and ``w3``
    only the ``sub`` subset. With ``squash="linear"`` the weights must have
    L1 norm <= 1 so that |f| <= 1 on the cube; ``tanh`` bounds |f| by itself.
    """

    d: int
    obj: tuple
    bg: tuple
    sub: tuple
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    squash: str = "tanh"

    def __post_init__(self):
        self.obj, self.bg, self.sub = (tuple(int(i) for i in s) for s in (self.obj, self.bg, self.sub))
        self.w1, self.w2, self.w3 = (np.asarray(w, dtype=np.float64) for w in (self.w1, self.w2, self.w3))
        if set(self.obj) & set(self.bg) or sorted(self.obj + self.bg) != list(range(self.d)):
            raise ValueError("obj and bg must partition range(d)")
        if not set(self.sub) < set(self.obj):
            raise ValueError("sub must be a strict subset of obj")
        for name, w in (("w1", self.w1), ("w2", self.w2), ("w3", self.w3)):
            if w.shape != (self.d,):
                raise ValueError(f"{name} has shape {w.shape}, expected ({self.d},)")
        if np.any(self.w2[list(self.bg)] != 0):
            raise ValueError("w2 must be zero on background coordinates")
        outside_sub = [i for i in range(self.d) if i not in self.sub]
        if np.any(self.w3[outside_sub] != 0):
            raise ValueError("w3 must be zero outside sub")
        if self.squash not in ("tanh", "linear"):
            raise ValueError(f"squash must be 'tanh' or 'linear', got {self.squash!r}")
        if self.squash == "linear" and max(np.abs(w).sum() for w in (self.w1, self.w2, self.w3)) > 1 + TOL:
            raise ValueError("linear models need ||w||_1 <= 1 to stay within [-1, 1]")

    def f(self, which: int, x: np.ndarray) -> np.ndarray:
        z = np.asarray(x, dtype=np.float64) @ (self.w1, self.w2, self.w3)[which - 1]
        return np.tanh(z) if self.squash == "tanh" else z

    @property
    def bg_sensitive(self) -> bool:
        return bool(np.any(self.w1[list(self.bg)] != 0))


def random_linear_models(rng: np.random.Generator, d: int = 10, n_obj: int | None = None,
                         n_sub: int | None = None) -> LinearPairModels:
    n_obj = n_obj if n_obj is not None else d // 2
    n_sub = n_sub if n_sub is not None else max(1, n_obj // 2)
    perm = rng.permutation(d)
    obj, bg = sorted(perm[:n_obj]), sorted(perm[n_obj:])
    sub = sorted(rng.choice(obj, size=n_sub, replace=False))
    w1 = rng.normal(size=d) / np.sqrt(d)
    w2 = w1.copy()
    w2[bg] = 0.0
    w3 = np.zeros(d)
    w3[sub] = w1[sub]
    return LinearPairModels(d, tuple(obj), tuple(bg), tuple(sub), w1, w2, w3)


def check_lemma1(models: LinearPairModels, trials: int, rng: np.random.Generator) -> LemmaReport:
    """Sample background-only shifts and compare |df2| with |df1| (and the local Lipschitz ratios)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report = LemmaReport("lemma1")
    bg = list(models.bg)
    if not models.bg_sensitive:
        # no background slope in f1: both differences vanish, nothing strict to assert
        report.vacuous = trials
        report.trials = trials
        report.details["vacuous_reason"] = "w1 has no background support"
        return report
    for _ in range(trials):
        x_s = rng.uniform(-1, 1, size=models.d)
        x_t = x_s.copy()
        while True:
            x_t[bg] = rng.uniform(-1, 1, size=len(bg))
            if np.any(x_t != x_s):
                break
        df1 = abs(models.f(1, x_t) - models.f(1, x_s))
        df2 = abs(models.f(2, x_t) - models.f(2, x_s))
        norm = np.linalg.norm(x_t - x_s)
        k1, k2 = df1 / norm, df2 / norm
        report.trials += 1
        report.slacks.append(float(df1 - df2))
        if not (df2 < df1 and k2 < k1):
            report.violations += 1
    return report


# -- toy distributions -------------------------------------------------------------


@dataclass
class ToyDistribution:
    """Joint tables ``P[obj, bg, y]`` for a source and a target domain.

    ``sub_of_obj[o]`` is the value of the sub-feature carried by object value
    ``o``, so the sub-feature is a deterministic function of the object.
    """

    y_values: np.ndarray
    source: np.ndarray
    target: np.ndarray
    sub_of_obj: np.ndarray | None = None
    shared_conditional: bool = True

    def __post_init__(self):
        self.y_values = np.asarray(self.y_values, dtype=np.float64)
        self.source = np.asarray(self.source, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.source.ndim != 3 or self.source.shape != self.target.shape:
            raise ValueError(f"tables must share a 3-d shape, got {self.source.shape} and {self.target.shape}")
        if self.source.shape[2] != len(self.y_values):
            raise ValueError("last table axis must index y_values")
        for name, t in (("source", self.source), ("target", self.target)):
            if np.any(t < 0) or abs(t.sum() - 1) > TOL:
                raise ValueError(f"{name} table must be nonnegative and sum to 1 (sum={t.sum()!r})")
        if self.sub_of_obj is None:
            self.sub_of_obj = np.arange(self.source.shape[0])
        self.sub_of_obj = np.asarray(self.sub_of_obj, dtype=np.int64)
        if self.sub_of_obj.shape != (self.source.shape[0],):
            raise ValueError("sub_of_obj needs one entry per object value")
        if self.shared_conditional:
            gap = self.conditional_gap()
            if gap > TOL:
                raise ValueError(f"P(y | obj) differs between domains by {gap:.3g}")

    @property
    def n_obj(self) -> int:
        return self.source.shape[0]

    @staticmethod
    def y_given_obj(table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(P(obj), P(y | obj))``; rows with zero mass are left as zeros."""
        joint = table.sum(axis=1)
        p_obj = joint.sum(axis=1)
        cond = np.divide(joint, p_obj[:, None], out=np.zeros_like(joint), where=p_obj[:, None] > 0)
        return p_obj, cond

    def conditional_gap(self) -> float:
        ps, cs = self.y_given_obj(self.source)
        pt, ct = self.y_given_obj(self.target)
        both = (ps > 0) & (pt > 0)
        return float(np.abs(cs[both] - ct[both]).max()) if both.any() else 0.0


def random_toy_distribution(rng: np.random.Generator, n_obj: int = 4, n_bg: int = 3,
                            y_values=None, n_sub: int = 2) -> ToyDistribution:
    """Dirichlet tables; the target is rescaled so that P_T(y | obj) equals P_S(y | obj)."""
    y_values = rng.uniform(-1, 1, size=3) if y_values is None else np.asarray(y_values, dtype=np.float64)
    shape = (n_obj, n_bg, len(y_values))
    source = rng.dirichlet(np.ones(np.prod(shape))).reshape(shape)
    target = rng.dirichlet(np.ones(np.prod(shape))).reshape(shape)
    _, cs = ToyDistribution.y_given_obj(source)
    _, ct = ToyDistribution.y_given_obj(target)
    target = target * (cs / ct)[:, None, :]
    target /= target.sum()
    sub = np.concatenate([np.arange(n_sub), rng.integers(0, n_sub, size=n_obj - n_sub)])
    return ToyDistribution(y_values, source, target, sub_of_obj=rng.permutation(sub))


def _expect(table: np.ndarray, values: np.ndarray) -> float:
    return float(np.sum(table * values))


def check_lemma2(dist: ToyDistribution, f: np.ndarray) -> LemmaReport:
    """MSE discrepancy against ``4 |E_T f - E_S f| + |E_T y^2 - E_S y^2|``.

    ``f`` is a predictor table indexed by ``(obj, bg)``.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != dist.source.shape[:2]:
        raise ValueError(f"predictor table {f.shape} does not match (obj, bg) = {dist.source.shape[:2]}")
    if np.any(np.abs(f) > 1) or np.any(np.abs(dist.y_values) > 1):
        raise ValueError("the bound needs |f| <= 1 and |y| <= 1")
    if not dist.shared_conditional:
        raise ValueError("the bound assumes a shared P(y | obj); construct the distribution with the flag set")
    y = dist.y_values[None, None, :]
    sq_err = (f[:, :, None] - y) ** 2
    delta = abs(_expect(dist.target, sq_err) - _expect(dist.source, sq_err))
    mean_gap = abs(_expect(dist.target.sum(2), f) - _expect(dist.source.sum(2), f))
    y2_gap = abs(_expect(dist.target, np.broadcast_to(y ** 2, dist.source.shape))
                 - _expect(dist.source, np.broadcast_to(y ** 2, dist.source.shape)))
    bound = 4 * mean_gap + y2_gap
    report = LemmaReport("lemma2", trials=1)
    report.slacks.append(bound - delta)
    report.details = {"delta_mse": delta, "bound": bound, "label_second_moment_gap": y2_gap}
    if delta > bound + TOL:
        report.violations = 1
    if y2_gap <= TOL:
        report.details["simplified_checked"] = 1
        if delta > 4 * mean_gap + TOL:
            report.violations = 1
    return report


# -- cross-entropy stability --------------------------------------------------------


@dataclass
class PairedConstruction:
    """Weighted pairs ``(x_S, x_T)``; ``f_source[i]`` and ``f_target[i]`` are the
    probabilities given to the true label of pair ``i`` in each domain."""

    weights: np.ndarray
    f_source: np.ndarray
    f_target: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.f_source = np.asarray(self.f_source, dtype=np.float64)
        self.f_target = np.asarray(self.f_target, dtype=np.float64)
        if not (self.weights.shape == self.f_source.shape == self.f_target.shape) or self.weights.ndim != 1:
            raise ValueError("weights and probability vectors must be 1-d and equal length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        for p in (self.f_source, self.f_target):
            if np.any(p < 0) or np.any(p > 1):
                raise ValueError("probabilities must lie in [0, 1]")


def random_pair_construction(rng: np.random.Generator, n: int = 6, epsilon: float | None = None,
                             p_floor: float = 0.05) -> tuple[PairedConstruction, float]:
    epsilon = rng.uniform(0, 0.2) if epsilon is None else epsilon
    f_s = rng.uniform(p_floor, 1.0, size=n)
    f_t = np.clip(f_s + rng.uniform(-epsilon, epsilon, size=n), p_floor, 1.0)
    return PairedConstruction(rng.dirichlet(np.ones(n)), f_s, f_t), float(epsilon)


def check_lemma3(pairs: PairedConstruction, epsilon: float) -> LemmaReport:
    if np.any(np.abs(pairs.f_target - pairs.f_source) > epsilon + TOL):
        raise ValueError("pairs differ by more than epsilon")
    p_min = float(min(pairs.f_source.min(), pairs.f_target.min()))
    if p_min <= 0:
        raise ValueError("p_min must be positive for the constant C = 1 / p_min")
    ce_s = _expect(pairs.weights, -np.log(pairs.f_source))
    ce_t = _expect(pairs.weights, -np.log(pairs.f_target))
    delta = abs(ce_t - ce_s)
    bound = epsilon / p_min
    report = LemmaReport("lemma3", trials=1, slacks=[bound - delta],
                         details={"delta_ce": delta, "C": 1 / p_min, "bound": bound})
    if delta > bound + TOL:
        report.violations = 1
    return report


# -- in-domain risk of nested feature sets ---------------------------------------


def _risks(p_feat_y: np.ndarray, y_values: np.ndarray):
    """Bayes squared risk, E[Var(y | feature)] and H(y | feature) from P(feature, y)."""
    p_feat = p_feat_y.sum(1)
    cond = np.divide(p_feat_y, p_feat[:, None], out=np.zeros_like(p_feat_y), where=p_feat[:, None] > 0)
    mean = cond @ y_values
    var = cond @ y_values ** 2 - mean ** 2
    mse = float(np.sum(p_feat_y * (y_values[None, :] - mean[:, None]) ** 2))
    logs = np.log(cond, out=np.zeros_like(cond), where=cond > 0)
    entropy = float(-np.sum(p_feat_y * logs))
    return mse, float(p_feat @ var), entropy, cond, mean, p_feat


def check_lemma4(dist: ToyDistribution) -> LemmaReport:
    """Compare the Bayes risks of E[y | obj] and E[y | sub] on the source table."""
    p_obj_y = dist.source.sum(1)
    n_sub = int(dist.sub_of_obj.max()) + 1
    p_sub_y = np.zeros((n_sub, len(dist.y_values)))
    np.add.at(p_sub_y, dist.sub_of_obj, p_obj_y)
    if np.any(p_obj_y.sum(1) == 0) or np.any(p_sub_y.sum(1) == 0):
        raise ValueError("every obj and sub value needs positive probability")
    y = dist.y_values
    mse2, ev_obj, h2, cond_obj, mean_obj, p_obj = _risks(p_obj_y, y)
    mse3, ev_sub, h3, cond_sub, mean_sub, _ = _risks(p_sub_y, y)

    # E[Var(E[y|obj] | sub)]
    between = 0.0
    for s in range(n_sub):
        rows = dist.sub_of_obj == s
        w = p_obj[rows] / p_obj[rows].sum()
        m = mean_obj[rows]
        between += p_obj[rows].sum() * float(w @ (m - w @ m) ** 2)
    identity_error = abs(ev_sub - (ev_obj + between))

    # obj carries information about y beyond sub iff P(y|obj) != P(y|sub(obj)) somewhere
    dependent = bool(np.abs(cond_obj - cond_sub[dist.sub_of_obj]).max() > STRICT_MARGIN)
    gap_mse, gap_ce = mse3 - mse2, h3 - h2
    strict_mse, strict_ce = gap_mse > STRICT_MARGIN, gap_ce > STRICT_MARGIN
    report = LemmaReport("lemma4", trials=1, slacks=[min(gap_mse, gap_ce)], details={
        "mse_obj": mse2, "mse_sub": mse3, "ce_obj": h2, "ce_sub": h3,
        "dependent": dependent, "strict_mse": strict_mse, "strict_ce": strict_ce,
        "total_variance_error": identity_error,
    })
    failed = (gap_mse < -TOL or gap_ce < -TOL or identity_error > TOL
              or strict_mse != dependent or strict_ce != dependent)
    report.violations = int(failed)
    if not dependent:
        report.vacuous = 1
    return report


def random_lemma4_distribution(rng: np.random.Generator, n_obj: int = 6, n_bg: int = 2, n_sub: int = 3,
                               independent: bool | None = None) -> ToyDistribution:
    """Two-valued labels; with ``independent`` the table makes obj carry nothing beyond sub.

    With two label values P(y | .) is fixed by its mean, so a change in the
    conditional distribution always shows up in the squared risk too.
    """
    y_values = np.array([-1.0, 1.0])
    independent = bool(rng.random() < 0.5) if independent is None else independent
    sub = rng.permutation(np.concatenate([np.arange(n_sub), rng.integers(0, n_sub, size=n_obj - n_sub)]))
    p_obj_bg = rng.dirichlet(np.ones(n_obj * n_bg)).reshape(n_obj, n_bg)
    if independent:
        p_pos = rng.uniform(0.05, 0.95, size=n_sub)[sub]
    else:
        p_pos = rng.uniform(0.05, 0.95, size=n_obj)
    cond = np.stack([1 - p_pos, p_pos], axis=1)
    table = p_obj_bg[:, :, None] * cond[:, None, :]
    return ToyDistribution(y_values, table, table.copy(), sub_of_obj=sub)


# -- batch runners ------------------------------------------------------------------


def run_lemma1(trials: int, seed: int, pairs_per_model: int = 5, d: int = 10) -> LemmaReport:
    rng = np.random.default_rng([seed, 1])
    out = LemmaReport("lemma1")
    for _ in range(trials):
        out.merge(check_lemma1(random_linear_models(rng, d), pairs_per_model, rng))
    out.details["constructions"] = trials
    return out


def run_lemma2(trials: int, seed: int) -> LemmaReport:
    rng = np.random.default_rng([seed, 2])
    out = LemmaReport("lemma2")
    worst = 0.0
    for _ in range(trials):
        dist = random_toy_distribution(rng)
        r = check_lemma2(dist, rng.uniform(-1, 1, size=dist.source.shape[:2]))
        worst = max(worst, r.details["delta_mse"] - r.details["bound"])
        out.merge(r)
    out.details = {"max_excess_over_bound": worst}
    return out


def run_lemma3(trials: int, seed: int) -> LemmaReport:
    rng = np.random.default_rng([seed, 3])
    out = LemmaReport("lemma3")
    for _ in range(trials):
        out.merge(check_lemma3(*random_pair_construction(rng)))
    out.details = {"constructions": trials}
    return out


def run_lemma4(trials: int, seed: int) -> LemmaReport:
    rng = np.random.default_rng([seed, 4])
    out = LemmaReport("lemma4")
    worst = 0.0
    for _ in range(trials):
        r = check_lemma4(random_lemma4_distribution(rng))
        worst = max(worst, r.details["total_variance_error"])
        out.merge(r)
    out.details = {"dependent_tables": trials - out.vacuous, "max_total_variance_error": float(worst)}
    return out


def run_all(trials: int = 200, seed: int = 0) -> dict[str, LemmaReport]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return {r.lemma: r for r in (run_lemma1(trials, seed), run_lemma2(trials, seed),
                                 run_lemma3(trials, seed), run_lemma4(trials, seed))}
