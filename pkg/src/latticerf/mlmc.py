"""Multilevel Monte Carlo for the mean and central moments of a scalar QoI.

Level ``l`` pairs ``Q_fine = Q_{M_l}`` with ``Q_coarse = Q_{M_{l-1}}``
evaluated on the same realization; the coarse partner at level 0 is zero.
Central moments use differences of h-statistics between the two members of
each pair.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

TARGETS = ("bias_mean", "bias_var", "variance_mean", "variance_var", "cost")


class InsufficientSamples(ValueError):
    pass


class ScreeningError(ValueError):
    pass


class ToleranceUnreachable(RuntimeError):
    """The bias bound cannot be met below the level cap; carries the capped plan."""

    def __init__(self, msg, plan: "Plan", achievable_eps: float):
        super().__init__(msg)
        self.plan = plan
        self.achievable_eps = achievable_eps


@dataclass(eq=False)
class LevelEnsemble:
    level: int
    fine: np.ndarray
    coarse: np.ndarray | None = None
    cost: np.ndarray | None = None
    dofs: int = 0
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.fine = np.asarray(self.fine, dtype=float)
        if self.fine.ndim != 1 or self.fine.size < 1:
            raise InsufficientSamples("a level ensemble needs at least one sample")
        if self.coarse is not None:
            self.coarse = np.asarray(self.coarse, dtype=float)
            if self.coarse.shape != self.fine.shape:
                raise ValueError("fine and coarse samples must pair up")
        if self.cost is None:
            self.cost = np.zeros_like(self.fine)
        self.cost = np.asarray(self.cost, dtype=float)

    @property
    def n(self) -> int:
        return int(self.fine.size)

    @property
    def coarse_or_zero(self) -> np.ndarray:
        return np.zeros_like(self.fine) if self.coarse is None else self.coarse

    @property
    def diff(self) -> np.ndarray:
        return self.fine - self.coarse_or_zero


def power_sums(x_plus, x_minus, max_order: int = 2) -> np.ndarray:
    """``S[a, b] = sum_i x_plus_i**a * x_minus_i**b`` for ``a, b <= max_order``."""
    xp = np.asarray(x_plus, dtype=float)
    xm = np.asarray(x_minus, dtype=float)
    if xp.shape != xm.shape or xp.ndim != 1:
        raise ValueError(f"length mismatch: {xp.shape} vs {xm.shape}")
    k = np.arange(max_order + 1)
    pp = xp[:, None] ** k[None, :]
    pm = xm[:, None] ** k[None, :]
    return pp.T @ pm


def h_statistic(x, r: int) -> float:
    """Unbiased estimator of the ``r``-th central moment (``r`` in 2..4).

    Written in power sums ``S_p`` of the data; the data are shifted by their
    mean first, which leaves the statistic unchanged and avoids cancellation.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if r not in (2, 3, 4):
        raise ValueError(f"order {r} not supported")
    if n < r:
        raise InsufficientSamples(f"h_{r} needs at least {r} samples, got {n}")
    y = x - x.mean()
    s1, s2, s3, s4 = (float(np.sum(y**p)) for p in (1, 2, 3, 4))
    if r == 2:
        return (n * s2 - s1 * s1) / (n * (n - 1))
    if r == 3:
        return (2 * s1**3 - 3 * n * s1 * s2 + n * n * s3) / (n * (n - 1) * (n - 2))
    return (
        -3 * s1**4
        + 6 * n * s1 * s1 * s2
        + (9 - 6 * n) * s2 * s2
        + (-4 * n * n + 8 * n - 12) * s1 * s3
        + (n**3 - 2 * n * n + 3 * n) * s4
    ) / (n * (n - 1) * (n - 2) * (n - 3))


def delta_h2(ens: LevelEnsemble) -> float:
    """``h_2(fine) - h_2(coarse)`` from the sum/difference power sums of the pair."""
    n = ens.n
    if n < 2:
        raise InsufficientSamples("delta_h2 needs at least 2 samples")
    fine, coarse = ens.fine, ens.coarse_or_zero
    # a common shift of both members leaves the statistic unchanged
    shift = fine.mean()
    S = power_sums((fine - shift) + (coarse - shift), fine - coarse, 1)
    return float((n * S[1, 1] - S[0, 1] * S[1, 0]) / ((n - 1) * n))


def delta_h(ens: LevelEnsemble, r: int) -> float:
    if r == 2:
        return delta_h2(ens)
    coarse = 0.0 if ens.coarse is None else h_statistic(ens.coarse, r)
    return h_statistic(ens.fine, r) - coarse


def mlmc_mean(ensembles: Sequence[LevelEnsemble]) -> float:
    if not ensembles:
        raise InsufficientSamples("no level ensembles")
    if ensembles[0].level != 0:
        raise ValueError("level 0 is required")
    return float(sum(e.diff.mean() for e in ensembles))


def mlmc_central_moment(ensembles: Sequence[LevelEnsemble], r: int) -> float:
    if not ensembles:
        raise InsufficientSamples("no level ensembles")
    return float(sum(delta_h(e, r) for e in ensembles))


# -- screening -------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLaw:
    """``c * M**(-exponent)`` (decay) or ``c * M**exponent`` for cost."""

    c: float
    exponent: float
    residual: float
    n_points: int
    growth: bool = False

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        return self.c * m ** (self.exponent if self.growth else -self.exponent)


def fit_power_law(dofs, values, growth: bool = False) -> PowerLaw:
    """Log-log linear least squares; nonpositive observations are dropped with a warning."""
    m = np.asarray(dofs, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = v > 0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} nonpositive screening observations", stacklevel=2)
    m, v = m[keep], v[keep]
    if m.size < 3:
        raise ScreeningError(f"power-law fit needs at least 3 positive observations, got {m.size}")
    A = np.column_stack([np.ones_like(m), np.log(m)])
    coef, res, *_ = np.linalg.lstsq(A, np.log(v), rcond=None)
    resid = float(res[0]) if res.size else 0.0
    slope = float(coef[1])
    return PowerLaw(float(math.exp(coef[0])), slope if growth else -slope, resid, int(m.size), growth)


def level_observations(ens: LevelEnsemble, target: str, cost_mode: str = "measured") -> float:
    if target == "bias_mean":
        return abs(float(ens.diff.mean()))
    if target == "bias_var":
        return abs(delta_h2(ens))
    if target == "variance_mean":
        return float(np.var(ens.diff, ddof=1)) if ens.n > 1 else 0.0
    if target == "variance_var":
        return _variance_of_delta_h2(ens) * ens.n
    if target == "cost":
        return float(ens.cost.mean())
    raise ValueError(f"unknown screening target {target!r}")


def _variance_of_delta_h2(ens: LevelEnsemble) -> float:
    """Plug-in estimate of ``Var[Delta h_2]`` from per-pair squared deviations."""
    if ens.n < 2:
        return 0.0
    f = ens.fine - ens.fine.mean()
    c = ens.coarse_or_zero - ens.coarse_or_zero.mean()
    return float(np.var(f * f - c * c, ddof=1)) / ens.n


def screening_fit(ensembles: Sequence[LevelEnsemble], target: str) -> PowerLaw:
    """Fit one screening relation over the pilot levels.

    Bias and variance relations use the difference levels ``l >= 1``; the cost
    relation uses every level.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown screening target {target!r}")
    if len(ensembles) < 3:
        raise ScreeningError("screening needs at least 3 pilot levels")
    if any(e.n < 2 for e in ensembles):
        raise ScreeningError("screening needs at least 2 samples per level")
    use = ensembles if target == "cost" else [e for e in ensembles if e.level >= 1]
    obs = [level_observations(e, target) for e in use]
    return fit_power_law([e.dofs for e in use], obs, growth=(target == "cost"))


@dataclass
class ScreeningFit:
    bias: PowerLaw | None
    variance: PowerLaw | None
    cost: PowerLaw | None


def screen(ensembles: Sequence[LevelEnsemble], moment: str = "mean") -> ScreeningFit:
    """Bias, variance and cost relations for ``moment`` ("mean" or "variance").

    A relation whose observations are all zero (no level-to-level change)
    is returned as ``None``.
    """
    suffix = {"mean": "mean", "variance": "var"}[moment]
    out = {}
    for kind in ("bias", "variance"):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out[kind] = screening_fit(ensembles, f"{kind}_{suffix}")
        except ScreeningError:
            out[kind] = None
    try:
        cost = screening_fit(ensembles, "cost")
    except ScreeningError:
        cost = None
    return ScreeningFit(out["bias"], out["variance"], cost)


# -- planning ----------------------------------------------------------------------


@dataclass
class Plan:
    L: int
    M_L: int
    N: list[int]
    raw: list[float]
    eps: float
    reachable: bool = True
    achievable_eps: float | None = None


def plan(
    fit: ScreeningFit,
    eps_r: float,
    current_estimate: float,
    dofs: Sequence[int],
    *,
    observed_variance: Sequence[float] = (),
    observed_cost: Sequence[float] = (),
    drawn: Sequence[int] = (),
    min_level: int = 0,
    abs_floor: float = 0.0,
) -> Plan:
    """Finest level and per-level sample sizes for tolerance ``eps_r * |estimate|``.

    ``dofs[l]`` lists every admissible level up to the cap. Observed level
    variances and costs (``V_l``, ``cost_l``) take precedence over the fitted
    relations where available. Sample sizes never drop below ``drawn``.
    """
    if eps_r <= 0:
        raise ValueError("eps_r must be positive")
    dofs = [int(m) for m in dofs]
    cap = len(dofs) - 1
    eps = max(eps_r * abs(current_estimate), abs_floor)

    reachable, achievable = True, None
    L = min_level
    if fit.bias is not None and eps > 0:
        if fit.bias.exponent > 0:
            m_req = (eps / (fit.bias.c * math.sqrt(2.0))) ** (-1.0 / fit.bias.exponent)
            ok = [l for l in range(min_level, cap + 1) if dofs[l] >= m_req]
        else:
            ok = []
        if ok:
            L = ok[0]
        else:
            L = cap
            reachable = False
            achievable = math.sqrt(2.0) * float(fit.bias(dofs[cap]))
    L = max(L, min_level)

    V, C = [], []
    for l in range(L + 1):
        if l < len(observed_variance):
            V.append(float(observed_variance[l]))
        elif fit.variance is not None:
            V.append(float(fit.variance(dofs[l])))
        else:
            V.append(0.0)
        if l < len(observed_cost) and observed_cost[l] > 0:
            C.append(float(observed_cost[l]))
        elif fit.cost is not None:
            C.append(float(fit.cost(dofs[l])))
        else:
            C.append(float(dofs[l]))
    V = np.maximum(np.array(V), 0.0)
    C = np.maximum(np.array(C), np.finfo(float).tiny)

    if eps > 0:
        total = float(np.sum(np.sqrt(C * V)))
        raw = (2.0 / eps**2) * np.sqrt(V / C) * total
    else:
        raw = np.where(V > 0, np.inf, 0.0)
    N = []
    for l, r in enumerate(raw):
        already = drawn[l] if l < len(drawn) else 0
        need = math.ceil(r - 1e-9) if math.isfinite(r) else 10**12
        N.append(max(need, already, 1))
    p = Plan(L, dofs[L], N, raw.tolist(), eps, reachable, achievable)
    if not reachable:
        raise ToleranceUnreachable(
            f"bias tolerance {eps:.3g} unreachable below level cap {cap}; achievable {achievable:.3g}", p, achievable
        )
    return p


def combine_plans(*sample_plans: Sequence[int]) -> list[int]:
    """Elementwise maximum of per-level sample counts; shorter plans are zero-padded."""
    depth = max((len(p) for p in sample_plans), default=0)
    return [max((int(p[l]) if l < len(p) else 0) for p in sample_plans) for l in range(depth)]


# -- driver ------------------------------------------------------------------------


class LevelModel(Protocol):
    n_levels: int

    def dofs(self, level: int) -> int: ...

    def evaluate(self, index: int, level: int) -> tuple[float, float]: ...


@dataclass
class MLMCConfig:
    rel_tol: float = 0.05
    screening_levels: int = 4
    pilot_samples: int | Sequence[int] = 20
    max_level: int | None = None
    seed: int = 0
    targets: tuple[str, ...] = ("mean", "variance")
    cost_mode: str = "dofs"
    max_rounds: int = 10
    max_samples: int = 1_000_000
    min_samples: int = 4
    confidence: float | None = None

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        pilots = self.pilot_counts()
        if min(pilots) < 2:
            raise ValueError("pilot sample counts must be >= 2")
        if self.confidence is not None and not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.cost_mode not in ("dofs", "measured"):
            raise ValueError("cost_mode must be 'dofs' or 'measured'")
        for t in self.targets:
            if t not in ("mean", "variance"):
                raise ValueError(f"unknown target {t!r}")

    def planning_tol(self) -> float:
        """Relative tolerance handed to :func:`plan`.

        Without ``confidence`` this is ``rel_tol`` and the plan bounds the
        root-mean-square error. With it, the tolerance shrinks so that
        ``|bias| + z * std <= rel_tol`` for the two-sided normal quantile
        ``z``, which bounds the error itself with that probability.
        """
        if self.confidence is None:
            return self.rel_tol
        z = float(stats.norm.ppf(0.5 + self.confidence / 2))
        return self.rel_tol * math.sqrt(2.0) / (1.0 + z)

    def pilot_counts(self) -> list[int]:
        if isinstance(self.pilot_samples, int):
            return [self.pilot_samples] * self.screening_levels
        counts = [int(v) for v in self.pilot_samples]
        if len(counts) != self.screening_levels:
            raise ValueError("one pilot count per screening level is required")
        return counts


@dataclass
class MomentEstimates:
    mean: float
    variance: float
    std: float
    skewness: float
    kurtosis: float
    third: float
    fourth: float
    levels: list[dict] = field(default_factory=list)
    mse: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def relative_errors(self) -> dict:
        out = {}
        for name, value in (("mean", self.mean), ("variance", self.variance)):
            m = self.mse.get(name)
            if m is None:
                continue
            rmse = math.sqrt(m["bias_sq"] + m["statistical"])
            out[name] = rmse / abs(value) if value else (0.0 if rmse == 0 else math.inf)
        return out


def sample_index(seed: int, level: int, k: int) -> int:
    """Globally unique realization index; levels and seeds use disjoint ranges."""
    return (int(seed) << 40) | (int(level) << 32) | int(k)


class _Sampler:
    def __init__(self, model: LevelModel, config: MLMCConfig):
        self.model = model
        self.config = config
        self.fine: dict[int, list[float]] = {}
        self.coarse: dict[int, list[float]] = {}
        self.cost: dict[int, list[float]] = {}
        self.total = 0

    def drawn(self, level: int) -> int:
        return len(self.fine.get(level, ()))

    def draw(self, level: int, count: int) -> None:
        start = self.drawn(level)
        fl = self.fine.setdefault(level, [])
        cl = self.coarse.setdefault(level, [])
        co = self.cost.setdefault(level, [])
        for k in range(start, start + count):
            idx = sample_index(self.config.seed, level, k)
            f, cf = self.model.evaluate(idx, level)
            if level > 0:
                c, cc = self.model.evaluate(idx, level - 1)
            else:
                c, cc = 0.0, 0.0
            fl.append(f)
            cl.append(c)
            if self.config.cost_mode == "dofs":
                co.append(float(self.model.dofs(level) + (self.model.dofs(level - 1) if level > 0 else 0)))
            else:
                co.append(cf + cc)
        self.total += count

    def ensembles(self, top: int) -> list[LevelEnsemble]:
        return [
            LevelEnsemble(
                l,
                np.array(self.fine[l]),
                None if l == 0 else np.array(self.coarse[l]),
                np.array(self.cost[l]),
                self.model.dofs(l),
            )
            for l in range(top + 1)
        ]


def _moment_stats(ensembles, moment):
    if moment == "mean":
        V = [level_observations(e, "variance_mean") for e in ensembles]
        stat = sum(np.var(e.diff, ddof=1) / e.n for e in ensembles)
        bias_obs = abs(float(ensembles[-1].diff.mean())) if ensembles[-1].level > 0 else 0.0
    else:
        V = [level_observations(e, "variance_var") for e in ensembles]
        stat = sum(_variance_of_delta_h2(e) for e in ensembles)
        bias_obs = abs(delta_h2(ensembles[-1])) if ensembles[-1].level > 0 else 0.0
    return V, float(stat), bias_obs


def run(model: LevelModel, config: MLMCConfig = MLMCConfig()) -> MomentEstimates:
    """Screening, planning and adaptive sampling until the plans are met."""
    cap = model.n_levels - 1 if config.max_level is None else min(config.max_level, model.n_levels - 1)
    n_screen = config.screening_levels
    if n_screen < 1 or n_screen - 1 > cap:
        raise ValueError(f"screening levels ({n_screen}) exceed the level cap ({cap})")
    dofs = [model.dofs(l) for l in range(cap + 1)]
    sampler = _Sampler(model, config)
    for l, n in enumerate(config.pilot_counts()):
        sampler.draw(l, n)
    top = n_screen - 1
    flags = {"tolerance_unreachable": False, "budget_exhausted": False, "rounds": 0}

    for round_ in range(config.max_rounds):
        flags["rounds"] = round_ + 1
        ens = sampler.ensembles(top)
        current = {"mean": mlmc_mean(ens), "variance": mlmc_central_moment(ens, 2)}
        L_new, N_new = top, [sampler.drawn(l) for l in range(top + 1)]
        for moment in config.targets:
            fit = screen(ens, moment)
            V, _, _ = _moment_stats(ens, moment)
            try:
                p = plan(fit, config.planning_tol(), current[moment], dofs, observed_variance=V,
                         observed_cost=[float(e.cost.mean()) for e in ens],
                         drawn=[e.n for e in ens], min_level=top)
            except ToleranceUnreachable as exc:
                p = exc.plan
                flags["tolerance_unreachable"] = True
                flags["achievable_eps_" + moment] = exc.achievable_eps
            L_new = max(L_new, p.L)
            N_new = combine_plans(N_new, p.N)
        N_new = [max(n, config.min_samples if l > top else n) for l, n in enumerate(N_new)]
        extra = [max(n - sampler.drawn(l), 0) for l, n in enumerate(N_new)]
        if not any(extra) and L_new <= top:
            break
        room = config.max_samples - sampler.total
        if sum(extra) > room:
            # spend what is left in proportion to the plan, then stop
            flags["budget_exhausted"] = True
            log.warning("sample budget exhausted; estimates are partial")
            scale = max(room, 0) / sum(extra)
            extra = [int(k * scale) for k in extra]
            extra = [k if l <= top or k >= config.min_samples else 0 for l, k in enumerate(extra)]
        for l, k in enumerate(extra):
            if k:
                sampler.draw(l, k)
        if flags["budget_exhausted"]:
            top = max([top] + [l for l in range(len(extra)) if sampler.drawn(l) >= config.min_samples])
            break
        top = max(top, L_new)
    else:
        flags["budget_exhausted"] = True

    return _estimates(sampler.ensembles(top), flags)


def _estimates(ens: list[LevelEnsemble], flags: dict) -> MomentEstimates:
    m1 = mlmc_mean(ens)
    m2 = mlmc_central_moment(ens, 2)
    enough = all(e.n >= 4 for e in ens)
    m3 = mlmc_central_moment(ens, 3) if enough else math.nan
    m4 = mlmc_central_moment(ens, 4) if enough else math.nan
    std = math.sqrt(max(m2, 0.0))
    skew = m3 / std**3 if std > 0 else math.nan
    kurt = m4 / m2**2 if m2 > 0 else math.nan

    mse = {}
    for moment in ("mean", "variance"):
        V, stat, bias_obs = _moment_stats(ens, moment)
        mse[moment] = {"bias_sq": bias_obs**2, "statistical": stat}

    levels = []
    for e in ens:
        levels.append({
            "level": e.level,
            "dofs": e.dofs,
            "N": e.n,
            "mean_diff": float(e.diff.mean()),
            "V_mean": level_observations(e, "variance_mean"),
            "delta_h2": delta_h2(e) if e.n >= 2 else math.nan,
            "V_var": level_observations(e, "variance_var"),
            "cost": float(e.cost.mean()),
        })
    return MomentEstimates(m1, m2, std, skew, kurt, m3, m4, levels, mse, flags)
