"""Economics of abort-and-reseed policies.

Cost is measured in units of one full generation.  An attempt inspected at
``t_last`` of ``num_steps`` total steps has already spent the fraction
``f = t_last / num_steps``; aborting costs ``f``, continuing costs 1.  An
attempt is accepted only when the detector lets it continue *and* the
finished image really contains every target (a final oracle check - nothing
is accepted on the detector's word alone).  Restarts are independent, so
expected total cost is the per-attempt expected cost divided by the
per-attempt acceptance probability.

The baseline policy never aborts: every attempt costs 1 and is accepted
exactly when complete, for an expected cost of 1 / P(complete).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (MissingReport, NeverAccepts, TrialBudgetExceeded,
                     UsageError)
from .rng import SplitMix64
from .scene import MixtureSpec, pattern_distribution

MAX_SIMULATED_ATTEMPTS = 10 ** 6


@dataclass(frozen=True)
class AttemptDistribution:
    """Distribution over per-object presence patterns of a fresh attempt."""

    objects: tuple[str, ...]
    patterns: tuple[tuple[int, ...], ...]
    probabilities: tuple[float, ...]

    def __post_init__(self):
        if not self.objects:
            raise UsageError("at least one object is required")
        total = sum(self.probabilities)
        if abs(total - 1.0) > 1e-9:
            raise UsageError(f"pattern probabilities sum to {total}, not 1")
        if any(p < 0 for p in self.probabilities):
            raise UsageError("pattern probabilities must be non-negative")
        for pat in self.patterns:
            if len(pat) != len(self.objects):
                raise UsageError("pattern length must match object count")

    @classmethod
    def from_faithfulness(cls, objects, faithfulness) -> "AttemptDistribution":
        """Independent per-object presence with probability ``faithfulness``.

        ``faithfulness`` may be a scalar (shared by all objects) or a
        per-object mapping.
        """
        objects = tuple(objects)
        if isinstance(faithfulness, dict):
            q = [float(faithfulness[o]) for o in objects]
        else:
            q = [float(faithfulness)] * len(objects)
        if any(not (0.0 < qi <= 1.0) for qi in q):
            raise UsageError("faithfulness values must be in (0, 1]")
        patterns, probs = [], []
        for mask in range(2 ** len(objects)):
            pat = tuple((mask >> i) & 1 for i in range(len(objects)))
            p = 1.0
            for bit, qi in zip(pat, q):
                p *= qi if bit else 1.0 - qi
            patterns.append(pat)
            probs.append(p)
        return cls(objects=objects, patterns=tuple(patterns),
                   probabilities=tuple(probs))

    @classmethod
    def from_mixture(cls, mixture: MixtureSpec) -> "AttemptDistribution":
        dist = pattern_distribution(mixture)
        patterns = tuple(sorted(dist))
        return cls(objects=mixture.targets, patterns=patterns,
                   probabilities=tuple(dist[p] for p in patterns))

    @property
    def complete_probability(self) -> float:
        full = tuple([1] * len(self.objects))
        for pat, p in zip(self.patterns, self.probabilities):
            if pat == full:
                return p
        return 0.0


@dataclass(frozen=True)
class PolicyParams:
    """Detector operating point plus the abort-time cost fraction."""

    recall: dict[str, float]
    true_negative_rate: dict[str, float]
    cost_fraction: float

    def __post_init__(self):
        for name, rates in (("recall", self.recall),
                            ("true_negative_rate", self.true_negative_rate)):
            for obj, r in rates.items():
                if not (0.0 <= r <= 1.0):
                    raise UsageError(f"{name}[{obj!r}]={r} outside [0, 1]")
        if not (0.0 <= self.cost_fraction < 1.0):
            raise UsageError("cost_fraction must be in [0, 1)")

    @classmethod
    def symmetric(cls, objects, recall: float, true_negative_rate: float,
                  cost_fraction: float) -> "PolicyParams":
        return cls(recall={o: recall for o in objects},
                   true_negative_rate={o: true_negative_rate for o in objects},
                   cost_fraction=cost_fraction)

    def continue_probability(self, objects, pattern) -> float:
        """Chance the detector lets an attempt with this pattern continue."""
        p = 1.0
        for obj, bit in zip(objects, pattern):
            p *= self.recall[obj] if bit else 1.0 - self.true_negative_rate[obj]
        return p


def _check_policy_objects(dist: AttemptDistribution, policy: PolicyParams):
    missing = [o for o in dist.objects
               if o not in policy.recall or o not in policy.true_negative_rate]
    if missing:
        raise UsageError(f"policy lacks rates for objects {missing}")


def acceptance_probability(dist: AttemptDistribution,
                           policy: PolicyParams) -> float:
    """Per-attempt chance of continuing and finishing complete."""
    _check_policy_objects(dist, policy)
    full = tuple([1] * len(dist.objects))
    return dist.complete_probability * policy.continue_probability(
        dist.objects, full)


def expected_cost_closed_form(dist: AttemptDistribution,
                              policy: PolicyParams) -> float:
    """Expected cost (in full generations) until an accepted sample."""
    _check_policy_objects(dist, policy)
    accept = acceptance_probability(dist, policy)
    if accept <= 0.0:
        raise NeverAccepts("policy accepts with probability zero")
    f = policy.cost_fraction
    per_attempt = 0.0
    for pat, p in zip(dist.patterns, dist.probabilities):
        cont = policy.continue_probability(dist.objects, pat)
        per_attempt += p * (cont + (1.0 - cont) * f)
    return per_attempt / accept


def baseline_cost(dist: AttemptDistribution) -> float:
    """Expected cost of the never-abort policy: 1 / P(complete)."""
    p = dist.complete_probability
    if p <= 0.0:
        raise NeverAccepts("attempts are never complete; baseline diverges")
    return 1.0 / p


def relative_saving(dist: AttemptDistribution, policy: PolicyParams) -> float:
    """Fraction of baseline compute the abort policy avoids."""
    return 1.0 - expected_cost_closed_form(dist, policy) / baseline_cost(dist)


@dataclass(frozen=True)
class SimReport:
    """Monte Carlo estimate of expected cost until acceptance."""

    n_runs: int
    mean_cost: float
    stderr: float
    ci_lo: float
    ci_hi: float
    mean_attempts: float
    abort_fraction: float

    @property
    def ci_halfwidth(self) -> float:
        return 1.96 * self.stderr


def monte_carlo_cost(dist: AttemptDistribution, policy: PolicyParams,
                     n_runs: int, seed: int,
                     max_attempts: int = MAX_SIMULATED_ATTEMPTS) -> SimReport:
    """Simulate restart-until-accepted runs in vectorized lockstep rounds.

    Every still-active run draws one attempt per round; runs retire when an
    attempt both survives the detector and is actually complete.  Raises
    ``TrialBudgetExceeded`` once any run exceeds ``max_attempts`` attempts.
    """
    _check_policy_objects(dist, policy)
    if acceptance_probability(dist, policy) <= 0.0:
        raise NeverAccepts("policy accepts with probability zero")
    if n_runs < 1:
        raise UsageError("n_runs must be >= 1")
    n_obj = len(dist.objects)
    cdf = np.cumsum(np.asarray(dist.probabilities))
    cdf[-1] = 1.0
    pattern_matrix = np.asarray(dist.patterns, dtype=bool)
    pass_present = np.array([policy.recall[o] for o in dist.objects])
    pass_absent = np.array([1.0 - policy.true_negative_rate[o]
                            for o in dist.objects])
    complete_mask = pattern_matrix.all(axis=1)

    stream = SplitMix64(seed)
    costs = np.zeros(n_runs)
    attempts = np.zeros(n_runs, dtype=np.int64)
    aborted = np.zeros(n_runs, dtype=np.int64)
    active = np.arange(n_runs)
    f = policy.cost_fraction
    rounds = 0
    while active.size:
        rounds += 1
        if rounds > max_attempts:
            raise TrialBudgetExceeded(
                f"no acceptance within {max_attempts} attempts per run")
        k = active.size
        pat_idx = np.searchsorted(cdf, stream.uniforms(k), side="right")
        pat_idx = np.minimum(pat_idx, len(cdf) - 1)
        present = pattern_matrix[pat_idx]
        pass_prob = np.where(present, pass_present, pass_absent)
        verdicts = stream.uniforms(k * n_obj).reshape(k, n_obj) < pass_prob
        continued = verdicts.all(axis=1)
        costs[active] += np.where(continued, 1.0, f)
        attempts[active] += 1
        aborted[active] += (~continued).astype(np.int64)
        accepted = continued & complete_mask[pat_idx]
        active = active[~accepted]

    mean = float(costs.mean())
    std = float(costs.std(ddof=1)) if n_runs > 1 else 0.0
    se = std / np.sqrt(n_runs)
    return SimReport(n_runs=n_runs, mean_cost=mean, stderr=se,
                     ci_lo=mean - 1.96 * se, ci_hi=mean + 1.96 * se,
                     mean_attempts=float(attempts.mean()),
                     abort_fraction=float(aborted.sum() / attempts.sum()))


@dataclass(frozen=True)
class RatePoint:
    """Measured detector rates at one decision step."""

    t_last: int
    recall_by_object: dict[str, float]
    tn_by_object: dict[str, float]
    pooled_recall: float
    pooled_tn: float


@dataclass(frozen=True)
class SweepRow:
    t_last: int
    cost_fraction: float
    recall: float
    true_negative_rate: float
    saving_closed_form: float
    saving_monte_carlo: float | None
    ci_lo: float | None
    ci_hi: float | None


def sweep_tlast(dist: AttemptDistribution, points, num_steps: int,
                n_runs: int = 2000, seed: int = 0,
                with_monte_carlo: bool = True) -> list[SweepRow]:
    """Saving as a function of the decision step, one row per rate point."""
    points = list(points)
    if len({p.t_last for p in points}) < 2:
        raise MissingReport("sweep needs rate points for at least two "
                            "distinct decision steps")
    rows = []
    for point in sorted(points, key=lambda p: p.t_last):
        if not (0 <= point.t_last < num_steps):
            raise UsageError(f"t_last={point.t_last} outside [0, {num_steps})")
        policy = PolicyParams(recall=point.recall_by_object,
                              true_negative_rate=point.tn_by_object,
                              cost_fraction=point.t_last / num_steps)
        saving_cf = relative_saving(dist, policy)
        saving_mc = ci_lo = ci_hi = None
        if with_monte_carlo:
            base = baseline_cost(dist)
            report = monte_carlo_cost(dist, policy, n_runs,
                                      seed=seed + point.t_last)
            saving_mc = 1.0 - report.mean_cost / base
            ci_lo = 1.0 - report.ci_hi / base
            ci_hi = 1.0 - report.ci_lo / base
        rows.append(SweepRow(t_last=point.t_last,
                             cost_fraction=point.t_last / num_steps,
                             recall=point.pooled_recall,
                             true_negative_rate=point.pooled_tn,
                             saving_closed_form=saving_cf,
                             saving_monte_carlo=saving_mc,
                             ci_lo=ci_lo, ci_hi=ci_hi))
    return rows


REFERENCE_COMPLETENESS = 0.59


@dataclass(frozen=True)
class ProbabilityRow:
    completeness: float
    t_last: int
    saving_closed_form: float


def sweep_probability(objects, recall: float, true_negative_rate: float,
                      t_last: int, num_steps: int,
                      p_values) -> list[ProbabilityRow]:
    """Closed-form saving versus attempt completeness probability.

    Each completeness value ``p`` maps to a symmetric per-object
    faithfulness ``p ** (1/n)``.  The reference point p=0.59 is always
    included so curves line up across configurations.
    """
    objects = tuple(objects)
    if not (0 <= t_last < num_steps):
        raise UsageError(f"t_last={t_last} outside [0, {num_steps})")
    values = sorted(set(float(p) for p in p_values) | {REFERENCE_COMPLETENESS})
    if any(not (0.0 < p <= 1.0) for p in values):
        raise UsageError("completeness values must be in (0, 1]")
    rows = []
    for p in values:
        q = p ** (1.0 / len(objects))
        dist = AttemptDistribution.from_faithfulness(objects, q)
        policy = PolicyParams.symmetric(objects, recall, true_negative_rate,
                                        t_last / num_steps)
        rows.append(ProbabilityRow(completeness=p, t_last=t_last,
                                   saving_closed_form=relative_saving(dist, policy)))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


def write_sweep_tlast_csv(rows, path) -> None:
    lines = ["t_last,f,recall,tn_rate,saving_cf,saving_mc,ci_lo,ci_hi"]
    for r in rows:
        lines.append(",".join([str(r.t_last), _fmt(r.cost_fraction),
                               _fmt(r.recall), _fmt(r.true_negative_rate),
                               _fmt(r.saving_closed_form),
                               _fmt(r.saving_monte_carlo),
                               _fmt(r.ci_lo), _fmt(r.ci_hi)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_sweep_p_csv(rows, path) -> None:
    lines = ["p,t_last,saving_cf"]
    for r in rows:
        lines.append(",".join([_fmt(r.completeness), str(r.t_last),
                               _fmt(r.saving_closed_form)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
