"""Fully enumerable miniature scenario worlds used as exact oracles.

A world is a finite set of outcomes generated by: a non-critical branch drawn
from its naturalistic probability, followed by a fixed number of critical
steps whose actions carry naturalistic and per-component importance
probabilities.  All estimator means, variances, bounds, and optimal control
vectors can then be computed exactly by brute-force enumeration, which is
what the estimator test-suite checks the sampling implementations against.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .records import CriticalStepRecord, TestRecord

__all__ = [
    "OutcomeStep",
    "Outcome",
    "ToyWorld",
    "canonical_world",
    "optimal_only_world",
    "random_mixture_world",
    "random_stratified_world",
    "make_zero_variance_world",
    "perturb_component",
    "exact_crash_rate",
    "exact_estimator_variance",
    "single_draw_expectation",
    "optimal_beta_exact",
    "component_variances",
    "verify_bounds",
    "check_optimality_assumptions",
    "sample_records",
    "world_to_json",
    "world_from_json",
]

_TOL = 1e-12


@dataclass(frozen=True, slots=True)
class OutcomeStep:
    """One critical step: naturalistic and per-component action probabilities."""

    p: float
    q: tuple[float, ...]


@dataclass(frozen=True, slots=True)
class Outcome:
    """One scenario: branch probability, crash probability, critical steps."""

    p_branch: float
    crash: float
    steps: tuple[OutcomeStep, ...] = field(default=())

    @property
    def p(self) -> float:
        """Full naturalistic probability of the scenario."""
        out = self.p_branch
        for s in self.steps:
            out *= s.p
        return out

    @property
    def num_steps(self) -> int:
        return len(self.steps)


@dataclass(frozen=True, slots=True)
class ToyWorld:
    outcomes: tuple[Outcome, ...]
    alpha: tuple[float, ...]

    @property
    def num_components(self) -> int:
        return len(self.alpha)

    def validate(self) -> None:
        j = self.num_components
        if j < 1:
            raise ValueError("world must have at least one mixture component")
        if any(a < 0 for a in self.alpha):
            raise ValueError("mixture weights must be nonnegative")
        if abs(sum(self.alpha) - 1.0) > _TOL:
            raise ValueError(f"mixture weights sum to {sum(self.alpha)!r}, not 1")
        total_p = sum(o.p for o in self.outcomes)
        if abs(total_p - 1.0) > _TOL:
            raise ValueError(f"p does not sum to 1 (got {total_p!r})")
        for jj in range(j):
            total_q = sum(_q_component_full(o, jj) for o in self.outcomes)
            if abs(total_q - 1.0) > _TOL:
                raise ValueError(
                    f"importance component {jj + 1} does not sum to 1 (got {total_q!r})"
                )
        for o in self.outcomes:
            if not 0.0 <= o.crash <= 1.0:
                raise ValueError("crash probabilities must lie in [0, 1]")
            if len({len(s.q) for s in o.steps} | {j}) != 1:
                raise ValueError("per-step q length must equal the component count")
            if o.crash * o.p > 0.0 and _q_mixture_full(o, self.alpha) <= 0.0:
                raise ValueError(
                    "support violation: crash outcome with zero mixture probability"
                )


def _q_component_full(o: Outcome, j: int) -> float:
    out = o.p_branch
    for s in o.steps:
        out *= s.q[j]
    return out


def _q_mixture_full(o: Outcome, alpha: Sequence[float]) -> float:
    out = o.p_branch
    for s in o.steps:
        out *= sum(a * qj for a, qj in zip(alpha, s.q))
    return out


def _weight(o: Outcome, alpha: Sequence[float]) -> float:
    """Importance weight prod(p/q_alpha) over critical steps; requires support."""
    w = 1.0
    for s in o.steps:
        w *= s.p / sum(a * qj for a, qj in zip(alpha, s.q))
    return w


def _component_ratio(o: Outcome, alpha: Sequence[float], j: int) -> float:
    r = 1.0
    for s in o.steps:
        r *= s.q[j] / sum(a * qj for a, qj in zip(alpha, s.q))
    return r


def _tuple_ratio(o: Outcome, alpha: Sequence[float], js: Sequence[int]) -> float:
    r = 1.0
    for s, j in zip(o.steps, js):
        r *= s.q[j] / sum(a * qj for a, qj in zip(alpha, s.q))
    return r


def exact_crash_rate(world: ToyWorld) -> float:
    return sum(o.crash * o.p for o in world.outcomes)


def _support(world: ToyWorld) -> list[tuple[Outcome, float]]:
    """Outcomes with positive mixture probability, paired with that probability."""
    out = []
    for o in world.outcomes:
        q = _q_mixture_full(o, world.alpha)
        if q > 0.0:
            out.append((o, q))
    return out


def _scv_columns(world: ToyWorld, o: Outcome) -> dict[int, np.ndarray]:
    """Stratified control columns of one outcome: tuple ratios over {1..J}^l.

    Tuples are enumerated lexicographically with the first step's index most
    significant; only the outcome's own stratum has nonzero columns.
    """
    j = world.num_components
    l = o.num_steps
    if l == 0:
        return {}
    row = np.array(
        [_tuple_ratio(o, world.alpha, js) for js in itertools.product(range(j), repeat=l)]
    )
    return {l: row}


def _strata_present(world: ToyWorld) -> list[int]:
    return sorted({o.num_steps for o in world.outcomes})


def _scv_contributions(
    world: ToyWorld, beta: dict[int, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-outcome mixture probabilities and mean-corrected contributions.

    The contribution of outcome x in stratum l is the importance-weighted
    crash term minus beta_l . columns(x), shifted by the enumerated mixture
    expectation of that correction so the result is exactly unbiased for any
    fixed control vectors.
    """
    support = _support(world)
    probs = np.array([q for _, q in support])
    raw = np.empty(len(support))
    theta: dict[int, float] = {l: 0.0 for l in beta}
    corrections = np.zeros(len(support))
    for i, (o, q) in enumerate(support):
        raw[i] = o.crash * _weight(o, world.alpha)
        cols = _scv_columns(world, o)
        for l, row in cols.items():
            b = beta.get(l)
            if b is not None:
                corr = float(row @ np.asarray(b, dtype=float))
                corrections[i] += corr
                theta[l] += q * corr
    contributions = raw - corrections + sum(theta.values())
    return probs, contributions


def single_draw_expectation(world: ToyWorld, beta: dict[int, np.ndarray]) -> float:
    """Enumerated expectation of the stratified control-variate contribution."""
    probs, contributions = _scv_contributions(world, beta)
    return float(probs @ contributions)


def exact_estimator_variance(
    world: ToyWorld,
    kind: str = "is",
    beta: Sequence[float] | dict[int, np.ndarray] | None = None,
) -> float:
    """Exact single-draw variance of the selected estimator, by enumeration.

    kind "is": importance weighting under the mixture; "cv": ordinary control
    variates with a fixed vector over the first J-1 component ratios; "scv":
    stratified control variates with per-stratum vectors over all component
    tuples.  Raises on support violations (a crash outcome the relevant
    sampling distribution cannot reach).
    """
    mu = exact_crash_rate(world)
    reachable = sum(o.crash * o.p for o, _ in _support(world))
    if abs(reachable - mu) > _TOL:
        raise ValueError("support violation: mixture cannot reach all crash outcomes")
    if kind == "is":
        probs, contributions = _scv_contributions(world, {})
    elif kind == "cv":
        b = np.zeros(world.num_components - 1) if beta is None else np.asarray(beta, float)
        if b.shape != (world.num_components - 1,):
            raise ValueError("cv beta must have length J-1")
        support = _support(world)
        probs = np.array([q for _, q in support])
        contributions = np.array(
            [
                o.crash * _weight(o, world.alpha)
                - sum(
                    b[j] * (_component_ratio(o, world.alpha, j) - 1.0)
                    for j in range(world.num_components - 1)
                )
                for o, _ in support
            ]
        )
    elif kind == "scv":
        probs, contributions = _scv_contributions(world, beta or {})
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return float(probs @ (contributions - mu) ** 2)


def optimal_beta_exact(
    world: ToyWorld, stratified: bool = False
) -> np.ndarray | dict[int, np.ndarray]:
    """Variance-minimizing control vector(s), by exact weighted least squares.

    Unstratified: one vector over the first J-1 component-ratio columns.
    Stratified: per-stratum vectors over all J^l component tuples, minimizing
    the joint single-draw variance.  Degenerate (all-constant) columns fall
    back to the zero, minimum-norm solution.
    """
    support = _support(world)
    probs = np.array([q for _, q in support])
    y = np.array([o.crash * _weight(o, world.alpha) for o, _ in support])
    if not stratified:
        j = world.num_components
        cols = np.array(
            [
                [_component_ratio(o, world.alpha, jj) - 1.0 for jj in range(j - 1)]
                for o, _ in support
            ]
        ).reshape(len(support), j - 1)
        return _weighted_lstsq(probs, y, cols)
    strata = [l for l in _strata_present(world) if l >= 1]
    sizes = {l: world.num_components**l for l in strata}
    offsets = {}
    total = 0
    for l in strata:
        offsets[l] = total
        total += sizes[l]
    cols = np.zeros((len(support), total))
    for i, (o, _) in enumerate(support):
        for l, row in _scv_columns(world, o).items():
            cols[i, offsets[l] : offsets[l] + sizes[l]] = row
    flat = _weighted_lstsq(probs, y, cols)
    return {l: flat[offsets[l] : offsets[l] + sizes[l]] for l in strata}


def _weighted_lstsq(weights: np.ndarray, y: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Minimize Var_w(y - cols @ beta): weighted, mean-centered least squares."""
    if cols.shape[1] == 0:
        return np.zeros(0)
    wsum = weights.sum()
    ybar = float(weights @ y) / wsum
    cbar = (weights @ cols) / wsum
    sw = np.sqrt(weights)
    a = sw[:, None] * (cols - cbar)
    b = sw * (y - ybar)
    beta, _, _, _ = np.linalg.lstsq(a, b, rcond=1e-12)
    return beta


def component_variances(world: ToyWorld) -> np.ndarray:
    """Asymptotic variance of plain importance sampling under each component.

    Entry j is infinite when component j misses crash-probability mass.
    """
    mu = exact_crash_rate(world)
    j = world.num_components
    out = np.zeros(j)
    for jj in range(j):
        acc = 0.0
        for o in world.outcomes:
            qfull = _q_component_full(o, jj)
            if qfull > 0.0:
                ratio = o.crash
                for s in o.steps:
                    ratio *= s.p / s.q[jj]
                acc += qfull * (ratio - mu) ** 2
            elif o.crash * o.p > 0.0:
                acc = math.inf
                break
        out[jj] = acc
    return out


def _stratum_mu(world: ToyWorld, l: int) -> float:
    return sum(o.crash * o.p for o in world.outcomes if o.num_steps == l)


def _tuple_variance(world: ToyWorld, l: int, js: Sequence[int]) -> float:
    """Variance of the stratum-l importance estimator under one component tuple."""
    mu_l = _stratum_mu(world, l)
    acc = 0.0
    for o in world.outcomes:
        if o.num_steps != l:
            continue
        qfull = o.p_branch
        ratio = o.crash
        for s, j in zip(o.steps, js):
            qfull *= s.q[j]
            if s.q[j] > 0.0:
                ratio *= s.p / s.q[j]
        if qfull > 0.0:
            acc += qfull * (ratio - mu_l) ** 2
        elif o.crash * o.p > 0.0:
            return math.inf
    return acc


def verify_bounds(world: ToyWorld) -> dict:
    """Enumerate both sides of the mixture-optimum variance bounds.

    lemma1: variance at the unstratified optimum is at most min_j of the
    component variance over its mixture weight.  theorem2: variance at the
    stratified optimum is at most (L+1) times the sum over strata of the best
    tuple bound plus the stratification residual 3*(mu_l/prod alpha)^2.
    """
    alpha = np.asarray(world.alpha)
    sigma = component_variances(world)
    with np.errstate(divide="ignore"):
        lemma1_rhs = float(np.min(np.where(alpha > 0, sigma / np.where(alpha > 0, alpha, 1.0), np.inf)))
    lemma1_lhs = exact_estimator_variance(world, "cv", optimal_beta_exact(world))

    strata = _strata_present(world)
    big_l = max(strata) if strata else 0
    lp = big_l + 1
    # uncontrolled stratum: unit weights, so the variance is over p itself
    mu_0 = _stratum_mu(world, 0)
    sigma_0 = sum(o.p * o.crash**2 for o in world.outcomes if o.num_steps == 0) - mu_0**2
    rhs = lp * sigma_0
    for l in strata:
        if l == 0:
            continue
        mu_l = _stratum_mu(world, l)
        best = math.inf
        for js in itertools.product(range(world.num_components), repeat=l):
            prod_alpha = float(np.prod(alpha[list(js)]))
            if prod_alpha <= 0.0:
                continue
            var_t = _tuple_variance(world, l, js)
            bound = var_t / prod_alpha + 3.0 * (mu_l / prod_alpha) ** 2
            best = min(best, bound)
        rhs += lp * best
    theorem2_lhs = exact_estimator_variance(
        world, "scv", optimal_beta_exact(world, stratified=True)
    )
    return {
        "lemma1": {
            "lhs": lemma1_lhs,
            "rhs": lemma1_rhs,
            "holds": lemma1_lhs <= lemma1_rhs + _TOL,
        },
        "theorem2": {
            "lhs": theorem2_lhs,
            "rhs": rhs,
            "holds": theorem2_lhs <= rhs + _TOL,
        },
    }


# ---------------------------------------------------------------------------
# world constructions


def canonical_world() -> ToyWorld:
    """The shared 4-outcome oracle fixture.

    Single critical step with four actions, crash only on the first; the
    first importance component is optimal, the second is the naturalistic
    distribution, mixed half and half.
    """
    p = (0.01, 0.09, 0.40, 0.50)
    crash = (1.0, 0.0, 0.0, 0.0)
    q_opt = (1.0, 0.0, 0.0, 0.0)
    outcomes = tuple(
        Outcome(p_branch=1.0, crash=ck, steps=(OutcomeStep(p=pk, q=(qk, pk)),))
        for pk, ck, qk in zip(p, crash, q_opt)
    )
    return ToyWorld(outcomes=outcomes, alpha=(0.5, 0.5))


def optimal_only_world() -> ToyWorld:
    """Single-component world whose sole importance function is optimal."""
    p = (0.01, 0.09, 0.40, 0.50)
    crash = (1.0, 0.0, 0.0, 0.0)
    outcomes = tuple(
        Outcome(p_branch=1.0, crash=ck, steps=(OutcomeStep(p=pk, q=(qk,)),))
        for pk, ck, qk in zip(p, crash, (1.0, 0.0, 0.0, 0.0))
    )
    return ToyWorld(outcomes=outcomes, alpha=(1.0,))


def _random_simplex(rng: np.random.Generator, k: int, floor: float = 0.02) -> np.ndarray:
    v = rng.random(k) + floor
    return v / v.sum()


def random_mixture_world(
    rng: np.random.Generator,
    num_components: int = 3,
    num_actions: int = 4,
    num_steps: int = 1,
) -> ToyWorld:
    """Random single-branch world with full-support components (finite variances)."""
    alpha = tuple(_random_simplex(rng, num_components))
    action_sets = []
    for _ in range(num_steps):
        p_step = _random_simplex(rng, num_actions)
        q_steps = [_random_simplex(rng, num_actions) for _ in range(num_components)]
        action_sets.append((p_step, q_steps))
    outcomes = []
    for combo in itertools.product(range(num_actions), repeat=num_steps):
        steps = tuple(
            OutcomeStep(
                p=float(action_sets[t][0][a]),
                q=tuple(float(action_sets[t][1][j][a]) for j in range(num_components)),
            )
            for t, a in enumerate(combo)
        )
        crash = float(rng.random() < 0.4) * float(rng.uniform(0.2, 1.0))
        outcomes.append(Outcome(p_branch=1.0, crash=crash, steps=steps))
    if all(o.crash == 0.0 for o in outcomes):
        outcomes[0] = Outcome(p_branch=1.0, crash=1.0, steps=outcomes[0].steps)
    world = ToyWorld(outcomes=tuple(outcomes), alpha=alpha)
    world.validate()
    return world


def random_stratified_world(
    rng: np.random.Generator,
    num_components: int = 2,
    num_actions: int = 3,
    max_steps: int = 2,
) -> ToyWorld:
    """Random multi-branch world whose branches have 0..max_steps critical steps."""
    alpha = tuple(_random_simplex(rng, num_components))
    num_branches = max_steps + 1
    branch_p = _random_simplex(rng, num_branches)
    outcomes = []
    for b in range(num_branches):
        l = b  # one branch per stratum
        if l == 0:
            crash = float(rng.random() < 0.5) * float(rng.uniform(0.0, 0.3))
            outcomes.append(Outcome(p_branch=float(branch_p[b]), crash=crash))
            continue
        action_sets = []
        for _ in range(l):
            p_step = _random_simplex(rng, num_actions)
            q_steps = [_random_simplex(rng, num_actions) for _ in range(num_components)]
            action_sets.append((p_step, q_steps))
        for combo in itertools.product(range(num_actions), repeat=l):
            steps = tuple(
                OutcomeStep(
                    p=float(action_sets[t][0][a]),
                    q=tuple(
                        float(action_sets[t][1][j][a]) for j in range(num_components)
                    ),
                )
                for t, a in enumerate(combo)
            )
            crash = float(rng.random() < 0.35) * float(rng.uniform(0.1, 1.0))
            outcomes.append(
                Outcome(p_branch=float(branch_p[b]), crash=crash, steps=steps)
            )
    world = ToyWorld(outcomes=tuple(outcomes), alpha=alpha)
    world.validate()
    return world


def make_zero_variance_world(num_components: int = 2, num_actions: int = 6) -> ToyWorld:
    """World meeting the zero-variance conditions of the optimality analysis.

    Every mixture-supported outcome has exactly one critical step, the crash
    probability is a function of that step alone, the first component equals
    the crash-optimal importance function, and outcomes that cannot crash get
    zero mixture mass (all components vanish there).
    """
    if num_components < 2:
        raise ValueError("need at least two mixture components")
    if num_actions < 5:
        raise ValueError("need at least five actions")
    p_step = _random_simplex(np.random.default_rng(7), num_actions, floor=0.3)
    crash = np.zeros(num_actions)
    crash[:3] = (0.9, 0.45, 0.2)  # varied so crash*p is not proportional to any q_j
    mu = float(crash @ p_step)
    q1 = crash * p_step / mu
    others = []
    for j in range(1, num_components):
        q = np.zeros(num_actions)
        q[:3] = _random_simplex(np.random.default_rng(100 + j), 3, floor=0.5)
        others.append(q)
    alpha = tuple(_random_simplex(np.random.default_rng(13), num_components, floor=1.0))
    outcomes = tuple(
        Outcome(
            p_branch=1.0,
            crash=float(crash[a]),
            steps=(
                OutcomeStep(
                    p=float(p_step[a]),
                    q=(float(q1[a]),) + tuple(float(q[a]) for q in others),
                ),
            ),
        )
        for a in range(num_actions)
    )
    world = ToyWorld(outcomes=outcomes, alpha=alpha)
    world.validate()
    return world


def perturb_component(world: ToyWorld, j: int = 0, rel: float = 0.10) -> ToyWorld:
    """Scale component j by alternating (1 +/- rel) factors and renormalize."""
    raw = []
    for i, o in enumerate(world.outcomes):
        factor = 1.0 + rel if i % 2 == 0 else 1.0 - rel
        raw.append([s.q[j] * factor for s in o.steps])
    # renormalize over the full outcome distribution (single-step worlds only)
    if any(o.num_steps != 1 for o in world.outcomes):
        raise ValueError("perturbation supports single-step worlds only")
    total = sum(o.p_branch * r[0] for o, r in zip(world.outcomes, raw))
    outcomes = []
    for o, r in zip(world.outcomes, raw):
        q = list(o.steps[0].q)
        q[j] = r[0] / total
        outcomes.append(
            Outcome(
                p_branch=o.p_branch,
                crash=o.crash,
                steps=(OutcomeStep(p=o.steps[0].p, q=tuple(q)),),
            )
        )
    return ToyWorld(outcomes=tuple(outcomes), alpha=world.alpha)


def check_optimality_assumptions(world: ToyWorld) -> dict[str, bool]:
    """Programmatic checks of the four zero-variance conditions."""
    mu = exact_crash_rate(world)
    support = _support(world)
    no_uncontrolled = all(
        _q_mixture_full(o, world.alpha) == 0.0
        for o in world.outcomes
        if o.num_steps == 0 or o.crash == 0.0
    )
    single_step = all(o.num_steps == 1 for o, _ in support)
    crash_by_step: dict[tuple, float] = {}
    crash_determined = True
    for o, _ in support:
        key = tuple((s.p, s.q) for s in o.steps)
        if key in crash_by_step and abs(crash_by_step[key] - o.crash) > _TOL:
            crash_determined = False
        crash_by_step[key] = o.crash
    first_optimal = all(
        o.num_steps == 1
        and abs(o.steps[0].q[0] - o.crash * o.steps[0].p / mu) <= _TOL
        for o, _ in support
    )
    return {
        "uncontrolled_unsampled": no_uncontrolled,
        "single_critical_step": single_step,
        "crash_determined_by_critical": crash_determined,
        "first_component_optimal": first_optimal,
    }


# ---------------------------------------------------------------------------
# sampling and serialization


def sample_records(
    world: ToyWorld,
    n: int,
    rng: np.random.Generator,
    distribution: str = "mixture",
) -> list[TestRecord]:
    """Draw test records from the world under "mixture" or "natural" sampling."""
    if distribution == "mixture":
        vec = np.array([_q_mixture_full(o, world.alpha) for o in world.outcomes])
    elif distribution == "natural":
        vec = np.array([o.p for o in world.outcomes])
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    vec = vec / vec.sum()
    idx = rng.choice(len(world.outcomes), size=n, p=vec)
    cache: dict[int, tuple[float, tuple[CriticalStepRecord, ...]]] = {}
    records = []
    for i, k in enumerate(idx):
        k = int(k)
        if k not in cache:
            o = world.outcomes[k]
            steps = tuple(
                CriticalStepRecord(
                    p=s.p,
                    q_alpha=float(sum(a * qj for a, qj in zip(world.alpha, s.q))),
                    q_individual=s.q,
                )
                for s in o.steps
            )
            cache[k] = (o.crash, steps)
        crash, steps = cache[k]
        records.append(TestRecord(test_id=i, crash_prob=crash, steps=steps))
    return records


def world_to_json(world: ToyWorld) -> str:
    obj = {
        "alpha": list(world.alpha),
        "outcomes": [
            {
                "p_branch": o.p_branch,
                "crash": o.crash,
                "steps": [{"p": s.p, "q": list(s.q)} for s in o.steps],
            }
            for o in world.outcomes
        ],
    }
    return json.dumps(obj, indent=2)


def world_from_json(text: str) -> ToyWorld:
    obj = json.loads(text)
    world = ToyWorld(
        outcomes=tuple(
            Outcome(
                p_branch=o["p_branch"],
                crash=o["crash"],
                steps=tuple(OutcomeStep(p=s["p"], q=tuple(s["q"])) for s in o["steps"]),
            )
            for o in obj["outcomes"]
        ),
        alpha=tuple(obj["alpha"]),
    )
    world.validate()
    return world
