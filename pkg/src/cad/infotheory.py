"""Discrete entropy and mutual-information calculators with identity checks.

Every quantity is computed exactly from a finite joint probability table, so
the identities that motivate the dual-path detector (interaction information,
subset reduction, the chain rule and the conditional-MI decomposition) can be
verified to round-off.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ZERO_FLOOR = 1e-15
NORM_TOL = 1e-12


class PreconditionError(ValueError):
    """Input table violates a structural assumption of an identity."""


def _log(base: float | None):
    if base is None or base == math.e:
        return np.log
    return lambda x: np.log(x) / np.log(base)


def _plogp_sum(p: np.ndarray, base: float | None) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > ZERO_FLOOR]
    return float(-(p * _log(base)(p)).sum())


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint pmf over 2 or 3 finite variables.

    ``probs`` may be given flat (row-major over the outcome tuples) or already
    shaped; it is stored as an n-d array with one axis per variable.
    """

    support_sizes: tuple[int, ...]
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.support_sizes)
        if len(sizes) not in (2, 3) or any(s < 1 for s in sizes):
            raise ValueError(f"support_sizes must hold 2 or 3 positive ints, got {sizes}")
        p = np.asarray(self.probs, dtype=np.float64)
        if p.size != math.prod(sizes):
            raise ValueError(f"table has {p.size} entries, expected {math.prod(sizes)}")
        p = p.reshape(sizes)
        if (p < 0).any():
            raise ValueError("probabilities must be non-negative")
        total = p.sum()
        if abs(total - 1.0) > NORM_TOL:
            raise ValueError(f"probabilities sum to {float(total)!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "support_sizes", sizes)
        object.__setattr__(self, "probs", p)

    @property
    def n_vars(self) -> int:
        return len(self.support_sizes)

    def marginal(self, vars: Iterable[int]) -> np.ndarray:
        keep = _check_vars(self, vars)
        drop = tuple(i for i in range(self.n_vars) if i not in keep)
        m = self.probs.sum(axis=drop) if drop else self.probs
        # sum() keeps the remaining axes in ascending order
        order = sorted(keep)
        return np.transpose(m, [order.index(v) for v in keep])


def _check_vars(joint: DiscreteJoint, vars: Iterable[int]) -> tuple[int, ...]:
    vs = tuple(int(v) for v in vars)
    if not vs:
        raise ValueError("variable subset must be non-empty")
    for v in vs:
        if not 0 <= v < joint.n_vars:
            raise ValueError(f"unknown variable index {v} for a {joint.n_vars}-variable joint")
    if len(set(vs)) != len(vs):
        raise ValueError(f"repeated variable in subset {vs}")
    return vs


def entropy(joint: DiscreteJoint, vars: Sequence[int], base: float | None = None) -> float:
    """Shannon entropy of the marginal over ``vars`` (nats unless ``base`` is given)."""
    return _plogp_sum(joint.marginal(vars), base)


def mutual_information_pair(joint: DiscreteJoint, a: int, b: int, base: float | None = None) -> float:
    if a == b:
        raise ValueError("mutual information needs two distinct variables")
    return (entropy(joint, [a], base) + entropy(joint, [b], base)
            - entropy(joint, sorted((a, b)), base))


def mutual_information_triple(joint: DiscreteJoint, base: float | None = None) -> float:
    """Interaction information I(x1, x2, y) by inclusion-exclusion over entropies.

    Variables are ordered (x1, x2, y). The value can be negative.
    """
    if joint.n_vars != 3:
        raise ValueError(f"interaction information needs 3 variables, got {joint.n_vars}")
    H = lambda *v: entropy(joint, v, base)  # noqa: E731
    return (H(0) + H(1) + H(2) - H(0, 2) - H(1, 2) - H(0, 1) + H(0, 1, 2))


def conditional_mutual_information(joint: DiscreteJoint, a: int, b: int, given: int,
                                   base: float | None = None) -> float:
    """I(a; b | given) as an explicit expectation over the conditioning variable."""
    if joint.n_vars != 3 or len({a, b, given}) != 3:
        raise ValueError("conditional MI needs three distinct variables of a 3-variable joint")
    cube = joint.marginal([given, a, b])
    log = _log(base)
    total = 0.0
    for c in range(cube.shape[0]):
        pc = cube[c].sum()
        if pc <= ZERO_FLOOR:
            continue
        pab = cube[c] / pc
        pa = pab.sum(axis=1, keepdims=True)
        pb = pab.sum(axis=0, keepdims=True)
        mask = pab > ZERO_FLOOR
        total += pc * float((pab[mask] * log(pab[mask] / (pa * pb)[mask])).sum())
    return total


@dataclass
class InfoReport:
    entropies: dict[tuple[int, ...], float]
    mutual_informations: dict[tuple[int, ...], float]
    identity_residuals: dict[str, float]


def info_report(joint: DiscreteJoint, base: float | None = None) -> InfoReport:
    n = joint.n_vars
    ents = {}
    for k in range(1, n + 1):
        for sub in itertools.combinations(range(n), k):
            ents[sub] = entropy(joint, sub, base)
    mis = {pair: mutual_information_pair(joint, *pair, base=base)
           for pair in itertools.combinations(range(n), 2)}
    residuals = {}
    if n == 3:
        mis[(0, 1, 2)] = mutual_information_triple(joint, base)
        residuals["chain_rule"] = verify_chain_decomposition(joint, base).residual
    return InfoReport(ents, mis, residuals)


# ---------------------------------------------------------------------------
# identities


def _pairing_violation(joint: DiscreteJoint) -> tuple[int, ...] | None:
    """Return an outcome tuple showing y is not a bijective pairing of (x1, x2)."""
    p = joint.probs
    seen_y: dict[tuple[int, int], int] = {}
    seen_x: dict[int, tuple[int, int]] = {}
    for idx in zip(*np.nonzero(p > ZERO_FLOOR)):
        x1, x2, y = (int(i) for i in idx)
        if seen_y.setdefault((x1, x2), y) != y:
            return (x1, x2, y)
        if seen_x.setdefault(y, (x1, x2)) != (x1, x2):
            return (x1, x2, y)
    return None


def verify_subset_reduction(joint: DiscreteJoint, base: float | None = None) -> dict[str, float]:
    """Residuals of H(x1,x2,y)=H(x1,y)=H(x2,y)=H(y) and of the reduced triple MI.

    ``y`` must be a one-to-one pairing of ``(x1, x2)`` on the support, which is
    what makes both x1 and x2 recoverable from y.
    """
    if joint.n_vars != 3:
        raise ValueError("subset reduction needs a 3-variable joint")
    bad = _pairing_violation(joint)
    if bad is not None:
        raise PreconditionError(f"y is not a one-to-one pairing of (x1, x2) at outcome {bad}")
    H = lambda *v: entropy(joint, v, base)  # noqa: E731
    hy = H(2)
    return {
        "H(x1,x2,y)=H(y)": abs(H(0, 1, 2) - hy),
        "H(x1,y)=H(y)": abs(H(0, 2) - hy),
        "H(x2,y)=H(y)": abs(H(1, 2) - hy),
        "I(x1,x2,y)=H(x1)+H(x2)-H(x1,x2)": abs(
            mutual_information_triple(joint, base) - (H(0) + H(1) - H(0, 1))),
    }


@dataclass
class ChainDecomposition:
    mi_x1_y: float
    interaction: float
    conditional_mi: float
    # the quantity H(x1, y | x2) as literally written alongside the chain rule
    conditional_joint_entropy: float

    @property
    def residual(self) -> float:
        return abs(self.mi_x1_y - self.interaction - self.conditional_mi)


def verify_chain_decomposition(joint: DiscreteJoint, base: float | None = None) -> ChainDecomposition:
    """Check I(x1;y) = I(x1;x2;y) + I(x1;y|x2)."""
    if joint.n_vars != 3:
        raise ValueError("chain decomposition needs a 3-variable joint")
    return ChainDecomposition(
        mi_x1_y=mutual_information_pair(joint, 0, 2, base),
        interaction=mutual_information_triple(joint, base),
        conditional_mi=conditional_mutual_information(joint, 0, 2, given=1, base=base),
        conditional_joint_entropy=entropy(joint, [0, 1, 2], base) - entropy(joint, [1], base),
    )


@dataclass(frozen=True)
class ContextFamily:
    """A prior over contexts and one p(v, a | context) table per context."""

    prior: np.ndarray
    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=np.float64)
        tables = tuple(np.asarray(t, dtype=np.float64) for t in self.tables)
        if prior.ndim != 1 or len(tables) != prior.size:
            raise PreconditionError("need exactly one table per context")
        if (prior < 0).any() or abs(prior.sum() - 1) > NORM_TOL:
            raise PreconditionError("context prior is not normalized")
        shape = tables[0].shape
        for c, t in enumerate(tables):
            if t.ndim != 2 or t.shape != shape:
                raise PreconditionError(f"context {c}: table shape {t.shape} != {shape}")
            if (t < 0).any() or abs(t.sum() - 1) > NORM_TOL:
                raise PreconditionError(f"context {c}: table sums to {float(t.sum())!r}, not 1")
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "tables", tables)


def conditional_mi_direct(family: ContextFamily, base: float | None = None) -> float:
    """I(v; a | context) straight from the definition."""
    total = 0.0
    for pc, t in zip(family.prior, family.tables):
        j = DiscreteJoint(t.shape, t)
        total += pc * mutual_information_pair(j, 0, 1, base)
    return total


def conditional_mi_entropy_form(family: ContextFamily, base: float | None = None) -> tuple[float, float]:
    """Return (expected entropy of v, expected sample-level cross-entropy).

    Each sample ``s`` is a single (v, a) outcome, so p(v | s, context) is a
    point mass and its cross-entropy against p(v | a, context) is
    ``-log p(v_s | a_s, context)``. The difference of the two terms is
    I(v; a | context).
    """
    log = _log(base)
    h_v = 0.0
    cross = 0.0
    for pc, t in zip(family.prior, family.tables):
        pv = t.sum(axis=1)
        h_v += pc * _plogp_sum(pv, base)
        pa = t.sum(axis=0)
        for v, a in zip(*np.nonzero(t > ZERO_FLOOR)):
            p_v_given_a = t[v, a] / pa[a]
            cross += pc * t[v, a] * float(-log(p_v_given_a))
    return h_v, cross


def verify_theorem1_decomposition(family: ContextFamily, base: float | None = None) -> float:
    h_v, cross = conditional_mi_entropy_form(family, base)
    return abs(conditional_mi_direct(family, base) - (h_v - cross))


# ---------------------------------------------------------------------------
# constructors for test and CLI use


def random_joint(rng: np.random.Generator, sizes: Sequence[int]) -> DiscreteJoint:
    p = rng.dirichlet(np.ones(math.prod(sizes)))
    # dirichlet draws can miss unit mass by an ulp or two
    return DiscreteJoint(tuple(sizes), p / p.sum())


def pairing_joint(p12: np.ndarray) -> DiscreteJoint:
    """Lift p(x1, x2) to (x1, x2, y) with y the index of the pair (x1, x2)."""
    p12 = np.asarray(p12, dtype=np.float64)
    n1, n2 = p12.shape
    cube = np.zeros((n1, n2, n1 * n2))
    for i, j in itertools.product(range(n1), range(n2)):
        cube[i, j, i * n2 + j] = p12[i, j]
    return DiscreteJoint(cube.shape, cube)


def xor_joint() -> DiscreteJoint:
    cube = np.zeros((2, 2, 2))
    for a, b in itertools.product(range(2), range(2)):
        cube[a, b, a ^ b] = 0.25
    return DiscreteJoint((2, 2, 2), cube)


def random_family(rng: np.random.Generator, n_contexts: int, nv: int, na: int) -> ContextFamily:
    prior = rng.dirichlet(np.ones(n_contexts))
    tables = []
    for _ in range(n_contexts):
        t = rng.dirichlet(np.ones(nv * na)).reshape(nv, na)
        tables.append(t / t.sum())
    return ContextFamily(prior / prior.sum(), tuple(tables))


def run_identity_suite(seed: int = 0, trials: int = 100, max_support: int = 4,
                       base: float | None = None) -> dict[str, float]:
    """Worst-case residual of each identity over ``trials`` random tables."""
    rng = np.random.default_rng(seed)
    worst = {"interaction_expansion": 0.0, "subset_reduction": 0.0,
             "reduced_interaction": 0.0, "chain_rule": 0.0, "conditional_mi": 0.0}
    for _ in range(trials):
        sizes = tuple(int(s) for s in rng.integers(2, max_support + 1, size=3))
        j = random_joint(rng, sizes)
        worst["interaction_expansion"] = max(
            worst["interaction_expansion"],
            abs(mutual_information_triple(j, base) - brute_interaction_information(j, base)))
        worst["chain_rule"] = max(worst["chain_rule"], verify_chain_decomposition(j, base).residual)

        p12 = rng.dirichlet(np.ones(sizes[0] * sizes[1])).reshape(sizes[:2])
        res = verify_subset_reduction(pairing_joint(p12 / p12.sum()), base)
        key = "I(x1,x2,y)=H(x1)+H(x2)-H(x1,x2)"
        worst["reduced_interaction"] = max(worst["reduced_interaction"], res.pop(key))
        worst["subset_reduction"] = max(worst["subset_reduction"], *res.values())

        fam = random_family(rng, int(rng.integers(2, 4)), sizes[0], sizes[1])
        worst["conditional_mi"] = max(worst["conditional_mi"], verify_theorem1_decomposition(fam, base))
    worst["xor_interaction_bits"] = mutual_information_triple(xor_joint(), base=2)
    return worst


def brute_interaction_information(joint: DiscreteJoint, base: float | None = None) -> float:
    """Interaction information as -sum over cells of p log of the cell's
    inclusion-exclusion ratio, independent of the entropy helpers."""
    p = joint.probs
    log = _log(base)
    p0, p1, p2 = p.sum(axis=(1, 2)), p.sum(axis=(0, 2)), p.sum(axis=(0, 1))
    p01, p02, p12 = p.sum(axis=2), p.sum(axis=1), p.sum(axis=0)
    total = 0.0
    for i, j, k in itertools.product(*(range(s) for s in joint.support_sizes)):
        pijk = p[i, j, k]
        if pijk <= ZERO_FLOOR:
            continue
        ratio = (p01[i, j] * p02[i, k] * p12[j, k]) / (p0[i] * p1[j] * p2[k] * pijk)
        total += pijk * float(log(ratio))
    return total
