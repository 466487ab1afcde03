"""Exact verification of the divergence machinery on finite instances.

Everything here enumerates: discrete input spaces, explicit hypothesis
classes as binary label vectors, probability vectors as distributions. The
divergences, the error-linearity identity, the mixture inequality, and the
multi-source target-error bound are all computed exactly so a single
violating instance is a bug, not noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeds

EXACT_TOL = 1e-12


class TheoryError(Exception):
    pass


@dataclass
class FiniteInstance:
    """Discrete input space with explicit hypotheses and distributions.

    ``hypotheses`` is an [H, n] binary matrix (one labeling per row), ``truth``
    the ground-truth labeling, ``source_dists`` a list of probability vectors,
    ``target_dist`` one more, and ``phi`` the nonnegative source mixture
    coefficients summing to one.
    """

    hypotheses: np.ndarray
    truth: np.ndarray
    source_dists: list[np.ndarray]
    target_dist: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.hypotheses = np.asarray(self.hypotheses, dtype=np.int8)
        self.truth = np.asarray(self.truth, dtype=np.int8)
        self.source_dists = [np.asarray(s, dtype=np.float64) for s in self.source_dists]
        self.target_dist = np.asarray(self.target_dist, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        n = self.truth.size
        if self.hypotheses.ndim != 2 or self.hypotheses.shape[1] != n:
            raise TheoryError(f"hypotheses {self.hypotheses.shape} vs {n} points")
        for dist in self.source_dists + [self.target_dist]:
            if dist.shape != (n,) or abs(dist.sum() - 1.0) > EXACT_TOL or dist.min() < 0:
                raise TheoryError("distributions must be probability vectors over the points")
        if self.phi.shape != (len(self.source_dists),) or self.phi.min() < 0 \
                or abs(self.phi.sum() - 1.0) > EXACT_TOL:
            raise TheoryError("phi must be nonnegative and sum to 1")

    @property
    def num_points(self) -> int:
        return self.truth.size

    def to_dict(self) -> dict:
        return {
            "hypotheses": self.hypotheses.tolist(),
            "truth": self.truth.tolist(),
            "source_dists": [s.tolist() for s in self.source_dists],
            "target_dist": self.target_dist.tolist(),
            "phi": self.phi.tolist(),
        }


def expected_error(h, f, dist) -> float:
    """Probability mass where the labelings disagree: sum_x dist(x)|h(x)-f(x)|."""
    h = np.asarray(h, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if not (h.shape == f.shape == dist.shape):
        raise TheoryError(f"length mismatch: {h.shape}, {f.shape}, {dist.shape}")
    return float(dist @ np.abs(h - f))


def h_divergence(hypotheses, s, t) -> float:
    """2 * max over the class of |Pr_s[h=1] - Pr_t[h=1]|, by enumeration."""
    hyp = np.asarray(hypotheses, dtype=np.float64)
    if hyp.ndim != 2 or hyp.shape[0] == 0:
        raise TheoryError("hypothesis class must be a nonempty matrix")
    gap = np.abs(hyp @ np.asarray(s, dtype=np.float64)
                 - hyp @ np.asarray(t, dtype=np.float64))
    return float(2.0 * gap.max())


def symmetric_difference_class(hypotheses) -> np.ndarray:
    """All pairwise XORs of the class members, deduplicated."""
    hyp = np.asarray(hypotheses, dtype=np.int8)
    if hyp.ndim != 2 or hyp.shape[0] == 0:
        raise TheoryError("hypothesis class must be a nonempty matrix")
    xors = hyp[:, None, :] ^ hyp[None, :, :]
    return np.unique(xors.reshape(-1, hyp.shape[1]), axis=0)


def hdh_divergence(hypotheses, s, t) -> float:
    return h_divergence(symmetric_difference_class(hypotheses), s, t)


def mixture(dists, coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.min() < 0 or abs(coeffs.sum() - 1.0) > EXACT_TOL:
        raise TheoryError("mixture coefficients must be nonnegative and sum to 1")
    stack = np.stack([np.asarray(d, dtype=np.float64) for d in dists])
    return coeffs @ stack


@dataclass
class MixtureCheck:
    lhs: float
    rhs: float
    holds: bool


def check_mixture_inequality(hypotheses, source_dists, phi, psi) -> MixtureCheck:
    """Divergence between two source mixtures against the worst source pair.

    Restricted to mixture candidates, where the inequality follows from the
    divergence being a supremum of affine functionals of the distributions.
    """
    lhs = hdh_divergence(hypotheses, mixture(source_dists, phi),
                         mixture(source_dists, psi))
    rhs = max_pairwise_divergence(hypotheses, source_dists)
    return MixtureCheck(lhs, rhs, lhs <= rhs + EXACT_TOL)


def mixture_condition_report(hypotheses, source_dists, phi, candidate) -> MixtureCheck:
    """Same comparison for an arbitrary candidate distribution. Reported, not
    asserted: outside the mixture hull the inequality is not guaranteed."""
    candidate = np.asarray(candidate, dtype=np.float64)
    lhs = hdh_divergence(hypotheses, mixture(source_dists, phi), candidate)
    rhs = max_pairwise_divergence(hypotheses, source_dists)
    return MixtureCheck(lhs, rhs, lhs <= rhs + EXACT_TOL)


def max_pairwise_divergence(hypotheses, source_dists) -> float:
    sd_class = symmetric_difference_class(hypotheses)
    worst = 0.0
    for j in range(len(source_dists)):
        for k in range(j + 1, len(source_dists)):
            worst = max(worst, h_divergence(sd_class, source_dists[j], source_dists[k]))
    return worst


def error_linearity_check(hypotheses, source_dists, phi, truth) -> float:
    """Max over the class of |err_mixture(h) - sum_i phi_i err_i(h)|."""
    mix = mixture(source_dists, phi)
    worst = 0.0
    for h in np.asarray(hypotheses):
        direct = expected_error(h, truth, mix)
        weighted = sum(p * expected_error(h, truth, s)
                       for p, s in zip(phi, source_dists))
        worst = max(worst, abs(direct - weighted))
    return worst


@dataclass
class BoundReport:
    weighted_source_error: float
    divergence_to_target: float
    max_pairwise_source_divergence: float
    lambda_e: float
    bound_rhs: float
    target_error_lhs: float
    holds: bool
    # Informational split of the ideal joint error used by the two chained
    # single-source bounds; not part of the checked inequality.
    lambda_split: tuple = field(default=(0.0, 0.0))


def bound_report(instance: FiniteInstance, h, psi) -> BoundReport:
    """Every term of the multi-source target-error bound, computed exactly.

    ``h`` is the evaluated hypothesis (a label vector), ``psi`` the mixture
    coefficients of the candidate distribution standing in for the
    distribution set the bound minimizes over. The ideal joint error
    ``lambda_e`` is the exact minimum over the class of weighted-source plus
    target error.
    """
    h = np.asarray(h, dtype=np.int8)
    candidate = mixture(instance.source_dists, psi)
    phi_mix = mixture(instance.source_dists, instance.phi)

    weighted_source_error = sum(
        p * expected_error(h, instance.truth, s)
        for p, s in zip(instance.phi, instance.source_dists)
    )
    div_to_target = hdh_divergence(instance.hypotheses, candidate,
                                   instance.target_dist)
    max_pairwise = max_pairwise_divergence(instance.hypotheses,
                                           instance.source_dists)
    joint = [
        sum(p * expected_error(hp, instance.truth, s)
            for p, s in zip(instance.phi, instance.source_dists))
        + expected_error(hp, instance.truth, instance.target_dist)
        for hp in instance.hypotheses
    ]
    lambda_e = float(min(joint))
    lambda_1 = min(
        expected_error(hp, instance.truth, candidate)
        + expected_error(hp, instance.truth, instance.target_dist)
        for hp in instance.hypotheses
    )
    lambda_2 = min(
        expected_error(hp, instance.truth, phi_mix)
        + expected_error(hp, instance.truth, candidate)
        for hp in instance.hypotheses
    )
    lhs = expected_error(h, instance.truth, instance.target_dist)
    rhs = weighted_source_error + 0.5 * div_to_target + 0.5 * max_pairwise + lambda_e
    return BoundReport(
        weighted_source_error=float(weighted_source_error),
        divergence_to_target=div_to_target,
        max_pairwise_source_divergence=max_pairwise,
        lambda_e=lambda_e,
        bound_rhs=float(rhs),
        target_error_lhs=float(lhs),
        holds=lhs <= rhs + EXACT_TOL,
        lambda_split=(float(lambda_1), float(lambda_2)),
    )


# ---------------------------------------------------------------------------
# Randomized instance suite.
# ---------------------------------------------------------------------------

def _random_simplex(rng: np.random.Generator, size: int) -> np.ndarray:
    raw = rng.random(size) + 1e-9
    return raw / raw.sum()


def random_instance(rng: np.random.Generator, max_points: int = 6,
                    max_hypotheses: int = 16, max_sources: int = 4):
    """One random finite instance plus a candidate mixture and a hypothesis."""
    n = int(rng.integers(2, max_points + 1))
    num_sources = int(rng.integers(2, max_sources + 1))
    num_h = int(rng.integers(1, max_hypotheses + 1))
    hypotheses = np.unique(rng.integers(0, 2, size=(num_h, n)).astype(np.int8), axis=0)
    truth = rng.integers(0, 2, size=n).astype(np.int8)
    instance = FiniteInstance(
        hypotheses=hypotheses,
        truth=truth,
        source_dists=[_random_simplex(rng, n) for _ in range(num_sources)],
        target_dist=_random_simplex(rng, n),
        phi=_random_simplex(rng, num_sources),
    )
    psi = _random_simplex(rng, num_sources)
    h = hypotheses[int(rng.integers(0, hypotheses.shape[0]))]
    return instance, psi, h


def run_verification(trials: int, seed: int, max_points: int = 6,
                     max_hypotheses: int = 16, max_sources: int = 4) -> dict:
    """Randomized suite over the three checks; any violation is serialized."""
    failures = 0
    counterexample = None
    max_linearity_dev = 0.0
    mixture_violations = 0
    bound_violations = 0
    for trial in range(trials):
        rng = seeds.derive_rng(seeds.THEORY, seed, trial)
        instance, psi, h = random_instance(rng, max_points, max_hypotheses, max_sources)

        dev = error_linearity_check(instance.hypotheses, instance.source_dists,
                                    instance.phi, instance.truth)
        max_linearity_dev = max(max_linearity_dev, dev)
        linear_ok = dev <= EXACT_TOL

        mix = check_mixture_inequality(instance.hypotheses, instance.source_dists,
                                       instance.phi, psi)
        if not mix.holds:
            mixture_violations += 1
        rep = bound_report(instance, h, psi)
        if not rep.holds:
            bound_violations += 1

        if not (linear_ok and mix.holds and rep.holds):
            failures += 1
            if counterexample is None:
                counterexample = {
                    "trial": trial,
                    "instance": instance.to_dict(),
                    "psi": psi.tolist(),
                    "h": h.tolist(),
                    "linearity_deviation": dev,
                    "mixture": {"lhs": mix.lhs, "rhs": mix.rhs},
                    "bound": {"lhs": rep.target_error_lhs, "rhs": rep.bound_rhs},
                }
    return {
        "instances": trials,
        "failures": failures,
        "max_deviation": max_linearity_dev,
        "per_check": {
            "linearity_max_deviation": max_linearity_dev,
            "mixture_violations": mixture_violations,
            "bound_violations": bound_violations,
        },
        "counterexample": counterexample,
    }


# ---------------------------------------------------------------------------
# Continuous-data surrogate: separability of two feature sets as seen by a
# shallow domain classifier, on the divergence's [0, 2] scale.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PadConfig:
    seed: int = 0
    max_iter: int = 200


def proxy_a_distance(features_a, features_b, cfg: PadConfig = PadConfig()) -> float:
    """Train a logistic domain classifier on a seeded 50/50 split and map its
    held-out error to 2 * (1 - 2 * err), clamped to [0, 2]."""
    from sklearn.linear_model import LogisticRegression

    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise TheoryError(f"feature matrices of equal width required: {a.shape}, {b.shape}")
    if a.shape[0] < 8 or b.shape[0] < 8:
        raise TheoryError("need at least 8 samples per side")
    rng = seeds.derive_rng(seeds.PAD_SPLIT, cfg.seed)

    def split(x):
        perm = rng.permutation(x.shape[0])
        half = x.shape[0] // 2
        return x[perm[:half]], x[perm[half:]]

    a_train, a_test = split(a)
    b_train, b_test = split(b)
    x_train = np.concatenate([a_train, b_train])
    y_train = np.concatenate([np.zeros(len(a_train)), np.ones(len(b_train))])
    x_test = np.concatenate([a_test, b_test])
    y_test = np.concatenate([np.zeros(len(a_test)), np.ones(len(b_test))])
    clf = LogisticRegression(max_iter=cfg.max_iter)
    clf.fit(x_train, y_train)
    err = 1.0 - float(clf.score(x_test, y_test))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))
