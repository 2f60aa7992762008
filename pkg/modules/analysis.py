"""Exact and Monte Carlo analytics for wrap counts of bounded uniform sums.

Everything exact is computed with ``fractions.Fraction`` over the common
denominator q**N; the only irrational quantity, E[X2], goes through mpmath.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from typing import Dict, Iterable, List, Sequence, Tuple

import mpmath
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from models.entities import (
    GapBoundInput,
    ProblemSpec,
    WrapSummary,
    as_fraction,
    rational_to_json,
)
from utils.error_handling import SpecValidationError
from utils.rng import Stream, make_rng, shard_sizes

logger = logging.getLogger(__name__)

# Exact mode is limited by the size of q**N; 64 summands of a 10-bit modulus is the guideline.
EXACT_MAX_BITS = 640
RHO_BAND = (0.8, 1.2)
SPARSE_ASYMPTOTE = Fraction(2, 3)
MC_SHARD_SIZE = 1 << 16


def exact_mode_supported(N: int, q: int) -> bool:
    """True when q**N is small enough for the exact rational routines."""

    return N >= 1 and q >= 2 and N * math.log2(q) <= EXACT_MAX_BITS


def _require_problem(N: int, q: int) -> None:
    if N < 1:
        raise SpecValidationError(
            f"N must be a positive integer, got {N}",
            suggestion="Use at least one summand",
        )
    if q < 2:
        raise SpecValidationError(
            f"q must be at least 2, got {q}",
            suggestion="A modulus below 2 has no non-trivial residues",
        )


def _require_exact(N: int, q: int) -> None:
    _require_problem(N, q)
    if not exact_mode_supported(N, q):
        raise SpecValidationError(
            f"(N={N}, q={q}) is beyond exact mode ({N * math.log2(q):.0f} > {EXACT_MAX_BITS} bits)",
            suggestion="Use the Monte Carlo estimators for this size",
        )


class ExactPMF(BaseModel):
    """Exact distribution of S_N, stored as integer counts over q**N outcomes."""

    N: int = Field(..., ge=1)
    q: int = Field(..., ge=2)
    counts: List[int]

    @model_validator(mode="after")
    def _check_pmf(self) -> "ExactPMF":
        top = self.N * (self.q - 1)
        if len(self.counts) != top + 1:
            raise ValueError("support must be exactly {0, ..., N(q-1)}")
        if sum(self.counts) != self.q**self.N:
            raise ValueError("counts must add up to q**N")
        if any(count <= 0 for count in self.counts):
            raise ValueError("every mass on the support must be positive")
        if self.counts != self.counts[::-1]:
            raise ValueError("mass must be symmetric about N(q-1)/2")
        return self

    @property
    def denominator(self) -> int:
        return self.q**self.N

    @property
    def max_sum(self) -> int:
        return len(self.counts) - 1

    def mass(self, s: int) -> Fraction:
        if 0 <= s <= self.max_sum:
            return Fraction(self.counts[s], self.denominator)
        return Fraction(0)

    def masses(self) -> Dict[int, Fraction]:
        return {s: self.mass(s) for s in range(self.max_sum + 1)}

    def cumulative(self, upto: int) -> Fraction:
        """P(S_N <= upto)."""

        upto = min(upto, self.max_sum)
        if upto < 0:
            return Fraction(0)
        return Fraction(sum(self.counts[: upto + 1]), self.denominator)

    def to_json(self) -> Dict[str, object]:
        return {
            "N": self.N,
            "q": self.q,
            "mass": {str(s): rational_to_json(m) for s, m in self.masses().items()},
        }

    def to_frame(self) -> pd.DataFrame:
        den = self.denominator
        return pd.DataFrame(
            {
                "s": range(self.max_sum + 1),
                "count": [str(c) for c in self.counts],
                "denominator": str(den),
                "probability": [c / den for c in self.counts],
            }
        )


def exact_sum_pmf(N: int, q: int) -> ExactPMF:
    """
    Distribution of S_N = x_1 + ... + x_N for i.i.d. uniform x_i on {0..q-1}.

    Inclusion-exclusion: count(s) = sum_k (-1)^k C(N,k) C(s - qk + N - 1, N - 1).
    """

    _require_exact(N, q)
    top = N * (q - 1)

    # C(t + N - 1, N - 1) for t = 0..top, built incrementally.
    stars = [1] * (top + 1)
    for t in range(1, top + 1):
        stars[t] = stars[t - 1] * (t + N - 1) // t

    counts = [0] * (top + 1)
    for k in range(0, N + 1):
        offset = q * k
        if offset > top:
            break
        weight = math.comb(N, k) * (-1 if k % 2 else 1)
        for s in range(offset, top + 1):
            counts[s] += weight * stars[s - offset]

    logger.debug("Built exact PMF for N=%d q=%d (%d support points)", N, q, top + 1)
    return ExactPMF(N=N, q=q, counts=counts)


def prob_zero_wraps(N: int, q: int, K: int) -> Fraction:
    """
    P(D_Kq = 0) = P(S_N <= Kq - 1), closed form.

    (1/q^N) * sum_{i<K} (-1)^i C(N, i) C((K - i)q + N - 1, N). The hockey-stick
    identity gives lower index N; lower index N - 1 would already
    give 0 for N = 1, K = 2.
    """

    _require_exact(N, q)
    if K < 1:
        raise SpecValidationError(f"K must be >= 1, got {K}")
    total = 0
    for i in range(0, min(K - 1, N) + 1):
        term = math.comb(N, i) * math.comb((K - i) * q + N - 1, N)
        total += -term if i % 2 else term
    return Fraction(total, q**N)


def prob_zero_wraps_from_pmf(N: int, q: int, K: int) -> Fraction:
    """Same probability as a partial sum of the exact PMF."""

    if K < 1:
        raise SpecValidationError(f"K must be >= 1, got {K}")
    return exact_sum_pmf(N, q).cumulative(K * q - 1)


def expected_x0(N: int, q: int) -> Fraction:
    _require_problem(N, q)
    return Fraction(N * (q - 1), 2 * q)


def expected_x1(N: int, q: int, K: int, r: Fraction | float | str) -> Fraction:
    """E[X1] = ((1 - r) + r/K) * E[X0]; exact whenever r is rational."""

    r_exact = as_fraction(r)
    if not 0 <= r_exact <= 1 or K < 1:
        raise SpecValidationError(f"need K >= 1 and r in [0, 1], got K={K}, r={r}")
    return (1 - r_exact + r_exact / K) * expected_x0(N, q)


def expected_x2_exact(N: int, q: int, z_min: int = 1, *, precision_bits: int = 128) -> float:
    """
    E[X2] for the sparse construction, as the exact finite ratio of sums.

    ((q-1)/(2q)) * sum z/sqrt(N-z+1) / sum 1/sqrt(N-z+1) over z in [z_min, N].
    ``z_min=1`` matches the sampler; ``z_min=0`` also weights the all-zero vector.
    """

    _require_problem(N, q)
    if z_min not in (0, 1):
        raise SpecValidationError(f"z_min must be 0 or 1, got {z_min}")
    with mpmath.workprec(max(precision_bits, 64)):
        weights = [1 / mpmath.sqrt(N - z + 1) for z in range(z_min, N + 1)]
        numerator = mpmath.fsum(z * w for z, w in zip(range(z_min, N + 1), weights))
        denominator = mpmath.fsum(weights)
        scale = mpmath.mpf(q - 1) / (2 * q)
        return float(scale * numerator / denominator)


def sparse_z_pmf(N: int, z_min: int = 1) -> np.ndarray:
    """
    Normalized g(z) proportional to 1/sqrt(N - z + 1).

    Index i of the result is z = z_min + i.
    """

    if N < 1:
        raise SpecValidationError(f"N must be positive, got {N}")
    with mpmath.workprec(128):
        weights = [1 / mpmath.sqrt(N - z + 1) for z in range(z_min, N + 1)]
        total = mpmath.fsum(weights)
        return np.array([float(w / total) for w in weights], dtype=np.float64)


def expected_wraps_exact(N: int, q: int, K: int) -> Fraction:
    """E[D_Kq] = sum_s floor(s / Kq) * P(S_N = s)."""

    if K < 1:
        raise SpecValidationError(f"K must be >= 1, got {K}")
    pmf = exact_sum_pmf(N, q)
    modulus = K * q
    weighted = sum((s // modulus) * count for s, count in enumerate(pmf.counts))
    return Fraction(weighted, pmf.denominator)


def wrap_count_pmf(N: int, q: int, K: int) -> Dict[int, Fraction]:
    """Full distribution of D_Kq."""

    if K < 1:
        raise SpecValidationError(f"K must be >= 1, got {K}")
    pmf = exact_sum_pmf(N, q)
    modulus = K * q
    grouped: Dict[int, int] = {}
    for s, count in enumerate(pmf.counts):
        grouped[s // modulus] = grouped.get(s // modulus, 0) + count
    return {d: Fraction(c, pmf.denominator) for d, c in sorted(grouped.items())}


def expected_wraps_bounds(N: int, q: int, K: int) -> Tuple[Fraction, Fraction]:
    """max(0, N(q-1)/(2qK) - 1) <= E[D_Kq] <= N(q-1)/(2qK)."""

    _require_problem(N, q)
    if K < 1:
        raise SpecValidationError(f"K must be >= 1, got {K}")
    hi = Fraction(N * (q - 1), 2 * q * K)
    return max(Fraction(0), hi - 1), hi


def expected_mixed_wraps_exact(N: int, q: int, K: int, r: Fraction | float | str) -> Fraction:
    """E[(1 - r) D_q + r D_Kq]: wraps seen by the mixed training target."""

    r_exact = as_fraction(r)
    return (1 - r_exact) * expected_wraps_exact(N, q, 1) + r_exact * expected_wraps_exact(N, q, K)


def mixed_wraps_upper_bound(N: int, q: int, K: int, r: Fraction | float | str) -> Fraction:
    # r weights the auxiliary modulus, as in the target-mixing rule.
    r_exact = as_fraction(r)
    return Fraction(N * (q - 1), 2 * q) * (1 - r_exact + r_exact / K)


def zero_free_probability(N: int, q: int) -> Fraction:
    """P(n0(x) = 0) under the uniform distribution, exactly."""

    if N < 0 or q < 2:
        raise SpecValidationError(f"need N >= 0 and q >= 2, got N={N}, q={q}")
    return Fraction(q - 1, q) ** N


def rho(K: int, r: float) -> float:
    """Ratio of the method's wrap factor to the sparse method's 2/3."""

    r_exact = as_fraction(r)
    if K < 1 or not 0 <= r_exact <= 1:
        raise SpecValidationError(f"need K >= 1 and r in [0, 1], got K={K}, r={r}")
    return float((1 - r_exact + r_exact / K) / SPARSE_ASYMPTOTE)


def gap_lower_bound(bound_input: GapBoundInput) -> Tuple[float, float]:
    """Return ((1 - 1/q)^N, eps * prefactor - delta); the bound may be negative."""

    prefactor = float(zero_free_probability(bound_input.N, bound_input.q))
    return prefactor, bound_input.eps * prefactor - bound_input.delta


class RhoCell(BaseModel):
    K: int
    r: float
    rho: float
    in_band: bool


def rho_heatmap(Ks: Sequence[int], rs: Sequence[float]) -> List[RhoCell]:
    """Row-major (K outer, r inner) grid of rho with the [0.8, 1.2] band mask."""

    if not Ks or not rs:
        raise SpecValidationError(
            "heatmap axes must be non-empty", suggestion="Pass at least one K and one r"
        )
    lo, hi = RHO_BAND
    cells: List[RhoCell] = []
    for K in Ks:
        for r in rs:
            value = rho(K, r)
            # Compare in rationals so cells sitting on the band edge are not lost to rounding.
            exact = (1 - as_fraction(r) + as_fraction(r) / K) / SPARSE_ASYMPTOTE
            cells.append(
                RhoCell(
                    K=K,
                    r=r,
                    rho=value,
                    in_band=as_fraction(lo) <= exact <= as_fraction(hi),
                )
            )
    return cells


def gap_table(qs: Iterable[int], Ns: Iterable[int]) -> pd.DataFrame:
    """Numerical lower-bound prefactor table, rows N and columns q."""

    qs = list(qs)
    rows = []
    for N in Ns:
        row = {"N": N}
        for q in qs:
            row[str(q)] = float(zero_free_probability(N, q))
        rows.append(row)
    return pd.DataFrame(rows).set_index("N")


def _wrap_shard(spec: ProblemSpec, seed: int, shard: int, size: int) -> Tuple[int, int]:
    rng = make_rng(seed, Stream.MONTE_CARLO, shard)
    x = rng.integers(0, spec.q, size=(size, spec.N), dtype=np.int64)
    wraps = x.sum(axis=1) // spec.aux_modulus
    return int(wraps.sum()), int((wraps * wraps).sum())


def _mean_stderr(total: int, total_sq: int, n: int) -> Tuple[float, float]:
    mean = Fraction(total, n)
    if n < 2:
        return float(mean), 0.0
    variance = (Fraction(total_sq) - Fraction(total * total, n)) / (n - 1)
    return float(mean), math.sqrt(float(variance) / n)


def monte_carlo_wraps(
    spec: ProblemSpec,
    samples: int,
    seed: int,
    *,
    workers: int = 1,
    shard_size: int = MC_SHARD_SIZE,
) -> Tuple[float, float]:
    """
    Estimate E[D_Kq] under uniform inputs; returns (mean, standard error).

    Shards draw from substreams keyed by (seed, shard) and are reduced in
    shard order with integer accumulators, so the result does not depend on
    ``workers``.
    """

    if samples < 1:
        raise SpecValidationError(f"samples must be >= 1, got {samples}")
    sizes = shard_sizes(samples, shard_size)
    jobs = [(spec, seed, index, size) for index, size in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: _wrap_shard(*job), jobs))
    else:
        parts = [_wrap_shard(*job) for job in jobs]
    total = sum(part[0] for part in parts)
    total_sq = sum(part[1] for part in parts)
    return _mean_stderr(total, total_sq, samples)


class MonteCarloExpectations(BaseModel):
    samples: int
    seed: int
    x0: Tuple[float, float]
    x1: Tuple[float, float]
    x2: Tuple[float, float]
    wraps: Tuple[float, float]


def monte_carlo_expectations(spec: ProblemSpec, samples: int, seed: int) -> MonteCarloExpectations:
    """Monte Carlo oracles for E[X0], E[X1] (Bernoulli(r) modulus per sample) and E[X2]."""

    from modules.sampling import sample_sparse_batch  # Imported lazily, sampling imports us

    if samples < 2:
        raise SpecValidationError("need at least two samples for a standard error")
    rng = make_rng(seed, Stream.MONTE_CARLO, 1 << 20)
    x = rng.integers(0, spec.q, size=(samples, spec.N), dtype=np.int64)
    sums = x.sum(axis=1).astype(np.float64)
    x0 = sums / spec.q
    use_aux = rng.random(samples) < spec.r
    x1 = np.where(use_aux, sums / spec.aux_modulus, x0)
    sparse = sample_sparse_batch(spec, samples, make_rng(seed, Stream.MONTE_CARLO, 1 << 21))
    x2 = sparse.sum(axis=1).astype(np.float64) / spec.q

    def summary(values: np.ndarray) -> Tuple[float, float]:
        return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))

    return MonteCarloExpectations(
        samples=samples,
        seed=seed,
        x0=summary(x0),
        x1=summary(x1),
        x2=summary(x2),
        wraps=monte_carlo_wraps(spec, samples, seed),
    )


def wrap_summary(spec: ProblemSpec) -> WrapSummary:
    """Every closed-form wrap quantity for one problem instance."""

    return WrapSummary(
        spec=spec,
        e_x0=expected_x0(spec.N, spec.q),
        e_x1=expected_x1(spec.N, spec.q, spec.K, spec.r),
        e_x2=expected_x2_exact(spec.N, spec.q, 1),
        e_dkq_exact=expected_wraps_exact(spec.N, spec.q, spec.K),
        e_dkq_bounds=expected_wraps_bounds(spec.N, spec.q, spec.K),
        p_zero_wraps=prob_zero_wraps(spec.N, spec.q, spec.K),
    )


def analyze_row(
    spec: ProblemSpec,
    *,
    mc_samples: int | None = None,
    seed: int = 0,
) -> Dict[str, object]:
    """One row of the ``analyze`` table; falls back to Monte Carlo beyond exact limits."""

    lo, hi = expected_wraps_bounds(spec.N, spec.q, spec.K)
    row: Dict[str, object] = {
        "N": spec.N,
        "q": spec.q,
        "K": spec.K,
        "r": spec.r,
        "E_X0": float(expected_x0(spec.N, spec.q)),
        "E_X1": float(expected_x1(spec.N, spec.q, spec.K, spec.r)),
        "E_X2": expected_x2_exact(spec.N, spec.q, 1),
        "E_DKq_lo": float(lo),
        "E_DKq_hi": float(hi),
        "gap_prefactor": float(zero_free_probability(spec.N, spec.q)),
        "rho": rho(spec.K, spec.r),
        "mode": "exact",
    }
    if exact_mode_supported(spec.N, spec.q):
        e_dkq = expected_wraps_exact(spec.N, spec.q, spec.K)
        p_zero = prob_zero_wraps(spec.N, spec.q, spec.K)
        row["E_DKq"] = float(e_dkq)
        row["E_DKq_exact"] = f"{e_dkq.numerator}/{e_dkq.denominator}"
        row["P_DKq_zero"] = float(p_zero)
        row["E_mixed_wraps"] = float(expected_mixed_wraps_exact(spec.N, spec.q, spec.K, spec.r))
    else:
        logger.warning(
            "N=%d q=%d exceeds exact mode; reporting Monte Carlo estimates only",
            spec.N,
            spec.q,
        )
        row["mode"] = "monte_carlo"
        mc_samples = mc_samples or 100_000

    if mc_samples:
        mc = monte_carlo_expectations(spec, mc_samples, seed)
        row["MC_samples"] = mc_samples
        row["MC_seed"] = seed
        row["MC_X0"], row["MC_X0_se"] = mc.x0
        row["MC_X1"], row["MC_X1_se"] = mc.x1
        row["MC_X2"], row["MC_X2_se"] = mc.x2
        row["MC_DKq"], row["MC_DKq_se"] = mc.wraps
        if row["mode"] == "monte_carlo":
            row["E_DKq"] = mc.wraps[0]
    return row


__all__ = [
    "ExactPMF",
    "MonteCarloExpectations",
    "RhoCell",
    "analyze_row",
    "exact_mode_supported",
    "exact_sum_pmf",
    "expected_mixed_wraps_exact",
    "expected_wraps_bounds",
    "expected_wraps_exact",
    "expected_x0",
    "expected_x1",
    "expected_x2_exact",
    "gap_lower_bound",
    "gap_table",
    "mixed_wraps_upper_bound",
    "monte_carlo_expectations",
    "monte_carlo_wraps",
    "prob_zero_wraps",
    "prob_zero_wraps_from_pmf",
    "rho",
    "rho_heatmap",
    "sparse_z_pmf",
    "wrap_count_pmf",
    "wrap_summary",
    "zero_free_probability",
]
