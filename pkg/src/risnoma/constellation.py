"""Superimposed Gray-coded QAM constellation and its conditional BER terms.

After channel alignment the received per-dimension signal is a superposition
``sum_i s_i h_i`` of per-user PAM amplitudes ``s_i`` (odd integers) scaled by
the real effective channels.  Square QAM makes the in-phase and quadrature
dimensions identical, so everything here is built for one dimension.

The conditional BER of user ``k`` is a weighted sum of Q-functions,
``sum_q c_q Q(sum_i a_iq h_i / sigma)``, with exact rational weights ``c_q``
and integer coefficient rows ``a_q``.  Rows are generated for the *canonical*
ordering of the levels, i.e. the order obtained with the non-overlapping
default weights ``sqrt(rho_i) = 2^(sum_{j>i} b_j / 2)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.special import erfc

__all__ = [
    "DegenerateConstellationError",
    "OrderingChangedError",
    "ConstellationSpec",
    "BerTerm",
    "BerExpression",
    "default_weights",
    "gray",
    "build_superimposed",
    "raw_bit_terms",
    "raw_user_terms",
    "column_terms",
    "bit_terms",
    "extract_ber_terms",
    "algorithm1_coefficients",
    "detect_index",
    "detect",
    "qfunc",
    "conditional_ber",
    "expressions_to_json",
    "expressions_from_json",
]


class DegenerateConstellationError(ValueError):
    pass


class OrderingChangedError(RuntimeError):
    pass


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def gray(j):
    return j ^ (j >> 1)


def _check_bits(bits) -> tuple[int, ...]:
    bits = tuple(int(b) for b in bits)
    if not bits:
        raise ValueError("at least one user is required")
    for b in bits:
        if b < 2 or b % 2:
            raise ValueError(f"bits per symbol {b} does not give a square QAM order")
    return bits


def default_weights(bits: Sequence[int]) -> np.ndarray:
    """Per-dimension amplitudes ``sqrt(rho_i)`` with ``rho_i = 2^(sum_{j>i} b_j)``."""
    bits = _check_bits(bits)
    return np.array([2.0 ** (sum(bits[i + 1:]) / 2) for i in range(len(bits))])


@dataclass(frozen=True)
class ConstellationSpec:
    """One dimension of the superimposed constellation, sorted by level.

    ``indices[m, i]`` is user ``i``'s PAM index at level ``m`` and
    ``amplitudes[m, i] = 2 indices[m, i] - (sqrt(M_i) - 1)``.  Thresholds are
    midpoints of consecutive levels; ``threshold_rows`` holds them as integer
    combinations of the per-user weights.
    """

    bits: tuple[int, ...]
    weights: np.ndarray
    indices: np.ndarray
    amplitudes: np.ndarray
    threshold_rows: np.ndarray

    @property
    def K(self) -> int:
        return len(self.bits)

    @property
    def n_levels(self) -> int:
        return len(self.indices)

    @property
    def dim_bits(self) -> tuple[int, ...]:
        return tuple(b // 2 for b in self.bits)

    @property
    def levels(self) -> np.ndarray:
        return self.amplitudes @ self.weights

    @property
    def thresholds(self) -> np.ndarray:
        return self.threshold_rows @ self.weights

    def labels(self, user: int) -> np.ndarray:
        """Gray label of ``user`` at every level (integer, MSB = first bit)."""
        return gray(self.indices[:, user])

    def label_bits(self, user: int) -> np.ndarray:
        nb = self.dim_bits[user]
        lab = self.labels(user)
        return (lab[:, None] >> np.arange(nb - 1, -1, -1)[None, :]) & 1

    def levels_at(self, h) -> np.ndarray:
        return np.asarray(h, dtype=float) @ self.amplitudes.T

    def thresholds_at(self, h) -> np.ndarray:
        return np.asarray(h, dtype=float) @ self.threshold_rows.T


def build_superimposed(bits: Sequence[int], weights: Sequence[float] | None = None) -> ConstellationSpec:
    """Enumerate every per-dimension label combination and sort by level."""
    bits = _check_bits(bits)
    w = default_weights(bits) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(bits),) or np.any(w <= 0):
        raise ValueError("weights must be one positive value per user")
    sizes = [2 ** (b // 2) for b in bits]
    idx = np.array(list(itertools.product(*[range(m) for m in sizes])), dtype=np.int64)
    amp = 2 * idx - (np.array(sizes) - 1)
    lev = amp @ w
    order = np.argsort(lev, kind="stable")
    idx, amp, lev = idx[order], amp[order], lev[order]
    gaps = np.diff(lev)
    if np.any(gaps <= 1e-12 * max(1.0, float(np.max(np.abs(lev))))):
        raise DegenerateConstellationError(f"weights {w.tolist()} make superimposed levels overlap")
    # odd + odd is even, so midpoints are integer rows
    thr = (amp[:-1] + amp[1:]) // 2
    return ConstellationSpec(bits=bits, weights=w, indices=idx, amplitudes=amp, threshold_rows=thr)


def _error_runs(spec: ConstellationSpec, user: int, bit: int, m: int):
    """Consecutive level ranges ``(first, last)`` whose ``bit`` of ``user`` differs from level ``m``."""
    lb = spec.label_bits(user)[:, bit]
    wrong = lb != lb[m]
    runs = []
    start = None
    for n, w in enumerate(wrong):
        if w and start is None:
            start = n
        elif not w and start is not None:
            runs.append((start, n - 1))
            start = None
    if start is not None:
        runs.append((start, len(wrong) - 1))
    return runs


def column_terms(spec: ConstellationSpec, user: int, bit: int, m: int):
    """Signed Q-terms of one bit given the true level ``m``.

    Each error interval ``[lo, hi]`` of received positions contributes
    ``Q(lo - level) - Q(hi - level)``; an interval unbounded below is written
    ``Q(level - hi)``.  Returns ``[(sign, row), ...]`` with integer rows,
    argument = ``row . h / sigma``.
    """
    n = spec.n_levels
    lvl = spec.amplitudes[m]
    out = []
    for first, last in _error_runs(spec, user, bit, m):
        lo = None if first == 0 else spec.threshold_rows[first - 1] - lvl
        hi = None if last == n - 1 else spec.threshold_rows[last] - lvl
        if lo is None:
            out.append((1, tuple(int(x) for x in -hi)))
        else:
            out.append((1, tuple(int(x) for x in lo)))
            if hi is not None:
                out.append((-1, tuple(int(x) for x in hi)))
    return out


def raw_bit_terms(spec: ConstellationSpec, user: int, bit: int):
    """All column terms of one bit, in enumeration order, with weight ``1/n_levels`` each."""
    w = Fraction(1, spec.n_levels)
    return [(sign * w, row) for m in range(spec.n_levels) for sign, row in column_terms(spec, user, bit, m)]


def raw_user_terms(spec: ConstellationSpec, user: int):
    """Column terms of all of ``user``'s per-dimension bits, weighted for the per-bit average."""
    nb = spec.dim_bits[user]
    return [(c / nb, row) for t in range(nb) for c, row in raw_bit_terms(spec, user, t)]


def _canonical_merge(terms, weights) -> dict:
    """Orient every row positively at ``weights`` (``Q(-x) = 1 - Q(x)``) and merge equal rows."""
    acc: dict[tuple[int, ...], Fraction] = {}
    const = Fraction(0)
    for c, row in terms:
        v = float(np.dot(row, weights))
        if v < 0:
            const += c
            c, row = -c, tuple(-x for x in row)
        elif v == 0:
            raise DegenerateConstellationError(f"zero error distance for row {row}")
        acc[row] = acc.get(row, Fraction(0)) + c
    if const != 0:
        raise AssertionError(f"constant offset {const} left after orientation")
    return {row: c for row, c in acc.items() if c != 0}


@dataclass(frozen=True)
class BerTerm:
    c: Fraction
    a: tuple[int, ...]


@dataclass(frozen=True)
class BerExpression:
    """Conditional BER of one user as ``sum_q c_q Q(a_q . h / sigma)``."""

    user: int
    bits: tuple[int, ...]
    terms: tuple[BerTerm, ...]

    @property
    def N(self) -> int:
        return len(self.terms)

    @property
    def c(self) -> np.ndarray:
        return np.array([float(t.c) for t in self.terms])

    @property
    def A(self) -> np.ndarray:
        return np.array([t.a for t in self.terms], dtype=float).reshape(self.N, len(self.bits))

    def as_dict(self) -> dict:
        return {
            "user": self.user,
            "bits": list(self.bits),
            "terms": [{"c": f"{t.c.numerator}/{t.c.denominator}", "a": list(t.a)} for t in self.terms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BerExpression":
        return cls(
            user=int(d["user"]),
            bits=tuple(d["bits"]),
            terms=tuple(BerTerm(Fraction(t["c"]), tuple(int(x) for x in t["a"])) for t in d["terms"]),
        )


def _sorted_terms(acc: dict) -> tuple[BerTerm, ...]:
    return tuple(BerTerm(c, row) for row, c in sorted(acc.items(), key=lambda kv: (tuple(abs(x) for x in kv[0]), kv[0])))


def bit_terms(bits: Sequence[int], user: int, bit: int, weights=None) -> BerExpression:
    """Merged expression for a single per-dimension bit of ``user``."""
    spec = build_superimposed(bits, weights)
    acc = _canonical_merge(raw_bit_terms(spec, user, bit), spec.weights)
    return BerExpression(user=user, bits=spec.bits, terms=_sorted_terms(acc))


def extract_ber_terms(bits: Sequence[int], weights=None) -> list[BerExpression]:
    """Per-user conditional BER expressions, averaged over each user's bits."""
    spec = build_superimposed(bits, weights)
    out = []
    for k in range(spec.K):
        terms = raw_user_terms(spec, k)
        out.append(BerExpression(user=k, bits=spec.bits, terms=_sorted_terms(_canonical_merge(terms, spec.weights))))
    return out


def _numeric_distances(bits, weights, user):
    """Error distances of ``user`` computed from numerically sorted levels."""
    sizes = [2 ** (b // 2) for b in bits]
    idx = np.array(list(itertools.product(*[range(m) for m in sizes])))
    amp = 2 * idx - (np.array(sizes) - 1)
    lev = amp @ np.asarray(weights, dtype=float)
    order = np.argsort(lev, kind="stable")
    idx, lev = idx[order], lev[order]
    thr = 0.5 * (lev[:-1] + lev[1:])
    n = len(lev)
    nb = bits[user] // 2
    lab = gray(idx[:, user])
    dist = []
    for t in range(nb):
        bit = (lab >> (nb - 1 - t)) & 1
        for m in range(n):
            wrong = bit != bit[m]
            edges = np.flatnonzero(np.diff(np.concatenate(([0], wrong.astype(int), [0]))))
            for first, stop in zip(edges[::2], edges[1::2]):
                last = stop - 1
                if first == 0:
                    dist.append(lev[m] - thr[last])
                else:
                    dist.append(thr[first - 1] - lev[m])
                    if last != n - 1:
                        dist.append(thr[last] - lev[m])
    return np.array(dist), order


def algorithm1_coefficients(bits: Sequence[int], rho: Sequence[float] | None = None, epsilon: float = 0.1):
    """Coefficient matrices ``A_k`` by finite differences of the error distances.

    Distances are linear in ``sqrt(rho_i)``, so perturbing one amplitude by
    ``epsilon`` and differencing recovers the integer coefficients.  Row ``q``
    of ``A_k`` matches the enumeration order of :func:`raw_bit_terms` over all
    of user ``k``'s bits.
    """
    bits = _check_bits(bits)
    rho = default_weights(bits) ** 2 if rho is None else np.asarray(rho, dtype=float)
    root = np.sqrt(rho)
    out = []
    for k in range(len(bits)):
        d1, order1 = _numeric_distances(bits, root, k)
        A = np.empty((len(d1), len(bits)))
        for i in range(len(bits)):
            rho_p = rho.copy()
            rho_p[i] = (root[i] + epsilon) ** 2
            d2, order2 = _numeric_distances(bits, np.sqrt(rho_p), k)
            if len(d2) != len(d1) or not np.array_equal(order1, order2):
                raise OrderingChangedError(f"level ordering changed when perturbing user {i} by {epsilon}")
            A[:, i] = (d2 - d1) / epsilon
        out.append(A)
    return out


def detect_index(y_re, h, spec: ConstellationSpec) -> np.ndarray:
    """Canonical level index of real received samples.

    Thresholds are the canonical midpoints evaluated at the actual channels;
    the index is the number of thresholds strictly below ``y``, so a sample
    exactly on a threshold goes to the lower level.  ``h`` is ``(K,)`` or
    ``(B, K)`` with ``y_re`` of shape ``(B, ...)``.
    """
    y_re = np.asarray(y_re, dtype=float)
    T = spec.thresholds_at(h)
    if T.ndim == 1:
        return np.sum(y_re[..., None] > T, axis=-1)
    T = T.reshape(T.shape[0], *([1] * (y_re.ndim - 1)), T.shape[1])
    return np.sum(y_re[..., None] > T, axis=-1)


def detect(y, h, spec: ConstellationSpec) -> list[np.ndarray]:
    """Per-user Gray bits ``[I bits..., Q bits...]`` for complex received samples."""
    y = np.asarray(y)
    mi = detect_index(np.real(y), h, spec)
    mq = detect_index(np.imag(y), h, spec)
    out = []
    for k, nb in enumerate(spec.dim_bits):
        lb = spec.label_bits(k)
        out.append(np.concatenate([lb[mi], lb[mq]], axis=-1))
    return out


def conditional_ber(expr: BerExpression, h, sigma_n: float):
    """``sum_q c_q Q(a_q . h / sigma_n)`` for one or many channel vectors."""
    h = np.asarray(h, dtype=float)
    x = h @ expr.A.T / sigma_n
    val = qfunc(x) @ expr.c
    if np.any(val < -1e-12) or np.any(val > 1 + 1e-12):
        raise AssertionError(f"conditional BER out of range: {val}")
    return val


def expressions_to_json(exprs: Sequence[BerExpression]) -> str:
    return json.dumps([e.as_dict() for e in exprs], indent=1)


def expressions_from_json(text: str) -> list[BerExpression]:
    return [BerExpression.from_dict(d) for d in json.loads(text)]
