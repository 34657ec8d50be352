"""Channel statistics, sampling and alignment for partitioned-RIS uplink NOMA.

Every user ``i`` owns a partition of ``L_i`` reflectors whose phases are
matched to its own cascaded channel.  User ``i`` therefore reaches the base
station through an *optimized* component ``gamma_ii`` (real, positive) and
*cross* components ``gamma_ij`` reflected off the other partitions.  After the
per-partition control angles ``alpha_j`` are applied every effective channel
is purely real.

Powers are carried in dB relative to a unit per-dimension noise variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "InvalidModulationError",
    "AlignmentError",
    "SystemConfig",
    "ChannelStats",
    "ChannelRealization",
    "qam_scale",
    "pathloss",
    "gamma_params",
    "channel_stats",
    "cf_optimized",
    "cf_cross_real",
    "draw_partition_sums",
    "sample_gammas",
    "sample_realization",
    "align_batch",
    "align_channels",
    "TOL_ALIGN",
]

TOL_ALIGN = 1e-10
MAX_NEWTON_ITER = 100
MAX_HALVINGS = 8

# moments of |h||g| for h, g ~ CN(0, 1)
RAYLEIGH_PRODUCT_MEAN = np.pi / 4
RAYLEIGH_PRODUCT_VAR = (16 - np.pi**2) / 16


class ConfigError(ValueError):
    """Invalid scenario parameter.  ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class InvalidModulationError(ConfigError):
    pass


class AlignmentError(RuntimeError):
    """Newton iteration for the control angles did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def qam_scale(M: int) -> float:
    """Energy normalisation ``beta = 2(M - 1)/3`` of a square M-QAM alphabet.

    The alphabet uses odd-integer coordinates ``{+-1, +-3, ...}``, so
    ``E|x|^2 / beta = 1``.
    """
    if int(M) != M or M < 4:
        raise InvalidModulationError(f"modulation order {M} is not a square QAM order >= 4")
    b = int(M).bit_length() - 1
    if 2**b != M or b % 2:
        raise InvalidModulationError(f"modulation order {M} is not a square QAM order >= 4")
    return 2.0 * (M - 1) / 3.0


def pathloss(d_user_ris, d_ris_bs, psi):
    """Cascaded user-RIS-BS path gain ``(d_u * d_b)^-psi``."""
    d_user_ris = np.asarray(d_user_ris, dtype=float)
    if np.any(d_user_ris <= 0) or d_ris_bs <= 0:
        raise ConfigError("distances must be positive", field="d_user_ris" if np.any(d_user_ris <= 0) else "d_ris_bs")
    if psi <= 0:
        raise ConfigError("path-loss exponent must be positive", field="psi")
    out = (d_user_ris * d_ris_bs) ** (-psi)
    return float(out) if out.ndim == 0 else out


def gamma_params(L_i, P_i, eta_i, beta_i):
    """Moment-matched Gamma ``(scale, shape)`` of the optimized component.

    The shape depends only on the partition size; power, path loss and
    normalisation only stretch the scale.
    """
    scale = np.sqrt(np.asarray(P_i, dtype=float) * eta_i / beta_i)
    zeta = scale * (16 - np.pi**2) / (4 * np.pi)
    N = np.asarray(L_i, dtype=float) * np.pi**2 / (16 - np.pi**2)
    return zeta, N


@dataclass(frozen=True)
class SystemConfig:
    """Scenario description; the single source of truth for K, partitions and geometry.

    ``P`` holds the per-user transmit powers in dB (noise variance per real
    dimension is ``sigma_n2``, 1 by convention).
    """

    L: tuple[int, ...]
    bits: tuple[int, ...]
    d_user_ris: tuple[float, ...]
    d_ris_bs: float
    psi: float = 2.2
    sigma_n2: float = 1.0
    P: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "L", tuple(int(x) for x in np.atleast_1d(self.L)))
        object.__setattr__(self, "bits", tuple(int(x) for x in np.atleast_1d(self.bits)))
        object.__setattr__(self, "d_user_ris", tuple(float(x) for x in np.atleast_1d(self.d_user_ris)))
        P = np.atleast_1d(np.asarray(self.P, dtype=float))
        if P.size == 0:
            P = np.zeros(len(self.L))
        object.__setattr__(self, "P", tuple(float(x) for x in P))
        K = len(self.L)
        if K < 1:
            raise ConfigError("at least one user is required", field="L")
        for name in ("bits", "d_user_ris", "P"):
            if len(getattr(self, name)) != K:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected K={K}", field=name)
        if any(l < 1 for l in self.L):
            raise ConfigError("every partition needs at least one reflector", field="L")
        for b in self.bits:
            if b < 2 or b % 2:
                raise InvalidModulationError(f"bits per symbol {b} does not give a square QAM order", field="bits")
        if any(d <= 0 for d in self.d_user_ris):
            raise ConfigError("user-RIS distances must be positive", field="d_user_ris")
        if self.d_ris_bs <= 0:
            raise ConfigError("RIS-BS distance must be positive", field="d_ris_bs")
        if self.psi <= 0:
            raise ConfigError("path-loss exponent must be positive", field="psi")
        if self.sigma_n2 <= 0:
            raise ConfigError("noise variance must be positive", field="sigma_n2")
        if not all(np.isfinite(self.P)):
            raise ConfigError("powers must be finite", field="P")

    @property
    def K(self) -> int:
        return len(self.L)

    @property
    def L_total(self) -> int:
        return sum(self.L)

    @property
    def M(self) -> tuple[int, ...]:
        return tuple(2**b for b in self.bits)

    @property
    def sigma_n(self) -> float:
        return float(np.sqrt(self.sigma_n2))

    @property
    def beta(self) -> np.ndarray:
        return np.array([qam_scale(m) for m in self.M])

    @property
    def eta(self) -> np.ndarray:
        return pathloss(np.array(self.d_user_ris), self.d_ris_bs, self.psi)

    @property
    def P_linear(self) -> np.ndarray:
        return 10.0 ** (np.array(self.P) / 10.0)

    def scale_factors(self) -> np.ndarray:
        """``sqrt(P_i eta_i / beta_i)`` for every user."""
        return np.sqrt(self.P_linear * self.eta / self.beta)

    def with_powers(self, P_dB: Sequence[float]) -> "SystemConfig":
        return replace(self, P=tuple(float(p) for p in np.broadcast_to(P_dB, (self.K,))))

    def with_bits(self, bits: Sequence[int]) -> "SystemConfig":
        return replace(self, bits=tuple(bits))


@dataclass(frozen=True)
class ChannelStats:
    zeta: np.ndarray
    N: np.ndarray
    erlang_shape: np.ndarray
    scale_factor: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.N * self.zeta

    @property
    def var(self) -> np.ndarray:
        return self.N * self.zeta**2


def channel_stats(cfg: SystemConfig) -> ChannelStats:
    scale = cfg.scale_factors()
    zeta, N = gamma_params(np.array(cfg.L), cfg.P_linear, cfg.eta, cfg.beta)
    return ChannelStats(zeta=np.asarray(zeta), N=np.asarray(N), erlang_shape=np.array(cfg.L), scale_factor=scale)


def cf_optimized(z, zeta, N):
    """CF ``(1 - j zeta z)^-N`` of the Gamma model of ``gamma_ii``.

    Evaluated through the principal complex log; ``1 - j zeta z`` has positive
    real part for real ``z`` so the branch never flips.
    """
    z = np.asarray(z, dtype=float)
    return np.exp(-N * np.log1p(-1j * zeta * z))


def cf_cross_real(z, L_j, scale=1.0):
    """CF ``(1 + scale^2 z^2 / 4)^-L_j`` of ``Re(gamma_ij)``.

    The real part of a sum of ``L_j`` products of independent CN(0, 1) pairs
    is a difference of two iid Erlang(L_j, 1/2) variables.
    """
    z = np.asarray(z, dtype=float)
    return np.exp(-L_j * np.log1p(0.25 * scale**2 * z**2))


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)


def draw_partition_sums(cfg: SystemConfig, rng: np.random.Generator, size: int):
    """Draw ``size`` independent sets of user-partition-BS channels.

    Returns ``(coherent, cross)``, both ``(size, K, K)`` arrays indexed
    ``[draw, user i, partition j]`` and free of the power/path-loss scale:

    * ``coherent[:, i, j] = sum_l |h_ij,l| |g_j,l|``, what partition ``j``
      would deliver to user ``i`` if it were phase-matched to ``i``;
    * ``cross[:, i, j] = sum_l h_ij,l exp(j theta_j,l) g_j,l`` with partition
      ``j`` matched to its owner, so ``cross[:, j, j] == coherent[:, j, j]``.
    """
    K = cfg.K
    coherent = np.empty((size, K, K))
    cross = np.empty((size, K, K), dtype=complex)
    for j, Lj in enumerate(cfg.L):
        g = _cn(rng, (size, Lj))
        h = _cn(rng, (size, K, Lj))
        ag = np.abs(g)
        coherent[:, :, j] = np.einsum("bil,bl->bi", np.abs(h), ag)
        theta = -(np.angle(h[:, j, :]) + np.angle(g))
        g_tilde = g * np.exp(1j * theta)
        cross[:, :, j] = np.einsum("bil,bl->bi", h, g_tilde)
        cross[:, j, j] = coherent[:, j, j]
    return coherent, cross


def sample_gammas(cfg: SystemConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """``(size, K, K)`` scaled channel components ``gamma_ij``."""
    _, cross = draw_partition_sums(cfg, rng, size)
    return cross * cfg.scale_factors()[None, :, None]


def _residual(gamma, alpha):
    s = np.einsum("bij,bj->bi", gamma, np.exp(1j * alpha))
    return s


def align_batch(gamma: np.ndarray, tol: float = TOL_ALIGN, max_iter: int = MAX_NEWTON_ITER):
    """Solve ``Im(sum_j gamma_ij exp(j alpha_j)) = 0`` for a batch of draws.

    Damped Newton from ``alpha = 0`` with Jacobian
    ``Re(gamma_ij exp(j alpha_j))`` and up to ``MAX_HALVINGS`` step halvings
    whenever the residual norm fails to decrease.

    Returns ``(alpha, h_eff, converged, iterations)`` where ``h_eff`` is the
    real part of the rotated channel sums.
    """
    gamma = np.asarray(gamma, dtype=complex)
    B, K, _ = gamma.shape
    alpha = np.zeros((B, K))
    iterations = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    steps = 0.5 ** np.arange(MAX_HALVINGS + 1)

    for it in range(max_iter + 1):
        s = _residual(gamma, alpha)
        F = s.imag
        norm = np.max(np.abs(F), axis=1)
        converged = norm <= tol * np.max(np.abs(s.real), axis=1)
        active = ~converged
        if not active.any():
            break
        if it == max_iter:
            break
        idx = np.flatnonzero(active)
        g = gamma[idx]
        a = alpha[idx]
        J = (g * np.exp(1j * a)[:, None, :]).real
        det = np.linalg.det(J)
        ok = np.isfinite(det) & (np.abs(det) > 1e-300)
        step = np.zeros_like(a)
        if ok.any():
            step[ok] = np.linalg.solve(J[ok], F[idx][ok][..., None])[..., 0]
        # evaluate every halving at once, take the first that reduces the residual
        trial = a[:, None, :] - steps[None, :, None] * step[:, None, :]
        trial_s = np.einsum("bij,btj->bti", g, np.exp(1j * trial))
        trial_norm = np.linalg.norm(trial_s.imag, axis=2)
        better = trial_norm < np.linalg.norm(F[idx], axis=1)[:, None]
        pick = np.where(better.any(axis=1), better.argmax(axis=1), MAX_HALVINGS)
        alpha[idx] = trial[np.arange(len(idx)), pick]
        iterations[idx] += 1

    h_eff = _residual(gamma, alpha).real
    return alpha, h_eff, converged, iterations


def align_channels(gamma: np.ndarray, tol: float = TOL_ALIGN):
    """Control angles and real effective channels for one ``(K, K)`` draw.

    Raises
    ------
    AlignmentError
        If the Newton iteration does not reach the relative tolerance.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=complex))
    alpha, h_eff, conv, _ = align_batch(gamma[None], tol=tol)
    if not conv[0]:
        s = _residual(gamma[None], alpha)[0]
        raise AlignmentError("channel alignment did not converge", float(np.max(np.abs(s.imag))))
    return alpha[0], h_eff[0]


@dataclass(frozen=True)
class ChannelRealization:
    gamma: np.ndarray
    alpha: np.ndarray
    h_eff: np.ndarray


def sample_realization(cfg: SystemConfig, rng: np.random.Generator) -> ChannelRealization:
    gamma = sample_gammas(cfg, rng, 1)[0]
    alpha, h_eff = align_channels(gamma)
    return ChannelRealization(gamma=gamma, alpha=alpha, h_eff=h_eff)
