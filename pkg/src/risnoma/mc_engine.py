"""Seeded Monte Carlo link simulation of uplink RIS-NOMA and TDMA-OMA baselines.

A point is simulated in fixed-size chunks.  Chunk ``c`` draws from its own
generator seeded by ``SeedSequence(seed, spawn_key=(c,))``, so results do not
depend on how chunks are spread over workers, and early stopping is decided
on the in-order prefix of chunks.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .channel_model import SystemConfig, align_batch, draw_partition_sums, qam_scale
from .constellation import build_superimposed, detect_index, gray

__all__ = ["McResult", "run_noma_point", "run_oma_point", "mc_csv", "CHUNK", "MIN_ERRORS"]

CHUNK = 4096
MIN_ERRORS = 200
MC_CSV_FIELDS = ["scenario", "user", "power_dB", "runs", "errors", "ber", "stderr", "seed"]


@dataclass
class McResult:
    """Per-user error counts of one simulated point."""

    errors: np.ndarray
    bits_simulated: np.ndarray
    seed: int
    runs: int
    discarded_alignment_failures: int = 0
    scenario: str = "noma"
    powers_dB: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ber(self) -> np.ndarray:
        return self.errors / np.maximum(self.bits_simulated, 1)

    @property
    def stderr(self) -> np.ndarray:
        p = self.ber
        return np.sqrt(p * (1 - p) / np.maximum(self.bits_simulated, 1))

    def rows(self) -> list[dict]:
        return [
            {
                "scenario": self.scenario,
                "user": k + 1,
                "power_dB": float(self.powers_dB[k]),
                "runs": self.runs,
                "errors": int(self.errors[k]),
                "ber": float(self.ber[k]),
                "stderr": float(self.stderr[k]),
                "seed": self.seed,
            }
            for k in range(len(self.errors))
        ]


def mc_csv(results: Iterable[McResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=MC_CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in results:
        for row in r.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _popcount_table(nbits: int) -> np.ndarray:
    return np.array([bin(i).count("1") for i in range(2**nbits)], dtype=np.int64)


def _bit_errors(tx_idx, rx_idx, nbits_dim):
    """Gray-label bit differences summed over both dimensions; inputs ``(B, 2)``."""
    table = _popcount_table(nbits_dim)
    return table[gray(tx_idx) ^ gray(rx_idx)].sum(axis=-1)


def _chunk_rng(seed: int, c: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))


def _draw_symbols(rng, sizes, B):
    sizes = np.asarray(sizes)
    return rng.integers(0, sizes[None, :, None], size=(B, len(sizes), 2))


def _noma_chunk(args):
    cfg, seed, c, B = args
    rng = _chunk_rng(seed, c)
    spec = build_superimposed(cfg.bits)
    sizes = np.array([2 ** (b // 2) for b in cfg.bits])
    _, cross = draw_partition_sums(cfg, rng, B)
    gamma = cross * cfg.scale_factors()[None, :, None]
    _, h, conv, _ = align_batch(gamma)
    idx = _draw_symbols(rng, sizes, B)
    noise = rng.standard_normal((B, 1, 2)) * cfg.sigma_n
    keep = conv & np.all(np.isfinite(h), axis=1)
    h, idx, noise = h[keep], idx[keep], noise[keep]
    amp = 2 * idx - (sizes[None, :, None] - 1)
    y = (h[:, :, None] * amp).sum(axis=1) + noise[:, 0, :]
    m = detect_index(y, h, spec)
    rx = spec.indices[m]  # (B, 2, K)
    errors = np.array([_bit_errors(idx[:, k, :], rx[:, :, k], cfg.bits[k] // 2).sum() for k in range(cfg.K)])
    return errors, int(keep.sum()), int((~keep).sum())


def _oma_chunk(args):
    cfg, variant, seed, c, B = args
    rng = _chunk_rng(seed, c)
    K = cfg.K
    oma_bits = [b * K for b in cfg.bits]
    sizes = np.array([2 ** (b // 2) for b in oma_bits])
    scale = np.sqrt(cfg.P_linear * cfg.eta / np.array([qam_scale(2**b) for b in oma_bits]))
    coherent, cross = draw_partition_sums(cfg, rng, B)
    if variant == "oma1":
        h = scale[None, :] * coherent.sum(axis=2)
    else:
        # foreign partitions stay matched to their owners; coherent detection removes the common phase
        h = np.abs((cross * scale[None, :, None]).sum(axis=2))
    idx = _draw_symbols(rng, sizes, B)
    noise = rng.standard_normal((B, K, 2)) * cfg.sigma_n
    amp = 2 * idx - (sizes[None, :, None] - 1)
    errors = np.zeros(K, dtype=np.int64)
    for k in range(K):
        spec = build_superimposed([oma_bits[k]])
        hk = h[:, k:k + 1]
        y = (hk[:, :, None] * amp[:, k:k + 1, :]).sum(axis=1) + noise[:, k, :]
        m = detect_index(y, hk, spec)
        rx = spec.indices[m][..., 0]
        errors[k] = _bit_errors(idx[:, k, :], rx, oma_bits[k] // 2).sum()
    return errors, B, 0


def _run_chunks(fn, make_args, cfg, runs, seed, min_errors, chunk, workers):
    n_chunks = -(-runs // chunk)
    sizes = [min(chunk, runs - c * chunk) for c in range(n_chunks)]
    errors = np.zeros(cfg.K, dtype=np.int64)
    kept = 0
    dropped = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        c = 0
        while c < n_chunks:
            wave = list(range(c, min(n_chunks, c + max(workers, 1))))
            args = [make_args(i, sizes[i]) for i in wave]
            outs = list(pool.map(fn, args)) if pool else [fn(a) for a in args]
            stop = False
            for e, k_, d in outs:
                errors += e
                kept += k_
                dropped += d
                c += 1
                if min_errors and np.all(errors >= min_errors):
                    stop = True
                    break
            if stop:
                break
    finally:
        if pool:
            pool.shutdown()
    return errors, kept, dropped


def run_noma_point(cfg: SystemConfig, powers_dB: Sequence[float] | None = None, runs: int = 10**5,
                   seed: int = 0, min_errors: int | None = MIN_ERRORS, chunk: int = CHUNK,
                   workers: int = 1) -> McResult:
    """Simulate the aligned superimposed uplink and count per-user bit errors.

    Each run draws a fresh channel realisation, aligns it, sends one symbol
    per user and detects with the canonical thresholds.  Draws whose
    alignment fails are discarded and counted.  With ``min_errors`` set the
    point stops after the first chunk at which every user has that many errors.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if powers_dB is not None:
        cfg = cfg.with_powers(powers_dB)
    errors, kept, dropped = _run_chunks(
        _noma_chunk, lambda c, B: (cfg, seed, c, B), cfg, runs, seed, min_errors, chunk, workers
    )
    bits = np.array(cfg.bits, dtype=np.int64) * kept
    return McResult(errors=errors, bits_simulated=bits, seed=seed, runs=kept,
                    discarded_alignment_failures=dropped, scenario="noma", powers_dB=np.array(cfg.P))


def run_oma_point(cfg: SystemConfig, variant: str, powers_dB: Sequence[float] | None = None,
                  runs: int = 10**5, seed: int = 0, min_errors: int | None = MIN_ERRORS,
                  chunk: int = CHUNK, workers: int = 1) -> McResult:
    """Simulate the TDMA-OMA baseline: each user alone with order ``M_i^K``.

    ``oma1`` phase-matches every reflector to the active user; ``oma2`` matches
    only the user's own partition while the others keep their owners' phases.
    """
    variant = variant.lower()
    if variant not in ("oma1", "oma2"):
        raise ValueError(f"unknown OMA variant {variant!r}")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if powers_dB is not None:
        cfg = cfg.with_powers(powers_dB)
    errors, kept, _ = _run_chunks(
        _oma_chunk, lambda c, B: (cfg, variant, seed, c, B), cfg, runs, seed, min_errors, chunk, workers
    )
    bits = np.array([b * cfg.K for b in cfg.bits], dtype=np.int64) * kept
    return McResult(errors=errors, bits_simulated=bits, seed=seed, runs=kept, scenario=variant,
                    powers_dB=np.array(cfg.P))
