"""Real-domain conversion and standardization of channels and received signals.

Complex vectors are stacked as [Re; Im]. Multiplying a sequence ``s`` by a
complex scalar channel maps, in the real domain, to the 2L x 2 block matrix

    B(s) = [[Re s, -Im s],
            [Im s,  Re s]]

acting on the channel pair [Re g; Im g]. Standardization divides channels by
the population std of all real-form channel entries (sigma_gamma) and each
received-signal kind by its own entry std (sigma_y); the codebook scaled by
sigma_gamma / sigma_y makes the superposition identity hold verbatim on
standardized quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import COHERENT, NONCOHERENT
from .sysmodel import SampleBatch, SpreadingCodebook


class DegenerateDataError(ValueError):
    """Standardizer fit received an all-zero (or empty) input."""


def to_real(v: np.ndarray) -> np.ndarray:
    """Stack real over imaginary parts along the last axis: C^n -> R^2n."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def to_complex(r: np.ndarray) -> np.ndarray:
    """Inverse of ``to_real``."""
    r = np.asarray(r)
    n = r.shape[-1] // 2
    return r[..., :n] + 1j * r[..., n:]


def block_matrix(s: np.ndarray) -> np.ndarray:
    """Real 2L x 2 block matrix of one complex sequence."""
    s = np.asarray(s)
    top = np.stack([s.real, -s.imag], axis=-1)
    bot = np.stack([s.imag, s.real], axis=-1)
    return np.concatenate([top, bot], axis=0)


def block_columns(sequences: np.ndarray) -> np.ndarray:
    """Block matrices of all columns of a complex [L, M] matrix, shape [M, 2L, 2]."""
    s = np.asarray(sequences)
    re = s.real.T  # [M, L]
    im = s.imag.T
    top = np.stack([re, -im], axis=-1)
    bot = np.stack([im, re], axis=-1)
    return np.concatenate([top, bot], axis=1)


@dataclass
class Standardizer:
    """Frozen population stds fitted once on the training set.

    ``sigma_y_*`` entries are None for the signal kinds a scheme does not use.
    """

    sigma_gamma: float
    sigma_y_pilot: float | None = None
    sigma_y_data: float | None = None
    sigma_y_nc: float | None = None

    def __post_init__(self) -> None:
        for name in ("sigma_gamma", "sigma_y_pilot", "sigma_y_data", "sigma_y_nc"):
            v = getattr(self, name)
            if v is not None and not (v > 0.0):
                raise DegenerateDataError(f"{name} must be strictly positive (got {v})")


def _population_std(chunks: list[np.ndarray], what: str) -> float:
    n = sum(c.size for c in chunks)
    if n == 0:
        raise DegenerateDataError(f"cannot fit a standardizer on empty {what}")
    total = sum(float(c.sum()) for c in chunks)
    total_sq = sum(float(np.square(c).sum()) for c in chunks)
    mean = total / n
    var = total_sq / n - mean * mean
    if var <= 0.0:
        raise DegenerateDataError(f"{what} entries are all equal; refusing zero std")
    return float(np.sqrt(var))


def fit_standardizer(batches: list[SampleBatch], scheme: str) -> Standardizer:
    """Fit entry stds over a training set (population convention, mean included)."""
    if not batches:
        raise DegenerateDataError("need at least one batch to fit a standardizer")
    if scheme == COHERENT:
        g_chunks = [to_real(b.gamma) for b in batches]
        yp_chunks = [to_real(b.y_pilot) for b in batches]
        yd_chunks = [to_real(b.y_data) for b in batches]
        return Standardizer(
            sigma_gamma=_population_std(g_chunks, "effective-channel"),
            sigma_y_pilot=_population_std(yp_chunks, "pilot-signal"),
            sigma_y_data=_population_std(yd_chunks, "data-signal"),
        )
    if scheme == NONCOHERENT:
        # per-sequence channels gamma_kj: the chosen column carries gamma_k
        g_chunks = [to_real(b.gamma[:, :, None] * b.seq_choice) for b in batches]
        y_chunks = [to_real(b.y_nc) for b in batches]
        return Standardizer(
            sigma_gamma=_population_std(g_chunks, "effective-channel"),
            sigma_y_nc=_population_std(y_chunks, "received-signal"),
        )
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class StandardizedBatch:
    """Standardized real-domain signals and regression targets for one batch."""

    y_pilot: np.ndarray | None   # [B, 2L]
    y_data: np.ndarray | None    # [B, D, 2L]
    y_nc: np.ndarray | None      # [B, 2L]
    gamma: np.ndarray            # [B, K, 2] standardized channel pairs


@dataclass
class ScaledCodebook:
    """Per-device block tensors of the standardizer-scaled sequences."""

    pilot: np.ndarray | None     # [K, 2L, 2]
    data: np.ndarray | None      # [K, 2L, 2]
    nc: np.ndarray | None        # [K, 2^J, 2L, 2]


def scale_codebook(codebook: SpreadingCodebook, std: Standardizer) -> ScaledCodebook:
    s = codebook.sequences
    if codebook.scheme == COHERENT:
        return ScaledCodebook(
            pilot=block_columns(s * (std.sigma_gamma / std.sigma_y_pilot)),
            data=block_columns(s * (std.sigma_gamma / std.sigma_y_data)),
            nc=None,
        )
    blocks = block_columns(s * (std.sigma_gamma / std.sigma_y_nc))
    k, n_seq = codebook.n_devices, codebook.n_seq_per_device
    return ScaledCodebook(pilot=None, data=None,
                          nc=blocks.reshape(k, n_seq, *blocks.shape[1:]))


def standardize_signals(batch: SampleBatch, std: Standardizer) -> StandardizedBatch:
    gamma_std = to_real(batch.gamma[..., None]) / std.sigma_gamma  # [B, K, 2]
    y_pilot = y_data = y_nc = None
    if batch.y_pilot is not None:
        y_pilot = to_real(batch.y_pilot) / std.sigma_y_pilot
    if batch.y_data is not None:
        y_data = to_real(batch.y_data) / std.sigma_y_data
    if batch.y_nc is not None:
        y_nc = to_real(batch.y_nc) / std.sigma_y_nc
    return StandardizedBatch(y_pilot=y_pilot, y_data=y_data, y_nc=y_nc, gamma=gamma_std)


def standardize(batch: SampleBatch, codebook: SpreadingCodebook,
                std: Standardizer) -> tuple[StandardizedBatch, ScaledCodebook]:
    """Standardize one batch and return the correspondingly scaled codebook."""
    received = batch.y_pilot if batch.y_pilot is not None else batch.y_nc
    if received is not None and codebook.seq_len != received.shape[-1]:
        raise ValueError("codebook length does not match the received signals")
    return standardize_signals(batch, std), scale_codebook(codebook, std)


def unstandardize_gamma(gamma_pairs: np.ndarray, std: Standardizer) -> np.ndarray:
    """Standardized channel pairs [..., K, 2] back to complex channels [..., K]."""
    return std.sigma_gamma * (gamma_pairs[..., 0] + 1j * gamma_pairs[..., 1])
