"""Uplink grant-free NOMA system model.

Generates spreading codebooks, device channels and activities, transmitted
symbols, and noisy received signals for the coherent scheme (pilot followed by
spread data symbols) and the non-coherent scheme (the transmitted sequence
index encodes the data bits).

Everything runs in noise-normalized units: effective channels and received
signals are divided by the noise standard deviation, so additive noise is
CN(0, 1) per complex sample. The per-device SNR is preserved exactly and no
quantity of interest depends on the common scale.

Sample generation is pure in (config, seed, sample index): sample ``i`` draws
from its own RNG substream, so disjoint index ranges can be produced
independently and a prefix of a stream never depends on its length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .config import COHERENT, NONCOHERENT, SystemConfig


@dataclass
class SpreadingCodebook:
    """Unit-norm complex signature sequences, one column per device (coherent)
    or per device/sequence pair in device-major order (non-coherent)."""

    sequences: np.ndarray  # complex [L, M]
    scheme: str
    n_devices: int
    n_seq_per_device: int

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[0]

    @property
    def n_columns(self) -> int:
        return self.sequences.shape[1]

    def device_columns(self, k: int) -> np.ndarray:
        """Columns assigned to device k, shape [L, n_seq_per_device]."""
        j = self.n_seq_per_device
        return self.sequences[:, k * j:(k + 1) * j]


@dataclass
class ChannelRealization:
    """One draw of distances, fading, activities, and effective channels."""

    distances: np.ndarray        # [K] meters
    large_scale: np.ndarray      # [K] linear power gain
    small_scale: np.ndarray      # [K] complex CN(0,1)
    activity: np.ndarray         # [K] {0,1}
    gamma: np.ndarray            # [K] complex, noise-normalized units
    seq_choice: np.ndarray | None = None  # [K, 2^J] {0,1}, non-coherent only

    @property
    def gamma_per_sequence(self) -> np.ndarray:
        """Non-coherent per-sequence channels gamma_kj, shape [K, 2^J]."""
        if self.seq_choice is None:
            raise ValueError("per-sequence channels exist only for the non-coherent scheme")
        return self.gamma[:, None] * self.seq_choice


@dataclass
class SampleBatch:
    """A contiguous block of generated samples (leading axis = sample)."""

    start: int
    activity: np.ndarray          # [B, K] int8
    gamma: np.ndarray             # [B, K] complex128 (zero for inactive devices)
    snr: np.ndarray               # [B, K] per-device prior channel variance A^2 * beta / sigma_n^2
    bits: np.ndarray              # [B, K, J] uint8 (garbage rows allowed for inactive devices)
    symbols: np.ndarray | None    # [B, K, D] complex, coherent only; zero rows for inactive
    seq_choice: np.ndarray | None  # [B, K, 2^J] int8, non-coherent only
    y_pilot: np.ndarray | None    # [B, L] complex
    y_data: np.ndarray | None     # [B, D, L] complex
    y_nc: np.ndarray | None       # [B, L] complex
    noise_var: float = 1.0

    @property
    def n_samples(self) -> int:
        return self.activity.shape[0]


def generate_codebook(config: SystemConfig, seed: int) -> SpreadingCodebook:
    """Draw the spreading codebook: CN(0, 1/L) entries, columns normalized to unit norm."""
    n_cols = config.n_columns
    if config.seq_len < 1 or n_cols < 1:
        raise ValueError("codebook needs L >= 1 and at least one column")
    rng = seeding.substream(seed, seeding.CODEBOOK)
    scale = np.sqrt(0.5 / config.seq_len)
    raw = scale * (rng.standard_normal((config.seq_len, n_cols))
                   + 1j * rng.standard_normal((config.seq_len, n_cols)))
    norms = np.linalg.norm(raw, axis=0)
    if np.any(norms == 0.0):  # probability zero, but normalization must not divide by 0
        raise ValueError("degenerate all-zero codebook column")
    return SpreadingCodebook(
        sequences=raw / norms,
        scheme=config.scheme,
        n_devices=config.n_devices,
        n_seq_per_device=config.n_seq_per_device,
    )


def _draw_channel(config: SystemConfig, rng: np.random.Generator):
    k = config.n_devices
    d = rng.uniform(config.dist_min_m, config.dist_max_m, size=k)
    z = rng.standard_normal((k, 2))
    h = np.sqrt(0.5) * (z[:, 0] + 1j * z[:, 1])
    a = (rng.random(k) < config.activity_prob).astype(np.int8)
    beta = 10.0 ** (config.pathloss_db(d) / 10.0)
    return d, beta, h, a


def _effective_gamma(config: SystemConfig, beta, h, a) -> np.ndarray:
    return config.amp_scale * np.sqrt(beta) * h * a


def sample_channels(config: SystemConfig, seed: int, index: int = 0) -> ChannelRealization:
    """Draw one channel realization (no received signal, no rejection)."""
    rng = seeding.substream(seed, seeding.SAMPLE, index)
    d, beta, h, a = _draw_channel(config, rng)
    gamma = _effective_gamma(config, beta, h, a)
    seq_choice = None
    if config.scheme == NONCOHERENT:
        n_seq = config.n_seq_per_device
        idx = rng.integers(0, n_seq, size=config.n_devices)
        seq_choice = np.zeros((config.n_devices, n_seq), dtype=np.int8)
        seq_choice[np.arange(config.n_devices), idx] = 1
        seq_choice *= a[:, None]
    return ChannelRealization(distances=d, large_scale=beta, small_scale=h,
                              activity=a, gamma=gamma, seq_choice=seq_choice)


def _noise(rng: np.random.Generator, shape) -> np.ndarray:
    z = rng.standard_normal(shape + (2,))
    return np.sqrt(0.5) * (z[..., 0] + 1j * z[..., 1])


def simulate_coherent(config: SystemConfig, codebook: SpreadingCodebook,
                      realization: ChannelRealization, symbols: np.ndarray,
                      seed: int, noiseless: bool = False):
    """Received pilot and data signals for one coherent-scheme realization.

    Returns (y_p [L], y_d [L, D]). ``symbols`` is [K, D] with zero rows for
    inactive devices.
    """
    if config.scheme != COHERENT:
        raise ValueError("simulate_coherent requires a coherent-scheme config")
    s = codebook.sequences
    if s.shape[1] != realization.gamma.shape[0]:
        raise ValueError(
            f"codebook/realization dimension mismatch: {s.shape[1]} columns "
            f"vs {realization.gamma.shape[0]} devices")
    symbols = np.asarray(symbols)
    if symbols.shape != (config.n_devices, config.n_symbols):
        raise ValueError(f"symbols must have shape (K, D)={config.n_devices, config.n_symbols}")
    y_p = s @ realization.gamma
    y_d = s @ (realization.gamma[:, None] * symbols)
    if not noiseless:
        rng = seeding.substream(seed, seeding.NOISE)
        y_p = y_p + _noise(rng, (config.seq_len,))
        y_d = y_d + _noise(rng, (config.seq_len, config.n_symbols))
    return y_p, y_d


def simulate_noncoherent(config: SystemConfig, codebook: SpreadingCodebook,
                         realization: ChannelRealization, seed: int,
                         noiseless: bool = False) -> np.ndarray:
    """Received signal for one non-coherent realization (y_nc, length L)."""
    if config.scheme != NONCOHERENT:
        raise ValueError("simulate_noncoherent requires a non-coherent-scheme config")
    if realization.seq_choice is None:
        raise ValueError("realization carries no sequence-choice matrix")
    choice = realization.seq_choice
    if not np.array_equal(choice.sum(axis=1), realization.activity):
        raise ValueError("sequence-choice matrix must select exactly one sequence "
                         "per active device and none for inactive devices")
    s = codebook.sequences
    if s.shape[1] != choice.size:
        raise ValueError(
            f"codebook/realization dimension mismatch: {s.shape[1]} columns "
            f"vs {choice.size} device-sequence pairs")
    gamma_cols = (realization.gamma[:, None] * choice).reshape(-1)
    y = s @ gamma_cols
    if not noiseless:
        rng = seeding.substream(seed, seeding.NOISE)
        y = y + _noise(rng, (config.seq_len,))
    return y


def bits_to_symbols(bits: np.ndarray, constellation: tuple[complex, ...]) -> np.ndarray:
    """Map bit words to constellation symbols, big-endian within each word.

    ``bits`` has shape [..., D, bits_per_symbol]; the result has shape [..., D].
    For BPSK this is bit 0 -> +1, bit 1 -> -1.
    """
    bits = np.asarray(bits)
    bps = bits.shape[-1]
    weights = 2 ** np.arange(bps - 1, -1, -1)
    idx = (bits * weights).sum(axis=-1)
    return np.asarray(constellation)[idx]


def symbols_to_bits(indices: np.ndarray, bits_per_symbol: int) -> np.ndarray:
    """Inverse of ``bits_to_symbols`` on constellation indices (big-endian)."""
    indices = np.asarray(indices)
    shifts = np.arange(bits_per_symbol - 1, -1, -1)
    return ((indices[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_seq_index(bits: np.ndarray) -> np.ndarray:
    """Non-coherent bit mapping: J bits -> 0-based sequence index (big-endian)."""
    bits = np.asarray(bits)
    j = bits.shape[-1]
    if j == 0:
        return np.zeros(bits.shape[:-1], dtype=np.int64)
    weights = 2 ** np.arange(j - 1, -1, -1)
    return (bits * weights).sum(axis=-1)


def seq_index_to_bits(index: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of ``bits_to_seq_index``."""
    index = np.asarray(index)
    shifts = np.arange(n_bits - 1, -1, -1)
    return ((index[..., None] >> shifts) & 1).astype(np.uint8)


def generate_dataset(config: SystemConfig, codebook: SpreadingCodebook,
                     n_samples: int, seed: int, batch_size: int = 1024,
                     start: int = 0, noiseless: bool = False,
                     stream: int = seeding.SAMPLE):
    """Yield ``SampleBatch`` blocks for samples [start, start + n_samples).

    Every sample is guaranteed at least one active device: the activity vector
    is redrawn (within the sample's own substream) until non-empty, which
    realizes the activity-count distribution conditioned on >= 1 active.
    Bits are i.i.d. uniform; coherent symbols are the modulated bits.
    ``stream`` names the substream family (training / validation / test sets
    of the same root seed are disjoint).
    """
    if n_samples < 1:
        raise ValueError("n_samples >= 1 required")
    if config.activity_prob <= 0.0:
        raise ValueError("dataset generation requires eps > 0 "
                         "(rejection to >= 1 active device would not terminate)")
    coherent = config.scheme == COHERENT
    k, L = config.n_devices, config.seq_len
    d_sym = config.n_symbols if coherent else 0
    n_seq = config.n_seq_per_device
    s = codebook.sequences
    if s.shape != (L, config.n_columns):
        raise ValueError("codebook does not match the config dimensions")

    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        base = start + done
        act = np.empty((b, k), dtype=np.int8)
        gamma = np.empty((b, k), dtype=np.complex128)
        snr = np.empty((b, k), dtype=np.float64)
        bits = np.empty((b, k, config.n_bits), dtype=np.uint8)
        if coherent:
            noise_p = np.empty((b, L), dtype=np.complex128)
            noise_d = np.empty((b, d_sym, L), dtype=np.complex128)
        else:
            noise_nc = np.empty((b, L), dtype=np.complex128)

        for i in range(b):
            rng = seeding.substream(seed, stream, base + i)
            d, beta, h, a = _draw_channel(config, rng)
            while not a.any():
                a = (rng.random(k) < config.activity_prob).astype(np.int8)
            act[i] = a
            snr[i] = (config.amp_scale ** 2) * beta
            gamma[i] = _effective_gamma(config, beta, h, a)
            bits[i] = rng.integers(0, 2, size=(k, config.n_bits), dtype=np.uint8)
            if coherent:
                noise_p[i] = _noise(rng, (L,))
                noise_d[i] = _noise(rng, (d_sym, L))
            else:
                noise_nc[i] = _noise(rng, (L,))

        if coherent:
            words = bits.reshape(b, k, d_sym, config.bits_per_symbol)
            symbols = bits_to_symbols(words, config.constellation)
            symbols = symbols * act[:, :, None]
            y_p = np.einsum("bk,lk->bl", gamma, s)
            y_d = np.einsum("bkd,lk->bdl", gamma[:, :, None] * symbols, s)
            if not noiseless:
                y_p = y_p + noise_p
                y_d = y_d + noise_d
            yield SampleBatch(start=base, activity=act, gamma=gamma, snr=snr,
                              bits=bits, symbols=symbols, seq_choice=None,
                              y_pilot=y_p, y_data=y_d, y_nc=None)
        else:
            idx = bits_to_seq_index(bits)
            choice = np.zeros((b, k, n_seq), dtype=np.int8)
            bb, kk = np.meshgrid(np.arange(b), np.arange(k), indexing="ij")
            choice[bb, kk, idx] = 1
            choice *= act[:, :, None]
            gamma_cols = (gamma[:, :, None] * choice).reshape(b, -1)
            y_nc = np.einsum("bm,lm->bl", gamma_cols, s)
            if not noiseless:
                y_nc = y_nc + noise_nc
            yield SampleBatch(start=base, activity=act, gamma=gamma, snr=snr,
                              bits=bits, symbols=None, seq_choice=choice,
                              y_pilot=None, y_data=None, y_nc=y_nc)
        done += b
