"""Scenario and training configuration.

``SystemConfig`` collects every scenario constant of the uplink grant-free
NOMA system (device count, sequence length, coherence budget, activity
probability, powers, path loss, receiver stage count, loss weights).
``TrainConfig`` holds the training recipe. Both validate their invariants on
construction and report the violated rule by name.

Configs are parsed from a flat ``key=value`` text format (UTF-8, ``#``
comments). Unknown keys are errors. An empty file yields the default
simulation scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

COHERENT = "coherent"
NONCOHERENT = "non-coherent"

BPSK: tuple[complex, ...] = (1 + 0j, -1 + 0j)
QPSK: tuple[complex, ...] = (1 + 0j, 0 + 1j, -1 + 0j, 0 - 1j)
CONSTELLATIONS = {"bpsk": BPSK, "qpsk": QPSK}


class ConfigError(ValueError):
    """A configuration value violates a scenario constraint."""


def _require(cond: bool, rule: str) -> None:
    if not cond:
        raise ConfigError(f"config invariant violated: {rule}")


@dataclass(frozen=True)
class SystemConfig:
    """All scenario constants for one grant-free NOMA setup.

    Received signals are simulated in noise-normalized units: every effective
    channel and every received sample is divided by the noise standard
    deviation, so the additive noise has unit variance per complex entry.
    All downstream processing (standardization, detection metrics) is
    invariant to this common scale.
    """

    n_devices: int = 20
    seq_len: int = 6
    coherence_len: int = 18
    n_bits: int = 2
    n_symbols: int = 2
    activity_prob: float = 0.1
    tx_power_dbm: float = 20.0
    bandwidth_hz: float = 1e5
    noise_psd_dbm_hz: float = -169.0
    pathloss_a: float = -128.1
    pathloss_b: float = 36.7
    dist_min_m: float = 50.0
    dist_max_m: float = 500.0
    constellation: tuple[complex, ...] = BPSK
    scheme: str = COHERENT
    n_stages: int = 4
    decision_threshold: float = 0.5
    loss_weight: float = 0.5
    stage_weights: tuple[float, ...] = ()
    hidden_sizes: tuple[int, ...] = (64, 64)
    fcnn_hidden_sizes: tuple[int, ...] = (2048,) * 10

    def __post_init__(self) -> None:
        _require(self.scheme in (COHERENT, NONCOHERENT),
                 f"scheme must be '{COHERENT}' or '{NONCOHERENT}' (got {self.scheme!r})")
        _require(self.n_devices >= 1, "K >= 1")
        _require(self.seq_len >= 1, "L >= 1")
        _require(self.coherence_len >= 1, "tau_coh >= 1")
        _require(self.n_bits >= 0, "J >= 0")
        # activity_prob 0 is tolerated as a degenerate diagnostic scenario;
        # dataset generation additionally requires a strictly positive value.
        _require(0.0 <= self.activity_prob < 1.0, "eps in [0, 1)")
        _require(len(self.constellation) >= 2, "constellation needs >= 2 symbols")
        _require(0.0 < self.decision_threshold < 1.0, "tau_thr in (0, 1)")
        _require(0.0 < self.loss_weight < 1.0, "lambda in (0, 1)")
        _require(self.n_stages >= 1, "T >= 1")
        _require(0.0 < self.dist_min_m <= self.dist_max_m,
                 "0 < dist_min_m <= dist_max_m")
        _require(self.bandwidth_hz > 0.0, "bandwidth_hz > 0")
        _require(all(h >= 1 for h in self.hidden_sizes) and self.hidden_sizes,
                 "hidden sizes >= 1")

        if not self.stage_weights:
            object.__setattr__(self, "stage_weights", (1.0,) * self.n_stages)
        _require(len(self.stage_weights) == self.n_stages,
                 f"stage_weights must have length T={self.n_stages}")
        _require(all(w > 0 for w in self.stage_weights), "all w_t > 0")

        if self.scheme == COHERENT:
            _require(self.n_bits >= 1, "J >= 1 for the coherent scheme")
            _require(self.n_symbols >= 1, "D >= 1")
            _require(self.n_symbols * self.bits_per_symbol == self.n_bits,
                     f"D * log2(|C|) must equal J "
                     f"(D={self.n_symbols}, |C|={len(self.constellation)}, J={self.n_bits})")
            max_l = self.coherence_len // (self.n_symbols + 1)
            _require(self.seq_len <= max_l,
                     f"sequence length L must satisfy L <= floor(tau_coh / (D+1)) "
                     f"for the coherent scheme (L={self.seq_len} > {max_l})")
        else:
            _require(self.seq_len <= self.coherence_len,
                     f"sequence length L must satisfy L <= tau_coh for the "
                     f"non-coherent scheme (L={self.seq_len} > {self.coherence_len})")

    # --- derived quantities -------------------------------------------------

    @property
    def bits_per_symbol(self) -> int:
        b = len(self.constellation).bit_length() - 1
        if 2 ** b != len(self.constellation):
            raise ConfigError("constellation size must be a power of two")
        return b

    @property
    def n_seq_per_device(self) -> int:
        return 2 ** self.n_bits if self.scheme == NONCOHERENT else 1

    @property
    def n_columns(self) -> int:
        """Number of codebook columns: K (coherent) or K * 2^J (non-coherent)."""
        return self.n_devices * self.n_seq_per_device

    @property
    def tx_power_w(self) -> float:
        return 10.0 ** ((self.tx_power_dbm - 30.0) / 10.0)

    @property
    def noise_var_w(self) -> float:
        """Total noise power per complex sample: PSD (linear W/Hz) times bandwidth."""
        return 10.0 ** ((self.noise_psd_dbm_hz - 30.0) / 10.0) * self.bandwidth_hz

    @property
    def amp_scale(self) -> float:
        """Transmit amplitude in noise-normalized units, sqrt(rho_lin / sigma_n^2)."""
        return math.sqrt(self.tx_power_w / self.noise_var_w)

    def pathloss_db(self, dist_m):
        """Large-scale gain in dB at distance ``dist_m`` (a - b*log10(d_km))."""
        import numpy as np

        return self.pathloss_a - self.pathloss_b * np.log10(np.asarray(dist_m) / 1000.0)

    def with_eps(self, eps: float) -> "SystemConfig":
        return replace(self, activity_prob=eps)


@dataclass(frozen=True)
class TrainConfig:
    """End-to-end training recipe (batching, optimizer, loss weights, data sizes)."""

    batch_size: int = 1024
    epochs: int = 100
    learning_rate: float = 1e-3
    class_weight: float = 0.5
    stage_weights: tuple[float, ...] = ()
    train_eps: float = 0.25
    n_train_samples: int = 102400
    n_val_samples: int = 50000
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.batch_size >= 1, "batch_size >= 1")
        _require(self.batch_size <= self.n_train_samples,
                 "batch_size <= n_train_samples")
        _require(self.epochs >= 0, "epochs >= 0")
        _require(self.learning_rate > 0.0, "learning_rate > 0")
        _require(0.0 < self.class_weight < 1.0, "lambda in (0, 1)")
        _require(0.0 < self.train_eps < 1.0, "train_eps in (0, 1)")
        _require(self.n_val_samples >= 1, "n_val_samples >= 1")
        _require(self.seed >= 0, "seed >= 0")


# --- key=value parsing -------------------------------------------------------

_INT_KEYS = {
    "K": "n_devices", "L": "seq_len", "tau_coh": "coherence_len",
    "J": "n_bits", "D": "n_symbols", "T": "n_stages",
}
_FLOAT_KEYS = {
    "eps": "activity_prob", "rho_dbm": "tx_power_dbm",
    "bandwidth_hz": "bandwidth_hz", "noise_psd_dbm_hz": "noise_psd_dbm_hz",
    "pathloss_a": "pathloss_a", "pathloss_b": "pathloss_b",
    "dist_min_m": "dist_min_m", "dist_max_m": "dist_max_m",
    "tau_thr": "decision_threshold", "lambda": "loss_weight",
}
_TRAIN_INT_KEYS = {
    "batch_size": "batch_size", "epochs": "epochs",
    "n_train_samples": "n_train_samples", "n_val_samples": "n_val_samples",
    "seed": "seed",
}
_TRAIN_FLOAT_KEYS = {
    "learning_rate": "learning_rate", "train_eps": "train_eps",
}


def _parse_number_list(value: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in value.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"invalid numeric list for key '{key}': {value!r}") from exc


def _parse_int_list(value: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"invalid integer list for key '{key}': {value!r}") from exc


def parse_config_text(text: str) -> tuple[SystemConfig, TrainConfig]:
    """Parse the flat key=value config format; see ``parse_config``."""
    sys_kw: dict = {}
    train_kw: dict = {}
    explicit_d = False
    stage_weights_raw: str | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                sys_kw[_INT_KEYS[key]] = int(value)
                if key == "D":
                    explicit_d = True
            elif key in _FLOAT_KEYS:
                sys_kw[_FLOAT_KEYS[key]] = float(value)
            elif key == "scheme":
                sys_kw["scheme"] = value
            elif key == "constellation":
                if value not in CONSTELLATIONS:
                    raise ConfigError(
                        f"unknown constellation '{value}' "
                        f"(choose from {sorted(CONSTELLATIONS)})")
                sys_kw["constellation"] = CONSTELLATIONS[value]
            elif key == "stage_weights":
                stage_weights_raw = value
            elif key == "hidden":
                sys_kw["hidden_sizes"] = _parse_int_list(value, key)
            elif key == "fcnn_hidden":
                sys_kw["fcnn_hidden_sizes"] = _parse_int_list(value, key)
            elif key in _TRAIN_INT_KEYS:
                train_kw[_TRAIN_INT_KEYS[key]] = int(value)
            elif key in _TRAIN_FLOAT_KEYS:
                train_kw[_TRAIN_FLOAT_KEYS[key]] = float(value)
            else:
                raise ConfigError(f"unknown config key '{key}'")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"invalid value for key '{key}': {value!r}") from exc

    # D defaults to the symbol count implied by J and the constellation.
    if not explicit_d and sys_kw.get("scheme", COHERENT) == COHERENT:
        n_points = len(sys_kw.get("constellation", SystemConfig.constellation))
        bps = n_points.bit_length() - 1
        if 2 ** bps != n_points:
            raise ConfigError("constellation size must be a power of two")
        j = sys_kw.get("n_bits", SystemConfig.n_bits)
        if j % bps != 0:
            raise ConfigError(f"J={j} is not a multiple of log2(|C|)={bps}")
        sys_kw["n_symbols"] = j // bps

    if stage_weights_raw is not None:
        weights = _parse_number_list(stage_weights_raw, "stage_weights")
        n_stages = sys_kw.get("n_stages", SystemConfig.n_stages)
        if len(weights) == 1:
            weights = weights * n_stages
        sys_kw["stage_weights"] = weights

    system = SystemConfig(**sys_kw)
    train_kw.setdefault("class_weight", system.loss_weight)
    train_kw.setdefault("stage_weights", system.stage_weights)
    train = TrainConfig(**train_kw)
    return system, train


def parse_config(path: str) -> tuple[SystemConfig, TrainConfig]:
    """Load a config file (flat key=value, '#' comments, unknown keys are errors)."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
