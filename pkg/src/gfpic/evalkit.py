"""MRC data detection, metric computation, and parameter sweeps.

Metric accounting is an associative reduction over samples: counters for
false alarms, misses, per-device bit errors, and the per-sample NMSE ratio
are accumulated and merged independently of sharding. Bit errors follow the
full-word charging rule: an activity mistake in either direction costs J bit
errors for that device; when both sides agree the device is active, bitwise
mismatches are counted; inactive agreement costs nothing.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .baselines import SparsePrior, amp_estimate_batch, lasso_estimate_batch, \
    noncoherent_constrain
from .config import COHERENT, NONCOHERENT, SystemConfig
from .picnet import Decision, finalize, forward_pass
from .prep import to_real, standardize_signals
from .sysmodel import SampleBatch, SpreadingCodebook, generate_dataset, \
    seq_index_to_bits
from .trainer import FcnnModel, calibrate_scores, fcnn_forward

MRC_GAIN_GUARD = 1e-12

BASELINE_METHODS = ("lasso", "amp", "nc-lasso", "nc-amp")
DEFAULT_LASSO_NU = 0.05
DEFAULT_AMP_ITERS = 50


# --- MRC ------------------------------------------------------------------------


def mrc_detect(y_col: np.ndarray, s_k: np.ndarray, gamma_hat_k: complex,
               constellation) -> complex:
    """Maximum-likelihood symbol decision on the MRC-equalized scalar.

    Equalizes s_k^H y / gamma_hat and returns the nearest constellation point
    (ties to the lowest index). A channel magnitude at or below the guard
    demotes the device: the symbol is 0.
    """
    if abs(gamma_hat_k) <= MRC_GAIN_GUARD:
        return 0j
    ybar = np.vdot(s_k, y_col) / gamma_hat_k
    const = np.asarray(constellation)
    return complex(const[np.argmin(np.abs(ybar - const))])


def mrc_apply(decision: Decision, batch: SampleBatch,
              codebook: SpreadingCodebook, config: SystemConfig) -> Decision:
    """Fill symbol and bit decisions of active devices via MRC on the data
    signals; devices whose estimated gain is under the guard are demoted to
    inactive (and counted as such)."""
    const = np.asarray(config.constellation)
    b, k = decision.a_hat.shape
    d = config.n_symbols

    demote = (decision.a_hat == 1) & (np.abs(decision.gamma_hat) <= MRC_GAIN_GUARD)
    a_hat = decision.a_hat.copy()
    a_hat[demote] = 0
    gamma_hat = decision.gamma_hat * (a_hat == 1)

    ybar = np.einsum("lk,bdl->bkd", np.conj(codebook.sequences), batch.y_data)
    safe_gain = np.where(np.abs(gamma_hat) > MRC_GAIN_GUARD, gamma_hat, 1.0)
    ybar = ybar / safe_gain[:, :, None]
    c_star = np.abs(ybar[..., None] - const).argmin(axis=-1)   # [B, K, D]
    active = (a_hat == 1)[:, :, None]
    x_hat = np.where(active, const[c_star], 0j)
    bits = seq_index_to_bits(c_star, config.bits_per_symbol).reshape(b, k, -1)
    bits_hat = np.where(active, bits, 0).astype(np.uint8)
    return Decision(a_hat=a_hat, gamma_hat=gamma_hat, x_hat=x_hat,
                    bits_hat=bits_hat, akj_hat=decision.akj_hat)


# --- metrics ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    p_fa: float
    p_md: float
    p_err: float
    nmse_db: float
    ber: float
    n_samples: int
    n_false_alarms: int
    n_missed: int
    n_bit_errors: int
    n_active: int
    n_inactive: int
    n_bits: int
    eps_eval: float
    wall_time_s: float = 0.0

    @property
    def nmse_linear(self) -> float:
        return 10.0 ** (self.nmse_db / 10.0)


class MetricsAccumulator:
    """Shard-and-merge safe counter accumulation."""

    def __init__(self) -> None:
        self.n_samples = 0
        self.n_fa = 0
        self.n_miss = 0
        self.n_active = 0
        self.n_inactive = 0
        self.bit_errors = 0
        self.n_bits = 0
        self.nmse_ratio_sum = 0.0
        self.wall_time_s = 0.0

    def update(self, batch: SampleBatch, decision: Decision) -> None:
        a = batch.activity.astype(np.int64)
        ah = decision.a_hat.astype(np.int64)
        if a.shape != ah.shape:
            raise ValueError("truth/decision streams are misaligned")
        self.n_samples += a.shape[0]
        self.n_fa += int(((ah == 1) & (a == 0)).sum())
        self.n_miss += int(((ah == 0) & (a == 1)).sum())
        self.n_active += int(a.sum())
        self.n_inactive += int((1 - a).sum())

        j = batch.bits.shape[-1]
        self.n_bits += a.size * j
        if j > 0:
            mismatch = (a != ah)
            self.bit_errors += int(mismatch.sum()) * j
            both = (a == 1) & (ah == 1)
            if decision.bits_hat is None:
                raise ValueError("decision carries no bit estimates")
            wrong = (decision.bits_hat != batch.bits).sum(axis=-1)
            self.bit_errors += int(wrong[both].sum())

        num = np.abs(decision.gamma_hat - batch.gamma) ** 2
        den = np.abs(batch.gamma) ** 2
        self.nmse_ratio_sum += float((num.sum(axis=1) / den.sum(axis=1)).sum())

    def merge(self, other: "MetricsAccumulator") -> None:
        for name in ("n_samples", "n_fa", "n_miss", "n_active", "n_inactive",
                     "bit_errors", "n_bits", "nmse_ratio_sum", "wall_time_s"):
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def report(self, eps_eval: float) -> MetricsReport:
        if self.n_samples == 0:
            raise ValueError("metric accumulation over an empty stream")
        p_fa = self.n_fa / self.n_inactive if self.n_inactive else 0.0
        p_md = self.n_miss / self.n_active if self.n_active else 0.0
        p_err = (self.n_fa + self.n_miss) / (self.n_active + self.n_inactive)
        ber = self.bit_errors / self.n_bits if self.n_bits else 0.0
        nmse_lin = self.nmse_ratio_sum / self.n_samples
        nmse_db = 10.0 * np.log10(nmse_lin) if nmse_lin > 0.0 else float("-inf")
        return MetricsReport(p_fa=p_fa, p_md=p_md, p_err=p_err,
                             nmse_db=float(nmse_db), ber=ber,
                             n_samples=self.n_samples,
                             n_false_alarms=self.n_fa, n_missed=self.n_miss,
                             n_bit_errors=self.bit_errors,
                             n_active=self.n_active, n_inactive=self.n_inactive,
                             n_bits=self.n_bits, eps_eval=eps_eval,
                             wall_time_s=self.wall_time_s)


def compute_metrics(truth_batches, decisions, eps_eval: float) -> MetricsReport:
    """Fold aligned truth/decision streams into one report."""
    acc = MetricsAccumulator()
    n = 0
    for batch, decision in zip(truth_batches, decisions):
        acc.update(batch, decision)
        n += 1
    if n == 0:
        raise ValueError("metric computation over an empty stream")
    return acc.report(eps_eval)


# --- model / baseline evaluation ---------------------------------------------------


def _decide_model(model, batch: SampleBatch, config: SystemConfig,
                  codebook: SpreadingCodebook) -> Decision:
    std_b = standardize_signals(batch, model.standardizer)
    if isinstance(model, FcnnModel):
        est, scores = fcnn_forward(model, std_b.y_pilot)
        a_hat = (scores >= model.tau_thr).astype(np.int8)
        gamma_hat = a_hat * (model.standardizer.sigma_gamma
                             * (est[..., 0] + 1j * est[..., 1]))
        decision = Decision(a_hat=a_hat, gamma_hat=gamma_hat)
    else:
        decision = finalize(model, forward_pass(model, std_b))
    if config.scheme == COHERENT and decision.x_hat is None:
        decision = mrc_apply(decision, batch, codebook, config)
    return decision


def evaluate_model(model, eval_config: SystemConfig, n_samples: int, seed: int,
                   batch_size: int = 2048, threads: int = 1,
                   timing: bool = False, stream: int = seeding.TEST
                   ) -> MetricsReport:
    """Evaluate a trained model on a fresh test stream.

    Wall time (reported only with ``timing=True``) sums the per-chunk
    inference durations: standardization, stage forward passes, decisions,
    and MRC; data generation is excluded.
    """
    codebook = model.codebook
    cfg = _echo_eval_config(model.config, eval_config)

    def run_chunk(start: int, count: int) -> MetricsAccumulator:
        acc = MetricsAccumulator()
        for batch in generate_dataset(cfg, codebook, count, seed,
                                      batch_size=batch_size, start=start,
                                      stream=stream):
            t0 = time.perf_counter()
            decision = _decide_model(model, batch, cfg, codebook)
            if timing:
                acc.wall_time_s += time.perf_counter() - t0
            acc.update(batch, decision)
        return acc

    return _sharded(run_chunk, n_samples, batch_size, threads).report(
        cfg.activity_prob)


def _sharded(run_chunk, n_samples: int, batch_size: int,
             threads: int) -> MetricsAccumulator:
    bounds = list(range(0, n_samples, batch_size))
    chunks = [(lo, min(batch_size, n_samples - lo)) for lo in bounds]
    total = MetricsAccumulator()
    if threads <= 1:
        for lo, cnt in chunks:
            total.merge(run_chunk(lo, cnt))
        return total
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_chunk, lo, cnt) for lo, cnt in chunks]
        for fut in futures:  # merge in submission order: deterministic
            total.merge(fut.result())
    return total


def _echo_eval_config(model_config: SystemConfig,
                      eval_config: SystemConfig) -> SystemConfig:
    """The evaluation scenario may vary eps/rho/threshold but must keep the
    shape-defining constants the model was built for."""
    for name in ("n_devices", "seq_len", "n_bits", "n_symbols", "scheme"):
        if getattr(model_config, name) != getattr(eval_config, name):
            raise ValueError(
                f"incompatible model/config pairing: {name} differs "
                f"({getattr(model_config, name)} vs {getattr(eval_config, name)})")
    return eval_config


# --- baselines --------------------------------------------------------------------


@dataclass
class BaselineModel:
    """A calibrated classical receiver (no trained parameters)."""

    method: str
    config: SystemConfig
    codebook: SpreadingCodebook
    threshold: float          # magnitude threshold on |gamma_hat|
    sigma_y: float            # received-signal entry std (LASSO scaling)
    nu: float = DEFAULT_LASSO_NU
    n_iters: int = DEFAULT_AMP_ITERS
    pooled: bool = False
    seed: int = 0

    @property
    def framework(self) -> str:
        return self.method


def _baseline_estimates(bm: BaselineModel, batch: SampleBatch) -> np.ndarray:
    """Coefficient estimates per codebook column, [B, M], physical units."""
    cfg = bm.config
    y = batch.y_pilot if cfg.scheme == COHERENT else batch.y_nc
    s = bm.codebook.sequences
    if bm.method in ("lasso", "nc-lasso"):
        gamma = lasso_estimate_batch(y / bm.sigma_y, s, bm.nu)
        return gamma * bm.sigma_y
    n_seq = cfg.n_seq_per_device
    v = np.repeat(batch.snr, n_seq, axis=1)
    eps_col = cfg.activity_prob / n_seq
    prior = SparsePrior(eps=np.full_like(v, eps_col), v=v)
    if bm.pooled:
        prior = SparsePrior(eps=prior.eps, v=np.full_like(v, float(v.mean())))
    gamma, _, _ = amp_estimate_batch(y, s, prior, n_iters=bm.n_iters)
    return gamma


def _baseline_decision(bm: BaselineModel, gamma_cols: np.ndarray,
                       batch: SampleBatch) -> Decision:
    cfg = bm.config
    if cfg.scheme == COHERENT:
        a_hat = (np.abs(gamma_cols) >= bm.threshold).astype(np.int8)
        gamma_hat = gamma_cols * a_hat
        return Decision(a_hat=a_hat, gamma_hat=gamma_hat)
    b = gamma_cols.shape[0]
    grouped = gamma_cols.reshape(b, cfg.n_devices, cfg.n_seq_per_device)
    a_hat, akj_hat = noncoherent_constrain(grouped, bm.threshold)
    j_star = np.abs(grouped).argmax(axis=-1)
    chosen = np.take_along_axis(grouped, j_star[..., None], axis=-1)[..., 0]
    gamma_hat = chosen * a_hat
    bits_hat = (seq_index_to_bits(j_star, cfg.n_bits)
                * a_hat[..., None]).astype(np.uint8)
    return Decision(a_hat=a_hat, gamma_hat=gamma_hat, bits_hat=bits_hat,
                    akj_hat=akj_hat)


def calibrate_baseline(method: str, config: SystemConfig,
                       codebook: SpreadingCodebook, n_samples: int, seed: int,
                       nu: float = DEFAULT_LASSO_NU,
                       n_iters: int = DEFAULT_AMP_ITERS, pooled: bool = False,
                       batch_size: int = 2048) -> BaselineModel:
    """Fit the LASSO signal scale and the activity threshold (equal-error
    point) on a validation stream."""
    if method not in BASELINE_METHODS:
        raise ValueError(f"unknown baseline method {method!r}")
    wants_nc = method.startswith("nc-")
    if wants_nc != (config.scheme == NONCOHERENT):
        raise ValueError(f"baseline {method!r} does not match scheme {config.scheme!r}")

    batches = list(generate_dataset(config, codebook, n_samples, seed,
                                    batch_size=batch_size,
                                    stream=seeding.VALIDATION))
    y_entries_sq = 0.0
    y_entries = 0
    for b in batches:
        y = b.y_pilot if config.scheme == COHERENT else b.y_nc
        r = to_real(y)
        y_entries_sq += float(np.square(r).sum())
        y_entries += r.size
    sigma_y = float(np.sqrt(y_entries_sq / y_entries))

    bm = BaselineModel(method=method, config=config, codebook=codebook,
                       threshold=0.0, sigma_y=sigma_y, nu=nu, n_iters=n_iters,
                       pooled=pooled, seed=seed)
    scores, labels = [], []
    for b in batches:
        cols = _baseline_estimates(bm, b)
        if config.scheme == COHERENT:
            scores.append(np.abs(cols))
        else:
            grouped = np.abs(cols).reshape(-1, config.n_devices,
                                           config.n_seq_per_device)
            scores.append(grouped.max(axis=-1))
        labels.append(b.activity)
    score_arr = np.concatenate(scores)
    cal = calibrate_scores(score_arr, np.concatenate(labels),
                           lo=0.0, hi=float(score_arr.max()) * (1.0 + 1e-9) + 1e-12)
    bm.threshold = cal.tau_thr
    return bm


def evaluate_baseline(bm: BaselineModel, eval_config: SystemConfig,
                      n_samples: int, seed: int, batch_size: int = 2048,
                      threads: int = 1, timing: bool = False,
                      stream: int = seeding.TEST) -> MetricsReport:
    """Evaluate a calibrated baseline on a fresh test stream."""
    run_cfg = _echo_eval_config(bm.config, eval_config)
    bm_run = replace(bm, config=run_cfg)

    def run_chunk(start: int, count: int) -> MetricsAccumulator:
        acc = MetricsAccumulator()
        for batch in generate_dataset(run_cfg, bm.codebook, count, seed,
                                      batch_size=batch_size, start=start,
                                      stream=stream):
            t0 = time.perf_counter()
            cols = _baseline_estimates(bm_run, batch)
            decision = _baseline_decision(bm_run, cols, batch)
            if run_cfg.scheme == COHERENT:
                decision = mrc_apply(decision, batch, bm.codebook, run_cfg)
            if timing:
                acc.wall_time_s += time.perf_counter() - t0
            acc.update(batch, decision)
        return acc

    return _sharded(run_chunk, n_samples, batch_size, threads).report(
        run_cfg.activity_prob)


# --- sweeps -----------------------------------------------------------------------


SWEEP_AXES = ("eps", "tau_coh", "rho", "tau_thr", "J")


@dataclass
class EvalTarget:
    """One curve of a sweep: a trained model or a named baseline method.

    Baseline targets carry their own config and codebook (there are no
    trained parameters to borrow them from)."""

    framework: str
    model: object | None = None        # PicModel or FcnnModel
    method: str | None = None          # baseline name
    config: SystemConfig | None = None
    codebook: SpreadingCodebook | None = None

    @property
    def family(self) -> str:
        if self.method is not None:
            return "lasso" if "lasso" in self.method else "amp"
        return "fcnn" if self.framework == "fcnn" else "pic"

    def base_config(self) -> SystemConfig:
        if self.model is not None:
            return self.model.config
        if self.config is None:
            raise ValueError("baseline sweep targets need an explicit config")
        return self.config


def _axis_config(config: SystemConfig, axis: str, value: float) -> SystemConfig:
    if axis == "eps":
        return replace(config, activity_prob=float(value))
    if axis == "rho":
        return replace(config, tx_power_dbm=float(value))
    if axis == "tau_thr":
        return config
    raise ValueError(f"sweep axis {axis!r} needs retraining per grid point; "
                     "drive it through the CLI train command")


def sweep(axis: str, grid, targets: list[EvalTarget], n_samples: int, seed: int,
          batch_size: int = 2048, threads: int = 1, timing: bool = False,
          calibrate_each: bool = False, n_cal_samples: int = 20000
          ) -> list[dict]:
    """Evaluate every target at every grid point; one CSV-ready row each.

    ``eps``/``rho``/``tau_thr`` sweeps reuse the trained models (the scenario
    generalization setting); thresholds are recalibrated per grid point when
    ``calibrate_each`` is set (not applicable to the tau_thr axis).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows: list[dict] = []
    for value in grid:
        for target in targets:
            base_cfg = target.base_config()
            if axis == "tau_thr":
                if target.method is not None:
                    raise ValueError("incompatible model/config pairing: "
                                     "tau_thr sweeps apply to trained models only")
                model = _with_threshold(target.model, float(value))
                report = evaluate_model(model, base_cfg, n_samples, seed,
                                        batch_size=batch_size, threads=threads,
                                        timing=timing)
                rows.append(make_row(target.framework, target.family, base_cfg,
                                     float(value), seed, report))
                continue

            cfg = _axis_config(base_cfg, axis, value)
            if target.method is not None:
                bm = calibrate_baseline(target.method, cfg, target.codebook,
                                        n_cal_samples, seed)
                report = evaluate_baseline(bm, cfg, n_samples, seed,
                                           batch_size=batch_size,
                                           threads=threads, timing=timing)
                rows.append(make_row(target.framework, target.family, cfg,
                                     bm.threshold, seed, report))
            else:
                model = target.model
                if calibrate_each:
                    from .trainer import calibrate_threshold

                    cal = calibrate_threshold(model, cfg, n_cal_samples, seed)
                    model = _with_threshold(model, cal.tau_thr)
                report = evaluate_model(model, cfg, n_samples, seed,
                                        batch_size=batch_size, threads=threads,
                                        timing=timing)
                rows.append(make_row(target.framework, target.family, cfg,
                                     model.tau_thr, seed, report))
    return rows


def _with_threshold(model, tau: float):
    clone = replace(model, tau_thr=tau) if hasattr(model, "__dataclass_fields__") else model
    return clone


def make_row(framework: str, family: str, cfg: SystemConfig, tau_thr: float,
             seed: int, report: MetricsReport) -> dict:
    """Assemble one results row in the fixed CSV schema order."""
    return {
        "framework": framework,
        "kind": family,
        "eps": cfg.activity_prob,
        "rho_dbm": cfg.tx_power_dbm,
        "tau_coh": cfg.coherence_len,
        "L": cfg.seq_len,
        "T": cfg.n_stages,
        "J": cfg.n_bits,
        "tau_thr": tau_thr,
        "seed": seed,
        "n_samples": report.n_samples,
        "p_fa": report.p_fa,
        "p_md": report.p_md,
        "p_err": report.p_err,
        "nmse_db": report.nmse_db,
        "ber": report.ber,
        "wall_time_s": report.wall_time_s,
    }
