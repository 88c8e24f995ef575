"""End-to-end training for the PIC receivers and the plain-FCNN baseline,
plus decision-threshold calibration.

Training is deterministic for a fixed seed: the codebook, training set,
weight init, and epoch shuffles all derive from named substreams of the root
seed. One Adam state is kept per module group; gradients are batch means
accumulated in a fixed order. After the final epoch the parameters are
snapped to float32 resolution so that a saved checkpoint reproduces the
in-memory model bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .config import COHERENT, NONCOHERENT, SystemConfig, TrainConfig
from .neuralcore import (ACT_SIGMOID, MlpParams, MlpSpec, _init_from_rng,
                         adam_step, backward, bce, bce_grad, forward, init_adam)
from .picnet import (DATA_AIDED, NONCOHERENT_PIC, PILOT_ONLY, TraceLabels,
                     activity_scores, backprop, build_labels, build_pic_model,
                     forward_pass, joint_loss)
from .prep import StandardizedBatch, Standardizer, fit_standardizer, \
    standardize_signals
from .sysmodel import SampleBatch, SpreadingCodebook, generate_codebook, \
    generate_dataset

FCNN = "fcnn"
TRAINABLE_KINDS = (PILOT_ONLY, DATA_AIDED, NONCOHERENT_PIC, FCNN)

TRAIN_LOG_HEADER = "epoch,mean_loss,mean_reg_loss,mean_class_loss,wall_time_s"


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the batch index and loss parts."""


@dataclass
class FcnnModel:
    """Plain fully connected baseline: one wide net for CE, one for AD."""

    config: SystemConfig
    codebook: SpreadingCodebook
    standardizer: Standardizer
    ce: MlpParams                 # 2L -> 2K, identity output
    ad: MlpParams                 # 2L -> K, sigmoid output
    tau_thr: float
    seed: int
    kind: str = FCNN

    def module_params(self) -> list[MlpParams]:
        return [self.ce, self.ad]


def fcnn_forward(model: FcnnModel, y_pilot_std: np.ndarray):
    """Evaluate both nets; returns channel pairs [B, K, 2] and scores [B, K]."""
    out_ce, _ = forward(model.ce, y_pilot_std)
    out_ad, _ = forward(model.ad, y_pilot_std)
    b = y_pilot_std.shape[0]
    return out_ce.reshape(b, model.config.n_devices, 2), out_ad


def _check_kind_scheme(kind: str, config: SystemConfig) -> None:
    if kind not in TRAINABLE_KINDS:
        raise ValueError(f"unknown trainable kind {kind!r}")
    needs_nc = kind == NONCOHERENT_PIC
    if needs_nc != (config.scheme == NONCOHERENT):
        raise ValueError(f"kind {kind!r} requires scheme "
                         f"{'non-coherent' if needs_nc else 'coherent'}")


def _materialize(config: SystemConfig, codebook: SpreadingCodebook,
                 n_samples: int, seed: int) -> list[SampleBatch]:
    return list(generate_dataset(config, codebook, n_samples, seed,
                                 batch_size=4096))


def _concat_batches(batches: list[SampleBatch]) -> SampleBatch:
    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    return SampleBatch(start=batches[0].start,
                       activity=cat("activity"), gamma=cat("gamma"),
                       snr=cat("snr"), bits=cat("bits"), symbols=cat("symbols"),
                       seq_choice=cat("seq_choice"), y_pilot=cat("y_pilot"),
                       y_data=cat("y_data"), y_nc=cat("y_nc"))


def _slice_std(std_batch: StandardizedBatch, idx: np.ndarray) -> StandardizedBatch:
    pick = lambda a: None if a is None else a[idx]
    return StandardizedBatch(y_pilot=pick(std_batch.y_pilot),
                             y_data=pick(std_batch.y_data),
                             y_nc=pick(std_batch.y_nc),
                             gamma=std_batch.gamma[idx])


def _snap_float32(params_groups: list[MlpParams]) -> None:
    # Round every parameter to its float32 value (kept in float64 storage) so
    # checkpoint round trips are bit-exact.
    for group in params_groups:
        for tensor in group.tensors():
            tensor[...] = tensor.astype(np.float32).astype(np.float64)


class _TrainLog:
    def __init__(self, path: str | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None
        if self._fh:
            self._fh.write(TRAIN_LOG_HEADER + "\n")

    def row(self, epoch: int, loss: float, reg: float, cls: float, wall: float):
        if self._fh:
            self._fh.write(f"{epoch},{float(loss)!r},{float(reg)!r},"
                           f"{float(cls)!r},{float(wall)!r}\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def train(kind: str, system_config: SystemConfig, train_config: TrainConfig,
          log_path: str | None = None, tie_devices: bool = False):
    """Train one receiver end to end; returns a PicModel (or FcnnModel)."""
    _check_kind_scheme(kind, system_config)
    if kind == FCNN:
        return train_fcnn_baseline(system_config, train_config, log_path=log_path)

    seed = train_config.seed
    cfg_train = replace(system_config, activity_prob=train_config.train_eps)
    codebook = generate_codebook(system_config, seed)
    batches = _materialize(cfg_train, codebook, train_config.n_train_samples, seed)
    standardizer = fit_standardizer(batches, system_config.scheme)
    data = _concat_batches(batches)
    std_all = standardize_signals(data, standardizer)
    labels_all = build_labels(data, std_all, cfg_train)

    model = build_pic_model(kind, system_config, codebook, standardizer, seed,
                            tie_devices=tie_devices)
    groups = model.module_params()
    states = [init_adam(g, lr=train_config.learning_rate) for g in groups]

    stage_weights = train_config.stage_weights or system_config.stage_weights
    n = train_config.n_train_samples
    bs = train_config.batch_size
    log = _TrainLog(log_path)
    try:
        for epoch in range(train_config.epochs):
            t0 = time.perf_counter()
            perm = seeding.substream(seed, seeding.SHUFFLE, epoch).permutation(n)
            sums = np.zeros(3)
            n_batches = 0
            for lo in range(0, n - bs + 1, bs):
                idx = perm[lo:lo + bs]
                std_b = _slice_std(std_all, idx)
                lab_b = _slice_labels(labels_all, idx)
                trace = forward_pass(model, std_b)
                loss = joint_loss(trace, lab_b, train_config.class_weight,
                                  stage_weights)
                if not np.isfinite(loss.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"total={loss.total}, reg={loss.reg}, "
                        f"class={loss.classification}")
                grads = backprop(model, trace, loss.seeds)
                for group, grad, state in zip(groups, grads.per_group(), states):
                    adam_step(group, grad, state)
                sums += (loss.total, loss.reg, loss.classification)
                n_batches += 1
            mean = sums / max(n_batches, 1)
            log.row(epoch, mean[0], mean[1], mean[2], time.perf_counter() - t0)
    finally:
        log.close()

    _snap_float32(groups)
    return model


def _slice_labels(labels: TraceLabels, idx) -> TraceLabels:
    pick = lambda a: None if a is None else a[idx]
    return TraceLabels(gamma_std=labels.gamma_std[idx],
                       activity=labels.activity[idx],
                       symbol_onehot=pick(labels.symbol_onehot),
                       seq_onehot=pick(labels.seq_onehot))


def train_fcnn_baseline(system_config: SystemConfig, train_config: TrainConfig,
                        log_path: str | None = None) -> FcnnModel:
    """Train the two wide FCNNs (channel regression with MAE, activity
    classification with BCE) on the same data pipeline as the PIC receivers."""
    if system_config.scheme != COHERENT:
        raise ValueError("the FCNN baseline applies to the coherent scheme")
    seed = train_config.seed
    cfg_train = replace(system_config, activity_prob=train_config.train_eps)
    codebook = generate_codebook(system_config, seed)
    batches = _materialize(cfg_train, codebook, train_config.n_train_samples, seed)
    standardizer = fit_standardizer(batches, system_config.scheme)
    data = _concat_batches(batches)
    std_all = standardize_signals(data, standardizer)

    k = system_config.n_devices
    two_l = 2 * system_config.seq_len
    hidden = tuple(system_config.fcnn_hidden_sizes)
    ce_spec = MlpSpec((two_l, *hidden, 2 * k))
    ad_spec = MlpSpec((two_l, *hidden, k), output_activation=ACT_SIGMOID)
    ce = init_mlp_stack_single(ce_spec, seed, seeding.INIT_FCNN_CE)
    ad = init_mlp_stack_single(ad_spec, seed, seeding.INIT_FCNN_AD)
    ce_state = init_adam(ce, lr=train_config.learning_rate)
    ad_state = init_adam(ad, lr=train_config.learning_rate)

    gamma_flat = std_all.gamma.reshape(-1, 2 * k)
    activity = data.activity.astype(np.float64)
    n = train_config.n_train_samples
    bs = train_config.batch_size
    log = _TrainLog(log_path)
    try:
        for epoch in range(train_config.epochs):
            t0 = time.perf_counter()
            perm = seeding.substream(seed, seeding.SHUFFLE, epoch).permutation(n)
            sums = np.zeros(3)
            n_batches = 0
            for lo in range(0, n - bs + 1, bs):
                idx = perm[lo:lo + bs]
                y = std_all.y_pilot[idx]
                g_true = gamma_flat[idx]
                a_true = activity[idx]
                b = y.shape[0]

                out_ce, cache_ce = forward(ce, y)
                diff = out_ce - g_true
                reg = float(np.abs(diff).sum()) / (2 * k * b)
                g_ce, _ = backward(cache_ce, np.sign(diff) / (2 * k * b))

                out_ad, cache_ad = forward(ad, y)
                cls = float(bce(out_ad, a_true).sum()) / (k * b)
                g_ad, _ = backward(cache_ad, bce_grad(out_ad, a_true) / (k * b))

                total = reg + cls
                if not np.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"reg={reg}, class={cls}")
                adam_step(ce, g_ce, ce_state)
                adam_step(ad, g_ad, ad_state)
                sums += (total, reg, cls)
                n_batches += 1
            mean = sums / max(n_batches, 1)
            log.row(epoch, mean[0], mean[1], mean[2], time.perf_counter() - t0)
    finally:
        log.close()

    model = FcnnModel(config=system_config, codebook=codebook,
                      standardizer=standardizer, ce=ce, ad=ad,
                      tau_thr=system_config.decision_threshold, seed=seed)
    _snap_float32(model.module_params())
    return model


def init_mlp_stack_single(spec: MlpSpec, seed: int, tag: int) -> MlpParams:
    """One (unstacked) module drawn from a tagged init substream."""
    rng = seeding.substream(seed, seeding.INIT, tag)
    weights, biases = _init_from_rng(spec, rng)
    return MlpParams(spec=spec, weights=weights, biases=biases)


# --- decision-threshold calibration --------------------------------------------


@dataclass
class CalibrationResult:
    tau_thr: float
    p_fa: float
    p_md: float
    n_scores: int


def calibrate_scores(scores: np.ndarray, labels: np.ndarray,
                     lo: float = 0.0, hi: float = 1.0, tol: float = 0.005,
                     max_iter: int = 60) -> CalibrationResult:
    """Bisect the decision threshold towards the equal-error point.

    Exploits that the false-alarm rate is non-increasing and the miss rate
    non-decreasing in the threshold. Returns the midpoint of the final
    bracket together with the rates measured there.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    active = scores[labels]
    inactive = scores[~labels]
    if active.size == 0 or inactive.size == 0:
        raise ValueError("calibration needs both active and inactive instances")

    def rates(thr: float) -> tuple[float, float]:
        p_fa = float(np.mean(inactive >= thr))
        p_md = float(np.mean(active < thr))
        return p_fa, p_md

    mid = 0.5 * (lo + hi)
    p_fa, p_md = rates(mid)
    for _ in range(max_iter):
        if abs(p_fa - p_md) <= tol:
            break
        if p_fa - p_md > 0.0:
            lo = mid
        else:
            hi = mid
        mid = 0.5 * (lo + hi)
        p_fa, p_md = rates(mid)
    return CalibrationResult(tau_thr=mid, p_fa=p_fa, p_md=p_md,
                             n_scores=scores.size)


def model_activity_scores(model, std_batch: StandardizedBatch) -> np.ndarray:
    """Activity scores in (0,1) for any trained model kind."""
    if isinstance(model, FcnnModel):
        _, scores = fcnn_forward(model, std_batch.y_pilot)
        return scores
    return activity_scores(forward_pass(model, std_batch))


def calibrate_threshold(model, eval_config: SystemConfig, n_samples: int,
                        seed: int, batch_size: int = 4096,
                        stream: int = seeding.VALIDATION) -> CalibrationResult:
    """Calibrate a trained model's threshold on a fresh validation stream."""
    scores, labels = [], []
    for batch in generate_dataset(eval_config, model.codebook, n_samples, seed,
                                  batch_size=batch_size, stream=stream):
        std_b = standardize_signals(batch, model.standardizer)
        scores.append(model_activity_scores(model, std_b))
        labels.append(batch.activity)
    return calibrate_scores(np.concatenate(scores), np.concatenate(labels))
