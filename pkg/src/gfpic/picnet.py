"""The three PIC receiver graphs: stage composition, interference cancellation,
joint losses, and final decision rules.

Each receiver runs T stages. A stage evaluates, for every device in parallel,
a channel-estimation module on the interference-cancelled residual built from
the *previous* stage's estimates (all devices use stage t-1 outputs, so the
cancellation is parallel, not successive). The data-aided receiver adds
per-stage data-detection modules whose soft symbols also enter the
cancellation; the non-coherent receiver weights each candidate sequence by its
estimated transmission probability.

Gradients flow through the cancellation terms across stages: ``backprop``
implements exact reverse-mode differentiation of the whole stage graph, with
``joint_loss`` supplying the direct seeds on every module output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .config import NONCOHERENT, SystemConfig
from .neuralcore import (ACT_SIGMOID, MlpCache, MlpGrads, MlpParams, MlpSpec,
                         backward, bce, bce_grad, forward, init_mlp_stack)
from .prep import ScaledCodebook, StandardizedBatch, Standardizer, scale_codebook, \
    unstandardize_gamma
from .sysmodel import (SampleBatch, SpreadingCodebook, bits_to_seq_index,
                       seq_index_to_bits, symbols_to_bits)

PILOT_ONLY = "pilot-only"
DATA_AIDED = "data-aided"
NONCOHERENT_PIC = "non-coherent"
PIC_KINDS = (PILOT_ONLY, DATA_AIDED, NONCOHERENT_PIC)


@dataclass
class PicModel:
    """A trained (or freshly initialized) PIC receiver."""

    kind: str
    config: SystemConfig
    codebook: SpreadingCodebook
    standardizer: Standardizer
    ce: list[MlpParams]            # T stacked per-device channel estimators
    dd: list[MlpParams] | None     # T stacked data detectors (data-aided / non-coherent)
    ad: MlpParams | None           # stacked activity detectors (pilot-only)
    tau_thr: float
    seed: int
    tie_devices: bool = False
    _scaled: ScaledCodebook | None = field(default=None, repr=False)

    @property
    def n_stages(self) -> int:
        return len(self.ce)

    def scaled_blocks(self) -> ScaledCodebook:
        if self._scaled is None:
            self._scaled = scale_codebook(self.codebook, self.standardizer)
        return self._scaled

    def module_params(self) -> list[MlpParams]:
        """All module groups in the documented checkpoint order (CE stages,
        then DD stages, then AD)."""
        groups = list(self.ce)
        if self.dd is not None:
            groups.extend(self.dd)
        if self.ad is not None:
            groups.append(self.ad)
        return groups


def module_layer_sizes(kind: str, config: SystemConfig) -> dict[str, tuple[int, ...]]:
    """Input/output dimensioning of the per-device modules for each receiver kind."""
    two_l = 2 * config.seq_len
    hidden = tuple(config.hidden_sizes)
    if kind == PILOT_ONLY:
        return {"ce": (two_l, *hidden, 2), "ad": (two_l, *hidden, 1)}
    if kind == DATA_AIDED:
        d, c = config.n_symbols, len(config.constellation)
        return {"ce": (two_l * (d + 1), *hidden, 2),
                "dd": (two_l * d + 2, *hidden, d * c)}
    if kind == NONCOHERENT_PIC:
        n_seq = 2 ** config.n_bits
        return {"ce": (two_l, *hidden, 2), "dd": (two_l + 2, *hidden, n_seq)}
    raise ValueError(f"unknown PIC kind {kind!r}")


def build_pic_model(kind: str, config: SystemConfig, codebook: SpreadingCodebook,
                    standardizer: Standardizer, seed: int,
                    tie_devices: bool = False) -> PicModel:
    """Initialize all stage modules of one receiver kind."""
    if kind not in PIC_KINDS:
        raise ValueError(f"unknown PIC kind {kind!r}")
    if (kind == NONCOHERENT_PIC) != (config.scheme == NONCOHERENT):
        raise ValueError(f"kind {kind!r} does not match scheme {config.scheme!r}")
    sizes = module_layer_sizes(kind, config)
    n_mod = 1 if tie_devices else config.n_devices
    t_stages = config.n_stages

    ce_spec = MlpSpec(sizes["ce"])
    ce = [init_mlp_stack(ce_spec, n_mod, seed, path=(seeding.INIT_CE, t))
          for t in range(t_stages)]
    dd = None
    ad = None
    if kind == PILOT_ONLY:
        ad_spec = MlpSpec(sizes["ad"], output_activation=ACT_SIGMOID)
        ad = init_mlp_stack(ad_spec, n_mod, seed, path=(seeding.INIT_AD,))
    else:
        dd_spec = MlpSpec(sizes["dd"], output_activation=ACT_SIGMOID)
        dd = [init_mlp_stack(dd_spec, n_mod, seed, path=(seeding.INIT_DD, t))
              for t in range(t_stages)]
    return PicModel(kind=kind, config=config, codebook=codebook,
                    standardizer=standardizer, ce=ce, dd=dd, ad=ad,
                    tau_thr=config.decision_threshold, seed=seed,
                    tie_devices=tie_devices)


# --- interference cancellation ------------------------------------------------


def ic_residual(y_std: np.ndarray, estimates: np.ndarray, blocks: np.ndarray,
                exclude_k: int) -> np.ndarray:
    """Residual for one device: y minus every other device's estimated contribution.

    ``blocks`` is the scaled-codebook block tensor [K, 2L, 2]; ``estimates``
    is [..., K, 2]. All-zero estimates return ``y_std`` unchanged.
    """
    k = blocks.shape[0]
    if not 0 <= exclude_k < k:
        raise IndexError(f"exclude_k={exclude_k} out of range for K={k}")
    contrib = np.einsum("kli,...ki->...kl", blocks, np.asarray(estimates, dtype=np.float64))
    total = contrib.sum(axis=-2)
    return y_std - total + contrib[..., exclude_k, :]


def _residual_all(y_std: np.ndarray, estimates: np.ndarray,
                  blocks: np.ndarray) -> np.ndarray:
    """Stack of per-device residuals, [B, K, 2L]."""
    contrib = np.einsum("kli,bki->bkl", blocks, estimates)
    total = contrib.sum(axis=1, keepdims=True)
    return y_std[:, None, :] - total + contrib


def _residual_all_bwd(d_resid: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Gradient of ``_residual_all`` w.r.t. the estimates, [B, K, 2]."""
    d_contrib = d_resid - d_resid.sum(axis=1, keepdims=True)
    return np.einsum("kli,bkl->bki", blocks, d_contrib)


def _soft_symbols(probs: np.ndarray, constellation: np.ndarray,
                  bpsk_fast: bool):
    """Probability-weighted constellation averages, as real pairs [B, K, D, 2]."""
    if bpsk_fast:
        # two real symbols: weighted average p1*x1 + p2*x2 stays real
        sv = probs @ constellation.real
        return np.stack([sv, np.zeros_like(sv)], axis=-1)
    xs = probs @ constellation  # complex [B, K, D]
    return np.stack([xs.real, xs.imag], axis=-1)


def _data_residual_all(y_data: np.ndarray, estimates: np.ndarray,
                       probs: np.ndarray | None, blocks: np.ndarray,
                       constellation: np.ndarray, bpsk_fast: bool) -> np.ndarray:
    """Per-device data residuals [B, K, D, 2L] from stage t-1 estimates and
    soft symbols (complex product realized as a 2x2 rotation block)."""
    b = y_data.shape[0]
    k = blocks.shape[0]
    if probs is None:
        return np.broadcast_to(y_data[:, None], (b, k) + y_data.shape[1:]).copy()
    m = _soft_symbols(probs, constellation, bpsk_fast)    # [B,K,D,2]
    g1 = estimates[:, :, None, 0]
    g2 = estimates[:, :, None, 1]
    u = np.empty_like(m)
    u[..., 0] = g1 * m[..., 0] - g2 * m[..., 1]
    u[..., 1] = g2 * m[..., 0] + g1 * m[..., 1]
    contrib = np.einsum("kli,bkdi->bkdl", blocks, u)
    total = contrib.sum(axis=1, keepdims=True)
    return y_data[:, None] - total + contrib


def _data_residual_all_bwd(d_resid: np.ndarray, estimates: np.ndarray,
                           probs: np.ndarray, blocks: np.ndarray,
                           constellation: np.ndarray, bpsk_fast: bool):
    """Gradients of ``_data_residual_all`` w.r.t. (estimates, probs)."""
    d_contrib = d_resid - d_resid.sum(axis=1, keepdims=True)
    du = np.einsum("kli,bkdl->bkdi", blocks, d_contrib)
    m = _soft_symbols(probs, constellation, bpsk_fast)
    g1 = estimates[:, :, None, 0]
    g2 = estimates[:, :, None, 1]
    d_est = np.empty_like(estimates)
    d_est[:, :, 0] = (m[..., 0] * du[..., 0] + m[..., 1] * du[..., 1]).sum(axis=2)
    d_est[:, :, 1] = (-m[..., 1] * du[..., 0] + m[..., 0] * du[..., 1]).sum(axis=2)
    dm1 = g1 * du[..., 0] + g2 * du[..., 1]
    dm2 = -g2 * du[..., 0] + g1 * du[..., 1]
    if bpsk_fast:
        d_probs = dm1[..., None] * constellation.real
    else:
        d_probs = dm1[..., None] * constellation.real + dm2[..., None] * constellation.imag
    return d_est, d_probs


def _nc_residual_all(y_std: np.ndarray, estimates: np.ndarray,
                     probs: np.ndarray | None, blocks_nc: np.ndarray) -> np.ndarray:
    """Non-coherent residuals [B, K, 2L]: each candidate sequence is cancelled
    with the device channel estimate weighted by the sequence probability."""
    b = y_std.shape[0]
    k = blocks_nc.shape[0]
    if probs is None:
        return np.broadcast_to(y_std[:, None], (b, k, y_std.shape[-1])).copy()
    v = np.einsum("kjli,bki->bkjl", blocks_nc, estimates)
    contrib = np.einsum("bkjl,bkj->bkl", v, probs)
    total = contrib.sum(axis=1, keepdims=True)
    return y_std[:, None] - total + contrib


def _nc_residual_all_bwd(d_resid: np.ndarray, estimates: np.ndarray,
                         probs: np.ndarray, blocks_nc: np.ndarray):
    d_contrib = d_resid - d_resid.sum(axis=1, keepdims=True)
    v = np.einsum("kjli,bki->bkjl", blocks_nc, estimates)
    d_probs = np.einsum("bkjl,bkl->bkj", v, d_contrib)
    w = np.einsum("kjli,bkj->bkli", blocks_nc, probs)
    d_est = np.einsum("bkli,bkl->bki", w, d_contrib)
    return d_est, d_probs


# --- forward passes -----------------------------------------------------------


@dataclass
class StageTrace:
    """Everything a receiver forward pass produced, enough for loss + backprop."""

    kind: str
    estimates: list[np.ndarray]            # per stage [B, K, 2]
    residuals: list                        # per stage inputs (kind-specific layout)
    probs: np.ndarray | list[np.ndarray]   # pilot: [B, K]; else per stage
    ce_caches: list[MlpCache] = field(default_factory=list, repr=False)
    dd_caches: list[MlpCache] = field(default_factory=list, repr=False)
    ad_cache: MlpCache | None = field(default=None, repr=False)

    @property
    def n_stages(self) -> int:
        return len(self.estimates)


def _is_bpsk(constellation: np.ndarray) -> bool:
    return constellation.size == 2 and np.all(constellation.imag == 0.0)


def pilot_pic_forward(model: PicModel, y_std: np.ndarray) -> StageTrace:
    """Run the pilot-only receiver on standardized pilot signals [B, 2L]."""
    blocks = model.scaled_blocks().pilot
    y_std = np.asarray(y_std, dtype=np.float64)
    if y_std.ndim != 2 or y_std.shape[1] != blocks.shape[1]:
        raise ValueError(f"expected pilot input [B, {blocks.shape[1]}], got {y_std.shape}")
    b = y_std.shape[0]
    k = model.config.n_devices
    est = np.zeros((b, k, 2))
    estimates, residuals, ce_caches = [], [], []
    for t in range(model.n_stages):
        resid = _residual_all(y_std, est, blocks)
        out, cache = forward(model.ce[t], resid.transpose(1, 0, 2))
        est = out.transpose(1, 0, 2)
        estimates.append(est)
        residuals.append(resid)
        ce_caches.append(cache)
    final_resid = _residual_all(y_std, est, blocks)
    scores, ad_cache = forward(model.ad, final_resid.transpose(1, 0, 2))
    residuals.append(final_resid)
    return StageTrace(kind=PILOT_ONLY, estimates=estimates, residuals=residuals,
                      probs=scores[..., 0].T, ce_caches=ce_caches, ad_cache=ad_cache)


def data_aided_forward(model: PicModel, y_pilot_std: np.ndarray,
                       y_data_std: np.ndarray) -> StageTrace:
    """Run the data-aided receiver on standardized pilot [B, 2L] and data
    [B, D, 2L] signals."""
    sb = model.scaled_blocks()
    cfg = model.config
    const = np.asarray(cfg.constellation)
    bpsk_fast = _is_bpsk(const)
    y_pilot_std = np.asarray(y_pilot_std, dtype=np.float64)
    y_data_std = np.asarray(y_data_std, dtype=np.float64)
    b = y_pilot_std.shape[0]
    k, d = cfg.n_devices, cfg.n_symbols
    two_l = 2 * cfg.seq_len
    if y_data_std.shape != (b, d, two_l):
        raise ValueError(f"expected data input [B, {d}, {two_l}], got {y_data_std.shape}")

    est = np.zeros((b, k, 2))
    probs_prev: np.ndarray | None = None
    estimates, residuals, probs_all = [], [], []
    ce_caches, dd_caches = [], []
    for t in range(model.n_stages):
        resid_p = _residual_all(y_pilot_std, est, sb.pilot)
        resid_d = _data_residual_all(y_data_std, est, probs_prev, sb.data,
                                     const, bpsk_fast)
        resid_d_flat = resid_d.transpose(1, 0, 2, 3).reshape(k, b, d * two_l)
        ce_in = np.concatenate([resid_p.transpose(1, 0, 2), resid_d_flat], axis=-1)
        est_kbo, ce_cache = forward(model.ce[t], ce_in)
        dd_in = np.concatenate([resid_d_flat, est_kbo], axis=-1)
        p_kbo, dd_cache = forward(model.dd[t], dd_in)

        est = est_kbo.transpose(1, 0, 2)
        probs_prev = p_kbo.transpose(1, 0, 2).reshape(b, k, d, const.size)
        estimates.append(est)
        probs_all.append(probs_prev)
        residuals.append((resid_p, resid_d))
        ce_caches.append(ce_cache)
        dd_caches.append(dd_cache)
    return StageTrace(kind=DATA_AIDED, estimates=estimates, residuals=residuals,
                      probs=probs_all, ce_caches=ce_caches, dd_caches=dd_caches)


def noncoherent_forward(model: PicModel, y_std: np.ndarray) -> StageTrace:
    """Run the non-coherent receiver on standardized signals [B, 2L]."""
    blocks = model.scaled_blocks().nc
    y_std = np.asarray(y_std, dtype=np.float64)
    b = y_std.shape[0]
    k = model.config.n_devices
    n_seq = 2 ** model.config.n_bits
    est = np.zeros((b, k, 2))
    probs_prev: np.ndarray | None = None
    estimates, residuals, probs_all = [], [], []
    ce_caches, dd_caches = [], []
    for t in range(model.n_stages):
        resid = _nc_residual_all(y_std, est, probs_prev, blocks)
        resid_kbo = resid.transpose(1, 0, 2)
        est_kbo, ce_cache = forward(model.ce[t], resid_kbo)
        dd_in = np.concatenate([resid_kbo, est_kbo], axis=-1)
        p_kbo, dd_cache = forward(model.dd[t], dd_in)

        est = est_kbo.transpose(1, 0, 2)
        probs_prev = p_kbo.transpose(1, 0, 2)
        estimates.append(est)
        probs_all.append(probs_prev)
        residuals.append(resid)
        ce_caches.append(ce_cache)
        dd_caches.append(dd_cache)
    return StageTrace(kind=NONCOHERENT_PIC, estimates=estimates, residuals=residuals,
                      probs=probs_all, ce_caches=ce_caches, dd_caches=dd_caches)


def forward_pass(model: PicModel, std_batch: StandardizedBatch) -> StageTrace:
    if model.kind == PILOT_ONLY:
        return pilot_pic_forward(model, std_batch.y_pilot)
    if model.kind == DATA_AIDED:
        return data_aided_forward(model, std_batch.y_pilot, std_batch.y_data)
    return noncoherent_forward(model, std_batch.y_nc)


# --- labels and joint loss ----------------------------------------------------


@dataclass
class TraceLabels:
    """Ground truth aligned with a trace: standardized channels plus the
    kind-specific classification targets."""

    gamma_std: np.ndarray              # [B, K, 2]
    activity: np.ndarray               # [B, K] float
    symbol_onehot: np.ndarray | None   # [B, K, D, |C|] (data-aided)
    seq_onehot: np.ndarray | None      # [B, K, 2^J] (non-coherent)


def build_labels(batch: SampleBatch, std_batch: StandardizedBatch,
                 config: SystemConfig) -> TraceLabels:
    activity = batch.activity.astype(np.float64)
    symbol_onehot = None
    seq_onehot = None
    if config.scheme != NONCOHERENT:
        b, k = batch.activity.shape
        d, c = config.n_symbols, len(config.constellation)
        words = batch.bits.reshape(b, k, d, config.bits_per_symbol)
        idx = bits_to_seq_index(words)  # big-endian word value = symbol index
        symbol_onehot = np.zeros((b, k, d, c))
        bb, kk, dd = np.ogrid[:b, :k, :d]
        symbol_onehot[bb, kk, dd, idx] = 1.0
        symbol_onehot *= activity[:, :, None, None]
    else:
        seq_onehot = batch.seq_choice.astype(np.float64)
    return TraceLabels(gamma_std=std_batch.gamma, activity=activity,
                       symbol_onehot=symbol_onehot, seq_onehot=seq_onehot)


@dataclass
class LossSeeds:
    """Direct derivatives of the joint loss w.r.t. every module output."""

    d_estimates: list[np.ndarray]
    d_probs: np.ndarray | list[np.ndarray]


@dataclass
class JointLoss:
    total: float
    reg: float
    classification: float
    seeds: LossSeeds


def joint_loss(trace: StageTrace, labels: TraceLabels, class_weight: float,
               stage_weights) -> JointLoss:
    """Batch-mean joint loss: class_weight * L_class + (1 - class_weight) * L_reg.

    L_reg is the stage-weighted mean absolute error of every stage's channel
    estimates (subgradient 0 at exact zeros). L_class is binary cross-entropy
    on the final activity scores (pilot-only) or on all stages' symbol /
    sequence probabilities (data-aided / non-coherent).
    """
    g_true = labels.gamma_std
    b, k = g_true.shape[0], g_true.shape[1]
    w = np.asarray(stage_weights, dtype=np.float64)
    if w.size != trace.n_stages:
        raise ValueError(f"stage_weights length {w.size} != T={trace.n_stages}")
    if any(est.shape != g_true.shape for est in trace.estimates):
        raise ValueError("labels do not match the trace shapes")

    reg = 0.0
    d_estimates = []
    reg_seed_scale = (1.0 - class_weight) / (2.0 * k * b)
    for t, est in enumerate(trace.estimates):
        diff = est - g_true
        reg += w[t] * float(np.abs(diff).sum()) / (2.0 * k * b)
        d_estimates.append(reg_seed_scale * w[t] * np.sign(diff))

    if trace.kind == PILOT_ONLY:
        p = trace.probs
        a = labels.activity
        if p.shape != a.shape:
            raise ValueError("activity labels do not match the trace")
        cls = float(bce(p, a).sum()) / (k * b)
        d_probs = class_weight / (k * b) * bce_grad(p, a)
    elif trace.kind == DATA_AIDED:
        e = labels.symbol_onehot
        if e is None or trace.probs[0].shape != e.shape:
            raise ValueError("symbol labels do not match the trace")
        denom = k * e.shape[2] * e.shape[3] * b
        cls = sum(float(bce(p, e).sum()) for p in trace.probs) / denom
        d_probs = [class_weight / denom * bce_grad(p, e) for p in trace.probs]
    else:
        akj = labels.seq_onehot
        if akj is None or trace.probs[0].shape != akj.shape:
            raise ValueError("sequence labels do not match the trace")
        denom = k * akj.shape[2] * b
        cls = sum(float(bce(p, akj).sum()) for p in trace.probs) / denom
        d_probs = [class_weight / denom * bce_grad(p, akj) for p in trace.probs]

    total = class_weight * cls + (1.0 - class_weight) * reg
    return JointLoss(total=total, reg=reg, classification=cls,
                     seeds=LossSeeds(d_estimates=d_estimates, d_probs=d_probs))


# --- backward through the full stage graph -------------------------------------


@dataclass
class PicGrads:
    ce: list[MlpGrads]
    dd: list[MlpGrads] | None
    ad: MlpGrads | None

    def per_group(self) -> list[MlpGrads]:
        groups = list(self.ce)
        if self.dd is not None:
            groups.extend(self.dd)
        if self.ad is not None:
            groups.append(self.ad)
        return groups


def backprop(model: PicModel, trace: StageTrace, seeds: LossSeeds) -> PicGrads:
    """Exact gradients of the joint loss w.r.t. every module parameter,
    including the paths through the interference-cancellation residuals."""
    if model.kind == PILOT_ONLY:
        return _backprop_pilot(model, trace, seeds)
    if model.kind == DATA_AIDED:
        return _backprop_data_aided(model, trace, seeds)
    return _backprop_noncoherent(model, trace, seeds)


def _backprop_pilot(model: PicModel, trace: StageTrace, seeds: LossSeeds) -> PicGrads:
    blocks = model.scaled_blocks().pilot
    ad_grads, d_resid_ad = backward(trace.ad_cache, seeds.d_probs.T[..., None])
    d_est = seeds.d_estimates[-1] + _residual_all_bwd(
        d_resid_ad.transpose(1, 0, 2), blocks)

    ce_grads: list[MlpGrads] = [None] * model.n_stages  # type: ignore[list-item]
    for t in range(model.n_stages - 1, -1, -1):
        ce_grads[t], d_in = backward(trace.ce_caches[t], d_est.transpose(1, 0, 2))
        if t > 0:
            d_est = seeds.d_estimates[t - 1] + _residual_all_bwd(
                d_in.transpose(1, 0, 2), blocks)
    return PicGrads(ce=ce_grads, dd=None, ad=ad_grads)


def _backprop_data_aided(model: PicModel, trace: StageTrace,
                         seeds: LossSeeds) -> PicGrads:
    sb = model.scaled_blocks()
    cfg = model.config
    const = np.asarray(cfg.constellation)
    bpsk_fast = _is_bpsk(const)
    k, d = cfg.n_devices, cfg.n_symbols
    two_l = 2 * cfg.seq_len

    ce_grads: list[MlpGrads] = [None] * model.n_stages  # type: ignore[list-item]
    dd_grads: list[MlpGrads] = [None] * model.n_stages  # type: ignore[list-item]
    d_resid_p_next: np.ndarray | None = None
    d_resid_d_next: np.ndarray | None = None

    for t in range(model.n_stages - 1, -1, -1):
        d_probs = seeds.d_probs[t].copy()
        d_est = seeds.d_estimates[t].copy()
        if d_resid_p_next is not None:
            d_est += _residual_all_bwd(d_resid_p_next, sb.pilot)
            de, dp = _data_residual_all_bwd(d_resid_d_next, trace.estimates[t],
                                            trace.probs[t], sb.data, const, bpsk_fast)
            d_est += de
            d_probs += dp

        b = d_probs.shape[0]
        dd_out_grad = d_probs.reshape(b, k, d * const.size).transpose(1, 0, 2)
        dd_grads[t], d_dd_in = backward(trace.dd_caches[t], dd_out_grad)
        d_resid_d = d_dd_in[..., :d * two_l].reshape(k, b, d, two_l).transpose(1, 0, 2, 3)
        d_est += d_dd_in[..., d * two_l:].transpose(1, 0, 2)

        ce_grads[t], d_ce_in = backward(trace.ce_caches[t], d_est.transpose(1, 0, 2))
        d_resid_p = d_ce_in[..., :two_l].transpose(1, 0, 2)
        d_resid_d = d_resid_d + d_ce_in[..., two_l:].reshape(
            k, b, d, two_l).transpose(1, 0, 2, 3)

        d_resid_p_next, d_resid_d_next = d_resid_p, d_resid_d
    return PicGrads(ce=ce_grads, dd=dd_grads, ad=None)


def _backprop_noncoherent(model: PicModel, trace: StageTrace,
                          seeds: LossSeeds) -> PicGrads:
    blocks = model.scaled_blocks().nc
    two_l = 2 * model.config.seq_len

    ce_grads: list[MlpGrads] = [None] * model.n_stages  # type: ignore[list-item]
    dd_grads: list[MlpGrads] = [None] * model.n_stages  # type: ignore[list-item]
    d_resid_next: np.ndarray | None = None

    for t in range(model.n_stages - 1, -1, -1):
        d_probs = seeds.d_probs[t].copy()
        d_est = seeds.d_estimates[t].copy()
        if d_resid_next is not None:
            de, dp = _nc_residual_all_bwd(d_resid_next, trace.estimates[t],
                                          trace.probs[t], blocks)
            d_est += de
            d_probs += dp

        dd_grads[t], d_dd_in = backward(trace.dd_caches[t], d_probs.transpose(1, 0, 2))
        d_resid = d_dd_in[..., :two_l].transpose(1, 0, 2)
        d_est += d_dd_in[..., two_l:].transpose(1, 0, 2)

        ce_grads[t], d_ce_in = backward(trace.ce_caches[t], d_est.transpose(1, 0, 2))
        d_resid = d_resid + d_ce_in.transpose(1, 0, 2)

        d_resid_next = d_resid
    return PicGrads(ce=ce_grads, dd=dd_grads, ad=None)


# --- final decisions ------------------------------------------------------------


@dataclass
class Decision:
    """Hard receiver outputs for one batch."""

    a_hat: np.ndarray                 # [B, K] int8
    gamma_hat: np.ndarray             # [B, K] complex (zero when a_hat = 0)
    x_hat: np.ndarray | None = None   # [B, K, D] complex (coherent)
    bits_hat: np.ndarray | None = None  # [B, K, J] uint8
    akj_hat: np.ndarray | None = None   # [B, K, 2^J] int8 (non-coherent)


def _gated_gamma(a_hat: np.ndarray, est_pairs: np.ndarray,
                 std: Standardizer) -> np.ndarray:
    return a_hat * unstandardize_gamma(est_pairs, std)


def finalize_pilot(trace: StageTrace, tau_thr: float, std: Standardizer) -> Decision:
    """Threshold the activity scores; inactive devices get exactly-zero channels."""
    a_hat = (trace.probs >= tau_thr).astype(np.int8)
    gamma_hat = _gated_gamma(a_hat, trace.estimates[-1], std)
    return Decision(a_hat=a_hat, gamma_hat=gamma_hat)


def finalize_data_aided(trace: StageTrace, tau_thr: float, std: Standardizer,
                        config: SystemConfig) -> Decision:
    """Decide activity from the mean of the per-symbol max probabilities, then
    pick the most probable symbol per slot (ties to the lowest index)."""
    probs = trace.probs[-1]                     # [B, K, D, C]
    p_max = probs.max(axis=-1)
    mu = p_max.mean(axis=-1)
    a_hat = (mu >= tau_thr).astype(np.int8)
    c_star = probs.argmax(axis=-1)              # first max wins ties
    const = np.asarray(config.constellation)
    x_hat = const[c_star] * a_hat[:, :, None]
    bits = symbols_to_bits(c_star, config.bits_per_symbol)
    b, k = a_hat.shape
    bits_hat = (bits.reshape(b, k, -1) * a_hat[:, :, None]).astype(np.uint8)
    gamma_hat = _gated_gamma(a_hat, trace.estimates[-1], std)
    return Decision(a_hat=a_hat, gamma_hat=gamma_hat, x_hat=x_hat, bits_hat=bits_hat)


def finalize_noncoherent(trace: StageTrace, tau_thr: float, std: Standardizer,
                         config: SystemConfig) -> Decision:
    """Decide activity from the max sequence probability and mark only the
    winning sequence (ties to the lowest index)."""
    probs = trace.probs[-1]                     # [B, K, 2^J]
    p_max = probs.max(axis=-1)
    a_hat = (p_max >= tau_thr).astype(np.int8)
    j_star = probs.argmax(axis=-1)
    b, k = a_hat.shape
    akj_hat = np.zeros(probs.shape, dtype=np.int8)
    bb, kk = np.meshgrid(np.arange(b), np.arange(k), indexing="ij")
    akj_hat[bb, kk, j_star] = 1
    akj_hat *= a_hat[:, :, None]
    bits_hat = (seq_index_to_bits(j_star, config.n_bits)
                * a_hat[:, :, None]).astype(np.uint8)
    gamma_hat = _gated_gamma(a_hat, trace.estimates[-1], std)
    return Decision(a_hat=a_hat, gamma_hat=gamma_hat, bits_hat=bits_hat,
                    akj_hat=akj_hat)


def finalize(model: PicModel, trace: StageTrace) -> Decision:
    if model.kind == PILOT_ONLY:
        return finalize_pilot(trace, model.tau_thr, model.standardizer)
    if model.kind == DATA_AIDED:
        return finalize_data_aided(trace, model.tau_thr, model.standardizer,
                                   model.config)
    return finalize_noncoherent(trace, model.tau_thr, model.standardizer,
                                model.config)


def activity_scores(trace: StageTrace) -> np.ndarray:
    """Per-device activity score in (0,1) used for threshold calibration."""
    if trace.kind == PILOT_ONLY:
        return trace.probs
    if trace.kind == DATA_AIDED:
        return trace.probs[-1].max(axis=-1).mean(axis=-1)
    return trace.probs[-1].max(axis=-1)
