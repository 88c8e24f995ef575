"""Classical sparse-recovery baselines.

LASSO: accelerated proximal gradient (monotone FISTA) on the complex problem

    minimize (1/2) ||y - S g||_2^2 + nu * ||g||_1

where ||g||_1 sums the moduli. The prox is complex soft-thresholding; the
step size is 1 / ||S||_2^2; accepted iterates never increase the objective.

AMP: standard complex approximate message passing with an Onsager-corrected
residual and the MMSE denoiser for a Bernoulli-CN(0, v_k) prior,

    eta(r; tau^2) = phi_k(r) * v_k / (v_k + tau^2) * r,

with phi_k the posterior activity probability of column k and the effective
noise tracked as tau^2 = ||z||^2 / L. All functions also accept a leading
sample axis so Monte-Carlo batches run as single array programs.

Activity is read off the recovered coefficients by magnitude thresholding;
the non-coherent variants first restrict each device's column group to its
single strongest candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SparsePrior:
    """Bernoulli-CN prior: per-column activity probability and channel variance."""

    eps: np.ndarray   # activity probability per column (broadcastable to [.., M])
    v: np.ndarray     # channel variance per column, strictly positive

    def __post_init__(self) -> None:
        self.eps = np.asarray(self.eps, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if np.any(self.v <= 0.0):
            raise ValueError("prior channel variances must be strictly positive")
        if np.any((self.eps < 0.0) | (self.eps > 1.0)):
            raise ValueError("prior activity probabilities must lie in [0, 1]")


def lasso_objective(y: np.ndarray, s: np.ndarray, gamma: np.ndarray,
                    nu: float) -> np.ndarray:
    """(1/2)||y - S g||^2 + nu ||g||_1 per sample (complex l1 of moduli)."""
    resid = y - gamma @ s.T
    return 0.5 * np.sum(np.abs(resid) ** 2, axis=-1) + nu * np.sum(np.abs(gamma), axis=-1)


def _soft_threshold(z: np.ndarray, thresh: float) -> np.ndarray:
    mag = np.abs(z)
    scale = np.maximum(mag - thresh, 0.0) / np.maximum(mag, 1e-300)
    return z * scale


def lasso_estimate_batch(y: np.ndarray, s: np.ndarray, nu: float,
                         max_iters: int = 2000, tol: float = 1e-9) -> np.ndarray:
    """Solve the complex LASSO for a batch of problems sharing one matrix.

    ``y`` is [N, L] (or [L]), ``s`` is [L, M]; returns [N, M] (or [M]).
    Monotone acceleration: candidates that would increase the objective are
    rejected and that sample's momentum restarts, so accepted objectives are
    non-increasing. Stops when every sample's relative objective decrease
    falls below ``tol`` (with no rejections pending), or after ``max_iters``.
    """
    s = np.asarray(s, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    n, m = y.shape[0], s.shape[1]
    op_norm_sq = np.linalg.norm(s, 2) ** 2
    if op_norm_sq == 0.0:
        raise ValueError("LASSO needs a nonzero sensing matrix")
    step = 1.0 / op_norm_sq

    x = np.zeros((n, m), dtype=np.complex128)
    w = x.copy()                       # extrapolation point
    t_mom = np.ones(n)
    f_x = lasso_objective(y, s, x, nu)
    for _ in range(max_iters):
        grad = (w @ s.T - y) @ np.conj(s)
        z = _soft_threshold(w - step * grad, nu * step)
        f_z = lasso_objective(y, s, z, nu)
        accept = f_z <= f_x
        x_new = np.where(accept[:, None], z, x)
        f_new = np.where(accept, f_z, f_x)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        w = (x_new + (t_mom / t_next)[:, None] * (z - x_new)
             + ((t_mom - 1.0) / t_next)[:, None] * (x_new - x))
        # rejected samples take a plain proximal step from x_new next round
        w = np.where(accept[:, None], w, x_new)
        t_next = np.where(accept, t_next, 1.0)
        rel_impr = (f_x - f_new) / np.maximum(np.abs(f_x), 1e-300)
        x, f_x, t_mom = x_new, f_new, t_next
        if np.all(accept) and np.all(rel_impr <= tol):
            break
    return x[0] if single else x


def lasso_estimate(y: np.ndarray, s: np.ndarray, nu: float,
                   max_iters: int = 2000, tol: float = 1e-9) -> np.ndarray:
    """Single-problem complex LASSO (see ``lasso_estimate_batch``)."""
    if np.asarray(s).shape[1] < 1:
        raise ValueError("need at least one column")
    return lasso_estimate_batch(y, s, nu, max_iters=max_iters, tol=tol)


def amp_estimate_batch(y: np.ndarray, s: np.ndarray, prior: SparsePrior,
                       n_iters: int = 50, noise_var: float = 1.0):
    """Complex Bayes AMP for a batch of problems sharing one sensing matrix.

    ``y`` is [N, L]; the prior fields broadcast to [N, M]. Returns
    (gamma_hat [N, M], tau2_track [n_iters+1, N], phi [N, M]). Column norms
    must be 1 within 1e-6.
    """
    s = np.asarray(s, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    L, m = s.shape
    norms = np.linalg.norm(s, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("AMP requires unit-norm sensing columns (tolerance 1e-6)")
    n = y.shape[0]
    eps = np.broadcast_to(prior.eps, (n, m)).astype(np.float64)
    v = np.broadcast_to(prior.v, (n, m)).astype(np.float64)
    with np.errstate(divide="ignore"):
        logit_eps = np.log(eps) - np.log1p(-eps)  # +/- inf at the degenerate ends

    gamma = np.zeros((n, m), dtype=np.complex128)
    z = y.copy()
    tau2_track = np.empty((n_iters + 1, n))
    tau2 = np.sum(np.abs(z) ** 2, axis=-1) / L
    tau2_track[0] = tau2
    sc = np.conj(s)
    for it in range(n_iters):
        r = gamma + z @ sc                       # per-column pseudo data
        t2 = np.maximum(tau2, noise_var * 1e-12)[:, None]
        shrink = v / (v + t2)
        # posterior activity probability of each column
        xi = logit_eps + np.log(t2 / (v + t2)) + (np.abs(r) ** 2) * shrink / t2
        phi = _logistic(xi)
        gamma = phi * shrink * r
        # Onsager correction: average posterior variance over columns
        post_var = phi * shrink * t2 + phi * (1.0 - phi) * (shrink ** 2) * (np.abs(r) ** 2)
        onsager = post_var.sum(axis=-1) / (L * np.maximum(tau2, noise_var * 1e-12))
        z = y - gamma @ s.T + onsager[:, None] * z
        tau2 = np.sum(np.abs(z) ** 2, axis=-1) / L
        tau2_track[it + 1] = tau2
    if single:
        return gamma[0], tau2_track[:, 0], phi[0]
    return gamma, tau2_track, phi


def _logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # posterior activity probabilities stay in the open interval
    return np.clip(out, 1e-300, np.nextafter(1.0, 0.0))


def amp_estimate(y: np.ndarray, s: np.ndarray, prior: SparsePrior,
                 n_iters: int = 50):
    """Single-problem complex AMP; returns (gamma_hat, tau^2 track)."""
    gamma, tau2, _ = amp_estimate_batch(y, s, prior, n_iters=n_iters)
    return gamma, tau2


def pooled_prior(prior: SparsePrior) -> SparsePrior:
    """Mismatched-prior variant: one pooled channel variance for all columns."""
    return SparsePrior(eps=prior.eps, v=np.full_like(prior.v, float(prior.v.mean())))


def activity_from_magnitude(gamma_hat: np.ndarray, threshold_grid) -> np.ndarray:
    """Hard activity decisions |gamma_hat| >= theta for each grid threshold.

    Returns an array with a leading grid axis (ROC-style sweeps)."""
    mags = np.abs(np.asarray(gamma_hat))
    grid = np.atleast_1d(np.asarray(threshold_grid, dtype=np.float64))
    out = (mags[None, ...] >= grid.reshape((-1,) + (1,) * mags.ndim)).astype(np.int8)
    return out


def noncoherent_constrain(gamma_grouped: np.ndarray, threshold: float):
    """Per-device constraint for non-coherent recovery.

    ``gamma_grouped`` is [..., K, 2^J]; for each device the strongest column
    (ties to the lowest index) survives, and the device is active iff that
    column's magnitude reaches the threshold. Returns (a_hat [..., K],
    akj_hat [..., K, 2^J]).
    """
    mags = np.abs(np.asarray(gamma_grouped))
    j_star = mags.argmax(axis=-1)
    best = np.take_along_axis(mags, j_star[..., None], axis=-1)[..., 0]
    a_hat = (best >= threshold).astype(np.int8)
    akj_hat = np.zeros(mags.shape, dtype=np.int8)
    np.put_along_axis(akj_hat, j_star[..., None], 1, axis=-1)
    akj_hat *= a_hat[..., None]
    return a_hat, akj_hat
