"""Intensity mixture fitting (EM) and MAP labeling with a spatial prior.

Two intensity classes are modeled, foreground (the organ) and background,
each as a small Gaussian mixture. The per-voxel atlas probability acts as a
spatially varying class prior both during EM and at labeling time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import label as cc_label

from .volume import Volume3D

_LOG_2PI = float(np.log(2.0 * np.pi))


class DegenerateAtlasError(RuntimeError):
    """Atlas gives one class zero prior mass everywhere."""


@dataclass
class ClassModel:
    """Gaussian mixture for one intensity class."""

    weights: np.ndarray    # (K,), sums to 1
    means: np.ndarray      # (K,)
    variances: np.ndarray  # (K,), floored

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """log sum_j w_j N(x; mu_j, var_j), elementwise."""
        out = None
        for w, mu, var in zip(self.weights, self.means, self.variances):
            if w <= 0.0:
                continue
            comp = (np.log(w) - 0.5 * (_LOG_2PI + np.log(var))
                    - 0.5 * (x - mu) ** 2 / var)
            out = comp if out is None else np.logaddexp(out, comp)
        if out is None:  # all components collapsed; treat as impossible
            return np.full(x.shape, -np.inf)
        return out


@dataclass
class IntensityModel:
    foreground: ClassModel
    background: ClassModel
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def ll_monotone(self) -> bool:
        ll = self.log_likelihoods
        return all(b >= a for a, b in zip(ll, ll[1:]))


def _weighted_quantiles(x_sorted: np.ndarray, w_sorted: np.ndarray,
                        qs: np.ndarray) -> np.ndarray:
    cw = np.cumsum(w_sorted)
    if cw[-1] <= 0:
        return np.full(len(qs), x_sorted[len(x_sorted) // 2])
    cw = cw / cw[-1]
    idx = np.searchsorted(cw, qs, side="left")
    return x_sorted[np.clip(idx, 0, len(x_sorted) - 1)]


def _init_class(x: np.ndarray, w: np.ndarray, k: int,
                var_floor: float) -> ClassModel:
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    qs = (np.arange(k) + 1.0) / (k + 1.0)
    means = _weighted_quantiles(xs, ws, qs).astype(np.float64)
    total = w.sum()
    if total > 0:
        mean_all = float(np.dot(w, x) / total)
        var_all = float(np.dot(w, (x - mean_all) ** 2) / total)
    else:
        var_all = var_floor
    variances = np.full(k, max(var_all, var_floor))
    weights = np.full(k, 1.0 / k)
    return ClassModel(weights, means, variances)


def fit_intensity_model_em(ct: Volume3D, atlas_prob: np.ndarray,
                           fg_components: int = 1, bg_components: int = 2,
                           max_iter: int = 100, tol: float = 1e-6,
                           var_floor: float = 1.0) -> IntensityModel:
    """EM fit of both class mixtures with the atlas as voxelwise prior.

    Iterates until the log likelihood improves by less than ``tol`` or
    ``max_iter`` is reached; the recorded per-iteration log likelihood is
    non-decreasing (an iteration that would decrease it, which the variance
    floor can cause in principle, is rolled back and iteration stops).
    """
    x = ct.data.astype(np.float64).ravel()
    prior_fg = np.asarray(atlas_prob, dtype=np.float64).ravel()
    if x.shape != prior_fg.shape:
        raise ValueError("atlas and CT must share the voxel grid")
    if prior_fg.min() < 0 or prior_fg.max() > 1:
        raise ValueError("atlas probabilities must lie in [0, 1]")
    if not np.any(prior_fg > 0):
        raise DegenerateAtlasError("atlas assigns zero prior to the organ "
                                   "everywhere")
    if not np.any(prior_fg < 1):
        raise DegenerateAtlasError("atlas assigns zero prior to background "
                                   "everywhere")
    prior_bg = 1.0 - prior_fg

    fg = _init_class(x, prior_fg, fg_components, var_floor)
    bg = _init_class(x, prior_bg, bg_components, var_floor)

    with np.errstate(divide="ignore"):
        log_prior_fg = np.log(prior_fg)
        log_prior_bg = np.log(prior_bg)

    history: list[float] = []
    prev = (fg, bg)
    for _ in range(max_iter):
        resp, ll = _e_step(x, log_prior_fg, log_prior_bg, fg, bg)
        if history and ll < history[-1]:
            fg, bg = prev  # floor-induced decrease: roll back and stop
            break
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        prev = (fg, bg)
        fg = _m_step(x, resp[0], var_floor)
        bg = _m_step(x, resp[1], var_floor)
    return IntensityModel(fg, bg, history)


def _e_step(x, log_prior_fg, log_prior_bg, fg: ClassModel, bg: ClassModel):
    """Joint responsibilities over (class, component) and the data
    log likelihood under the current parameters."""
    comps = []
    for log_prior, model in ((log_prior_fg, fg), (log_prior_bg, bg)):
        rows = []
        for w, mu, var in zip(model.weights, model.means, model.variances):
            logw = np.log(w) if w > 0 else -np.inf
            rows.append(log_prior + logw - 0.5 * (_LOG_2PI + np.log(var))
                        - 0.5 * (x - mu) ** 2 / var)
        comps.append(rows)
    total = None
    for rows in comps:
        for r in rows:
            total = r if total is None else np.logaddexp(total, r)
    ll = float(total.sum())
    resp = []
    for rows in comps:
        with np.errstate(invalid="ignore"):
            resp.append([np.where(np.isfinite(total), np.exp(r - total), 0.0)
                         for r in rows])
    return resp, ll


def _m_step(x, resp_rows, var_floor) -> ClassModel:
    k = len(resp_rows)
    weights = np.empty(k)
    means = np.empty(k)
    variances = np.empty(k)
    totals = np.array([r.sum() for r in resp_rows])
    grand = totals.sum()
    for j, r in enumerate(resp_rows):
        wj = totals[j]
        if wj <= 0:
            weights[j] = 0.0
            means[j] = 0.0
            variances[j] = var_floor
            continue
        mu = float(np.dot(r, x) / wj)
        var = float(np.dot(r, (x - mu) ** 2) / wj)
        weights[j] = wj / grand
        means[j] = mu
        variances[j] = max(var, var_floor)
    return ClassModel(weights, means, variances)


def class_log_scores(ct: Volume3D, atlas_prob: np.ndarray,
                     model: IntensityModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel unnormalized log posteriors (foreground, background)."""
    x = ct.data.astype(np.float64).ravel()
    prior_fg = np.asarray(atlas_prob, dtype=np.float64).ravel()
    with np.errstate(divide="ignore"):
        log_fg = np.log(prior_fg) + model.foreground.log_density(x)
        log_bg = np.log(1.0 - prior_fg) + model.background.log_density(x)
    return log_fg, log_bg


def map_segment(ct: Volume3D, atlas_prob: np.ndarray,
                model: IntensityModel) -> Volume3D:
    """Per-voxel posterior argmax; ties go to background."""
    log_fg, log_bg = class_log_scores(ct, atlas_prob, model)
    labels = (log_fg > log_bg).astype(np.float32).reshape(ct.data.shape)
    return Volume3D(labels, ct.spacing, ct.origin)


def posterior_foreground(ct: Volume3D, atlas_prob: np.ndarray,
                         model: IntensityModel) -> np.ndarray:
    """Normalized foreground posterior per voxel, shaped like the CT grid."""
    log_fg, log_bg = class_log_scores(ct, atlas_prob, model)
    both_dead = ~np.isfinite(log_fg) & ~np.isfinite(log_bg)
    with np.errstate(invalid="ignore"):
        post = np.exp(log_fg - np.logaddexp(log_fg, log_bg))
    post = np.where(both_dead, 0.0, post)
    post = np.where(np.isfinite(post), post, 0.0)
    return np.clip(post, 0.0, 1.0).reshape(ct.data.shape)


def largest_component(labels: Volume3D) -> Volume3D:
    """Keep only the largest 6-connected foreground component."""
    mask = labels.data > 0.5
    if not mask.any():
        return labels
    comp, n = cc_label(mask)
    if n <= 1:
        return labels
    sizes = np.bincount(comp.ravel())
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    return Volume3D((comp == keep).astype(np.float32), labels.spacing,
                    labels.origin)
