"""Numerical checks of the relaxation, CS-error and loyalty bounds.

All bound checks return a :class:`BoundReport`; ``satisfied`` is true
exactly when ``slack = rhs - lhs`` is positive.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import ShapeError, back_project, check_field
from .losses import cross_sanity_loss, cross_sanity_mask


class PreconditionError(ValueError):
    """Raised when a field pair does not meet a bound's hypotheses."""

    def __init__(self, message, voxel=None):
        super().__init__(message)
        self.voxel = voxel


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    context: dict = field(default_factory=dict)

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def satisfied(self):
        return self.slack > 0

    def row(self):
        out = {"bound": self.name, "lhs": self.lhs, "rhs": self.rhs,
               "slack": self.slack, "satisfied": int(self.satisfied)}
        out.update(self.context)
        return out


def _check_params(alpha, beta):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not beta > 0.0:
        raise ValueError(f"beta must be positive, got {beta}")


def _require_checked(g, gt, alpha, beta, label):
    mask = cross_sanity_mask(g, gt, alpha, beta)
    if mask.any():
        voxel = tuple(int(i) for i in np.argwhere(mask)[0])
        raise PreconditionError(f"{label}: cross-sanity check fails at voxel {voxel}",
                                voxel)
    dot = (g * gt).sum(axis=0)
    if (dot > 0).any():
        voxel = tuple(int(i) for i in np.argwhere(dot > 0)[0])
        raise PreconditionError(f"{label}: g . g~ > 0 at voxel {voxel}", voxel)


def relaxation_bound(alpha, beta, n_voxels):
    """Right-hand side ``beta (2 - alpha) N / (1 - alpha)``."""
    return beta * (2.0 - alpha) * n_voxels / (1.0 - alpha)


def verify_thm1(g_ab, g_tilde_ba, alpha, beta):
    """Check ``|g + g~|^2 < beta (2 - alpha) N / (1 - alpha)`` for a checked pair.

    The pair must pass the per-voxel cross-sanity check everywhere and
    satisfy ``g . g~ <= 0`` at every voxel.
    """
    _check_params(alpha, beta)
    g, gt = check_field(g_ab), check_field(g_tilde_ba)
    if g.shape != gt.shape:
        raise ShapeError(f"field shapes differ: {g.shape} vs {gt.shape}")
    _require_checked(g, gt, alpha, beta, "verify_thm1")
    n_vox = int(np.prod(g.shape[1:]))
    lhs = float(((g + gt) ** 2).sum())
    return BoundReport("relaxation", lhs, relaxation_bound(alpha, beta, n_vox),
                       {"alpha": alpha, "beta": beta, "N": n_vox})


def cs_expression(g_mf, gt_fm, g_fm, gt_mf, alpha, beta):
    """Unmasked bidirectional CS value ``|g + g~|^2 - alpha(|g|^2 + |g~|^2) - 2 beta N``."""
    n_vox = int(np.prod(g_mf.shape[1:]))
    err = ((g_mf + gt_fm) ** 2).sum() + ((g_fm + gt_mf) ** 2).sum()
    mag = (g_mf ** 2).sum() + (gt_fm ** 2).sum() + (g_fm ** 2).sum() + (gt_mf ** 2).sum()
    return float(err - alpha * mag - 2.0 * beta * n_vox)


def verify_cs_bound(g_mf, g_fm, alpha, beta, tildes=None):
    """Check the bidirectional CS error against ``2 (1 - alpha) beta N``.

    ``lhs`` is the violator-restricted CS error summed over both
    directions, so voxels passing the check contribute nothing; the raw
    unmasked expression is reported in ``context["raw_cs"]``. ``tildes``
    may supply ``(g~_fm, g~_mf)``; otherwise they are back-projected.
    """
    _check_params(alpha, beta)
    g_mf, g_fm = check_field(g_mf), check_field(g_fm)
    if g_mf.shape != g_fm.shape:
        raise ShapeError(f"field shapes differ: {g_mf.shape} vs {g_fm.shape}")
    if tildes is None:
        gt_fm, gt_mf = back_project(g_mf, g_fm), back_project(g_fm, g_mf)
    else:
        gt_fm, gt_mf = (check_field(t, g_mf.shape[1:]) for t in tildes)
    _require_checked(g_mf, gt_fm, alpha, beta, "verify_cs_bound (m->f)")
    _require_checked(g_fm, gt_mf, alpha, beta, "verify_cs_bound (f->m)")
    n_vox = int(np.prod(g_mf.shape[1:]))
    masked = 0.0
    for g, gt in ((g_mf, gt_fm), (g_fm, gt_mf)):
        mask = cross_sanity_mask(g, gt, alpha, beta)
        masked += cross_sanity_loss(g, gt, mask, alpha, beta)
    raw = cs_expression(g_mf, gt_fm, g_fm, gt_mf, alpha, beta)
    return BoundReport("cs", float(masked), 2.0 * (1.0 - alpha) * beta * n_vox,
                       {"alpha": alpha, "beta": beta, "N": n_vox, "raw_cs": raw})


@dataclass
class LoyaltyGuidance:
    alpha: float
    beta: float
    factor: float
    lambda_c: float
    per_voxel_bound: float
    recommended_lambda_c: float
    budget: float
    loose: bool
    n_voxels: int = None

    @property
    def total_bound(self):
        """``lambda_c (1 - alpha) beta N``; None without a voxel count."""
        return None if self.n_voxels is None else self.per_voxel_bound * self.n_voxels

    @property
    def bidirectional_bound(self):
        """``2 lambda_c (1 - alpha) beta N``; None without a voxel count."""
        return None if self.n_voxels is None else 2.0 * self.per_voxel_bound * self.n_voxels


def lambda_c_guidance(alpha, beta, lambda_c=None, budget=0.01, n_voxels=None):
    """Per-voxel loyalty bound ``lambda_c (1 - alpha) beta`` and a recommended weight.

    The recommendation is the largest power of ten whose bound stays
    within ``budget``. When ``lambda_c`` is omitted the recommendation is
    evaluated.
    """
    _check_params(alpha, beta)
    factor = beta - alpha * beta
    recommended = 10.0 ** np.floor(np.log10(budget / factor))
    lam = recommended if lambda_c is None else float(lambda_c)
    bound = lam * factor
    return LoyaltyGuidance(alpha, beta, factor, lam, bound, float(recommended),
                           budget, bool(bound > budget), n_voxels)


def estimate_alpha_beta(sample_fields, model_kind="absolute"):
    """``beta = 0.15 x`` the largest displacement magnitude over the samples.

    ``alpha`` is 0.1 for models predicting absolute (voxel) displacements
    and 0.01 for models predicting normalised displacements.
    """
    if len(sample_fields) == 0:
        raise ValueError("need at least one sample field")
    alphas = {"absolute": 0.1, "normalized": 0.01}
    if model_kind not in alphas:
        raise ValueError(f"model_kind must be one of {sorted(alphas)}")
    peak = max(float(np.sqrt((check_field(f) ** 2).sum(axis=0)).max())
               for f in sample_fields)
    beta = 0.15 * peak
    if not beta > 0:
        raise ValueError("degenerate samples: maximum displacement is zero")
    return alphas[model_kind], beta


def check_ratio_bound(g_ab, g_tilde_ba, alpha, floor=1e-8):
    """Componentwise ``g/g~ + g~/g < 2 / (1 - alpha)`` where ``g g~ < 0``.

    Returns ``(satisfied, evaluated, fraction)``: boolean maps over
    components and voxels, and the satisfied fraction of evaluated entries
    (1.0 when nothing was evaluated).
    """
    g, gt = check_field(g_ab), check_field(g_tilde_ba)
    evaluated = (np.abs(g) >= floor) & (np.abs(gt) >= floor) & (g * gt < 0)
    ratio = np.zeros_like(g)
    ratio[evaluated] = g[evaluated] / gt[evaluated] + gt[evaluated] / g[evaluated]
    satisfied = evaluated & (ratio < 2.0 / (1.0 - alpha))
    fraction = satisfied.sum() / evaluated.sum() if evaluated.any() else 1.0
    return satisfied, evaluated, float(fraction)


def check_thm2_budget(fields, budget, alpha, beta, n_voxels):
    """Admissibility ``2 alpha B + beta N < B`` plus ``|g|^2 <= B`` for each field."""
    if not budget > 0:
        raise ValueError("budget must be positive")
    norms = [float((check_field(f) ** 2).sum()) for f in fields]
    return BoundReport("energy_budget", 2.0 * alpha * budget + beta * n_voxels, float(budget),
                       {"alpha": alpha, "beta": beta, "N": n_voxels,
                        "max_field_norm": max(norms, default=0.0),
                        "fields_within_budget": all(v <= budget for v in norms)})


def sign_violation_rate(g_ab, g_tilde_ba):
    """Fraction of voxels where ``g . g~ > 0``."""
    g, gt = check_field(g_ab), check_field(g_tilde_ba)
    return float(((g * gt).sum(axis=0) > 0).mean())


def sample_checked_pairs(count, shape, alpha, beta, rng, sigma=1.0,
                         max_displacement=None, max_halvings=60):
    """Random ``(g, g~)`` pairs passing the check and the sign condition everywhere.

    ``g`` is Gaussian-smoothed white noise rescaled to a peak magnitude drawn
    uniformly in ``(0, max_displacement]`` (default ``beta / 0.15``, the
    peak displacement for which ``beta`` is the recommended setting).
    ``g~ = -g + eps * noise`` with ``eps`` halved from 1 until every voxel
    passes. Returns arrays of shape ``(count, n, *shape)``.
    """
    _check_params(alpha, beta)
    shape = tuple(shape)
    n = len(shape)
    peak_max = beta / 0.15 if max_displacement is None else max_displacement
    out_g = np.empty((count, n) + shape)
    out_gt = np.empty_like(out_g)
    filled = 0
    while filled < count:
        k = count - filled
        g = rng.standard_normal((k, n) + shape)
        g = ndimage.gaussian_filter(g, (0, 0) + (sigma,) * n, mode="reflect")
        peak = np.sqrt((g ** 2).sum(axis=1)).reshape(k, -1).max(axis=1)
        target = peak_max * (1.0 - rng.random(k))
        g *= (target / peak).reshape((k,) + (1,) * (n + 1))
        noise = rng.standard_normal(g.shape)
        eps = np.ones(k)
        done = np.zeros(k, bool)
        for _ in range(max_halvings):
            gt = -g + eps.reshape((k,) + (1,) * (n + 1)) * noise
            err = ((g + gt) ** 2).sum(axis=1)
            tol = alpha * ((g ** 2).sum(axis=1) + (gt ** 2).sum(axis=1)) + beta
            ok = (err < tol) & ((g * gt).sum(axis=1) <= 0)
            ok = ok.reshape(k, -1).all(axis=1)
            done |= ok
            eps = np.where(done, eps, eps * 0.5)
            if done.all():
                break
        gt = -g + eps.reshape((k,) + (1,) * (n + 1)) * noise
        good = np.flatnonzero(done)
        out_g[filled:filled + good.size] = g[good]
        out_gt[filled:filled + good.size] = gt[good]
        filled += good.size
    return out_g, out_gt


def loyalty_check(m, f, config, steps=200, learning_rate=0.1):
    """Similarity gap between the sanity-checked optimum and a surrogate optimum.

    The surrogate optimum is the direct optimiser with ``lambda_s =
    lambda_c = 0``. NCC is already a per-voxel mean, so the gap averaged
    over the two directions is compared with the per-voxel, per-direction
    bound ``lambda_c (1 - alpha) beta``. The report is labelled as a
    surrogate check.
    """
    from .losses import ncc
    from .grid import warp_image
    from .registration import register_pair_direct

    def similarity(res):
        w = config.ncc_window
        return (ncc(f, warp_image(m, res.g_mf), w) + ncc(m, warp_image(f, res.g_fm), w))

    free = register_pair_direct(m, f, config.replace(lambda_s=0.0, lambda_c=0.0),
                                steps, learning_rate)
    checked = register_pair_direct(m, f, config, steps, learning_rate)
    n_vox = int(np.prod(np.shape(m)))
    gap = (similarity(free) - similarity(checked)) / 2.0
    bound = config.lambda_c * (1.0 - config.alpha) * config.beta
    return BoundReport("loyalty_surrogate", float(gap), float(bound),
                       {"alpha": config.alpha, "beta": config.beta, "N": n_vox,
                        "lambda_c": config.lambda_c, "surrogate": True})
