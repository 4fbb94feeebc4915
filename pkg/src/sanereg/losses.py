"""Similarity, regularity and sanity loss terms.

Every loss accepts either numpy arrays (returns a float) or autodiff
nodes (returns a node on the same tape), so the same code serves metrics
and training.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .grid import ShapeError, identity_grid


@dataclass
class SanityConfig:
    """Loss weights and sanity-check tolerances.

    ``alpha`` is the slope and ``beta`` the intercept of the relaxed
    inverse-consistency check; both must satisfy ``0 < alpha < 1`` and
    ``beta > 0``.
    """

    alpha: float = 0.1
    beta: float = 0.3
    lambda_r: float = 1.0
    lambda_s: float = 0.1
    lambda_c: float = 0.001
    ncc_window: int = 9
    spacing: tuple = (1.0, 1.0)
    similarity: str = "ncc"
    coordinate_gradient: bool = False
    sanity_reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        for name in ("lambda_r", "lambda_s", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be a positive odd integer")
        if self.sanity_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown sanity_reduction {self.sanity_reduction!r}")
        if self.similarity not in ("ncc", "ssd"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        self.spacing = tuple(float(s) for s in self.spacing)

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return SanityConfig(**values)


def _prep(*xs):
    nodes = [x for x in xs if isinstance(x, ad.Node)]
    if nodes:
        tape = nodes[0].tape
        return tape, [ad._lift(x, tape) for x in xs], True
    tape = ad.Tape()
    return tape, [tape.const(x) for x in xs], False


def _out(node, graph):
    return node if graph else float(node.value)


def _same_shape(a, b, what):
    if np.shape(a.value) != np.shape(b.value):
        raise ShapeError(f"{what}: shapes {np.shape(a.value)} and {np.shape(b.value)} differ")


def ncc(a, b, window=9, eps=1e-5):
    """Mean squared local correlation coefficient of ``a`` and ``b``.

    Windows are truncated at the border and statistics use the in-bounds
    voxel count, which keeps the measure exactly invariant to positive
    affine intensity changes. Variances are floored at ``eps``.
    """
    _, (a, b), graph = _prep(a, b)
    _same_shape(a, b, "ncc")
    axes = tuple(range(a.value.ndim))
    count = ad.box_sum_array(np.ones(a.shape), window, axes)
    sa = ad.box_sum(a, window, axes)
    sb = ad.box_sum(b, window, axes)
    saa = ad.box_sum(a * a, window, axes)
    sbb = ad.box_sum(b * b, window, axes)
    sab = ad.box_sum(a * b, window, axes)
    cross = sab - sa * sb / count
    var_a = saa - sa * sa / count
    var_b = sbb - sb * sb / count
    cc = cross * cross / (ad.maximum(var_a, eps) * ad.maximum(var_b, eps))
    return _out(cc.mean(), graph)


def ssd(a, b):
    _, (a, b), graph = _prep(a, b)
    _same_shape(a, b, "ssd")
    d = a - b
    return _out((d * d).sum(), graph)


def grad_reg(field):
    """Squared forward differences, averaged per axis and summed over axes."""
    _, (u,), graph = _prep(field)
    n = u.value.shape[0]
    total = None
    for ax in range(1, n + 1):
        hi = [slice(None)] * (n + 1)
        lo = [slice(None)] * (n + 1)
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        d = u[tuple(hi)] - u[tuple(lo)]
        term = (d * d).mean()
        total = term if total is None else total + term
    return _out(total, graph)


def self_sanity_loss(g_mm, g_ff):
    """Half the summed squared displacement predicted for identical pairs."""
    _, (a, b), graph = _prep(g_mm, g_ff)
    _same_shape(a, b, "self_sanity_loss")
    return _out(((a * a).sum() + (b * b).sum()) * 0.5, graph)


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=float)


def cross_sanity_mask(g_ab, g_tilde_ba, alpha, beta):
    """Boolean violator mask: True where the per-voxel relaxed check fails.

    A voxel passes when ``|g + g~|^2 < alpha (|g|^2 + |g~|^2) + beta``;
    ties count as violations.
    """
    g = _value(g_ab)
    gt = _value(g_tilde_ba)
    if g.shape != gt.shape:
        raise ShapeError(f"cross_sanity_mask: {g.shape} vs {gt.shape}")
    err = ((g + gt) ** 2).sum(axis=0)
    tol = alpha * ((g ** 2).sum(axis=0) + (gt ** 2).sum(axis=0)) + beta
    return ~(err < tol)


def cross_sanity_loss(g_ab, g_tilde_ba, mask, alpha, beta):
    """Masked cross-sanity loss for one direction.

    ``|M(g + g~)|^2 - alpha (|M g|^2 + |M g~|^2) - beta |M|^2`` with the
    mask broadcast over vector components. The mask is a constant.
    """
    _, (g, gt), graph = _prep(g_ab, g_tilde_ba)
    _same_shape(g, gt, "cross_sanity_loss")
    m = np.asarray(mask, dtype=float)
    if m.shape != g.value.shape[1:]:
        raise ShapeError(f"mask {m.shape} does not match field grid {g.value.shape[1:]}")
    s = g + gt
    loss = ((s * s) * m).sum() - alpha * (((g * g) * m).sum() + ((gt * gt) * m).sum())
    loss = loss - beta * float(m.sum())
    return _out(loss, graph)


def back_project_node(g_ab, g_ba, coordinate_gradient=False):
    """Differentiable back-projection ``g_ba(p + g_ab(p))``."""
    tape, (g_ab, g_ba), _ = _prep(g_ab, g_ba)
    pts = g_ab + identity_grid(g_ab.value.shape[1:])
    return ad.sample(g_ba, pts, detach_points=not coordinate_gradient)


def warp_node(image, field):
    tape, (image, field), _ = _prep(image, field)
    pts = field + identity_grid(image.value.shape)
    return ad.sample(image, pts)


@dataclass
class LossTerms:
    total: object
    sim: float
    reg: float
    self_: float
    cross: float
    masks: tuple = field(default=(None, None))

    @property
    def violator_fraction(self):
        if self.masks[0] is None:
            return 0.0
        return float(np.mean([np.mean(m) for m in self.masks]))

    def weighted_sum(self, config):
        return (self.sim + config.lambda_r * self.reg + config.lambda_s * self.self_
                + config.lambda_c * self.cross)


def total_loss(m, f, g_mf, g_fm, g_mm=None, g_ff=None, config=None):
    """Bidirectional sanity-checked objective.

    ``L_sim + lambda_r L_reg + lambda_s L_self + lambda_c L_cross`` with the
    similarity and regularity terms summed over both directions. Identical
    pair fields ``g_mm`` and ``g_ff`` enter only the self-sanity term; when
    omitted they are taken as zero. Returns :class:`LossTerms` whose
    ``total`` is a node when any input is a node, else a float.
    """
    config = SanityConfig() if config is None else config
    has_self = g_mm is not None and g_ff is not None
    xs = [m, f, g_mf, g_fm] + ([g_mm, g_ff] if has_self else [])
    tape, nodes, graph = _prep(*xs)
    m, f, g_mf, g_fm = nodes[:4]
    for name, g in (("g_mf", g_mf), ("g_fm", g_fm)):
        if g.value.shape[1:] != m.value.shape or m.value.shape != f.value.shape:
            raise ShapeError(f"total_loss: {name} grid does not match the images")

    warped_m = warp_node(m, g_mf)
    warped_f = warp_node(f, g_fm)
    if config.similarity == "ncc":
        sim = -(ncc(f, warped_m, config.ncc_window) + ncc(m, warped_f, config.ncc_window))
    else:
        sim = ssd(f, warped_m) + ssd(m, warped_f)
    reg = grad_reg(g_mf) + grad_reg(g_fm)

    if has_self:
        self_term = self_sanity_loss(nodes[4], nodes[5])
    else:
        self_term = tape.const(0.0)

    cg = config.coordinate_gradient
    gt_fm = back_project_node(g_mf, g_fm, cg)
    gt_mf = back_project_node(g_fm, g_mf, cg)
    mask_mf = cross_sanity_mask(g_mf, gt_fm, config.alpha, config.beta)
    mask_fm = cross_sanity_mask(g_fm, gt_mf, config.alpha, config.beta)
    cross = (cross_sanity_loss(g_mf, gt_fm, mask_mf, config.alpha, config.beta)
             + cross_sanity_loss(g_fm, gt_mf, mask_fm, config.alpha, config.beta)) * 0.5

    if config.sanity_reduction == "mean":
        n_vox = float(np.prod(m.value.shape))
        self_term = self_term / n_vox
        cross = cross / n_vox
    total = sim + config.lambda_r * reg + config.lambda_s * self_term + config.lambda_c * cross
    return LossTerms(total=total if graph else float(total.value),
                     sim=float(sim.value), reg=float(reg.value),
                     self_=float(self_term.value), cross=float(cross.value),
                     masks=(mask_mf, mask_fm))
