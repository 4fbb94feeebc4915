"""Overlap, landmark, regularity and sanity metrics for registered pairs."""

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .grid import ShapeError, back_project, check_field, jacobian_determinants
from .grid import sample_linear, warp_labels
from .losses import cross_sanity_loss, cross_sanity_mask, self_sanity_loss


class UndefinedMetric(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


@dataclass
class MetricsReport:
    """All evaluation metrics for one pair.

    ``aj`` is stored unscaled. ``rob`` counts a landmark as a success when
    its registered error is strictly below its initial error (an initial
    error of zero counts as success). ``cse`` is the violator-restricted
    cross-sanity loss averaged over both directions and divided by the
    voxel count; ``hd95`` is the larger of the two directed 95th
    percentiles.
    """

    dice: float = float("nan")
    sdice: float = float("nan")
    hd95: float = float("nan")
    fv: float = float("nan")
    aj: float = float("nan")
    sdlogj: float = float("nan")
    tre: float = float("nan")
    stre: float = float("nan")
    rob: float = float("nan")
    sse: float = float("nan")
    cse: float = float("nan")
    cice: float = float("nan")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


def dice(warped, target):
    """Mean Dice over foreground labels present in either volume."""
    warped = np.asarray(warped)
    target = np.asarray(target)
    if warped.shape != target.shape:
        raise ShapeError(f"label volumes differ: {warped.shape} vs {target.shape}")
    labels = np.union1d(np.unique(warped), np.unique(target))
    labels = labels[labels > 0]
    if labels.size == 0:
        raise UndefinedMetric("no foreground label in either volume")
    scores = []
    for lab in labels:
        a = warped == lab
        b = target == lab
        scores.append(2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum()))
    return float(np.mean(scores))


def sdice(model, image, labels):
    """Dice between ``labels`` and ``labels`` warped by the self-registration field."""
    from .registration import infer

    return dice(warp_labels(labels, infer(model, image, image)), labels)


def folding_metrics(field, eps=1e-9):
    """(percentage of folded voxels, summed |negative determinants|, SD of log det)."""
    det = jacobian_determinants(field)
    neg = det < 0
    fv = 100.0 * neg.sum() / det.size
    aj = float(np.abs(det[neg]).sum())
    sdlogj = float(np.std(np.log(np.maximum(det, eps))))
    return float(fv), aj, sdlogj


def boundary_points(mask):
    """Foreground voxels with a face-adjacent background (or outside) neighbour."""
    mask = np.asarray(mask, bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure, border_value=0)
    return np.argwhere(mask & ~interior).astype(float)


def _hd95_binary(a, b, spacing):
    pa = boundary_points(a) * spacing
    pb = boundary_points(b) * spacing
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))


def hd95(warped, target, spacing=None):
    """Symmetric 95th-percentile boundary distance, averaged over shared labels."""
    warped = np.asarray(warped)
    target = np.asarray(target)
    if warped.shape != target.shape:
        raise ShapeError(f"label volumes differ: {warped.shape} vs {target.shape}")
    spacing = np.ones(warped.ndim) if spacing is None else np.asarray(spacing, float)
    labels = np.intersect1d(np.unique(warped), np.unique(target))
    labels = labels[labels > 0]
    if labels.size == 0:
        raise UndefinedMetric("hd95 needs a foreground label present in both volumes")
    return float(np.mean([_hd95_binary(warped == lab, target == lab, spacing)
                          for lab in labels]))


def _check_landmarks(points, shape):
    points = np.asarray(points, dtype=float)
    upper = np.asarray(shape) - 1
    if points.ndim != 2 or points.shape[1] != len(shape):
        raise ShapeError(f"landmarks must be (K, {len(shape)}), got {points.shape}")
    if np.any(points < 0) or np.any(points > upper):
        raise ValueError("landmark outside the grid")
    return points


def landmark_metrics(moving_points, fixed_points, field_mf, field_self=None,
                     spacing=None, initial_error=None):
    """(tre, stre, rob) for paired landmarks.

    A fixed landmark ``x`` is mapped to ``x + field_mf(x)`` and compared
    with its moving partner. ``stre`` maps each fixed landmark through the
    identical-pair field and compares it with itself.
    """
    field_mf = check_field(field_mf)
    shape = field_mf.shape[1:]
    mov = _check_landmarks(moving_points, shape)
    fix = _check_landmarks(fixed_points, shape)
    if mov.shape != fix.shape:
        raise ShapeError("moving and fixed landmark lists differ in length")
    spacing = np.ones(len(shape)) if spacing is None else np.asarray(spacing, float)
    mapped = fix + sample_linear(field_mf, fix.T).T
    err = np.linalg.norm((mapped - mov) * spacing, axis=1)
    if initial_error is None:
        initial_error = np.linalg.norm((fix - mov) * spacing, axis=1)
    initial_error = np.asarray(initial_error, float)
    success = (err < initial_error) | (initial_error == 0)
    stre = float("nan")
    if field_self is not None:
        self_mapped = fix + sample_linear(check_field(field_self, shape), fix.T).T
        stre = float(np.linalg.norm((self_mapped - fix) * spacing, axis=1).mean())
    return float(err.mean()), stre, float(success.mean())


def sanity_metrics(g_mf, g_fm, g_mm, g_ff, alpha, beta, return_violators=False):
    """(sse, cse): self-sanity loss and bidirectional cross-sanity loss per voxel."""
    g_mf, g_fm = check_field(g_mf), check_field(g_fm)
    n_vox = int(np.prod(g_mf.shape[1:]))
    sse = self_sanity_loss(g_mm, g_ff) / n_vox
    gt_fm = back_project(g_mf, g_fm)
    gt_mf = back_project(g_fm, g_mf)
    mask_mf = cross_sanity_mask(g_mf, gt_fm, alpha, beta)
    mask_fm = cross_sanity_mask(g_fm, gt_mf, alpha, beta)
    cross = 0.5 * (cross_sanity_loss(g_mf, gt_fm, mask_mf, alpha, beta)
                   + cross_sanity_loss(g_fm, gt_mf, mask_fm, alpha, beta))
    cse = cross / n_vox
    if return_violators:
        return sse, cse, 0.5 * (mask_mf.mean() + mask_fm.mean())
    return sse, cse


def cice(g_mf, g_fm):
    """Strict inverse-consistency error averaged over voxels and both directions."""
    g_mf, g_fm = check_field(g_mf), check_field(g_fm)
    if g_mf.shape != g_fm.shape:
        raise ShapeError(f"field shapes differ: {g_mf.shape} vs {g_fm.shape}")
    e1 = ((g_mf + back_project(g_mf, g_fm)) ** 2).sum(axis=0)
    e2 = ((g_fm + back_project(g_fm, g_mf)) ** 2).sum(axis=0)
    return float(0.5 * (e1.mean() + e2.mean()))


def evaluate_pair(pair, g_mf, g_fm, g_mm, g_ff, alpha, beta, spacing=None):
    """Full :class:`MetricsReport` for one synthetic pair and predicted fields."""
    warped = warp_labels(pair.moving_labels, g_mf)
    sse, cse = sanity_metrics(g_mf, g_fm, g_mm, g_ff, alpha, beta)
    fv, aj, sdlogj = folding_metrics(g_mf)
    tre, stre, rob = landmark_metrics(pair.moving_landmarks, pair.fixed_landmarks,
                                      g_mf, g_ff, spacing)
    return MetricsReport(
        dice=dice(warped, pair.fixed_labels),
        sdice=dice(warp_labels(pair.moving_labels, g_mm), pair.moving_labels),
        hd95=hd95(warped, pair.fixed_labels, spacing),
        fv=fv, aj=aj, sdlogj=sdlogj, tre=tre, stre=stre, rob=rob,
        sse=sse, cse=cse, cice=cice(g_mf, g_fm))


def aggregate(reports):
    """Column-wise (mean, population std) over a list of reports."""
    cols = MetricsReport.columns()
    data = np.array([[getattr(r, c) for c in cols] for r in reports], dtype=float)
    return (MetricsReport(**dict(zip(cols, data.mean(axis=0)))),
            MetricsReport(**dict(zip(cols, data.std(axis=0)))))
