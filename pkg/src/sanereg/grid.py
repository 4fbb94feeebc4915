"""Regular-grid geometry: interpolation, warping, back-projection, Jacobians.

Conventions used throughout the package:

* an image is an ``ndarray`` whose shape is the grid shape,
* a displacement field has shape ``(n, *grid)`` with components in voxel units,
* coordinates follow array index order (axis 0 first).
"""

import itertools

import numpy as np


class ShapeError(ValueError):
    """Raised when arrays that must share a grid do not."""


def check_grid(shape, dims=(2, 3)):
    """Validate a grid shape and return it as a tuple of ints."""
    shape = tuple(int(s) for s in shape)
    if dims is not None and len(shape) not in dims:
        raise ShapeError(f"grid must have {dims} axes, got {len(shape)}")
    if any(s < 2 for s in shape):
        raise ShapeError(f"every grid extent must be >= 2, got {shape}")
    return shape


def check_field(field, shape=None):
    field = np.asarray(field, dtype=float)
    if field.ndim < 2 or field.shape[0] != field.ndim - 1:
        raise ShapeError(
            f"field must have shape (n, *grid) with n = grid ndim, got {field.shape}")
    if shape is not None and field.shape[1:] != tuple(shape):
        raise ShapeError(f"field grid {field.shape[1:]} != {tuple(shape)}")
    return field


def identity_grid(shape):
    """Coordinates of every grid point, shape ``(n, *shape)``."""
    return np.stack(np.meshgrid(*[np.arange(s, dtype=float) for s in shape],
                                indexing="ij"))


def interp_stencil(points, shape):
    """Lower corner indices, fractional offsets and in-range masks.

    Points are clamped to ``[0, s - 1]`` on every axis before the lower
    corner is taken, so the stencil is defined for any input. ``inside``
    is False where clamping was active; the coordinate derivative is zero
    there.
    """
    lo, frac, inside = [], [], []
    for d, s in enumerate(shape):
        x = points[d]
        xc = np.clip(x, 0.0, s - 1.0)
        i0 = np.minimum(np.floor(xc).astype(np.intp), s - 2)
        lo.append(i0)
        frac.append(xc - i0)
        inside.append((x >= 0.0) & (x <= s - 1.0))
    return lo, frac, inside


def _corners(n):
    return itertools.product((0, 1), repeat=n)


def corner_weights(frac, bits):
    w = 1.0
    for t, b in zip(frac, bits):
        w = w * (t if b else 1.0 - t)
    return w


def sample_linear(volume, points):
    """Multilinear interpolation of ``volume`` at (possibly off-grid) ``points``.

    ``points`` has shape ``(n, ...)`` (or ``(n,)`` for a single point) where
    ``n`` is the grid dimensionality. ``volume`` is either a scalar image of
    ``n`` axes or a vector volume ``(C, *grid)``. Out-of-range coordinates
    are clamped to the border.
    """
    volume = np.asarray(volume, dtype=float)
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if volume.ndim == n:
        vector = False
    elif volume.ndim == n + 1:
        vector = True
    else:
        raise ShapeError(f"cannot sample a {volume.ndim}-d volume at {n}-d points")
    shape = volume.shape[1:] if vector else volume.shape
    lo, frac, _ = interp_stencil(points, shape)
    out = 0.0
    for bits in _corners(n):
        idx = tuple(i + b for i, b in zip(lo, bits))
        vals = volume[(slice(None),) + idx] if vector else volume[idx]
        out = out + corner_weights(frac, bits) * vals
    return out


def warp_image(image, field):
    """Resample ``image`` at ``p + field(p)`` for every grid point ``p``."""
    image = np.asarray(image, dtype=float)
    field = check_field(field)
    if field.shape[1:] != image.shape:
        raise ShapeError(f"image {image.shape} and field {field.shape[1:]} differ")
    return sample_linear(image, identity_grid(image.shape) + field)


def warp_labels(labels, field):
    """Nearest-neighbour warp of an integer label volume."""
    labels = np.asarray(labels)
    field = check_field(field)
    if field.shape[1:] != labels.shape:
        raise ShapeError(f"labels {labels.shape} and field {field.shape[1:]} differ")
    pts = identity_grid(labels.shape) + field
    idx = tuple(np.clip(np.floor(pts[d] + 0.5).astype(np.intp), 0, s - 1)
                for d, s in enumerate(labels.shape))
    return labels[idx]


def back_project(g_ab, g_ba):
    """Evaluate ``g_ba`` at the forward-displaced points ``p + g_ab(p)``."""
    g_ab = check_field(g_ab)
    g_ba = check_field(g_ba)
    if g_ab.shape != g_ba.shape:
        raise ShapeError(f"field shapes differ: {g_ab.shape} vs {g_ba.shape}")
    return sample_linear(g_ba, identity_grid(g_ab.shape[1:]) + g_ab)


def jacobian_matrices(field):
    """Per-voxel Jacobian of ``p -> p + field(p)``, shape ``(*grid, n, n)``."""
    field = check_field(field)
    n = field.shape[0]
    jac = np.empty(field.shape[1:] + (n, n))
    for i in range(n):
        grads = np.gradient(field[i], axis=tuple(range(n)), edge_order=1)
        if n == 1:
            grads = [grads]
        for j in range(n):
            jac[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    return jac


def jacobian_determinants(field):
    """Jacobian determinant at every voxel.

    Central differences in the interior, one-sided at the border.
    """
    jac = jacobian_matrices(field)
    n = jac.shape[-1]
    if n == 2:
        return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return np.linalg.det(jac)
