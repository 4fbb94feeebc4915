"""Synthetic benchmark: blob images, labels, landmarks and smooth ground-truth fields."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import check_grid, identity_grid, jacobian_determinants, sample_linear
from .grid import warp_image, warp_labels


class DegenerateRequest(ValueError):
    """Raised for generator requests that cannot produce a useful sample."""


@dataclass
class SyntheticPair:
    moving: np.ndarray
    fixed: np.ndarray
    moving_labels: np.ndarray
    fixed_labels: np.ndarray
    true_field: np.ndarray
    moving_landmarks: np.ndarray
    fixed_landmarks: np.ndarray
    seed: int

    @property
    def shape(self):
        return self.moving.shape


N_BLOBS = 10


def _blob_centers(rng, shape, count):
    lo = np.array([0.15 * (s - 1) for s in shape])
    hi = np.array([0.85 * (s - 1) for s in shape])
    min_sep = 0.16 * min(shape)
    while True:
        centers = []
        for _ in range(2000):
            c = lo + rng.random(len(shape)) * (hi - lo)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                centers.append(c)
                if len(centers) == count:
                    return np.array(centers)
        min_sep *= 0.9


def gen_base(shape, seed):
    """Blob image in [0, 1], a label map with 4-8 connected regions and 10 landmarks.

    Returns ``(image, labels, landmarks)``; landmarks are the blob centres
    as an ``(10, n)`` array of voxel coordinates.
    """
    shape = check_grid(shape)
    rng = np.random.default_rng(seed)
    centers = _blob_centers(rng, shape, N_BLOBS)
    sigmas = (0.06 + 0.05 * rng.random(N_BLOBS)) * min(shape)
    amps = 0.5 + 0.5 * rng.random(N_BLOBS)
    n_labels = int(rng.integers(4, 9))

    pts = identity_grid(shape)
    responses = np.empty((N_BLOBS,) + shape)
    for k in range(N_BLOBS):
        d2 = sum((pts[d] - centers[k, d]) ** 2 for d in range(len(shape)))
        responses[k] = np.exp(-0.5 * d2 / sigmas[k] ** 2)
    image = np.tensordot(amps, responses, axes=1)
    image = (image - image.min()) / (image.max() - image.min())

    core = responses[:n_labels] > 0.5
    owner = np.argmax(np.where(core, responses[:n_labels], -1.0), axis=0)
    labels = np.where(core.any(axis=0), owner + 1, 0).astype(np.uint16)
    for k in range(n_labels):
        comps, count = ndimage.label(labels == k + 1)
        if count > 1:
            ci = tuple(np.clip(np.rint(centers[k]).astype(int), 0, np.array(shape) - 1))
            keep = comps[ci] if comps[ci] else np.argmax(np.bincount(comps.ravel())[1:]) + 1
            labels[(comps > 0) & (comps != keep)] = 0
    return image, labels, centers


def fold_fraction(field):
    return float(np.mean(jacobian_determinants(field) < 0))


def gen_deformation(shape, magnitude, smoothness, seed, max_tries=100):
    """Gaussian-smoothed white noise rescaled to a given maximum magnitude.

    Samples with any folded voxel are rejected and redrawn.
    """
    shape = check_grid(shape)
    if not magnitude > 0:
        raise DegenerateRequest(f"magnitude must be positive, got {magnitude}")
    if smoothness < 1:
        raise DegenerateRequest(f"smoothness (sigma) must be >= 1, got {smoothness}")
    rng = np.random.default_rng(seed)
    n = len(shape)
    for _ in range(max_tries):
        noise = rng.standard_normal((n,) + shape)
        field = np.stack([ndimage.gaussian_filter(c, smoothness, mode="reflect")
                          for c in noise])
        peak = np.sqrt((field ** 2).sum(axis=0)).max()
        field *= magnitude / peak
        if fold_fraction(field) == 0.0:
            return field
    raise DegenerateRequest(
        f"no fold-free field after {max_tries} draws; try a smaller magnitude "
        f"or a larger smoothness")


def invert_points(field, targets, iters=200, tol=1e-13):
    """Solve ``x + field(x) = target`` for each target by fixed-point iteration."""
    targets = np.asarray(targets, dtype=float)
    x = targets.copy()
    for _ in range(iters):
        u = sample_linear(field, x.T).T
        nxt = targets - u
        if np.abs(nxt - x).max() < tol:
            return nxt
        x = nxt
    return x


def make_pair(shape, magnitude=2.0, smoothness=8.0, seed=0):
    """Moving image, its warp by a known field, labels and transported landmarks.

    ``fixed = warp_image(moving, true_field)``; the fixed landmark ``x``
    satisfies ``x + true_field(x) = moving landmark``, so the true field
    maps every fixed landmark exactly onto its moving partner.
    """
    moving, moving_labels, moving_lms = gen_base(shape, seed)
    field = gen_deformation(shape, magnitude, smoothness,
                            np.random.SeedSequence([seed, 1]))
    fixed = warp_image(moving, field)
    fixed_labels = warp_labels(moving_labels, field)
    fixed_lms = invert_points(field, moving_lms)
    upper = np.array(moving.shape) - 1
    if np.any(fixed_lms < 0) or np.any(fixed_lms > upper):
        raise DegenerateRequest("a transported landmark left the grid")
    return SyntheticPair(moving, fixed, moving_labels, fixed_labels, field,
                         moving_lms, fixed_lms, int(seed))


def make_dataset(count, shape=(64, 64), magnitude=2.0, smoothness=8.0, seed=0):
    """``count`` pairs with per-pair seeds ``seed + i``."""
    return [make_pair(shape, magnitude, smoothness, seed + i) for i in range(count)]
