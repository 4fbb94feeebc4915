"""Randomised finite-difference checks of every differentiable loss term."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from .grid import back_project
from .registration import TinyNet

TERMS = ("ncc", "ssd", "grad_reg", "self_sanity", "cross_sanity", "tinynet")

# Coordinates probed per input and seed; a fresh random subset is drawn for
# every seed, so a 100-seed suite covers every coordinate many times over.
COORDS_PER_INPUT = 32
NETWORK_COORDS = 16


@dataclass
class GradcheckResult:
    term: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error < self.tolerance


def _case(term, rng, shape):
    n = len(shape)
    if term == "ncc":
        a, b = rng.random(shape), rng.random(shape)
        return (lambda t, x, y: L.ncc(x, y, window=5)), [a, b], COORDS_PER_INPUT
    if term == "ssd":
        a, b = rng.random(shape), rng.random(shape)
        return (lambda t, x, y: L.ssd(x, y)), [a, b], COORDS_PER_INPUT
    if term == "grad_reg":
        u = rng.normal(size=(n,) + shape)
        return (lambda t, x: L.grad_reg(x)), [u], COORDS_PER_INPUT
    if term == "self_sanity":
        a, b = rng.normal(size=(2, n) + shape)
        return (lambda t, x, y: L.self_sanity_loss(x, y)), [a, b], COORDS_PER_INPUT
    if term == "cross_sanity":
        # The mask is a constant of the loss, so it is frozen at the base point;
        # coordinates stay attached so finite differences see the same function.
        alpha, beta = 0.1, 0.5
        g = rng.normal(size=(n,) + shape) * 0.7
        h = rng.normal(size=(n,) + shape)
        mask = L.cross_sanity_mask(g, back_project(g, h), alpha, beta)

        def fn(t, x, y):
            gt = L.back_project_node(x, y, coordinate_gradient=True)
            return L.cross_sanity_loss(x, gt, mask, alpha, beta)

        return fn, [g, h], COORDS_PER_INPUT
    if term == "tinynet":
        net = TinyNet(n, seed=int(rng.integers(2 ** 31)))
        x = rng.random((1, 2) + shape)
        weights = rng.normal(size=(1, n) + shape)

        def fn(t, *params):
            return (net.forward(t, t.const(x), list(params)) * weights).sum()

        return fn, [p.value for p in net.params], NETWORK_COORDS
    raise ValueError(f"unknown term {term!r}")


def check_term(term, seed, shape=(8, 8), tolerance=1e-4, epsilon=1e-6):
    """Relative gradient error of one term on one seeded random instance."""
    rng = np.random.default_rng(seed)
    fn, inputs, max_coords = _case(term, rng, tuple(shape))
    err = ad.grad_check(fn, inputs, epsilon=epsilon, max_coords=max_coords, rng=rng)
    return GradcheckResult(term, int(seed), err, tolerance)


def gradient_suite(seeds=100, shape=(8, 8), tolerance=1e-4, terms=TERMS):
    """Run :func:`check_term` for every term over ``range(seeds)``."""
    return [check_term(term, seed, shape, tolerance)
            for term in terms for seed in range(seeds)]
