"""Registration backends: per-pair field optimisation and a tiny convolutional regressor."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import ShapeError
from .losses import SanityConfig, total_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the objective becomes non-finite."""

    def __init__(self, message, step, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class Adam:
    """Adam with bias correction.

    Gradient entries below ``grad_floor`` in magnitude are treated as zero,
    so round-off in an analytically vanishing gradient is not rescaled into
    a full-size step.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, grad_floor=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_floor = grad_floor
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.grad_floor > 0:
                g = np.where(np.abs(g) < self.grad_floor, 0.0, g)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g ** 2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _record(terms):
    return {"total": float(np.asarray(getattr(terms.total, "value", terms.total))),
            "sim": terms.sim, "reg": terms.reg, "self": terms.self_,
            "cross": terms.cross, "violators": terms.violator_fraction}


@dataclass
class PairResult:
    g_mf: np.ndarray
    g_fm: np.ndarray
    g_mm: np.ndarray
    g_ff: np.ndarray
    history: list = field(default_factory=list)
    mask_history: list = field(default_factory=list)


GRAD_FLOOR = 1e-12


def register_pair_direct(m, f, config=None, steps=200, learning_rate=0.1):
    """Optimise both displacement fields of one pair directly.

    Identical-pair fields are zero by construction for this backend. The
    violator masks are recomputed from the current fields at every step.
    Per-voxel gradients below ``GRAD_FLOOR`` are dropped, which keeps an
    already optimal field (for instance zero for identical images) fixed.
    """
    config = SanityConfig() if config is None else config
    m = np.asarray(m, dtype=float)
    f = np.asarray(f, dtype=float)
    if m.shape != f.shape:
        raise ShapeError(f"moving {m.shape} and fixed {f.shape} differ")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = m.ndim
    g_mf = ad.Parameter(np.zeros((n,) + m.shape), "g_mf")
    g_fm = ad.Parameter(np.zeros((n,) + m.shape), "g_fm")
    opt = Adam([g_mf, g_fm], lr=learning_rate, grad_floor=GRAD_FLOOR)
    history, masks = [], []
    for step in range(steps):
        tape = ad.Tape()
        terms = total_loss(tape.const(m), tape.const(f), tape.watch(g_mf),
                           tape.watch(g_fm), config=config)
        if not np.isfinite(terms.total.value):
            raise DivergenceError(f"objective is not finite at step {step}", step)
        opt.zero_grad()
        tape.backward(terms.total)
        opt.step()
        history.append(_record(terms))
        masks.append(terms.violator_fraction)
    zeros = np.zeros_like(g_mf.value)
    return PairResult(g_mf.value.copy(), g_fm.value.copy(), zeros, zeros.copy(),
                      history, masks)


class TinyNet:
    """Three 3x3 convolutions mapping a stacked image pair to a displacement field.

    conv(2 -> width) + ReLU, conv(width -> width) + ReLU, conv(width -> 2),
    scaled by a learnable global gain that starts at 0.1.
    """

    def __init__(self, ndim=2, width=16, seed=0):
        if ndim != 2:
            raise ValueError("TinyNet is implemented for 2-D grids")
        rng = np.random.default_rng(seed)
        self.ndim = ndim
        self.width = width

        def he(cout, cin):
            return rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))

        self.params = [
            ad.Parameter(he(width, 2), "conv1.weight"),
            ad.Parameter(np.zeros(width), "conv1.bias"),
            ad.Parameter(he(width, width), "conv2.weight"),
            ad.Parameter(np.zeros(width), "conv2.bias"),
            ad.Parameter(he(ndim, width), "conv3.weight"),
            ad.Parameter(np.zeros(ndim), "conv3.bias"),
            ad.Parameter(np.array(0.1), "gain"),
        ]

    def state(self):
        return {p.name: p.value.copy() for p in self.params}

    def load(self, state):
        for p in self.params:
            if state[p.name].shape != p.value.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape}")
            p.value = np.array(state[p.name], dtype=float)
            p.zero_grad()

    def forward(self, tape, x, params=None):
        """``x`` is a ``(B, 2, H, W)`` node or array; returns ``(B, ndim, H, W)``."""
        w1, b1, w2, b2, w3, b3, gain = params or [tape.watch(p) for p in self.params]
        h = ad.relu(ad.conv2d(x, w1, b1))
        h = ad.relu(ad.conv2d(h, w2, b2))
        return ad.conv2d(h, w3, b3) * gain


def _stack_pairs(m, f):
    return np.stack([np.stack([m, f]), np.stack([f, m]),
                     np.stack([m, m]), np.stack([f, f])])


def normalize(image):
    image = np.asarray(image, dtype=float)
    lo, hi = image.min(), image.max()
    return (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)


def model_loss(model, tape, m, f, config):
    """Four directional evaluations of one model and the sanity objective."""
    out = model.forward(tape, tape.const(_stack_pairs(m, f)))
    return total_loss(tape.const(m), tape.const(f), out[0], out[1], out[2], out[3],
                      config=config)


def infer(model, a, b):
    """Displacement field mapping ``a`` onto ``b`` (no sanity machinery)."""
    a = normalize(a)
    b = normalize(b)
    if a.shape != b.shape:
        raise ShapeError(f"inputs {a.shape} and {b.shape} differ")
    tape = ad.Tape()
    params = [tape.const(p.value) for p in model.params]
    x = tape.const(np.stack([a, b])[None])
    return model.forward(tape, x, params).value[0].copy()


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def column(self, key):
        return [row[key] for row in self.epochs]


def _sanity_stats(model, pairs, config):
    from .metrics import sanity_metrics

    sse, cse, viol = [], [], []
    for p in pairs:
        m, f = normalize(p.moving), normalize(p.fixed)
        s, c, v = sanity_metrics(infer(model, m, f), infer(model, f, m),
                                 infer(model, m, m), infer(model, f, f),
                                 config.alpha, config.beta, return_violators=True)
        sse.append(s)
        cse.append(c)
        viol.append(v)
    return float(np.mean(sse)), float(np.mean(cse)), float(np.mean(viol))


def train_model(dataset, config=None, epochs=10, learning_rate=1e-3, seed=0,
                width=16, model=None, monitor=None):
    """Train a :class:`TinyNet` on a list of :class:`SyntheticPair`.

    Each step evaluates the model on ``(m, f)``, ``(f, m)``, ``(m, m)`` and
    ``(f, f)`` and takes one Adam step on the total objective. Pairs are
    visited in a seeded shuffled order. Per-epoch rows hold the mean loss
    terms, the mean training-time violator fraction, and SSE/CSE measured
    on ``monitor`` pairs (the training set when omitted).
    """
    config = SanityConfig() if config is None else config
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0].moving.shape
    if any(p.moving.shape != shape for p in dataset):
        raise ShapeError("all pairs must share one grid shape")
    model = TinyNet(len(shape), width=width, seed=seed) if model is None else model
    opt = Adam(model.params, lr=learning_rate)
    rng = np.random.default_rng(seed)
    images = [(normalize(p.moving), normalize(p.fixed)) for p in dataset]
    monitor = dataset if monitor is None else monitor
    trainlog = TrainLog()
    good = model.state()
    step = 0
    for epoch in range(1, epochs + 1):
        rows = []
        for i in rng.permutation(len(images)):
            m, f = images[i]
            tape = ad.Tape()
            terms = model_loss(model, tape, m, f, config)
            if not np.isfinite(terms.total.value):
                model.load(good)
                raise DivergenceError(f"objective is not finite at step {step}",
                                      step, checkpoint=good)
            opt.zero_grad()
            tape.backward(terms.total)
            opt.step()
            rows.append(_record(terms))
            step += 1
        good = model.state()
        sse, cse, viol = _sanity_stats(model, monitor, config)
        row = {"epoch": epoch}
        for key in rows[0]:
            row[key] = float(np.mean([r[key] for r in rows]))
        row.update(sse=sse, cse=cse, violators_eval=viol)
        trainlog.epochs.append(row)
        log.info("epoch %d total %.5f sse %.3g cse %.3g violators %.4f",
                 epoch, row["total"], sse, cse, row["violators"])
    return model, trainlog
