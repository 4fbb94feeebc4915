"""Ablation study over the sanity terms on the synthetic benchmark.

Every variant starts from one shared baseline model trained without sanity
terms, then is finetuned with its own loss weights for the same number of
epochs. The baseline itself is finetuned too, so all variants see the same
number of optimisation steps.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .bounds import estimate_alpha_beta
from .grid import warp_labels
from .losses import SanityConfig
from .metrics import dice
from .registration import TinyNet, TrainLog, infer, train_model

log = logging.getLogger(__name__)

VARIANTS = {
    "E": {"lambda_s": 0.0, "lambda_c": 0.0},
    "ES": {"lambda_c": 0.0},
    "ESC": {},
}


@dataclass
class VariantResult:
    name: str
    config: SanityConfig
    model: TinyNet
    log: TrainLog
    dice: float
    sse: float
    cse: float

    @property
    def violators(self):
        return self.log.column("violators")


def mean_dice(model, pairs):
    return float(np.mean([dice(warp_labels(p.moving_labels, infer(model, p.moving, p.fixed)),
                               p.fixed_labels) for p in pairs]))


def train_baseline(train, config=None, epochs=15, learning_rate=3e-3, seed=0):
    config = SanityConfig() if config is None else config
    base = config.replace(lambda_s=0.0, lambda_c=0.0)
    model, _ = train_model(train, base, epochs, learning_rate, seed)
    return model


def calibrated_beta(model, pairs):
    """``beta`` from the peak displacement the model predicts on ``pairs``."""
    fields = [infer(model, p.moving, p.fixed) for p in pairs]
    fields += [infer(model, p.fixed, p.moving) for p in pairs]
    return estimate_alpha_beta(fields, "absolute")[1]


def run_variants(train, test, variants=None, config=None, base_epochs=15,
                 finetune_epochs=8, base_lr=3e-3, finetune_lr=1e-3, seed=0,
                 baseline=None):
    """Train the baseline (unless given), set ``beta`` from it, finetune each variant.

    ``variants`` maps a name to loss-weight overrides of ``config``. Returns
    ``(results, beta)`` with one :class:`VariantResult` per variant,
    evaluated on ``test``.
    """
    variants = VARIANTS if variants is None else variants
    config = SanityConfig() if config is None else config
    if baseline is None:
        baseline = train_baseline(train, config, base_epochs, base_lr, seed)
    beta = calibrated_beta(baseline, train)
    config = config.replace(beta=beta)
    log.info("calibrated beta %.6f", beta)
    results = {}
    for name, overrides in variants.items():
        cfg = config.replace(**overrides)
        model = TinyNet(width=baseline.width)
        model.load(baseline.state())
        model, tlog = train_model(train, cfg, finetune_epochs, finetune_lr, seed,
                                  model=model, monitor=test)
        last = tlog.epochs[-1]
        results[name] = VariantResult(name, cfg, model, tlog, mean_dice(model, test),
                                      last["sse"], last["cse"])
        log.info("%s dice %.4f sse %.3g cse %.3g", name, results[name].dice,
                 last["sse"], last["cse"])
    return results, beta
