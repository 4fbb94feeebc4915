"""End-to-end acceptance suite.

Each test carries a ``criterion`` marker; the run ends with one PASS/FAIL
line per criterion. The training study is shared through session fixtures.
"""

import itertools
import time

import numpy as np
import pytest

from sanereg import io
from sanereg.benchmark import run_variants, train_baseline
from sanereg.bounds import estimate_alpha_beta, lambda_c_guidance, verify_cs_bound
from sanereg.cli import main, verify_bounds
from sanereg.gradcheck import TERMS, gradient_suite
from sanereg.grid import identity_grid, jacobian_determinants, warp_labels
from sanereg.losses import SanityConfig
from sanereg.metrics import cice, dice, folding_metrics, hd95, landmark_metrics, sanity_metrics
from sanereg.registration import register_pair_direct
from sanereg.synth import make_dataset, make_pair

BOUND_SETTINGS = [(0.1, 12.0), (0.1, 10.0), (0.01, 0.03)]
TRAINING_LIMIT = 180.0


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


# ---------------------------------------------------------------- gradients

@pytest.mark.criterion(1, "gradients match central differences (100 seeds, < 1 min)")
def test_gradient_suite():
    results, seconds = timed(gradient_suite, 100, (8, 8), 1e-4)
    assert {r.term for r in results} == set(TERMS)
    assert len(results) == 100 * len(TERMS)
    worst = max(results, key=lambda r: r.error)
    assert all(r.passed for r in results), f"worst {worst}"
    assert seconds < 60.0, f"took {seconds:.1f}s"


# ------------------------------------------------------------------- bounds

@pytest.fixture(scope="session")
def bound_rows():
    rows, seconds = {}, {}
    for alpha, beta in BOUND_SETTINGS:
        rows[alpha, beta], seconds[alpha, beta] = timed(verify_bounds, 10000, alpha, beta,
                                                        (8, 8), 0)
    return rows, seconds


@pytest.mark.criterion(2, "relaxation bound holds on 10,000 checked pairs per setting")
@pytest.mark.parametrize("alpha,beta", BOUND_SETTINGS)
def test_relaxation_bound(bound_rows, alpha, beta):
    rows, seconds = bound_rows
    relax = [r for r in rows[alpha, beta] if r["bound"] == "relaxation"]
    assert len(relax) == 10000
    assert all(r["rhs"] == pytest.approx(beta * (2 - alpha) * 64 / (1 - alpha)) for r in relax)
    assert sum(not r["satisfied"] for r in relax) == 0
    assert seconds[alpha, beta] < 120.0


@pytest.mark.criterion(3, "CS bound holds on the same samples; consistent pairs add 0")
@pytest.mark.parametrize("alpha,beta", BOUND_SETTINGS)
def test_cs_bound(bound_rows, alpha, beta):
    rows, seconds = bound_rows
    cs = [r for r in rows[alpha, beta] if r["bound"] == "cs"]
    assert len(cs) == 10000
    assert all(r["rhs"] == pytest.approx(2 * (1 - alpha) * beta * 64) for r in cs)
    assert sum(not r["satisfied"] for r in cs) == 0
    assert seconds[alpha, beta] < 120.0
    rng = np.random.default_rng(5)
    shift = rng.normal(size=2)
    g = np.broadcast_to(shift[:, None, None], (2, 8, 8)).copy()
    rep = verify_cs_bound(g, -g, alpha, beta)
    assert rep.lhs == 0.0 and rep.satisfied


# ------------------------------------------------------- training benchmark

@pytest.fixture(scope="session")
def benchmark():
    train = make_dataset(40, (64, 64), magnitude=3.0, smoothness=8.0, seed=100)
    test = make_dataset(8, (64, 64), magnitude=3.0, smoothness=8.0, seed=10000)
    baseline, base_time = timed(train_baseline, train, SanityConfig(), 15, 3e-3, 0)
    results, times, beta = {}, {"baseline": base_time}, None
    variants = {"E": {"lambda_s": 0.0, "lambda_c": 0.0}, "ES": {"lambda_c": 0.0},
                "ESC": {}, "ESC-0.01": {"lambda_c": 0.01}}
    for name, overrides in variants.items():
        (res, beta), times[name] = timed(run_variants, train, test, {name: overrides},
                                         baseline=baseline)
        results.update(res)
    return results, times, beta


@pytest.mark.criterion(4, "lambda_c guidance: factor 9, 0.01 loose, 0.001 accepted")
def test_lambda_c_guidance_values():
    g = lambda_c_guidance(0.1, 10)
    assert g.factor == 9
    assert lambda_c_guidance(0.1, 10, lambda_c=0.01).loose
    assert not lambda_c_guidance(0.1, 10, lambda_c=0.001).loose


@pytest.mark.criterion(4, "lambda_c = 0.01 costs >= 0.1 synthetic Dice versus 0.001")
def test_large_lambda_c_degrades_dice(benchmark):
    results, _, _ = benchmark
    drop = results["ESC"].dice - results["ESC-0.01"].dice
    assert drop >= 0.1, (f"Dice(0.001)={results['ESC'].dice:.4f} "
                         f"Dice(0.01)={results['ESC-0.01'].dice:.4f}")


@pytest.mark.criterion(5, "sanity terms cut SSE tenfold and CSE without losing Dice")
def test_variant_ordering(benchmark):
    results, times, _ = benchmark
    e, es, esc = results["E"], results["ES"], results["ESC"]
    assert es.sse < e.sse / 10
    assert esc.sse < e.sse / 10
    assert esc.cse < e.cse
    assert esc.dice >= e.dice - 0.02
    assert all(t <= TRAINING_LIMIT for t in times.values()), times


@pytest.mark.criterion(6, "violator fraction falls from epoch 1 to the final epoch")
def test_mask_evolution(benchmark):
    results, _, _ = benchmark
    violators = results["ESC"].violators
    assert violators[-1] < violators[0]


# ------------------------------------------------------------------ folding

def band_fold(shape, a, b):
    """``u_0 = -2 (clip(x, a, b) - a)``: determinant -1 strictly inside (a, b), 0 on its ends."""
    u = np.zeros((2,) + shape)
    x = np.arange(shape[0], dtype=float)[:, None]
    u[0] = -2.0 * (np.clip(x, a, b) - a)
    return u


@pytest.mark.criterion(7, "folding metrics: identity, affine closed form, constructed fold")
def test_folding_metrics():
    assert folding_metrics(np.zeros((2, 12, 10))) == (0.0, 0.0, 0.0)
    assert folding_metrics(np.zeros((3, 5, 6, 4))) == (0.0, 0.0, 0.0)
    rng = np.random.default_rng(7)
    for _ in range(20):
        for shape in ((9, 11), (5, 6, 7)):
            n = len(shape)
            A = rng.normal(scale=0.5, size=(n, n))
            t = rng.normal(size=n)
            u = np.einsum("ij,j...->i...", A, identity_grid(shape)) + t.reshape((n,) + (1,) * n)
            det = jacobian_determinants(u)
            np.testing.assert_allclose(det, np.linalg.det(np.eye(n) + A), rtol=0, atol=1e-10)
    for shape, a, b in (((16, 12), 3, 9), ((20, 5), 1, 18), ((8, 8), 2, 4)):
        fv, aj, _ = folding_metrics(band_fold(shape, a, b))
        count = (b - a - 1) * shape[1]
        assert fv == pytest.approx(100.0 * count / (shape[0] * shape[1]), rel=1e-12)
        assert aj == pytest.approx(float(count), rel=1e-12)


# ------------------------------------------------------------ metric oracles

def oracle_dice(a, b):
    labels = sorted(({int(v) for v in a.ravel()} | {int(v) for v in b.ravel()}) - {0})
    scores = []
    for lab in labels:
        inter = size_a = size_b = 0
        for idx in itertools.product(*map(range, a.shape)):
            size_a += a[idx] == lab
            size_b += b[idx] == lab
            inter += a[idx] == lab and b[idx] == lab
        scores.append(2.0 * inter / (size_a + size_b))
    return sum(scores) / len(scores)


def oracle_boundary(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    pts.append((i, j))
                    break
    return pts


def oracle_hd95(a, b):
    scores = []
    for lab in sorted(set(np.unique(a)) & set(np.unique(b)) - {0}):
        pa, pb = oracle_boundary(a == lab), oracle_boundary(b == lab)
        d_ab = [min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in pb) for p in pa]
        d_ba = [min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in pa) for p in pb]
        scores.append(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
    return float(np.mean(scores))


def oracle_sample(field, y, x):
    """Clamped bilinear interpolation of a (2, H, W) field at one point."""
    _, h, w = field.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * field[:, y0, x0] + (1 - fy) * fx * field[:, y0, x1]
            + fy * (1 - fx) * field[:, y1, x0] + fy * fx * field[:, y1, x1])


def oracle_directional(g, h):
    """Per-voxel (|g + g~|^2, |g|^2, |g~|^2) with g~ = h(p + g(p))."""
    out = []
    for i, j in itertools.product(range(g.shape[1]), range(g.shape[2])):
        gv = g[:, i, j]
        gt = oracle_sample(h, i + gv[0], j + gv[1])
        out.append((float(((gv + gt) ** 2).sum()), float((gv ** 2).sum()),
                    float((gt ** 2).sum())))
    return out


def oracle_cse(g_mf, g_fm, alpha, beta):
    total = 0.0
    for g, h in ((g_mf, g_fm), (g_fm, g_mf)):
        for err, mg, mt in oracle_directional(g, h):
            if not err < alpha * (mg + mt) + beta:
                total += err - alpha * (mg + mt) - beta
    return 0.5 * total / g_mf[0].size


def oracle_cice(g_mf, g_fm):
    errs = [e for e, _, _ in oracle_directional(g_mf, g_fm)]
    errs_back = [e for e, _, _ in oracle_directional(g_fm, g_mf)]
    return 0.5 * (sum(errs) / len(errs) + sum(errs_back) / len(errs_back))


def random_labels(rng, shape, n_labels=3):
    labels = np.zeros(shape, np.uint16)
    for lab in range(1, n_labels + 1):
        top, left = rng.integers(0, shape[0] - 3), rng.integers(0, shape[1] - 3)
        hh, ww = rng.integers(2, shape[0] // 2), rng.integers(2, shape[1] // 2)
        labels[top:top + hh, left:left + ww] = lab
    return labels


def dyadic_field(rng, shape, scale=3.0):
    """Field with values on a 1/4 lattice so every interpolation step is exact."""
    return np.round(rng.normal(scale=scale, size=(2,) + shape) * 4) / 4


@pytest.mark.criterion(8, "Dice, HD95, CSE and CICE agree with brute-force oracles")
@pytest.mark.parametrize("seed", range(50))
def test_metric_oracles(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(6, 17)), int(rng.integers(6, 17)))
    a, b = random_labels(rng, shape), random_labels(rng, shape)
    assert dice(a, b) == oracle_dice(a, b)
    if set(np.unique(a)) & set(np.unique(b)) - {0}:
        assert abs(hd95(a, b) - oracle_hd95(a, b)) <= 1e-9
    square = (16, 16)
    g_mf, g_fm = dyadic_field(rng, square), dyadic_field(rng, square)
    assert cice(g_mf, g_fm) == oracle_cice(g_mf, g_fm)
    alpha, beta = 0.1, float(rng.uniform(0.5, 20.0))
    zero = np.zeros_like(g_mf)
    _, cse = sanity_metrics(g_mf, g_fm, zero, zero, alpha, beta)
    assert cse == pytest.approx(oracle_cse(g_mf, g_fm, alpha, beta), rel=1e-12, abs=1e-12)


# ------------------------------------------------------------------ recovery

@pytest.mark.criterion(9, "direct registration recovers a magnitude-2 pair; beta heuristic")
def test_ground_truth_recovery():
    pair = make_pair((64, 64), magnitude=2.0, smoothness=8.0, seed=0)
    res = register_pair_direct(pair.moving, pair.fixed, SanityConfig(), 200, 0.1)
    tre, _, _ = landmark_metrics(pair.moving_landmarks, pair.fixed_landmarks, res.g_mf)
    overlap = dice(warp_labels(pair.moving_labels, res.g_mf), pair.fixed_labels)
    assert tre < 0.5
    assert overlap > 0.9
    samples = [res.g_mf, res.g_fm]
    peak = max(np.sqrt(f[0] ** 2 + f[1] ** 2).max() for f in samples)
    alpha, beta = estimate_alpha_beta(samples)
    assert alpha == 0.1
    assert beta == 0.15 * peak


# --------------------------------------------------------------- determinism

def run_pipeline(root):
    ds, run = root / "data", root / "run"
    assert main(["gen", "--shape", "32x32", "--pairs", "6", "--magnitude", "2",
                 "--smoothness", "6", "--seed", "3", "--out", str(ds)]) == 0
    cfg = root / "config.txt"
    cfg.write_text(f"dataset={ds}\noutput={run}\nepochs=3\nlearning_rate=0.003\nseed=11\n")
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["eval", "--pairs", str(ds), "--checkpoint", str(run / "checkpoint"),
                 "--out", str(root / "eval.csv")]) == 0
    assert main(["verify-bounds", "--trials", "200", "--seed", "4",
                 "--out", str(root / "bounds.csv")]) == 0
    return {name: path.read_bytes() for name, path in (
        ("train_log.csv", run / "train_log.csv"), ("eval.csv", root / "eval.csv"),
        ("bounds.csv", root / "bounds.csv"))}


@pytest.mark.criterion(10, "gen -> train -> eval -> verify-bounds is byte-reproducible")
def test_pipeline_determinism(tmp_path, capsys):
    first = run_pipeline(tmp_path / "first")
    second = run_pipeline(tmp_path / "second")
    assert first == second
    assert all(out.startswith(b"# config_hash=") for out in first.values())


def test_identical_pair_eval_gives_perfect_sdice(benchmark, tmp_path, capsys):
    results, _, _ = benchmark
    esc = results["ESC"]
    ckpt = tmp_path / "esc"
    io.save_checkpoint(ckpt, esc.model.state(), io.RunConfig(beta=esc.config.beta), {})
    ds = tmp_path / "test"
    io.write_dataset(ds, make_dataset(4, (64, 64), magnitude=3.0, smoothness=8.0,
                                      seed=10000), {})
    assert main(["eval", "--pairs", str(ds), "--checkpoint", str(ckpt), "--identical",
                 "--out", str(tmp_path / "self.csv")]) == 0
    _, rows = io.read_csv(tmp_path / "self.csv")
    assert all(float(r["sdice"]) == 1.0 for r in rows if r["pair"] != "std")
