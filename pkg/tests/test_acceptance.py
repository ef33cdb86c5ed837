"""Acceptance gate: one PASS/FAIL line per criterion (also echoed in the terminal summary)."""
import csv
import time
from fractions import Fraction

import numpy as np
import pytest

from aabcos import cli, pipeline
from aabcos.config import desk_config
from aabcos.data import save_manifest
from aabcos.explain import contribution_maps_all
from aabcos.layers import BcosConvConfig, ModelConfig, bcos_conv_forward, build_model, maxout, save_checkpoint
from aabcos.metrics import BoundingBox, EpgConfig, epg_evaluate, epg_general, epg_precision, epg_recall
from aabcos.pooling import PoolKind, blurpool, flcpool
from aabcos.training import binary_cross_entropy, cross_entropy, write_log

from conftest import ACCEPTANCE_LINES, check_grads


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_completeness():
    start = time.perf_counter()
    worst, pairs = 0.0, 0
    for variant in PoolKind:
        for seed in range(50):
            model = build_model(ModelConfig(variant=variant, seed=seed))
            img = np.random.default_rng(1000 + seed).random((32, 32))
            for m in contribution_maps_all(model, img):
                worst = max(worst, abs(m.values.sum(dtype=np.float64) - m.logit) / abs(m.logit))
            pairs += 1
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 30,
           f"{pairs} (model, input) pairs, worst |sum(map) - logit|/|logit| = {worst:.2e} (< 1e-4), "
           f"{elapsed:.1f} s (< 30 s)")


# 2 ---------------------------------------------------------------------------------

def _grad_cases():
    cases = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        B = (1.0, 1.5, 2.0, 2.5)[seed % 4]
        cfg = BcosConvConfig(2, 4, 3, 3, stride=1 + seed % 2, padding=1, B=B)
        cases.append(("bcos_conv", lambda x, w, cfg=cfg: bcos_conv_forward(x, cfg, w),
                      (rng.random((1, 2, 5, 5)) + 0.05, rng.standard_normal(cfg.weight_shape))))
    for seed in range(16):
        rng = np.random.default_rng(100 + seed)
        cases.append(("maxout", lambda x: maxout(x, 2), (rng.standard_normal((2, 4, 3, 3)),)))
        cases.append(("blurpool", lambda x: blurpool(x), (rng.standard_normal((1, 2, 5 + seed % 4, 6)),)))
        cases.append(("flcpool", lambda x: flcpool(x), (rng.standard_normal((1, 2, 6 + seed % 3, 8)),)))
        t = rng.integers(0, 3, 4)
        cases.append(("cross_entropy", lambda z, t=t: cross_entropy(z, t), (rng.standard_normal((4, 3)) * 2,)))
        y = (rng.random((4, 3)) < 0.5).astype(float)
        cases.append(("binary_cross_entropy", lambda z, y=y: binary_cross_entropy(z, y),
                      (rng.standard_normal((4, 3)) * 2,)))
    return cases


def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    cases = _grad_cases()
    worst = {}
    for i, (name, op, arrays) in enumerate(cases):
        worst[name] = max(worst.get(name, 0.0), check_grads(op, *arrays, seed=i))
    elapsed = time.perf_counter() - start
    ok = len(cases) == 100 and max(worst.values()) < 1e-3 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, ok, f"{len(cases)} finite-difference cases at float64, worst rel. err: {detail}; {elapsed:.1f} s")


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_alias_removal():
    n = 16
    yy, xx = np.mgrid[:n, :n]
    worst = 0.0
    count = 0
    for fy in range(n // 2 + 1):
        for fx in range(n // 2 + 1):
            if max(fy, fx) < n // 4:  # inside the retained band
                continue
            for phase in (0.0, 0.7):
                x = np.cos(2 * np.pi * (fy * yy + fx * xx) / n + phase)
                if not np.any(np.abs(x) > 1e-9):
                    continue
                out = flcpool(_t(x)).data
                worst = max(worst, np.sum(out ** 2) / np.sum(x ** 2))
                count += 1
    board = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    blurred = blurpool(_t(board)).data
    report(3, worst < 1e-6 and np.all(blurred == 0.0),
           f"{count} super-Nyquist sinusoids keep at most {worst:.1e} of their energy (< 1e-6); "
           f"BlurPool checkerboard max |out| = {np.abs(blurred).max()}")


def _t(a):
    from aabcos.tensor import Tensor
    return Tensor(np.asarray(a, dtype=np.float64)[None, None], dtype=np.float64)


# 4 ---------------------------------------------------------------------------------

def _inside(i, j, boxes):
    return any(b.y <= i < b.y + b.h and b.x <= j < b.x + b.w for b in boxes)


def _brute(m, boxes, t):
    peak = max([v for v in m.flat if v > 0], default=0.0)
    cut = t * peak
    g_in = g_all = p_in = p_all = neg_in = Fraction(0)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            v = m[i, j]
            inside = _inside(i, j, boxes)
            g_all += Fraction(v)
            if inside:
                g_in += Fraction(v)
            if v > 0 and v > cut:
                p_all += Fraction(v)
                if inside:
                    p_in += Fraction(v)
            elif v < 0 and inside:
                neg_in += Fraction(-v)
    ratio = lambda a, b: None if b == 0 else float(a / b)
    return ratio(g_in, g_all), ratio(p_in, p_all), ratio(p_in, p_in + neg_in)


def test_criterion_4_epg_oracle():
    rng = np.random.default_rng(2024)
    worst, undefined = 0.0, 0
    for _ in range(1000):
        m = rng.standard_normal((16, 16)) * rng.uniform(0.1, 10)
        if rng.random() < 0.2:
            m[rng.random(m.shape) < 0.6] = 0.0
        boxes = []
        for _ in range(rng.integers(1, 3)):
            w, h = (int(v) for v in rng.integers(1, 17, size=2))
            boxes.append(BoundingBox(int(rng.integers(0, 17 - w)), int(rng.integers(0, 17 - h)), w, h))
        t = float(rng.uniform(0, 1))
        got = (epg_general(m, boxes), epg_precision(m, boxes, t), epg_recall(m, boxes, t))
        for a, b in zip(got, _brute(m, boxes, t)):
            if a is None or b is None:
                assert a is None and b is None
                undefined += 1
                continue
            worst = max(worst, abs(a - b))
    report(4, worst <= 1e-12, f"1000 random (map, box, t) triples, max |op - brute force| = {worst:.1e} "
           f"(<= 1e-12), {undefined} undefined values agree")


# 5 ---------------------------------------------------------------------------------

class _S:
    def __init__(self, id, boxes):
        self.id, self.labels, self.boxes = id, np.array([1]), boxes


def test_criterion_5_chance_baseline():
    rng = np.random.default_rng(5)
    samples, maps, fractions = [], {}, []
    for i in range(200):
        w, h = (int(v) for v in rng.integers(2, 20, size=2))
        box = BoundingBox(int(rng.integers(0, 33 - w)), int(rng.integers(0, 33 - h)), w, h)
        samples.append(_S(f"u{i}", [box]))
        maps[(f"u{i}", 0)] = np.full((32, 32), rng.uniform(0.1, 3))
        fractions.append(box.area / 1024)
    rep = epg_evaluate({s.id: [True] for s in samples}, maps, samples, EpgConfig(thresholds=(0.0,)))
    mean_random = np.mean([r.epg_precision for r in rep.records])
    # coverage configured to 1165 of 10000 pixels (33*33 + 4*19)
    cover = [BoundingBox(0, 0, 33, 33), BoundingBox(60, 60, 4, 19)]
    dense_cover = epg_precision(np.ones((100, 100)), cover, 0.0)
    ok = abs(mean_random - np.mean(fractions)) <= 0.01 and abs(dense_cover - 0.1165) <= 0.01
    report(5, ok, f"uniform maps: mean epg_precision {mean_random:.4f} vs box fraction {np.mean(fractions):.4f}; "
           f"11.65% coverage gives {dense_cover:.4f}")


# desk experiment (criteria 6, 7, 8, 10) ----------------------------------------------

@pytest.fixture(scope="session")
def desk():
    run = desk_config()
    t0 = time.perf_counter()
    manifest = pipeline.synthetic_manifest(run)
    gen_time = time.perf_counter() - t0
    out = {"run": run, "manifest": manifest, "variants": {}, "times": {}}
    for variant in pipeline.VARIANTS:
        t = time.perf_counter()
        out["variants"][variant] = pipeline.run_variant(manifest, run, variant)
        out["times"][variant] = time.perf_counter() - t + gen_time
    return out


def _precision_t0(res):
    for row in res["report"].aggregate():
        if row["metric"] == "epg_precision" and row["threshold"] == 0.0 and row["subset"] == "all":
            return row["mean"]


@pytest.mark.slow
def test_criterion_6_end_to_end(desk):
    flc = desk["variants"][PoolKind.FLC]
    acc = flc["metrics"]["accuracy"]
    prec = _precision_t0(flc)
    frac = flc["box_fraction"]
    elapsed = desk["times"][PoolKind.FLC]
    others = ", ".join(f"{v.value} acc {desk['variants'][v]['metrics']['accuracy']:.3f} "
                       f"epg_p {_precision_t0(desk['variants'][v]):.3f}"
                       for v in (PoolKind.STRIDED, PoolKind.BLURPOOL))
    ok = acc >= 0.90 and prec - frac >= 0.15 and elapsed < 300
    report(6, ok, f"FLC val accuracy {acc:.3f} (>= 0.90), epg_precision(t=0) {prec:.3f} vs box fraction "
           f"{frac:.3f} (margin {prec - frac:.3f} >= 0.15), {elapsed:.0f} s (< 300 s); [{others}]")


@pytest.mark.slow
def test_criterion_7_grid_artifacts(desk):
    hf = {v: desk["variants"][v]["highfreq"] for v in pipeline.VARIANTS}
    s, b, f = hf[PoolKind.STRIDED], hf[PoolKind.BLURPOOL], hf[PoolKind.FLC]
    share = float(np.mean((s > f) & (s > b)))
    report(7, share >= 0.90, f"Strided map highfreq_energy exceeds both FLC and BlurPool on {share:.1%} of "
           f"{len(s)} validation images (>= 90%); means strided {s.mean():.3f}, blurpool {b.mean():.3f}, "
           f"flc {f.mean():.3f}")


@pytest.mark.slow
def test_criterion_8_threshold_sweep(desk, tmp_path):
    flc = desk["variants"][PoolKind.FLC]
    data = tmp_path / "data"
    save_manifest(desk["manifest"], data)
    save_checkpoint(flc["result"].model, tmp_path / "model.bcos")
    assert cli.main(["epg", "--checkpoint", str(tmp_path / "model.bcos"), "--data", str(data), "--fold",
                     str(desk["run"].data.fold), "--out", str(tmp_path / "epg")]) == 0
    with open(tmp_path / "epg" / "precision_curve.csv", newline="") as fh:
        curve = [r for r in csv.DictReader(fh) if r["subset"] == "all"]
    with open(tmp_path / "epg" / "epg_samples.csv", newline="") as fh:
        samples = list(csv.DictReader(fh))
    ok = len(curve) == 10
    for row in curve:
        t = row["threshold"]
        positive = sum(1 for r in samples if r["threshold"] == t and r["epg_precision"] != "")
        defined = row["mean"] != ""
        ok &= defined == (positive > 0) and int(row["n"]) == positive
        ok &= (not defined) or 0.0 <= float(row["mean"]) <= 1.0
    values = " ".join(f"{float(r['mean']):.3f}" for r in curve if r["mean"])
    report(8, ok, f"precision-vs-threshold curve over {len(curve)} thresholds, all in [0,1] and defined "
           f"wherever positive mass survives: {values}")


def test_criterion_9_not_reproducible():
    line = ("[SKIP] criterion 9: absolute table values need the clinical datasets and pretrained "
            "backbones; criteria 1-8 are the substitute suite")
    print(line)
    ACCEPTANCE_LINES.append(line)
    pytest.skip("absolute numbers are not desk-reproducible by design")


def _write_metrics(res, directory):
    directory.mkdir(parents=True)
    write_log(res["result"].log, directory / "train_log.csv")
    res["report"].write_csv(directory / "epg_samples.csv")
    res["report"].write_aggregate_csv(directory / "epg_aggregate.csv")
    row = pipeline.comparison_row(res)
    with open(directory / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(pipeline.COMPARE_FIELDS)
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in pipeline.COMPARE_FIELDS])
    return directory


@pytest.mark.slow
def test_criterion_10_determinism(desk, tmp_path):
    first = _write_metrics(desk["variants"][PoolKind.FLC], tmp_path / "first")
    manifest = pipeline.synthetic_manifest(desk["run"])
    again = pipeline.run_variant(manifest, desk["run"], PoolKind.FLC)
    second = _write_metrics(again, tmp_path / "second")
    names = sorted(p.name for p in first.iterdir())
    same = [n for n in names if (first / n).read_bytes() == (second / n).read_bytes()]
    report(10, same == names, f"repeat of the FLC desk run: {len(same)}/{len(names)} metrics CSVs "
           f"byte-identical ({', '.join(names)})")
