"""Acceptance criteria, one test each.

Each test records a short detail string; ``conftest.py`` prints one
PASS/FAIL line per criterion in the terminal summary. Run with ``-s`` to
also see the lines inline.
"""
import hashlib
import struct
import time
from fractions import Fraction

import numpy as np
from scipy import ndimage

from oracles import flood_fill_components, hysteresis_bfs, tally
from polarseg import nifti
from polarseg.ccomp import hysteresis_threshold, label_components
from polarseg.cli import main
from polarseg.evalkit import (
    ConfusionCounts,
    confusion,
    cross_validate,
    dice_iou_consistent,
    evaluate_scan,
    make_fold_plan,
    mean_sd,
    metrics_from_counts,
)
from polarseg.imgcore import cart_to_polar, default_geometry, polar_to_cart
from polarseg.phantom import PhantomSpec, ellipse_mask, generate_phantom
from polarseg.pipeline import FusionConfig, fuse
from polarseg.preproc import (
    AugmentConfig,
    PreprocessConfig,
    build_polar_dataset,
    export_polar_dataset,
    jitter_origin,
    scan_global_mean,
    window_and_normalize,
)
from polarseg.scan import ScanRecord
from polarseg.segmenter import ClassicalBackend, OracleBackend


def verdict(record_property, ok, detail):
    record_property("detail", detail)
    print(f"{'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def dice(a, b):
    return 2 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b))


def test_criterion_01_fusion_scenario(record_property):
    t0 = time.perf_counter()
    shape = (48, 64)
    true_a = np.zeros(shape, bool)
    true_a[4:14, 4:16] = True
    true_b = np.zeros(shape, bool)
    true_b[30:44, 40:60] = True
    false_obj = np.zeros(shape, bool)
    false_obj[30:40, 6:18] = True
    truth = true_a | true_b
    # three passes: origins on A, on B, and on a rough speck that predicts nothing itself
    preds = [
        (default_geometry((8.5, 9.5), shape, 16, 16), (truth | false_obj).astype(float)),
        (default_geometry((36.5, 49.5), shape, 16, 16), truth.astype(float)),
        (default_geometry((20.0, 30.0), shape, 16, 16), truth.astype(float)),
    ]
    conf = fuse(preds)
    final = hysteresis_threshold(conf, 0.0, 0.4)
    elapsed = time.perf_counter() - t0
    # weights: origin component 2, others 1 -> true objects 2+1+1, false object 1, peak 4
    exact = (all(Fraction(v) == 1 for v in conf[truth])
             and all(Fraction(v) == Fraction(1, 4) for v in conf[false_obj])
             and not conf[~(truth | false_obj)].any())
    ok = exact and np.array_equal(final, truth) and elapsed < 1.0
    verdict(record_property, ok,
            f"true=1.0 false=0.25 exact={exact} final==truth={np.array_equal(final, truth)} {elapsed:.3f}s")


def test_criterion_02_oracle_end_to_end(record_property):
    t0 = time.perf_counter()
    scans = [generate_phantom(PhantomSpec(n_slices=64, seed=1000 + i), f"oracle{i}") for i in range(10)]
    fusion = FusionConfig()
    prep = PreprocessConfig()
    scores = []
    for scan in scans:
        truth = {(scan.scan_id, i): t for i, t in enumerate(scan.truth)}
        row = evaluate_scan(scan, OracleBackend(truth), OracleBackend(truth, "polar"), fusion, prep)
        scores.append(row.metrics.dice)
    elapsed = time.perf_counter() - t0
    ok = min(scores) >= 0.98 and elapsed < 120
    verdict(record_property, ok, f"per-scan dice min={min(scores):.4f} mean={np.mean(scores):.4f} {elapsed:.1f}s")


def test_criterion_03_cascade_beats_rough(record_property):
    lines, ok = [], True
    for seed in (0, 1, 2):
        scans = [generate_phantom(PhantomSpec(n_slices=16, noise_sd=100.0, seed=seed * 100 + i), f"s{i}")
                 for i in range(3)]
        prep = PreprocessConfig(global_mean=scan_global_mean(scans, PreprocessConfig()))
        cart, polar = ClassicalBackend(), ClassicalBackend(input_space="polar")
        rows = [evaluate_scan(s, cart, polar, FusionConfig(), prep) for s in scans]

        def grand(attr, name):
            return mean_sd(getattr(getattr(r, attr), name) for r in rows)[0]

        rd, cd = grand("rough_metrics", "dice"), grand("metrics", "dice")
        rr, cr = grand("rough_metrics", "recall"), grand("metrics", "recall")
        ok &= 0.85 <= rd <= 0.90 and cd > rd and cr > rr
        lines.append(f"seed{seed}: dice {rd:.3f}->{cd:.3f} recall {rr:.3f}->{cr:.3f}")
    verdict(record_property, ok, "; ".join(lines))


def _random_blob(rng, i):
    shape = (256, 256)
    if i % 2 == 0:
        a, b = rng.uniform(6, 60, 2)
        return ellipse_mask(shape, tuple(rng.uniform(70, 186, 2)), (a, b), rng.uniform(0, np.pi))
    while True:
        field = ndimage.gaussian_filter(rng.normal(size=shape), rng.uniform(6, 14))
        lm = label_components(field > np.quantile(field, 0.9))
        big = max(lm.components, key=lambda c: c.area)
        if big.area >= 100:
            return lm.labels == big.label


def test_criterion_04_polar_round_trip(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    scores = []
    for i in range(100):
        mask = _random_blob(rng, i)
        comp = label_components(mask).components
        assert len(comp) == 1 and comp[0].area >= 100
        g = default_geometry(comp[0].centroid, mask.shape)
        back = polar_to_cart(cart_to_polar(mask.astype(float), g), g, *mask.shape) >= 0.5
        scores.append(dice(back, mask))
    elapsed = time.perf_counter() - t0
    ok = min(scores) >= 0.99 and elapsed < 30
    verdict(record_property, ok, f"100 blobs min dice={min(scores):.5f} {elapsed:.1f}s")


def test_criterion_05_oracle_suites(record_property):
    rng = np.random.default_rng(5)
    cc_bad = hy_bad = cf_bad = 0
    for n in range(1000):
        conn = 4 if n % 2 else 8
        mask = rng.random((32, 32)) < rng.uniform(0.2, 0.7)
        got = [{(int(r), int(c)) for r, c in comp.pixels} for comp in label_components(mask, conn).components]
        cc_bad += got != flood_fill_components(mask.tolist(), conn)

        levels = np.array([0.0, 0.1, 0.25, 0.4, 0.6, 1.0])
        prob = levels[rng.integers(0, len(levels), (16, 16))]
        low, high = sorted(rng.choice(levels, 2))
        hy_bad += hysteresis_threshold(prob, low, high, conn).tolist() != hysteresis_bfs(prob.tolist(), low, high,
                                                                                          conn)
        h, w = rng.integers(1, 24, 2)
        pred, truth = rng.random((h, w)) < rng.random(), rng.random((h, w)) < rng.random()
        c = confusion(pred, truth)
        cf_bad += (c.tp, c.fp, c.fn, c.tn) != tally(pred.tolist(), truth.tolist())
    ok = cc_bad == hy_bad == cf_bad == 0
    verdict(record_property, ok, f"mismatches: components={cc_bad} hysteresis={hy_bad} confusion={cf_bad} of 1000 each")


def test_criterion_06_metric_identities(record_property):
    scans = [generate_phantom(PhantomSpec(height=128, width=128, n_slices=4, min_axis=6, max_axis=16,
                                          noise_sd=100.0, seed=60 + i), f"m{i}") for i in range(6)]
    plan = make_fold_plan([s.scan_id for s in scans], 3, seed=6)
    pair = (ClassicalBackend(), ClassicalBackend(input_space="polar"))
    report = cross_validate(scans, plan, lambda f: pair)
    rows_ok = all(dice_iou_consistent(r.final) and dice_iou_consistent(r.rough) for r in report.rows)
    # the emitted floats also satisfy the identity to rounding
    float_ok = all(abs(row["dice"] - 2 * row["iou"] / (1 + row["iou"])) <= 1e-15 for row in report.table_rows())
    m = metrics_from_counts(ConfusionCounts(tp=50, fp=10, fn=10))
    ok = rows_ok and float_ok and abs(m.dice - 0.8333) <= 1e-4
    verdict(record_property, ok, f"{len(report.rows)} rows exact={rows_ok}; example dice={m.dice:.6f} iou={m.iou:.6f}")


def test_criterion_07_preprocessing_constants(record_property):
    out = window_and_normalize(np.array([[200.0, 350.0, 500.0]]), PreprocessConfig())
    const_ok = out.tolist() == [[-0.5, 0.0, 0.5]]
    cfg = AugmentConfig(jitter_prob=0.3, jitter_max_px=3)
    rng = np.random.default_rng(7)
    hits, worst = 0, 0.0
    for _ in range(100_000):
        (r, c), hit = jitter_origin((64.0, 64.0), cfg, rng)
        if hit:
            hits += 1
            worst = max(worst, abs(r - 64.0), abs(c - 64.0))
    frac = hits / 100_000
    ok = const_ok and 0.29 <= frac <= 0.31 and worst <= 3
    verdict(record_property, ok, f"window {out.tolist()[0]}; jitter fraction={frac:.4f} max offset={worst:g}px")


def test_criterion_08_dataset_cardinality(record_property, tmp_path):
    expected = 0
    scans = []
    for i, (k_lo, k_hi) in enumerate([(1, 1), (2, 2), (3, 3), (1, 3)]):
        scan = generate_phantom(PhantomSpec(n_slices=5, min_components=k_lo, max_components=k_hi, seed=80 + i),
                                f"card{i}")
        expected += sum(len(label_components(t)) for t in scan.truth)
        scans.append(scan)
    pre = [ScanRecord(s.scan_id, window_and_normalize(s.slices, PreprocessConfig()), s.truth) for s in scans]
    samples = build_polar_dataset(pre, AugmentConfig(rng_seed=8), 64, 64)
    manifest = export_polar_dataset(samples, tmp_path)
    lines = manifest.read_text().splitlines()
    ok = len(samples) == len(lines) == expected
    verdict(record_property, ok, f"samples={len(samples)} manifest={len(lines)} components={expected}")


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_09_cli_determinism(record_property, tmp_path):
    data = tmp_path / "data"
    small = ["--set", "phantom_height=128", "--set", "phantom_width=128", "--set", "phantom_min_axis=6",
             "--set", "phantom_max_axis=16", "--noise-sd", "80"]
    assert main(["phantom", "--out-dir", str(data), "--count", "3", "--slices", "4", "--seed", "9", *small]) == 0
    image, labels = data / "phantom_000.nii", data / "phantom_000.label.nii"
    digests = {}
    for mode, workers in (("serial", "1"), ("parallel", "4")):
        for run in ("a", "b"):
            out = tmp_path / mode / run
            out.mkdir(parents=True)
            common = ["--backend-cart", "classical", "--backend-polar", "classical", "--seed", "9",
                      "--workers", workers]
            assert main(["segment", "--input", str(image), "--labels", str(labels), "--out",
                         str(out / "seg.nii"), *common]) == 0
            assert main(["evaluate", "--data", str(data), "--out-dir", str(out / "eval"), *common]) == 0
            files = ["seg.nii", "seg.nii.manifest.txt", "eval/report.csv", "eval/summary.txt",
                     "eval/boxplot.csv", "eval/manifest.txt"]
            digests[mode, run] = {f: _sha(out / f) for f in files}
    same_serial = digests["serial", "a"] == digests["serial", "b"]
    same_parallel = digests["parallel", "a"] == digests["parallel", "b"]
    # outputs also agree across modes; only the manifests differ (they record the worker count)
    cross = all(digests["serial", "a"][f] == digests["parallel", "a"][f]
                for f in ("seg.nii", "eval/report.csv", "eval/summary.txt", "eval/boxplot.csv"))
    ok = same_serial and same_parallel and cross
    verdict(record_property, ok, f"serial identical={same_serial} parallel identical={same_parallel} "
                                 f"serial==parallel outputs={cross}")


def _fuzz_case(base: bytes, rng) -> bytes:
    raw = bytearray(base)
    kind = rng.integers(0, 4)
    if kind == 0:  # random bytes anywhere in the header
        for pos in rng.integers(0, 352, rng.integers(1, 5)):
            raw[pos] = rng.integers(0, 256)
    elif kind == 1:  # structured fields with plausible or extreme values
        field = rng.choice(["dim", "datatype", "bitpix", "vox_offset", "scl_slope", "scl_inter", "sizeof_hdr"])
        off = {"dim": 40 + 2 * rng.integers(0, 8), "datatype": 70, "bitpix": 72, "vox_offset": 108,
               "scl_slope": 112, "scl_inter": 116, "sizeof_hdr": 0}[field]
        if field in ("vox_offset", "scl_slope", "scl_inter"):
            value = rng.choice([0.0, -1.0, 351.0, 352.5, 1e30, np.inf, np.nan, float(rng.integers(0, 5000))])
            struct.pack_into("<f", raw, off, value)
        elif field == "sizeof_hdr":
            struct.pack_into("<i", raw, off, int(rng.integers(-(2**31), 2**31)))
        else:
            struct.pack_into("<h", raw, off, int(rng.integers(-32768, 32768)))
    elif kind == 2:  # truncation
        raw = raw[:rng.integers(0, len(raw))]
    else:  # byte-order flip of dim[0] and random tail
        raw[40], raw[41] = raw[41], raw[40]
        raw[rng.integers(0, 352)] ^= 1 << rng.integers(0, 8)
    return bytes(raw)


def test_criterion_10_nifti_robustness(record_property, tmp_path):
    rng = np.random.default_rng(10)
    vol = (rng.normal(0, 200, (3, 6, 5))).astype(np.float32)
    nifti.write_volume(vol, tmp_path / "ref.nii")
    _, hdr = nifti.read_volume(tmp_path / "ref.nii")
    round_ok = True
    for i in range(20):
        masks = rng.random((3, 6, 5)) < rng.random()
        nifti.write_mask_volume(masks, hdr, tmp_path / "m.nii")
        back, _ = nifti.read_label_volume(tmp_path / "m.nii")
        round_ok &= np.array_equal(back, masks)
    base = (tmp_path / "m.nii").read_bytes()
    structured = crashes = 0
    first_crash = ""
    for _ in range(100_000):
        raw = _fuzz_case(base, rng)
        try:
            nifti.parse_volume(raw)
            nifti.parse_label_volume(raw)
        except nifti.NiftiError:
            structured += 1
        except Exception as exc:  # anything else is a crash
            crashes += 1
            first_crash = first_crash or repr(exc)
    ok = round_ok and crashes == 0
    verdict(record_property, ok, f"round trip={round_ok}; fuzz 100000 cases: structured errors={structured} "
                                 f"accepted={100_000 - structured - crashes} crashes={crashes} {first_crash}".rstrip())
