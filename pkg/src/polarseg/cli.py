"""``polarseg`` command line."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import evalkit, imgcore, nifti, pgm, phantom, pipeline, preproc, segmenter
from .config import ConfigError, RunConfig, load_config, write_manifest
from .scan import ScanRecord

LABEL_SUFFIX = ".label.nii"


def label_path_for(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.name[:-len(".nii")] + LABEL_SUFFIX) if p.name.endswith(".nii") else p.with_name(
        p.name + LABEL_SUFFIX)


def scan_id_for(path) -> str:
    name = Path(path).name
    return name[:-len(".nii")] if name.endswith(".nii") else name


def load_scan(image_path, label_path=None) -> tuple[ScanRecord, nifti.NiftiHeader]:
    data, hdr = nifti.read_volume(image_path)
    truth = None
    if label_path is not None:
        truth, _ = nifti.read_label_volume(label_path)
        if truth.shape != data.shape:
            raise nifti.DimMismatch(f"{label_path}: label shape {truth.shape} != image shape {data.shape}")
    return ScanRecord(scan_id_for(image_path), data, truth, hdr.spacing), hdr


def dataset_files(data_dir) -> list[tuple[Path, Path]]:
    data_dir = Path(data_dir)
    images = sorted(p for p in data_dir.glob("*.nii") if not p.name.endswith(LABEL_SUFFIX))
    pairs = []
    for img in images:
        lbl = label_path_for(img)
        if not lbl.exists():
            raise FileNotFoundError(f"{img}: missing label volume {lbl.name}")
        pairs.append((img, lbl))
    if not pairs:
        raise FileNotFoundError(f"{data_dir}: no *.nii volumes found")
    return pairs


def truth_lookup(scans, prep: preproc.PreprocessConfig) -> dict:
    """Ground truth in the preprocessed frame, keyed by (scan_id, slice)."""
    out = {}
    for scan in scans:
        if scan.truth is None:
            continue
        for i, t in enumerate(scan.truth):
            out[(scan.scan_id, i)] = imgcore.resize(t, prep.target_h, prep.target_w, "nearest")
    return out


def backend_pair(args, cfg: RunConfig, truth: dict | None, fold: int | None = None):
    def build(spec, space):
        if fold is not None:
            spec = spec.replace("{fold}", str(fold))
        return segmenter.make_backend(spec, space, truth, **cfg.classical())
    return build(args.backend_cart, "cartesian"), build(args.backend_polar, "polar")


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    Path(path).write_text(buf.getvalue())


def _write_pairs(path, pairs: dict):
    Path(path).write_text("".join(f"{k}={repr(v) if isinstance(v, float) else v}\n" for k, v in pairs.items()))


# --- subcommands -----------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> int:
    outputs = []
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.phantom_scans)
        targets = [(out_dir / f"phantom_{i:03d}.nii", int(s)) for i, s in enumerate(seeds)]
        manifest = out_dir / "manifest.txt"
    else:
        targets = [(Path(args.out), cfg.seed)]
        manifest = Path(str(args.out) + ".manifest.txt")
    for path, seed in targets:
        scan = phantom.generate_phantom(cfg.phantom(seed), scan_id_for(path))
        nifti.write_volume(scan.slices.astype(np.float32), path, scan.spacing)
        _, hdr = nifti.read_volume(path)
        lbl = label_path_for(path)
        nifti.write_mask_volume(scan.truth, hdr, lbl)
        outputs += [path, lbl]
    write_manifest(manifest, "phantom", cfg, outputs=outputs)
    return 0


def _mean_for(cfg: RunConfig, scans, default_source: str) -> float:
    source = default_source if cfg.mean_source == "auto" else cfg.mean_source
    if source == "fixed":
        return cfg.global_mean
    if source in ("input", "validation", "train"):
        return preproc.scan_global_mean(scans, cfg.preprocess())
    raise ConfigError(f"mean_source {source!r} is not valid for this command")


def cmd_preprocess(args, cfg: RunConfig) -> int:
    scan, _ = load_scan(args.input)
    mean = _mean_for(cfg, [scan], "input")
    out = preproc.preprocess_scan(scan, cfg.preprocess(mean))
    nifti.write_volume(out.slices.astype(np.float32), args.out, scan.spacing)
    write_manifest(str(args.out) + ".manifest.txt", "preprocess", cfg, [args.input], [args.out],
                   {"global_mean_used": mean})
    return 0


def _load_inputs(args):
    if getattr(args, "data", None):
        pairs = dataset_files(args.data)
        return [load_scan(i, l) for i, l in pairs], [p for pair in pairs for p in pair]
    lbl = args.labels if args.labels else None
    return [load_scan(args.input, lbl)], [args.input] + ([lbl] if lbl else [])


def cmd_build_polar_dataset(args, cfg: RunConfig) -> int:
    loaded, inputs = _load_inputs(args)
    scans = [s for s, _ in loaded]
    mean = _mean_for(cfg, scans, "input")
    prep = cfg.preprocess(mean)
    pre = [preproc.preprocess_scan(s, prep) for s in scans]
    samples = preproc.build_polar_dataset(pre, cfg.augment(), cfg.polar_bins, cfg.polar_bins,
                                          cfg.connectivity, jitter=not args.no_jitter)
    manifest = preproc.export_polar_dataset(samples, args.out)
    write_manifest(Path(args.out) / "run_manifest.txt", "build-polar-dataset", cfg, inputs, [manifest],
                   {"global_mean_used": mean, "samples": len(samples)})
    return 0


def _save_debug(debug_dir: Path, results):
    debug_dir.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(results):
        pgm.write_pgm(debug_dir / f"{i:04d}_rough.pgm", r.rough_mask.astype(np.int64) * 255)
        for j, (_, prob) in enumerate(r.per_component_predictions, start=1):
            pgm.write_pgm(debug_dir / f"{i:04d}_pass{j}.pgm", np.round(prob * 255).astype(np.int64))
        pgm.write_pgm(debug_dir / f"{i:04d}_confidence.pgm", np.round(r.confidence_map * 255).astype(np.int64))
        pgm.write_pgm(debug_dir / f"{i:04d}_final.pgm", r.final_mask.astype(np.int64) * 255)


def cmd_segment(args, cfg: RunConfig) -> int:
    scan, hdr = load_scan(args.input, args.labels)
    mean = _mean_for(cfg, [scan], "input")
    prep = cfg.preprocess(mean)
    truth = truth_lookup([scan], prep) if scan.truth is not None else None
    cart, polar = backend_pair(args, cfg, truth)
    pre = preproc.preprocess_scan(scan, prep)
    results = pipeline.segment_scan(pre, cart, polar, cfg.fusion(), cfg.workers)
    h, w = scan.slice_shape
    masks = np.stack([imgcore.resize(r.final_mask, h, w, "nearest") for r in results])
    nifti.write_mask_volume(masks, hdr, args.out)
    if args.save_debug:
        _save_debug(Path(args.save_debug), results)
    inputs = [args.input] + ([args.labels] if args.labels else [])
    write_manifest(str(args.out) + ".manifest.txt", "segment", cfg, inputs, [args.out],
                   {"global_mean_used": mean, "backend_cart": args.backend_cart,
                    "backend_polar": args.backend_polar})
    return 0


def _run_cv(args, cfg: RunConfig):
    loaded, inputs = _load_inputs(args)
    scans = [s for s, _ in loaded]
    prep = cfg.preprocess(cfg.global_mean)
    truth = truth_lookup(scans, prep)
    plan = evalkit.make_fold_plan([s.scan_id for s in scans], min(cfg.folds, len(scans)), cfg.seed)
    source = "train" if cfg.mean_source == "auto" else cfg.mean_source
    report = evalkit.cross_validate(scans, plan, lambda f: backend_pair(args, cfg, truth, f),
                                    cfg.fusion(), prep, source, cfg.workers)
    return report, plan, inputs, source


def cmd_evaluate(args, cfg: RunConfig) -> int:
    report, plan, inputs, source = _run_cv(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", evalkit.REPORT_COLUMNS, report.table_rows())
    _write_pairs(out / "summary.txt", report.summary())
    box_rows = []
    for series, stats in report.box_plot().items():
        row = {"series": series, **stats}
        row["outliers"] = ";".join(repr(v) for v in stats["outliers"])
        box_rows.append(row)
    _write_csv(out / "boxplot.csv", ["series", "min", "q1", "median", "q3", "max",
                                     "whisker_low", "whisker_high", "outliers"], box_rows)
    outputs = [out / "report.csv", out / "summary.txt", out / "boxplot.csv"]
    write_manifest(out / "manifest.txt", "evaluate", cfg, inputs, outputs,
                   {"mean_source_used": source, "backend_cart": args.backend_cart,
                    "backend_polar": args.backend_polar,
                    "fold_plan": ",".join(f"{k}:{v}" for k, v in sorted(plan.assignments.items()))})
    print(f"mean_dice={report.summary()['mean_dice']!r}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    report, plan, inputs, source = _run_cv(args, cfg)
    maps, truths = [], []
    for row in report.rows:
        for res, t in zip(row.slices, row.truth):
            maps.append(res.confidence_map)
            truths.append(t)
    best, curve = evalkit.sweep_hysteresis(maps, truths, cfg.grid(), cfg.hyst_low, cfg.connectivity)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", ["hyst_high", "dice"], [{"hyst_high": h, "dice": d} for h, d in curve])
    _write_pairs(out / "sweep_summary.txt", {"best_hyst_high": best, "best_dice": dict(curve)[best]})
    write_manifest(out / "manifest.txt", "sweep", cfg, inputs, [out / "sweep.csv", out / "sweep_summary.txt"],
                   {"mean_source_used": source, "backend_cart": args.backend_cart,
                    "backend_polar": args.backend_polar})
    print(f"best_hyst_high={best!r}")
    return 0


# --- parser ----------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single configuration key")
    p.add_argument("--workers", type=int, help="parallel slice workers")


def _backends(p):
    p.add_argument("--backend-cart", required=True, help="oracle | classical | model:<path>")
    p.add_argument("--backend-polar", required=True, help="oracle | classical | model:<path>")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write synthetic phantom volumes with labels")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--out", help="image volume path; the label goes to <stem>.label.nii")
    g.add_argument("--out-dir", help="directory for phantom_scans volumes")
    p.add_argument("--count", type=int, help="number of scans for --out-dir")
    p.add_argument("--slices", type=int)
    p.add_argument("--noise-sd", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="window, normalise and resize a volume")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--global-mean", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-polar-dataset", help="export one polar sample per labelled component")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--data", help="directory of <id>.nii / <id>.label.nii pairs")
    g.add_argument("--input")
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--no-jitter", action="store_true")
    p.set_defaults(func=cmd_build_polar_dataset)

    p = sub.add_parser("segment", help="run the cascade on one volume")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--labels", help="label volume (needed by the oracle backend)")
    _backends(p)
    p.add_argument("--out", required=True)
    p.add_argument("--hyst-high", type=float)
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.add_argument("--save-debug", help="directory for per-slice PGM dumps")
    p.set_defaults(func=cmd_segment)

    for name, func, help_ in (("evaluate", cmd_evaluate, "k-fold evaluation report"),
                              ("sweep", cmd_sweep, "hysteresis threshold sweep")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--data", required=True, help="directory of <id>.nii / <id>.label.nii pairs")
        _backends(p)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--folds", type=int)
        if name == "sweep":
            p.add_argument("--grid", help="comma-separated high thresholds")
        p.set_defaults(func=func)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    flag_keys = {"seed": "seed", "workers": "workers", "hyst_high": "hyst_high",
                 "connectivity": "connectivity", "folds": "folds", "grid": "sweep_grid",
                 "count": "phantom_scans", "slices": "phantom_slices", "noise_sd": "phantom_noise_sd"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    if getattr(args, "global_mean", None) is not None:
        out["mean_source"] = "fixed"
        out["global_mean"] = args.global_mean
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ConfigError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"polarseg: error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except Exception as exc:
        print(f"polarseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
