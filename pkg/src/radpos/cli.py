"""Command-line entry point: ``radpos <subcommand> ...``.

phantom -> train -> infer -> fuse / sweep -> report, plus ``selftest``.
Every subcommand that writes to ``--out`` also writes ``run_manifest.json``
with the resolved config, its hash, the seed and input checksums.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .classifier import TrainConfig, load_model, save_model
from .cohort import DEFAULT_CUTOFF, SignificanceRule, load_cohort
from .errors import RadposError
from .fusion import DEFAULT_SPLITS, write_confusion_csv
from .metrics import curves_from_rows, read_report, report, sweep
from .phantom import PhantomConfig, load_truth, simulate_cohort, write_cohort
from .pipeline import (
    DEFAULT_THRESHOLDS,
    evaluate_levels,
    fit_model,
    infer,
    radiologist_curve,
    zone_inputs,
)
from .volume import PROB_CHANNELS, load_bundle, save_bundle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("radpos")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _read_toml(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise RadposError(f"{path}: {exc}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, subcommand: str, argv, config: dict, seed, inputs) -> Path:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    doc = {
        "radpos_version": __version__,
        "subcommand": subcommand,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args, argv):
    data = _read_toml(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    elif "seed" not in data:
        raise RadposError("phantom needs a seed (--seed or 'seed' in --config)")
    if args.n is not None:
        data["n_patients"] = args.n
    config = PhantomConfig.from_dict(data)
    cohort = simulate_cohort(config)
    manifest = write_cohort(cohort, args.out)
    write_run_manifest(args.out, "phantom", argv, config.to_dict(), config.seed, [args.config] if args.config else [])
    print(manifest)


def _rule_and_cutoff(args, data, scale):
    cutoff = args.cutoff if args.cutoff is not None else data.get("cutoff", DEFAULT_CUTOFF[scale])
    grade_min = args.grade_min if args.grade_min is not None else data.get("grade_min", 2)
    return SignificanceRule(int(grade_min)), int(cutoff)


def _bundles(cohort, records):
    return {r.patient_id: load_bundle(cohort.bundle_path(r)) for r in records}


def cmd_train(args, argv):
    data = _read_toml(args.config)
    cohort = load_cohort(args.cohort)
    rule, cutoff = _rule_and_cutoff(args, data, cohort.scale)
    layout = args.layout or data.get("layout", "t2")
    seed = args.seed if args.seed is not None else data.get("seed")
    if seed is None:
        raise RadposError("train needs a seed (--seed or 'seed' in --config)")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    tc = TrainConfig(**{k: v for k, v in data.items() if k in fields})
    tc.seed = int(seed)
    records = cohort.split(args.split)
    model = fit_model(records, _bundles(cohort, records), layout, rule, cutoff, tc)
    out = Path(args.out)
    save_model(model, out / "model.bin")
    config = {"layout": layout, "cutoff": cutoff, "grade_min": rule.min_grade_group, "split": args.split,
              **dataclasses.asdict(tc), "final_loss": model.loss_history[-1], "epochs_run": len(model.loss_history) - 1}
    write_run_manifest(out, "train", argv, config, tc.seed, [args.cohort] + ([args.config] if args.config else []))
    print(out / "model.bin")


def cmd_infer(args, argv):
    cohort = load_cohort(args.cohort)
    model = load_model(args.model)
    cutoff = args.cutoff if args.cutoff is not None else DEFAULT_CUTOFF[cohort.scale]
    records = cohort.split(args.split)
    out = Path(args.out)
    maps = infer(model, records, _bundles(cohort, records), cutoff)
    for pid, bundle in maps.items():
        save_bundle(bundle.select(PROB_CHANNELS), out / "probs" / pid)
    config = {"layout": model.layout, "cutoff": cutoff, "split": args.split}
    write_run_manifest(out, "infer", argv, config, None, [args.cohort, args.model])
    print(out / "probs")


def _evaluation_inputs(args):
    data = _read_toml(args.config)
    cohort = load_cohort(args.cohort)
    rule, cutoff = _rule_and_cutoff(args, data, cohort.scale)
    thresholds = args.thresholds if args.thresholds is not None else data.get("thresholds", list(DEFAULT_THRESHOLDS))
    records = cohort.split(args.split)
    probs_dir = Path(args.probs)
    prob_maps = {r.patient_id: load_bundle(probs_dir / r.patient_id)
                 for r in records if (probs_dir / r.patient_id / "meta.json").is_file()}
    lacking = [r.patient_id for r in records if r.positive_rois(cutoff) and r.patient_id not in prob_maps]
    if lacking:
        raise RadposError(f"no probability map for patients: {', '.join(lacking)}")
    zone_maps = zone_truth = None
    truth_path = Path(args.cohort).parent / "truth.json"
    if truth_path.is_file():
        bundles = _bundles(cohort, records)
        zone_maps, zone_truth = zone_inputs(records, bundles, load_truth(truth_path.parent), rule, DEFAULT_SPLITS)
    else:
        log.info("no truth.json next to %s; skipping zone level", args.cohort)
    config = {"cutoff": cutoff, "grade_min": rule.min_grade_group, "thresholds": list(thresholds),
              "split": args.split, "zone_splits": list(DEFAULT_SPLITS), "scale": cohort.scale}
    return cohort, records, prob_maps, rule, cutoff, thresholds, zone_maps, zone_truth, config


def cmd_fuse(args, argv):
    cohort, records, prob_maps, rule, cutoff, thresholds, zmaps, ztruth, config = _evaluation_inputs(args)
    results = evaluate_levels(records, prob_maps, rule, cutoff, thresholds, zmaps, ztruth)
    rows = []
    for res in results:
        rows += [(res.rad, res.threshold), (res.ml, res.threshold), (res.combined, res.threshold)]
    out = Path(args.out)
    write_confusion_csv(rows, out / "confusion.csv")
    write_run_manifest(out, "fuse", argv, config, None, [args.cohort])
    print(out / "confusion.csv")


def cmd_sweep(args, argv):
    cohort, records, prob_maps, rule, cutoff, thresholds, zmaps, ztruth, config = _evaluation_inputs(args)
    results = evaluate_levels(records, prob_maps, rule, cutoff, thresholds, zmaps, ztruth)
    curves = [radiologist_curve(records, rule, cohort.scale)]
    for level in ("ROI", "Zone", "Patient"):
        for attr in ("ml", "combined"):
            by_t = {r.threshold: getattr(r, attr) for r in results if r.level == level}
            if by_t:
                curves.append(sweep(by_t.__getitem__, list(by_t)))
    out = Path(args.out)
    report(curves, out / "sweep.csv")
    write_run_manifest(out, "sweep", argv, config, None, [args.cohort])
    print(out / "sweep.csv")


def cmd_report(args, argv):
    data = _read_toml(args.config)
    targets = args.controlled_sen if args.controlled_sen is not None else data.get("controlled_sen", [0.8])
    rows, _ = read_report(args.sweep)
    curves = curves_from_rows(rows)
    out = Path(args.out)
    report(curves, out / "report.csv", targets)
    write_run_manifest(out, "report", argv, {"controlled_sen": list(targets)}, None, [args.sweep])
    print(out / "report.csv")


def cmd_selftest(args, argv):
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise RadposError("selftest failed")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radpos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"radpos {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="TOML config file; flags override its keys")
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic cohort")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of patients")
    p.add_argument("--out", required=True, type=Path)

    def cohort_args(p, need_seed=False):
        p.add_argument("--cohort", required=True, help="path to cohort.json")
        p.add_argument("--cutoff", type=int, help="radiologist-positive score cutoff")
        p.add_argument("--out", required=True, type=Path)
        if need_seed:
            p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train the voxel classifier on the train split")
    cohort_args(p, need_seed=True)
    p.add_argument("--layout", choices=("t2", "bpmr"))
    p.add_argument("--grade-min", type=int, help="minimum significant grade group")
    p.add_argument("--split", default="train")

    p = add("infer", cmd_infer, "write probability maps")
    cohort_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")

    for name, func, help_ in (("fuse", cmd_fuse, "confusion counts per level and threshold"),
                              ("sweep", cmd_sweep, "operating-point curves")):
        p = add(name, func, help_)
        cohort_args(p)
        p.add_argument("--probs", required=True, help="directory of probability-map bundles")
        p.add_argument("--grade-min", type=int)
        p.add_argument("--thresholds", type=_floats)
        p.add_argument("--split", default="test")

    p = add("report", cmd_report, "controlled-sensitivity report from a sweep")
    p.add_argument("--sweep", required=True)
    p.add_argument("--controlled-sen", type=_floats)
    p.add_argument("--out", required=True, type=Path)

    add("selftest", cmd_selftest, "run the built-in fusion and interpolation checks")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv)
    except (RadposError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"radpos: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
