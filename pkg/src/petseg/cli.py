"""``petseg`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage / contract / parse errors, 2 I/O errors.
Every subcommand accepts ``--config FILE`` holding ``key=value`` defaults
(keys are the long flag names with dashes replaced by underscores).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, nifti
from .errors import ContractError, PetsegError
from .kvconfig import dataclass_from_kv, format_kv, read_kv

log = logging.getLogger("petseg")

JOBS_ENV = "PETSEG_JOBS"
NIFTI_SUFFIXES = (".nii.gz", ".nii")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show ``(default: X)`` for every option that has a real default."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or action.default is argparse.SUPPRESS or action.default is False:
            return text
        if "%(default)" in text or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)".lstrip()

    def _format_action(self, action):
        if not action.help:
            action.help = self._get_help_string(action)
        return super()._format_action(action)


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _case_id(path: Path) -> str | None:
    for suffix in NIFTI_SUFFIXES:
        if path.name.endswith(suffix):
            return path.name[: -len(suffix)]
    return None


def _fmt(value: float) -> str:
    return f"{value:.6g}"


# --- subcommands -----------------------------------------------------------


def cmd_info(args) -> int:
    payload = Path(args.file).read_bytes()
    volume, header = nifti.read_volume(payload)
    data = volume.data
    print(f"file: {args.file}")
    print(f"shape: {volume.shape}")
    print(f"spacing_mm: {volume.spacing}")
    print(f"origin_mm: {volume.origin}")
    print(f"direction: {volume.direction}")
    print(f"datatype: {int(header['datatype'])} ({int(header['bitpix'])} bit)")
    print(f"endian: {'little' if header.endian == '<' else 'big'}")
    print(f"scl_slope: {float(header['scl_slope'])} scl_inter: {float(header['scl_inter'])}")
    print(f"qform_code: {int(header['qform_code'])} sform_code: {int(header['sform_code'])}")
    print(f"extension_bytes: {len(header.extensions)}")
    print(f"min: {_fmt(float(data.min()))} max: {_fmt(float(data.max()))} mean: {_fmt(float(data.mean()))}")
    return 0


def _suv_params(args):
    from .preprocess import F18_HALF_LIFE_S, SuvParams

    if args.suv_sidecar:
        return SuvParams.from_sidecar(args.suv_sidecar)
    given = [args.dose_bq, args.weight_g, args.delay_s]
    if all(v is None for v in given):
        return None
    if any(v is None for v in given):
        raise ContractError("--dose-bq, --weight-g and --delay-s must be given together")
    return SuvParams(args.dose_bq, args.weight_g, args.delay_s, args.half_life_s or F18_HALF_LIFE_S)


def cmd_preprocess(args) -> int:
    from .preprocess import preprocess_case
    from .volume import Kind

    pet = nifti.load(args.pet)
    ct = nifti.load(args.ct, Kind.CT_HU)
    mask = nifti.load(args.mask, Kind.MASK) if args.mask else None
    suv = _suv_params(args)
    if suv is None:
        log.info("no SUV parameters given; PET values are taken as SUV already")
    result = preprocess_case(
        pet, ct, mask, suv, (args.spacing,) * 3, args.ct_threshold, args.suv_threshold
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nifti.save(result.pet, out / "pet.nii.gz")
    nifti.save(result.ct, out / "ct.nii.gz")
    if result.mask is not None:
        nifti.save(result.mask, out / "mask.nii.gz")
    box = result.body_box
    (out / "body_box.txt").write_text(
        format_kv(
            {
                "start": ",".join(map(str, box.start)),
                "size": ",".join(map(str, box.size)),
                "warning": int(result.box_warning),
            }
        )
    )
    if result.box_warning:
        print("warning: no body voxels found; whole volume kept", file=sys.stderr)
    return 0


def cmd_augment(args) -> int:
    from .augment import AugmentConfig, augment_sample
    from .volume import Kind

    text = Path(args.augment_config).read_text() if args.augment_config else ""
    cfg = dataclass_from_kv(AugmentConfig, text, args.augment_config or "<defaults>")
    if args.patch_size is not None:
        cfg = AugmentConfig(**{**cfg.__dict__, "patch_size": args.patch_size})
    cfg = AugmentConfig(**{**cfg.__dict__, "seed": args.seed})
    pet = nifti.load(args.pet, Kind.PET_SUV)
    ct = nifti.load(args.ct, Kind.CT_HU)
    mask = nifti.load(args.mask, Kind.MASK)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for index in range(args.count):
        a_pet, a_ct, a_mask = augment_sample(pet, ct, mask, cfg, epoch=args.epoch, index=index)
        tag = f"e{args.epoch:03d}_{index:03d}"
        nifti.save(a_pet, out / f"pet_{tag}.nii.gz")
        nifti.save(a_ct, out / f"ct_{tag}.nii.gz")
        nifti.save(a_mask, out / f"mask_{tag}.nii.gz")
    return 0


def cmd_split(args) -> int:
    from .splits import fold_sizes, read_cases_csv, stratified_split, write_folds_csv

    cohorts = read_cases_csv(args.input)
    assignment = stratified_split(cohorts, k=args.k, seed=args.seed, per_patient=not args.per_image)
    write_folds_csv(assignment, args.out)
    log.info("fold sizes: %s", fold_sizes(assignment, args.k))
    return 0


def cmd_train_toy(args) -> int:
    from .train import ScheduleConfig, TrainConfig, make_separable_dataset, train

    train_set = make_separable_dataset(args.n_train, args.patch, seed=args.seed * 2 + 1)
    val_set = make_separable_dataset(args.n_val, args.patch, seed=args.seed * 2 + 2)
    cfg = TrainConfig(schedule=ScheduleConfig(args.lr, args.epochs), seed=args.seed)
    result = train(train_set, val_set, cfg)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss", "val_dsc"])
        for r in result.records:
            writer.writerow([r.epoch, f"{r.loss:.10g}", f"{r.val_dsc:.10g}"])
    best = result.records[result.best_epoch]
    print(f"best epoch {best.epoch}: val_dsc={_fmt(best.val_dsc)} loss={_fmt(best.loss)}")
    if args.params_out:
        np.savetxt(args.params_out, result.best_params, fmt="%.17g")
    return 0


def cmd_losscheck(args) -> int:
    from .loss import LossBatch, LossConfig, gradient_check, loss_report

    cfg = LossConfig(numerator_factor=args.numerator_factor)
    rng = np.random.Generator(np.random.Philox(args.seed))
    worst = 0.0
    print("batch,n_b,N,gdl,fl,gdfl,max_rel_err")
    for b in range(args.batches):
        n_b = int(rng.integers(1, args.max_batch + 1))
        n = int(rng.integers(1, args.max_size + 1))
        logits = rng.normal(0.0, 2.0, size=(n_b, 2, n, n, n))
        fg = rng.random((n_b, n, n, n)) < 0.3
        batch = LossBatch.from_mask(logits, fg)
        report = loss_report(batch, cfg)
        err = gradient_check(batch, cfg, h=args.h)
        worst = max(worst, err)
        print(f"{b},{n_b},{n},{_fmt(report.gdl)},{_fmt(report.fl)},{_fmt(report.gdfl)},{err:.3e}")
    status = "PASS" if worst <= args.tolerance else "FAIL"
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}): {status}")
    return 0 if status == "PASS" else 1


def _make_predictor(args, spacing):
    from .inference import ExternalPredictor, stub_predictor

    if args.predictor == "stub":
        return stub_predictor(args.stub_slope, args.stub_threshold)
    if not args.external_cmd:
        raise ContractError("--predictor external requires --external-cmd")
    return ExternalPredictor(args.external_cmd, spacing)


def _resample_back(mask, reference_path):
    from .preprocess import resample_to_reference
    from .volume import Kind

    reference = nifti.load(reference_path, Kind.RAW)
    return resample_to_reference(mask, reference)


def cmd_infer(args) -> int:
    from .inference import binarize, infer, plan_windows
    from .volume import Kind

    pet = nifti.load(args.pet, Kind.PET_SUV)
    ct = nifti.load(args.ct, Kind.CT_HU)
    plan = plan_windows(pet.shape, args.window, args.overlap)
    log.info("%d windows of %s (stride %s)", len(plan), plan.window, plan.stride)
    prob = infer(pet, ct, _make_predictor(args, pet.spacing), plan, args.blend, jobs=args.jobs)
    if args.prob_out:
        nifti.save(prob, args.prob_out)
    mask = binarize(prob, args.threshold)
    if args.reference:
        mask = _resample_back(mask, args.reference)
    nifti.save(mask, args.out)
    return 0


def cmd_ensemble(args) -> int:
    from .inference import binarize, ensemble
    from .volume import Kind

    probs = [nifti.load(p, Kind.PROB) for p in args.inputs]
    if args.weights is not None and len(args.weights) != len(probs):
        raise ContractError(f"{len(probs)} inputs but {len(args.weights)} weights")
    prob = ensemble(probs, args.weights)
    if args.prob_out:
        nifti.save(prob, args.prob_out)
    mask = binarize(prob, args.threshold)
    if args.reference:
        mask = _resample_back(mask, args.reference)
    nifti.save(mask, args.out)
    return 0


def _nifti_files(directory) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = {}
    for path in sorted(directory.iterdir()):
        case = _case_id(path)
        if case is not None:
            files[case] = path
    return files


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_case
    from .volume import Kind

    gt_files = _nifti_files(args.gt_dir)
    pred_files = _nifti_files(args.pred_dir)
    if set(gt_files) != set(pred_files):
        only_gt = sorted(set(gt_files) - set(pred_files))
        only_pred = sorted(set(pred_files) - set(gt_files))
        raise ContractError(f"case sets differ: missing predictions {only_gt}, unmatched predictions {only_pred}")
    if args.connectivity_default:
        print(f"note: connectivity {args.connectivity} (default; pass --connectivity to choose 6, 18 or 26)", file=sys.stderr)
    cases = sorted(gt_files)

    def run(case):
        gt = nifti.load(gt_files[case], Kind.MASK)
        pred = nifti.load(pred_files[case], Kind.MASK)
        empty = not gt.data.any() and not pred.data.any()
        return evaluate_case(gt, pred, args.connectivity), empty

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(run, cases))

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "dsc", "fpv_ml", "fnv_ml"])
        for case, (m, empty) in zip(cases, results):
            if empty:
                print(f"note: {case}: both masks empty, DSC set to 1.0 by convention", file=sys.stderr)
            writer.writerow([case, _fmt(m.dsc), _fmt(m.fpv_ml), _fmt(m.fnv_ml)])
        if results:
            means = [float(np.mean([getattr(m, a) for m, _ in results])) for a in ("dsc", "fpv_ml", "fnv_ml")]
            writer.writerow(["mean", *map(_fmt, means)])
        else:
            writer.writerow(["mean", "", "", ""])
    return 0


def _read_summary(path: Path):
    from .metrics import LesionMetrics

    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r.get("case_id") == "mean"]
    if not rows:
        raise ContractError(f"{path}: no summary row 'mean'")
    row = rows[-1]
    try:
        return LesionMetrics(float(row["dsc"]), float(row["fpv_ml"]), float(row["fnv_ml"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"{path}: summary row is missing a metric") from exc


def cmd_rank(args) -> int:
    from .metrics import rank_aggregate

    tables = {}
    for p in map(Path, args.inputs):
        name = p.name[:-4] if p.name.endswith(".csv") else p.name
        if name in tables:
            raise ContractError(f"duplicate algorithm name {name!r}")
        tables[name] = _read_summary(p)
    rows = rank_aggregate(tables)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["position", "algorithm", "dsc", "fpv_ml", "fnv_ml", "rank_dsc", "rank_fpv", "rank_fnv", "score"])
        for i, r in enumerate(rows, 1):
            writer.writerow(
                [i, r.name, _fmt(r.dsc), _fmt(r.fpv_ml), _fmt(r.fnv_ml), r.rank_dsc, r.rank_fpv, r.rank_fnv, _fmt(r.score)]
            )
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="global random seed (default: %(default)s)")
    common.add_argument("--config", help="key=value file with option defaults for this subcommand")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    parser = _Parser(prog="petseg", description="PET/CT lesion segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"petseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    fmt = _HelpFormatter

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("info", cmd_info, "print the header summary of a NIfTI file")
    p.add_argument("file")

    p = add("preprocess", cmd_preprocess, "SUV conversion, CT clip/normalize, body crop, isotropic resampling")
    p.add_argument("--pet", required=True, help="PET activity (Bq/ml) or SUV volume")
    p.add_argument("--ct", required=True, help="CT volume in HU")
    p.add_argument("--mask", help="optional lesion mask")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--suv-sidecar", help="key=value file with dose_bq, weight_g, delay_s[, half_life_s]")
    p.add_argument("--dose-bq", type=float, help="injected dose in Bq")
    p.add_argument("--weight-g", type=float, help="patient weight in g")
    p.add_argument("--delay-s", type=float, help="seconds from injection to scan")
    p.add_argument("--half-life-s", type=float, default=6586.2, help="isotope half-life in s")
    p.add_argument("--spacing", type=float, default=2.0, help="isotropic output spacing in mm")
    p.add_argument("--ct-threshold", type=float, default=-800.0, help="body threshold in HU")
    p.add_argument("--suv-threshold", type=float, default=0.1, help="body threshold in SUV")

    p = add("augment", cmd_augment, "write randomly augmented patches for visual QA")
    p.add_argument("--pet", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--augment-config", help="key=value AugmentConfig file")
    p.add_argument("--patch-size", type=int, help="override patch_size (default 192)")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--count", type=int, default=1, help="patches to write")

    p = add("split", cmd_split, "cohort-stratified k-fold split")
    p.add_argument("--input", required=True, help="CSV with case_id,patient_id,cohort")
    p.add_argument("--out", required=True, help="output CSV case_id,fold")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--per-image", action="store_true", help="split images independently instead of grouping by patient")

    p = add("train-toy", cmd_train_toy, "train the per-voxel toy model on synthetic separable data")
    p.add_argument("--out", required=True, help="CSV of epoch,loss,val_dsc")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--patch", type=int, default=6)
    p.add_argument("--params-out", help="text file for the selected parameters")

    p = add("losscheck", cmd_losscheck, "loss values and finite-difference gradient check on random batches")
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--max-batch", type=int, default=4)
    p.add_argument("--max-size", type=int, default=4)
    p.add_argument("--numerator-factor", type=int, choices=(1, 2), default=1)
    p.add_argument("--h", type=float, default=1e-3, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("infer", cmd_infer, "sliding-window inference with a patch predictor")
    p.add_argument("--pet", required=True, help="preprocessed PET (SUV)")
    p.add_argument("--ct", required=True, help="preprocessed CT")
    p.add_argument("--out", required=True, help="output mask")
    p.add_argument("--prob-out", help="also write the foreground probability map")
    p.add_argument("--window", type=int, default=192)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--blend", choices=("constant", "gaussian"), default="constant")
    p.add_argument("--predictor", choices=("stub", "external"), default="stub")
    p.add_argument("--external-cmd", help="command run per window with the patch directory as last argument")
    p.add_argument("--stub-slope", type=float, default=10.0)
    p.add_argument("--stub-threshold", type=float, default=2.5, help="stub predictor SUV threshold")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--reference", help="resample the mask onto this volume's grid")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help=f"worker threads (env {JOBS_ENV})")

    p = add("ensemble", cmd_ensemble, "(weighted) average of probability maps, then threshold")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float, help="one weight per input (default: uniform)")
    p.add_argument("--out", required=True)
    p.add_argument("--prob-out")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--reference", help="resample the mask onto this volume's grid")

    p = add("evaluate", cmd_evaluate, "per-case DSC / FPV / FNV over two directories of masks")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=None, help="default 18")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help=f"worker threads (env {JOBS_ENV})")

    p = add("rank", cmd_rank, "challenge-style rank aggregation of evaluate CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", help="output CSV (default stdout)")
    return parser


_INTERNAL = {"func", "command", "config", "verbose", "quiet", "connectivity_default"}


def _apply_config(parser: argparse.ArgumentParser, args, argv):
    """Re-parse with defaults from ``--config``; unknown keys are rejected."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help",)}
    values = read_kv(args.config, allowed=set(dests) - _INTERNAL)
    defaults = {}
    for key, raw in values.items():
        action = dests[key]
        if action.nargs in ("+", "*"):
            items = [v for v in raw.replace(",", " ").split() if v]
            defaults[key] = [action.type(v) if action.type else v for v in items]
        elif action.const is True and action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes")
        else:
            defaults[key] = action.type(raw) if action.type else raw
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _setup_logging(level: int) -> None:
    # one stderr handler on the package logger, replaced on every call
    for handler in [h for h in log.handlers if getattr(h, "_petseg", False)]:
        log.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._petseg = True
    log.addHandler(handler)
    log.setLevel(level)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            args = _apply_config(parser, args, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"petseg: error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"petseg: error: {exc}", file=sys.stderr)
        return 1

    _setup_logging(logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO))
    if hasattr(args, "connectivity"):
        args.connectivity_default = args.connectivity is None
        if args.connectivity is None:
            args.connectivity = 18
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    log.info("resolved config: %s", " ".join(f"{k}={v}" for k, v in resolved.items()))

    try:
        return args.func(args)
    except (ContractError, PetsegError, ValueError) as exc:
        print(f"petseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"petseg {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
