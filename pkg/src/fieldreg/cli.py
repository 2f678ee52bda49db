"""Command-line surface: preprocess, phantom, train, register, evaluate,
gradcheck.

Conventions: artifacts go to the named output paths only, human summaries
to stdout, JSON-lines progress to stderr, and failures exit nonzero with
one structured JSON error line on stderr. All randomness is keyed by
--seed; --deterministic pins the BLAS pool to one thread so repeated runs
are bit-identical.

Thread count is applied via environment variables before numpy loads,
which is why this module only imports the engine inside the commands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _configure_threads(argv: list[str]) -> None:
    threads = os.environ.get("REG_THREADS")
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if "--deterministic" in argv and threads is None:
        threads = "1"
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _log(record: dict) -> None:
    sys.stderr.write(json.dumps(record) + "\n")
    sys.stderr.flush()


def _parse_triple(text: str, kind=int):
    parts = [kind(p) for p in text.replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _parse_pair(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi, got {text!r}")
    return parts[0], parts[1]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (default: all cores; REG_THREADS as fallback)")
    p.add_argument("--deterministic", action="store_true",
                   help="bit-reproducible mode (pins threads to 1 unless --threads given)")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file whose keys override unset flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldreg",
        description="Volumetric registration engine with decomposed displacement fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="crop to body, resample, clip-normalize")
    p.add_argument("--volume", type=Path, required=True, help="input volume (.frv or .nii)")
    p.add_argument("--body-mask", type=Path, required=True, help="body mask (.frv or .nii)")
    p.add_argument("--out", type=Path, required=True, help="output volume (.frv)")
    p.add_argument("--grid", type=lambda s: _parse_triple(s, int), default=(128, 96, 160),
                   help="target dims, comma separated; all divisible by 16 (default 128,96,160)")
    p.add_argument("--clip", type=_parse_pair, default=(-1000.0, 1000.0),
                   help="intensity clip range lo,hi in HU (default -1000,1000)")
    p.add_argument("--margin", type=int, default=0, help="crop margin in voxels")
    p.add_argument("--labels", type=Path, default=None,
                   help="optional organ labels to carry through the same crop/resample")
    p.add_argument("--labels-out", type=Path, default=None, help="output path for --labels")
    _add_common(p)

    p = sub.add_parser("phantom", help="generate a synthetic phantom pair suite")
    p.add_argument("--spec", type=Path, required=True,
                   help="suite spec JSON {pairs, phantom, deformation}")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("train", help="train one pipeline block")
    p.add_argument("--manifest", type=Path, required=True, help="pair manifest JSON")
    p.add_argument("--block", required=True,
                   choices=["affine", "bone", "thorax", "abdomen", "wholebody"])
    p.add_argument("--model", type=Path, required=True,
                   help="model bundle directory (created zero-initialized if absent)")
    p.add_argument("--prefix", default="auto",
                   help="frozen prefix blocks: auto | none | comma list of block names")
    p.add_argument("--epochs", type=int, default=None, help="default 400")
    p.add_argument("--pairs-per-epoch", type=int, default=None, help="default 400")
    p.add_argument("--lr", type=float, default=None, help="default 1e-4")
    p.add_argument("--alpha", type=float, default=None, help="similarity weight (default 1)")
    p.add_argument("--lam", type=float, default=None, help="overlap weight (default 1)")
    p.add_argument("--beta", type=float, default=None, help="smoothness weight (default 1)")
    p.add_argument("--bins", type=int, default=None, help="MI histogram bins (default 32)")
    p.add_argument("--regions", type=Path, default=None, help="region spec JSON")
    p.add_argument("--checkpoint-every", type=int, default=None, help="epochs between checkpoints")
    p.add_argument("--checkpoint-dir", type=Path, default=None)
    p.add_argument("--log", type=Path, default=None, help="also append JSON-lines records here")
    _add_common(p)

    p = sub.add_parser("register", help="register one pair with a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--out-field", type=Path, required=True)
    p.add_argument("--out-warped", type=Path, required=True)
    p.add_argument("--upto", default="wholebody",
                   choices=["affine", "bone", "thorax", "abdomen", "wholebody"])
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate a model over a pair manifest")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON path")
    p.add_argument("--csv", type=Path, default=None, help="also export CSV here")
    p.add_argument("--organs", default=None, help="comma list (default: all known organs)")
    p.add_argument("--upto", default="wholebody",
                   choices=["affine", "bone", "thorax", "abdomen", "wholebody"])
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--component", default="all")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4)
    _add_common(p)
    return parser


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    if not getattr(args, "config", None):
        return
    overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise SystemExit(f"unknown config key: {key}")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


# --- commands -------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from . import frv
    from .volume import apply_crop_box, clip_normalize, crop_to_mask, require_block_compatible
    from .volume import Grid, resample_nearest, resample_trilinear

    require_block_compatible(tuple(args.grid))
    volume = frv.load_volume(args.volume)
    body = frv.load_mask(args.body_mask)
    cropped, box = crop_to_mask(volume, body, margin=args.margin)
    spacing = tuple(
        cropped.grid.spacing[a] * cropped.grid.dims[a] / args.grid[a] for a in range(3))
    target = Grid(tuple(args.grid), spacing, cropped.grid.origin)
    resampled = resample_trilinear(cropped, target)
    out = clip_normalize(resampled, *args.clip)
    frv.write_volume(out, args.out)
    prov = {
        "crop_box": box.to_json(),
        "source_grid": volume.grid.to_json(),
        "target_grid": target.to_json(),
        "clip": list(args.clip),
        "margin": args.margin,
    }
    Path(str(args.out) + ".prov.json").write_text(
        json.dumps(prov, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if args.labels is not None:
        if args.labels_out is None:
            raise SystemExit("--labels requires --labels-out")
        mask = frv.load_mask(args.labels)
        mask_c = apply_crop_box(mask, box)
        frv.write_mask(resample_nearest(mask_c, target), args.labels_out)
    _log({"event": "preprocess", "out": str(args.out), "crop_box": box.to_json()})
    print(f"preprocessed {args.volume} -> {args.out} on grid {tuple(args.grid)}")
    return 0


def cmd_phantom(args) -> int:
    from . import frv
    from .phantom import make_pair, regions_of_spec, suite_from_json
    from .training import PairEntry, PairManifest

    spec_p, spec_d, n_pairs = suite_from_json(Path(args.spec).read_text(encoding="utf-8"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_pairs):
        pair = make_pair(spec_p, spec_d, seed=args.seed + i)
        stem = f"pair{i:03d}"
        frv.write_volume(pair.fixed, out / f"{stem}_fixed.frv")
        frv.write_volume(pair.moving, out / f"{stem}_moving.frv")
        frv.write_mask(pair.fixed_mask, out / f"{stem}_fixed_mask.frv")
        frv.write_mask(pair.moving_mask, out / f"{stem}_moving_mask.frv")
        frv.write_field(pair.truth, out / f"{stem}_truth.frv")
        entries.append(PairEntry(f"{stem}_fixed.frv", f"{stem}_moving.frv",
                                 f"{stem}_fixed_mask.frv", f"{stem}_moving_mask.frv"))
        _log({"event": "phantom_pair", "index": i,
              "truth_max_disp": pair.truth.max_displacement()})
    PairManifest(tuple(entries)).save(out / "manifest.json")
    (out / "regions.json").write_text(
        json.dumps(regions_of_spec(spec_p).to_json(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8")
    (out / "suite.json").write_text(Path(args.spec).read_text(encoding="utf-8"),
                                    encoding="utf-8")
    print(f"wrote {n_pairs} phantom pairs to {out}")
    return 0


def _load_or_init_model(args, grid, regions):
    from .pipeline import PipelineModel, import_model

    model_dir = Path(args.model)
    if (model_dir / "manifest.json").exists():
        return import_model(model_dir)
    return PipelineModel.zero_init(grid, regions, seed=args.seed)


def _prefix_names(spec: str, block: str) -> list[str]:
    from .regions import BLOCK_ORDER

    if spec == "none":
        return []
    if spec == "auto":
        if block == "affine":
            return []
        if block == "wholebody":
            return [n for n in BLOCK_ORDER if n != "wholebody"]
        return ["affine"]
    names = [n for n in spec.split(",") if n]
    unknown = [n for n in names if n not in BLOCK_ORDER]
    if unknown:
        raise SystemExit(f"unknown prefix blocks: {unknown}")
    return names


def cmd_train(args) -> int:
    from .losses import LossWeights
    from .pipeline import FrozenPrefix, export_model
    from .regions import RegionSpec, canonical_regions
    from .training import PairManifest, TrainConfig, load_manifest_pairs, train_block

    manifest = PairManifest.load(args.manifest)
    manifest.validate_files(Path(args.manifest).parent)
    pairs = load_manifest_pairs(manifest, Path(args.manifest).parent)
    regions_path = args.regions or (Path(args.manifest).parent / "regions.json")
    regions = (RegionSpec.from_json(json.loads(regions_path.read_text(encoding="utf-8")))
               if regions_path and regions_path.exists() else canonical_regions())
    model = _load_or_init_model(args, pairs[0].fixed.grid, regions)
    cfg = TrainConfig(
        epochs=args.epochs if args.epochs is not None else 400,
        pairs_per_epoch=args.pairs_per_epoch if args.pairs_per_epoch is not None else 400,
        weights=LossWeights(
            alpha=args.alpha if args.alpha is not None else 1.0,
            lam=args.lam if args.lam is not None else 1.0,
            beta=args.beta if args.beta is not None else 1.0),
        lr=args.lr if args.lr is not None else 1e-4,
        mi_bins=args.bins if args.bins is not None else 32,
        seed=args.seed,
        regions=model.regions,
        checkpoint_every=args.checkpoint_every or 0,
    )
    prefix_blocks = _prefix_names(args.prefix, args.block)
    prefix = (FrozenPrefix([(n, model.blocks[n]) for n in prefix_blocks], model.grid)
              if prefix_blocks else None)
    organs = model.regions.organs_for_block(args.block)

    log_path = args.log
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    def log_fn(rec):
        rec = dict(rec, block=args.block)
        _log(rec)
        if log_file:
            log_file.write(json.dumps(rec) + "\n")

    try:
        train_block(model.blocks[args.block], organs, pairs, cfg,
                    prefix_fn=prefix, log_fn=log_fn,
                    checkpoint_dir=args.checkpoint_dir)
    finally:
        if log_file:
            log_file.close()
    export_model(model, args.model)
    print(f"trained block {args.block!r} on {len(pairs)} pairs "
          f"({cfg.epochs} epochs x {cfg.pairs_per_epoch}) -> {args.model}")
    return 0


def cmd_register(args) -> int:
    from . import frv
    from .pipeline import import_model, register_partial

    model = import_model(args.model)
    fixed = frv.load_volume(args.fixed)
    moving = frv.load_volume(args.moving)
    result = register_partial(model, fixed, moving, upto=args.upto)
    frv.write_field(result.total, args.out_field)
    frv.write_volume(result.warped, args.out_warped)
    _log({"event": "register", "upto": args.upto,
          "max_displacement": result.total.max_displacement()})
    print(f"registered {args.moving} -> {args.fixed}; field {args.out_field}, "
          f"warped {args.out_warped}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import aggregate, evaluate_pair, format_table, to_csv, unregistered_pair
    from .pipeline import import_model
    from .training import PairManifest, load_manifest_pairs

    model = import_model(args.model)
    manifest = PairManifest.load(args.manifest)
    pairs = load_manifest_pairs(manifest, Path(args.manifest).parent)
    if args.organs:
        organs = [o for o in args.organs.split(",") if o]
    else:
        known = set(pairs[0].fixed_mask.label_table.values())
        organs = [o for o in model.regions.all_organs if o in known]
    if not organs:
        raise SystemExit("no requested organs found in the mask label tables")
    rows_unreg = [unregistered_pair(p, organs) for p in pairs]
    rows_reg = [evaluate_pair(model, p, organs, upto=args.upto) for p in pairs]
    columns = {"Unregistered": aggregate(rows_unreg), "Registered": aggregate(rows_reg)}
    report = {name: rep.to_json() for name, rep in columns.items()}
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(to_csv(columns), encoding="utf-8")
    print(format_table(columns))
    return 0


def cmd_gradcheck(args) -> int:
    from .training import grad_check

    report = grad_check(args.component, trials=args.trials,
                        tolerance=args.tolerance, step=args.step, seed=args.seed)
    for name, err in report.results.items():
        status = "ok" if err < report.tolerance else "FAIL"
        print(f"{name:18s} max rel err {err:.3e}  [{status}]")
        _log({"event": "gradcheck", "component": name, "max_rel_err": err})
    print(f"gradcheck {'PASSED' if report.passed else 'FAILED'} "
          f"(tolerance {report.tolerance:g})")
    return 0 if report.passed else 1


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "phantom": cmd_phantom,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        _apply_config(args, defaults)
        return _COMMANDS[args.command](args)
    except SystemExit as e:
        if isinstance(e.code, str):
            sys.stderr.write(json.dumps({"error": "usage", "message": e.code}) + "\n")
            return 2
        raise
    except Exception as e:  # noqa: BLE001
        from .errors import EngineError

        code = e.code if isinstance(e, EngineError) else "unexpected-error"
        sys.stderr.write(json.dumps({"error": code, "message": str(e)}) + "\n")
        return 3 if code == "unexpected-error" else 2


if __name__ == "__main__":
    sys.exit(main())
