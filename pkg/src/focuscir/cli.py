"""``focuscir`` command line: gen-synth, preprocess, train, eval, retrieve, sweep.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from importlib import metadata
from pathlib import Path

from .backbones import make_backbones
from .data import (
    ABLATION_FLAGS, ConfigError, DatasetManifest, HyperConfig, apply_overrides, dump_config,
    load_config, load_manifest, validate_config, write_manifest,
)
from .preprocess import SegmentationCache, preprocess_manifest, segment_dominant

log = logging.getLogger("focuscir")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, applied after --config (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--profile", choices=("full", "stub"))
    p.add_argument("--ablate", action="append", default=[], choices=ABLATION_FLAGS,
                   help="ablation flag (repeatable)")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-threaded deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser, cache_required: bool = True) -> None:
    p.add_argument("--manifest", required=True, help="dataset directory")
    p.add_argument("--format", default="synthetic", choices=("synthetic", "normalized", "fashioniq", "shoes", "cirr"))
    p.add_argument("--cache", required=cache_required, help="segmentation cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="focuscir", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic attribute dataset")
    _common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--reuse", type=float, default=0.0)
    p.add_argument("--fractions", default="0.7,0.15,0.15")

    p = sub.add_parser("preprocess", help="caption and segment every image once")
    _common(p)
    _data_args(p)

    p = sub.add_parser("train", help="fit the composer")
    _common(p)
    _data_args(p)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="recall metrics for a checkpoint or run directory")
    _common(p)
    p.add_argument("--run", help="run directory written by `train`")
    p.add_argument("--manifest")
    p.add_argument("--format", default="synthetic")
    p.add_argument("--cache")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--top-k", type=int, default=10, help="ranked-list length in rankings.jsonl")

    p = sub.add_parser("retrieve", help="top-k gallery ids for an ad-hoc (image, text) query")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True, help="manifest image id, image file, or attribute JSON file")
    p.add_argument("--text", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="test")

    p = sub.add_parser("sweep", help="train and evaluate over a grid of one hyperparameter")
    _common(p)
    _data_args(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.add_argument("--split", default="test")
    p.add_argument("--max-steps", type=int)
    return parser


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def effective_config(args) -> HyperConfig:
    overrides = _overrides(args.overrides)
    cfg = load_config(args.config, overrides, profile=args.profile)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.ablate:
        cfg = cfg.replace(ablation_flags=frozenset(cfg.ablation_flags) | set(args.ablate))
    return validate_config(cfg)


def build_id() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{version}+{rev}" if rev else version


def write_run_manifest(out: Path, cfg: HyperConfig, args, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "config": cfg.to_dict(), "build": build_id()}
    for key in ("manifest", "format", "cache"):
        value = getattr(args, key, None)
        if value is not None:
            record[key] = str(Path(value).resolve()) if key != "format" else value
    record.update(extra or {})
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True), encoding="utf-8")
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    return out / "run.json"


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    from .synthetic import gen_synthetic

    cfg = effective_config(args)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise UsageError("--fractions needs three comma-separated values")
    manifest = gen_synthetic(args.n, seed=cfg.seed, noise_level=args.noise, fractions=fractions, reuse=args.reuse)
    out = write_manifest(manifest, _out(args, "synthetic_data"))
    print(json.dumps({"manifest": str(out), "triplets": len(manifest.triplets), "images": len(manifest.image_index)}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = effective_config(args)
    manifest = load_manifest(args.manifest, args.format)
    bb = make_backbones(cfg)
    stats = preprocess_manifest(manifest, SegmentationCache(args.cache), bb.captioner, bb.segmenter,
                                workers=args.workers)
    print(json.dumps(stats.as_dict(), sort_keys=True))
    if args.out:
        out = Path(args.out)
        write_run_manifest(out, cfg, args)
        (out / "cache_stats.json").write_text(json.dumps(stats.as_dict(), sort_keys=True), encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = effective_config(args)
    manifest = load_manifest(args.manifest, args.format)
    out = _out(args, "run")
    write_run_manifest(out, cfg, args)
    result = fit(manifest, cfg, SegmentationCache(args.cache), out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps({"checkpoint": str(result.checkpoint), "log": str(result.log_path), "steps": result.steps}))
    return EXIT_OK


def _load_retriever(cfg: HyperConfig, manifest: DatasetManifest, cache: SegmentationCache, checkpoint: str | None):
    from .model import Retriever
    from .trainer import load_checkpoint

    retriever = Retriever(cfg, manifest, cache)
    if checkpoint:
        load_checkpoint(checkpoint, retriever, cfg)
    retriever.model.eval()
    return retriever


def cmd_eval(args) -> int:
    from .report import report
    from .retrieval import EmbeddingCache, evaluate, write_rankings

    if args.run:
        run = json.loads((Path(args.run) / "run.json").read_text(encoding="utf-8"))
        cfg = validate_config(apply_overrides(HyperConfig.for_profile(run["config"]["profile"]),
                                              _flatten(run["config"])))
        manifest_path, fmt, cache_dir = run["manifest"], run["format"], run["cache"]
        checkpoint = args.checkpoint or str(Path(args.run) / "best.npz")
        out = Path(args.out) if args.out else Path(args.run) / f"eval-{args.split}"
    else:
        if not (args.manifest and args.cache):
            raise UsageError("eval needs --run, or --manifest and --cache")
        cfg = effective_config(args)
        manifest_path, fmt, cache_dir, checkpoint = args.manifest, args.format, args.cache, args.checkpoint
        out = _out(args, "eval")
    manifest = load_manifest(manifest_path, fmt)
    cache = SegmentationCache(cache_dir)
    retriever = _load_retriever(cfg, manifest, cache, checkpoint)
    evaluation = evaluate(manifest, args.split, retriever, EmbeddingCache(Path(cache_dir) / "embeddings"))
    paths = report(evaluation.metrics, manifest.name, out)
    write_rankings(evaluation.rankings, out / "rankings.jsonl", top_k=args.top_k)
    print(paths["table"].read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _flatten(config: dict) -> dict[str, str]:
    return {k: ",".join(v) if isinstance(v, list) else str(v) for k, v in config.items()}


def cmd_retrieve(args) -> int:
    from .retrieval import embed_gallery, rank_embedding

    if args.k < 1:
        raise UsageError("--k must be ≥ 1")
    cfg = effective_config(args)
    manifest = load_manifest(args.manifest, args.format)
    cache = SegmentationCache(args.cache)
    image_id = args.image
    if image_id not in manifest.image_index:
        path = Path(args.image)
        if not path.exists():
            raise UsageError(f"{args.image!r} is neither a manifest image id nor a file")
        entry = json.loads(path.read_text(encoding="utf-8")) if path.suffix == ".json" else str(path.resolve())
        image_id = f"adhoc:{path.name}"
        manifest.image_index[image_id] = entry
    bb = make_backbones(cfg)
    segment_dominant(image_id, manifest, bb.captioner, bb.segmenter, cache)
    retriever = _load_retriever(cfg, manifest, cache, args.checkpoint)
    index = embed_gallery(manifest, args.split, retriever)
    query = retriever.query_embeddings([image_id], [args.text])[0]
    ranked = rank_embedding(query, index)[: args.k]
    for image in ranked:
        print(image)
    return EXIT_OK


def _coerce_value(param: str, raw: str):
    try:
        return getattr(apply_overrides(HyperConfig(), {param: raw}), param)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_sweep(args) -> int:
    from .model import Retriever
    from .report import plot_sweep, write_metrics
    from .retrieval import evaluate
    from .trainer import fit

    base = effective_config(args)
    values = [_coerce_value(args.param, v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    manifest = load_manifest(args.manifest, args.format)
    cache = SegmentationCache(args.cache)
    out = _out(args, f"sweep-{args.param}")
    write_run_manifest(out, base, args, {"param": args.param, "values": values})
    series: dict[str, list[float]] = {}
    rows = []
    for value in values:
        cfg = validate_config(base.replace(**{args.param: value}))
        run_dir = out / f"{args.param}={value}"
        write_run_manifest(run_dir, cfg, args)
        result = fit(manifest, cfg, cache, run_dir, max_steps=args.max_steps)
        retriever = _load_retriever(cfg, manifest, cache, str(result.checkpoint))
        metrics = evaluate(manifest, args.split, retriever).metrics
        write_metrics(metrics, run_dir / "metrics.jsonl")
        rows.append({"param": args.param, "value": value, "metrics": metrics})
        for m in metrics:
            label = m["metric"] if m["k"] is None else f"{m['metric']}@{m['k']}"
            series.setdefault(label, []).append(m["value"])
    with open(out / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    plot = plot_sweep(args.param, values, series, out / f"sweep_{args.param}.png")
    print(json.dumps({"runs": len(rows), "plot": str(plot)}))
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth, "preprocess": cmd_preprocess, "train": cmd_train,
    "eval": cmd_eval, "retrieve": cmd_retrieve, "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        from .trainer import set_determinism

        set_determinism(True)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"focuscir {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"focuscir {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
