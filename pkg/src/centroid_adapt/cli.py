"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Relative output paths are resolved against ``$CENTROID_ADAPT_RUN_ROOT`` when
it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .clustering import load_centroids, save_centroids
from .data import SyntheticSpec, generate, load_dataset, load_samples, save_dataset
from .errors import CentroidAdaptError, ConfigError, NumericalError
from .evaluation import (
    class_names,
    evaluate,
    pca_projection,
    write_confusion_csv,
    write_per_class_csv,
    write_projection_csv,
)
from .losses import LossConfig
from .nn import load_checkpoint, save_checkpoint
from .training import (
    SWEEP_COLUMNS,
    TrainConfig,
    build_centroids,
    extract_representations,
    lambda_sweep,
    summarize_sweep,
    train_netb,
    train_neta,
    write_rows,
)

RUN_ROOT_ENV = "CENTROID_ADAPT_RUN_ROOT"
DEFAULT_LAMBDAS = "0,0.25,0.5,0.75,1"

log = logging.getLogger("centroid_adapt")


def _out_path(p: str) -> Path:
    path = Path(p)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def parse_overrides(extra: list[str]) -> dict[str, object]:
    """``--loss.lambda 0.5`` / ``--epochs=10`` style overrides."""
    out: dict[str, object] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} has no value")
            value = extra[i + 1]
            i += 2
        out[key] = _coerce(value)
    return out


def apply_overrides(config: dict, overrides: dict[str, object]) -> dict:
    config = json.loads(json.dumps(config))
    for key, value in overrides.items():
        parts = key.split(".")
        node = config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key}: {part} is not a section")
        node[parts[-1]] = value
    return config


def resolve_train_config(args, extra: list[str]) -> TrainConfig:
    base = _read_json(args.config) if args.config else {}
    overrides = parse_overrides(extra)
    for flag, key in (("lam", "loss.lambda"), ("norm", "loss.normalization"), ("seed", "seed"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    merged = apply_overrides(base, overrides)
    # randomness must come from an explicit seed recorded in the manifest
    if merged.get("seed") is None:
        raise ConfigError("missing required field: seed (set it in --config or pass --seed)")
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _config_doc(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d["loss"]["lambda"] = d["loss"].pop("lam")
    return d


PATH_FLAGS = ("--config", "--data", "--centroids", "--checkpoint", "--spec", "--out")


def _absolute_argv(argv) -> list[str]:
    """Rewrite path-valued flags to absolute paths so a manifest can be
    replayed from any working directory."""
    out = list(argv)
    for i, tok in enumerate(out):
        flag, eq, value = tok.partition("=")
        if flag not in PATH_FLAGS:
            continue
        if eq:
            path = _out_path(value) if flag == "--out" else Path(value)
            out[i] = f"{flag}={path.absolute()}"
        elif i + 1 < len(out):
            path = _out_path(out[i + 1]) if flag == "--out" else Path(out[i + 1])
            out[i + 1] = str(path.absolute())
    return out


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out = list(argv)
    for i, tok in enumerate(out):
        if tok == flag and i + 1 < len(out):
            out[i + 1] = value
            return out
        if tok.startswith(flag + "="):
            out[i] = f"{flag}={value}"
            return out
    return out + [flag, value]


def write_manifest(out_dir: Path, subcommand: str, config: dict, inputs: dict, outputs: list[str], seeds: dict, argv) -> None:
    _write_json(out_dir / "config.json", config)
    _write_json(
        out_dir / "manifest.json",
        {
            "subcommand": subcommand,
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "seeds": seeds,
            "tool_version": __version__,
            "argv": _absolute_argv(argv),
        },
    )


def cmd_gen_data(args, extra, argv) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    spec = SyntheticSpec.from_dict(_read_json(args.spec))
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate(spec)
    save_dataset(source, out, "source")
    save_dataset(target, out, "target")
    _write_json(out / "spec.json", spec.to_dict())
    _write_json(
        out / "manifest.json",
        {
            "subcommand": "gen-data",
            "config": spec.to_dict(),
            "inputs": {"spec": str(Path(args.spec).absolute())},
            "outputs": [f"{d}_{s}.jsonl" for d in ("source", "target") for s in ("train", "eval")] + ["spec.json"],
            "seeds": {"data": spec.seed},
            "tool_version": __version__,
            "argv": _absolute_argv(argv),
        },
    )
    print(f"wrote {len(source.train) + len(source.eval)} source and {len(target.train) + len(target.eval)} target samples to {out}")
    return 0


def _announce(prefix: str, record) -> None:
    parts = []
    for key in ("source_acc", "target_acc"):
        series = getattr(record, key)
        if series and series[-1] == series[-1]:
            parts.append(f"{key}={series[-1]:.4f}")
    print(f"{prefix}: final E_tot={record.E_tot[-1]:.6f} " + " ".join(parts))


def cmd_train_netb(args, extra, argv) -> int:
    cfg = resolve_train_config(args, extra)
    target = load_dataset(_require(args.data, "data directory"), "target")
    n_classes = args.classes or 1 + max(s.label for s in target.train + target.eval)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, record = train_netb(target, cfg, n_classes)
    save_checkpoint(net, out / "checkpoint.json")
    record.write_metrics(out / "metrics.csv")
    write_manifest(
        out, "train-netb", _config_doc(cfg), {"data": str(args.data)},
        ["checkpoint.json", "metrics.csv"], {"train": cfg.seed}, argv,
    )
    _announce("train-netb", record)
    print(f"best target eval accuracy {max(record.target_acc):.4f} at epoch {record.best_epoch}")
    return 0


def cmd_train_neta(args, extra, argv) -> int:
    cfg = resolve_train_config(args, extra)
    centroids_path = Path(args.centroids)
    if not centroids_path.exists():
        raise ConfigError(f"centroid file not found: {centroids_path}")
    Z = load_centroids(centroids_path)
    data_dir = _require(args.data, "data directory")
    source = load_dataset(data_dir, "source")
    target_eval_path = data_dir / "target_eval.jsonl"
    target_eval = load_samples(target_eval_path) if target_eval_path.exists() else None
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, record = train_neta(source, Z, cfg, target_eval)
    save_checkpoint(net, out / "checkpoint.json")
    shutil.copyfile(centroids_path, out / "centroids.json")
    record.write_metrics(out / "metrics.csv")
    write_manifest(
        out, "train-neta", _config_doc(cfg), {"data": str(args.data), "centroids": str(args.centroids)},
        ["checkpoint.json", "centroids.json", "metrics.csv"], {"train": cfg.seed}, argv,
    )
    _announce("train-neta", record)
    return 0


def cmd_cluster(args, extra, argv) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    net = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    samples = load_samples(_require(args.data, "data file"))
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cs = build_centroids(net, samples, args.method, args.seed, path=out)
    print(f"wrote {cs.k} centroids (n={cs.n}, inertia={cs.inertia:.6g}) to {out}")
    return 0


def _loss_cfg(args) -> LossConfig:
    lam = 1.0 if args.lam is None else args.lam
    return LossConfig(lam=lam, normalization=args.norm or "softmax", predictor=args.predictor)


def cmd_eval(args, extra, argv) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    net = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    Z = load_centroids(_require(args.centroids, "centroid file")) if args.centroids else None
    cfg = _loss_cfg(args)
    if cfg.resolved_predictor() == "centroid" and Z is None:
        raise ConfigError("the centroid predictor needs --centroids")
    samples = load_samples(_require(args.data, "data file"))
    result = evaluate(net, Z, samples, cfg)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(net.arch.n_classes)
    set_name = args.set or Path(args.data).stem
    write_per_class_csv(out / "per_class_accuracy.csv", [(set_name, cfg.lam, result.per_class, result.accuracy)], names, append=True)
    write_confusion_csv(out / f"confusion_{set_name}.csv", result.confusion.normalized, names)
    write_confusion_csv(out / f"confusion_counts_{set_name}.csv", result.confusion.counts, names)
    print(f"{set_name}: accuracy {result.accuracy:.4f} ({result.predictor} predictor)")
    return 0


def cmd_project(args, extra, argv) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    net = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    Z = load_centroids(_require(args.centroids, "centroid file")) if args.centroids else None
    points = extract_representations(net, load_samples(_require(args.data, "data file")))
    proj = pca_projection(points, Z, args.dims)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_projection_csv(out, proj, points.labels.tolist())
    print(f"wrote {len(proj.points)} points and {len(proj.centroids)} centroids to {out}")
    return 0


def _sweep_job(job):
    source, target_eval, Z, cfg, lam, norm, seed = job
    return lambda_sweep(source, Z, cfg, [lam], target_eval, [norm], [seed])


def cmd_sweep(args, extra, argv) -> int:
    cfg = resolve_train_config(args, extra)
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --lambdas value {args.lambdas!r}") from exc
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
    norms = [n.strip() for n in args.norms.split(",") if n.strip()]
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    Z = load_centroids(_require(args.centroids, "centroid file"))
    data_dir = _require(args.data, "data directory")
    source = load_dataset(data_dir, "source")
    target_eval = load_samples(data_dir / "target_eval.jsonl") if (data_dir / "target_eval.jsonl").exists() else None
    jobs = [(source, target_eval, Z, cfg, lam, norm, seed) for norm in norms for lam in lambdas for seed in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = [r for res in results for r in res]
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "sweep.csv", SWEEP_COLUMNS)
    summary = summarize_sweep(rows)
    write_rows(summary, out / "sweep_summary.csv")
    write_manifest(
        out, "sweep", _config_doc(cfg),
        {"data": str(args.data), "centroids": str(args.centroids)},
        ["sweep.csv", "sweep_summary.csv"],
        {"train": seeds, "lambdas": lambdas, "normalizations": norms}, argv,
    )
    for r in summary:
        print(
            f"lambda={r['lambda']:<5g} {r['normalization']:<7} {r['predictor']:<8} "
            f"source {r['source_mean']:.4f}±{r['source_std']:.4f}  target {r['target_mean']:.4f}±{r['target_std']:.4f}"
        )
    return 0


def cmd_rerun(args, extra, argv) -> int:
    """Replay a run directory's manifest into a new output directory, using
    the resolved configuration stored next to it."""
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    run_dir = _require(args.run, "run directory")
    manifest = _read_json(run_dir / "manifest.json")
    try:
        replay = list(manifest["argv"])
        sub = manifest["subcommand"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{run_dir}/manifest.json: malformed manifest ({exc})") from exc
    if sub == "rerun":
        raise ConfigError("refusing to replay a rerun manifest")
    if sub == "gen-data":
        replay = _replace_flag(replay, "--spec", str((run_dir / "spec.json").absolute()))
    elif (run_dir / "config.json").exists():
        replay = _replace_flag(replay, "--config", str((run_dir / "config.json").absolute()))
    replay = _replace_flag(replay, "--out", str(_out_path(args.out).absolute()))
    print("replaying: centroid-adapt " + " ".join(replay))
    return main(replay)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config; flags and --dotted.key overrides win")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--norm", choices=("softmax", "linear"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="centroid-adapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic source/target datasets")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-netb", help="train the donor network on the target domain")
    _add_train_flags(p)
    p.add_argument("--classes", type=int, help="class count (default: inferred from labels)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_netb)

    p = sub.add_parser("cluster", help="cluster a network's representations into class centroids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL sample file")
    p.add_argument("--method", choices=("kmeans", "class-mean"), default="kmeans")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="centroid JSON file")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-neta", help="train the adapted network on the source domain")
    _add_train_flags(p)
    p.add_argument("--centroids", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_neta)

    for name, func, help_ in (("eval", cmd_eval, "accuracy and confusion-matrix tables"), ("project", cmd_project, "PCA projection CSV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--centroids")
        p.add_argument("--data", required=True, help="JSONL sample file")
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--set", help="row label (default: data file stem)")
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--norm", choices=("softmax", "linear"))
            p.add_argument("--predictor", choices=("auto", "output", "centroid"), default="auto")
        else:
            p.add_argument("--dims", type=int, choices=(2, 3), default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="train one adapted network per lambda and seed")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--lambdas", default=DEFAULT_LAMBDAS)
    p.add_argument("--norms", default="softmax,linear")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds starting at the config seed")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep, lam=None, norm=None)

    p = sub.add_parser("rerun", help="replay a run directory's manifest")
    p.add_argument("--run", required=True, help="run directory containing manifest.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra, argv)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CentroidAdaptError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
