"""``egograph`` command line: generate, train, visualize, stats.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import subprocess
import sys
import time
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .critical import AttentionProbe, export_csv, export_dot, fit_attention_probe, visualize
from .errors import ConfigurationError, DatasetConsistencyError, DatasetFormatError, EgoGraphError, InsufficientDataError
from .graph import degree_histogram, parse_benchmark_dataset, power_law_fit, write_benchmark_dataset
from .io_utils import atomic_write_bytes, atomic_write_csv, atomic_write_text
from .model import ModelConfig, cross_validate, load_model, save_model
from .synth import build_alcohol_dataset, build_isomer_dataset, build_kronecker_dataset

log = logging.getLogger("egograph")

DEFAULT_SIZES = {"alcohol": (6, 20), "isomer": (9, 15), "kronecker": (6, 8)}


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit code 2)."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Manifest:
    """Run record written before any heavy work and finalized on success."""

    def __init__(self, path: Path, command: str, argv: list[str], config: dict, seed: int | None):
        self.path = path
        self.data = {"command": command, "argv": argv, "config": config, "seed": seed, "version": version_string(),
                     "started": _now(), "finished": None, "status": "running", "outputs": []}
        self._write()

    def _write(self):
        atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, outputs: list[Path], **extra):
        missing = [str(p) for p in outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"declared outputs were not written: {missing}")
        self.data.update(extra, outputs=[str(p) for p in outputs], finished=_now(), status="complete")
        self._write()


def _parse_range(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if a > b or a < 1:
        raise argparse.ArgumentTypeError(f"empty or invalid range {text!r}")
    return a, b


def _existing_dir(text: str) -> Path:
    p = Path(text)
    if not p.is_dir():
        raise UsageError(f"data directory {text!r} does not exist")
    return p


# -- commands ------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    sizes = args.sizes or DEFAULT_SIZES[args.kind]
    cfg = {"kind": args.kind, "sizes": list(sizes), "per_class": args.per_class,
           "include_hydrogens": not args.no_hydrogens}
    manifest = Manifest(out / "manifest.json", "generate", args.argv, cfg, args.seed)
    if args.kind == "alcohol":
        d = build_alcohol_dataset(sizes, args.per_class, args.seed, not args.no_hydrogens)
    elif args.kind == "isomer":
        d = build_isomer_dataset(sizes, args.per_class, args.seed, not args.no_hydrogens)
    else:
        d = build_kronecker_dataset(sizes, args.per_class, args.seed)
    write_benchmark_dataset(d, out)
    files = sorted(out.glob(f"{d.name}_*.txt"))
    manifest.finish(files, graphs=len(d), classes=d.num_classes)
    print(f"wrote {len(d)} graphs ({d.num_classes} classes) to {out}")
    return 0


def load_config(path: Path) -> ModelConfig:
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {str(path)!r} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a mapping")
    return ModelConfig.from_dict(raw)


def cmd_train(args) -> int:
    data_dir = _existing_dir(args.data)
    cfg = load_config(Path(args.config))
    if args.tied:
        cfg.tied = True
    cfg.validate()
    out = Path(args.out)
    manifest = Manifest(out / "manifest.json", "train", args.argv, cfg.to_dict(), cfg.seed)
    dataset = parse_benchmark_dataset(data_dir)
    config_path = atomic_write_text(out / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    model_paths: list[Path] = []

    def on_fold(f, m):
        model_paths.append(save_model(m, out / "models" / f"fold{f:02d}.egocnn"))

    report = cross_validate(cfg, dataset, folds=args.folds, on_fold=on_fold)
    metrics = atomic_write_csv(out / "metrics.csv", ["fold", "epoch", "split", "loss", "accuracy"],
                               [(r["fold"], r["epoch"], r["split"], repr(r["loss"]), repr(r["accuracy"]))
                                for r in report.rows])
    cv = atomic_write_csv(out / "cv_report.csv", ["fold", "accuracy", "parameter_count"],
                          [(f, repr(a), report.parameter_count) for f, a in enumerate(report.fold_accuracies)])
    manifest.finish([config_path, metrics, cv, *model_paths], summary={
        "mean_accuracy": report.mean, "std": report.std, "parameter_count": report.parameter_count,
        "wall_time": report.wall_time, "fold_accuracies": report.fold_accuracies})
    print(report.summary_line())
    return 0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_or_fit_probe(model_path: Path, m, dataset, epochs: int = 300) -> AttentionProbe:
    """Probe weights live beside the model, keyed by the model file's hash."""
    sidecar = model_path.with_name(model_path.name + ".probe.npz")
    digest = _sha256(model_path)
    if sidecar.exists():
        with np.load(sidecar) as z:
            if str(z["model_sha256"]) == digest:
                log.info("using cached probe %s", sidecar)
                return AttentionProbe(z["score_w"], z["head_w"], z["head_b"])
    probe = fit_attention_probe(m, dataset, epochs=epochs, seed=m.config.seed)
    buf = io.BytesIO()
    np.savez(buf, model_sha256=np.array(digest), **probe.to_arrays())
    atomic_write_bytes(sidecar, buf.getvalue())
    return probe


def cmd_visualize(args) -> int:
    data_dir = _existing_dir(args.data)
    model_path = Path(args.model)
    if not model_path.is_file():
        raise UsageError(f"model file {args.model!r} does not exist")
    if args.threshold is not None and args.threshold < 0:
        raise UsageError("--threshold must be >= 0")
    out = Path(args.out)
    manifest = Manifest(out.with_name(out.name + ".manifest.json"), "visualize", args.argv,
                        {"model": str(model_path), "graph": args.graph, "threshold": args.threshold}, None)
    m = load_model(model_path)
    dataset = parse_benchmark_dataset(data_dir)
    if not 0 <= args.graph < len(dataset):
        raise UsageError(f"graph index {args.graph} outside 0..{len(dataset) - 1}")
    probe = load_or_fit_probe(model_path, m, dataset)
    g = dataset.graphs[args.graph]
    cs = visualize(m, probe, g, args.threshold)
    names = dict(enumerate(args.label_names.split(","))) if args.label_names else None
    dot = export_dot(cs, out, names)
    nodes_csv, edges_csv = export_csv(cs, out.with_suffix(".nodes.csv"), out.with_suffix(".edges.csv"))
    sidecar = model_path.with_name(model_path.name + ".probe.npz")
    manifest.finish([dot, nodes_csv, edges_csv, sidecar])
    top = int(np.argmax(cs.gamma))
    print(f"graph {args.graph}: {g.node_count} nodes, max attention on node {top} ({cs.gamma[top]:.3f}); wrote {dot}")
    return 0


def cmd_stats(args) -> int:
    d = parse_benchmark_dataset(_existing_dir(args.data))
    hist = degree_histogram(d)
    print(f"graphs: {len(d)}")
    print("classes: " + ", ".join(f"{c}={n}" for c, n in sorted(Counter(d.class_labels).items())))
    print("degree histogram: " + json.dumps({str(k): v for k, v in hist.items()}))
    if args.power_law:
        try:
            alpha, r2 = power_law_fit(hist)
            print(f"power-law exponent: {alpha:.4f}  r^2: {r2:.4f}")
        except InsufficientDataError as exc:
            print(f"power-law fit: insufficient data ({exc})")
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egograph", description="Ego-CNN graph classification toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset in benchmark format")
    g.add_argument("--kind", required=True, choices=sorted(DEFAULT_SIZES))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", type=_parse_range, help="carbon range (compounds) or power range (kronecker), A..B")
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--no-hydrogens", action="store_true", help="heavy atoms only")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="k-fold cross-validation of an Ego-CNN")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--folds", type=int, default=10)
    t.add_argument("--tied", action="store_true", help="share one filter bank across ego layers")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("visualize", help="critical structure of one graph as DOT")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--graph", type=int, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--threshold", type=float)
    v.add_argument("--label-names", help="comma-separated names for node labels 0,1,..., e.g. C,H,O")
    v.set_defaults(func=cmd_visualize)

    s = sub.add_parser("stats", help="graph count, class and degree histograms")
    s.add_argument("--data", required=True)
    s.add_argument("--power-law", action="store_true")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"egograph {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, DatasetConsistencyError) as exc:
        print(f"egograph {args.command}: bad dataset: {exc}", file=sys.stderr)
        return 2
    except (EgoGraphError, OSError, RuntimeError, ValueError) as exc:
        print(f"egograph {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
