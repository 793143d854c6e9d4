"""Command-line entry point: synth, train, index, retrieve, eval, ablate, plot.

Every command is re-runnable: outputs are functions of inputs plus explicit
seeds. Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from .bank import DomainId, GeneratorBank, NetworkConfig
from .data import ToySceneSpec, generate_toy_dataset, load_manifest
from .errors import (CheckpointError, ConfigError, ImageReadError,
                     IndexFormatError, ManifestError, ShapeError,
                     SliceNotFoundError, TrainingDivergedError)
from .evaluate import (PrecisionRegimes, evaluate, load_retrieval_log,
                       report_from_retrievals)
from .index import build_index, load_index, retrieve, save_index
from .losses import LossWeights
from .trainer import TrainConfig, fit, load_checkpoint

USAGE_ERROR, DATA_ERROR, DIVERGED = 1, 2, 3

_NETWORK_KEYS = ("base_channels", "downsample_stages", "encoder_res_blocks",
                 "decoder_res_blocks", "discriminator_layers")
_TRAIN_KEYS = ("n_domains", "epochs_constant", "epochs_decay", "base_lr",
               "lambda2_start", "lambda2_end", "fcl_start_epoch", "fcl_metric",
               "batch_size", "crop_size", "scale_size", "seed", "pool_size")


def load_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    """Flat YAML key/value file mirroring TrainConfig; overrides win."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} is not a key/value mapping")
    raw.update(overrides or {})

    known = set(_TRAIN_KEYS) | set(_NETWORK_KEYS) | {"lambda1", "lambda2",
                                                     "input_size"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    net_kwargs = {k: raw[k] for k in _NETWORK_KEYS if k in raw}
    if "input_size" in raw:
        net_kwargs["input_size"] = tuple(raw["input_size"])
    weights = LossWeights(lambda1=float(raw.get("lambda1", 10.0)),
                          lambda2=float(raw.get("lambda2", 0.0)))
    train_kwargs = {k: raw[k] for k in _TRAIN_KEYS if k in raw}
    return TrainConfig(weights=weights, network=NetworkConfig(**net_kwargs),
                       **train_kwargs)


def bank_from_checkpoint(path: str | Path) -> tuple[GeneratorBank, dict]:
    payload = load_checkpoint(path)
    net = payload["config"]["network"]
    config = NetworkConfig(input_size=tuple(net["input_size"]),
                           **{k: net[k] for k in _NETWORK_KEYS})
    domains = [DomainId(index=i, name=n) for i, n in payload["domains"]]
    bank = GeneratorBank(config, domains)
    bank.load_state_arrays(payload["arrays"])
    for module in (*bank.encoders.values(), *bank.decoders.values()):
        module.eval()
    return bank, payload


def _parse_pca(text: str):
    if text == "none":
        return None
    if text == "slice":
        return "slice"
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"--pca must be none, slice or an integer, got {text!r}")


def _parse_set(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set wants key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = ToySceneSpec(n_places=args.places, n_domains=args.domains,
                        image_size=args.size,
                        pose_jitter=(args.jitter_pos, args.jitter_rot),
                        seed=args.seed)
    manifest = generate_toy_dataset(spec, args.out)
    print(f"wrote {len(manifest.records)} records "
          f"({len(manifest.references())} reference, "
          f"{len(manifest.queries())} query) to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_fcl:
        overrides["fcl_start_epoch"] = None
        overrides["lambda2"] = 0.0
    cfg = load_train_config(args.config, overrides)
    manifest = load_manifest(args.manifest)
    trainer = fit(manifest, cfg, resume_from=args.resume, out_dir=args.out,
                  checkpoint_every=args.checkpoint_every, log_path=args.log)
    print(f"trained to epoch {trainer.state.epoch}; "
          f"checkpoints in {args.out}")
    return 0


def cmd_index(args) -> int:
    bank, _ = bank_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    index = build_index(bank, manifest, metric=args.metric,
                        pca_spec=_parse_pca(args.pca))
    save_index(index, args.out)
    print(f"indexed {index.count} references "
          f"({args.metric}, pca={args.pca}) -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    bank, _ = bank_from_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    index = load_index(args.index)
    queries = manifest.queries()
    if args.query is not None:
        queries = [q for q in queries if q.id == args.query]
        if not queries:
            raise ManifestError(f"no query record with id {args.query!r}")
    writer = csv.writer(sys.stdout)
    writer.writerow(["query_id", "rank", "image_id", "distance"])
    for q in queries:
        for rank, (rid, dist) in enumerate(
                retrieve(index, bank, q, top_k=args.top_k), start=1):
            writer.writerow([q.id, rank, rid, repr(dist)])
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    regimes = PrecisionRegimes()
    if args.from_log:
        records = load_retrieval_log(args.from_log)
        slices = {q.id: q.slice for q in manifest.queries()}
        report = report_from_retrievals(records, slices, n_skipped=0,
                                        regimes=regimes)
    else:
        if not args.index or not args.checkpoint:
            raise ConfigError("eval needs --index and --checkpoint "
                              "(or --from-log)")
        bank, _ = bank_from_checkpoint(args.checkpoint)
        index = load_index(args.index)
        report = evaluate(index, bank, manifest, regimes, log_path=args.log)
    print(report.to_text())
    if args.report:
        report.save_csv(args.report)
    if args.history:
        new = not Path(args.history).exists()
        with open(args.history, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["epoch", "hp", "mp", "cp"])
            writer.writerow([args.epoch,
                             *[repr(a) for a in report.per_regime_accuracy]])
    return 0


@dataclass
class AblationSpec:
    """Grid of training variants crossed with retrieval settings."""

    train_cells: list[tuple[str | None, float]]   # (fcl metric or None, lambda2)
    test_metrics: list[str]
    pca_specs: list

    def __post_init__(self):
        if not (self.train_cells and self.test_metrics and self.pca_specs):
            raise ConfigError("ablation grid must be non-empty")

    def cells(self):
        for train_metric, lam2 in self.train_cells:
            for test_metric in self.test_metrics:
                for pca in self.pca_specs:
                    yield train_metric, lam2, test_metric, pca


def run_ablation(manifest, cfg: TrainConfig, spec: AblationSpec,
                 out_dir: Path, fcl_epochs: int) -> list[dict]:
    """Train the shared base once, fine-tune one variant per training cell,
    then evaluate every (test metric, PCA) combination."""
    from dataclasses import replace

    out_dir.mkdir(parents=True, exist_ok=True)
    base_cfg = replace(cfg, fcl_start_epoch=None,
                       weights=LossWeights(cfg.weights.lambda1, 0.0))
    base_dir = out_dir / "base"
    fit(manifest, base_cfg, out_dir=base_dir)
    base_ckpt = base_dir / f"epoch_{base_cfg.total_epochs:04d}.ckpt"

    variant_ckpts: dict[tuple[str | None, float], Path] = {}
    for train_metric, lam2 in spec.train_cells:
        tag = "none" if train_metric is None else f"{train_metric}_{lam2}"
        var_dir = out_dir / f"variant_{tag}"
        total = base_cfg.total_epochs + fcl_epochs
        if train_metric is None:
            var_cfg = replace(base_cfg, epochs_constant=total, epochs_decay=0)
        else:
            var_cfg = replace(base_cfg, epochs_constant=total, epochs_decay=0,
                              fcl_start_epoch=base_cfg.total_epochs,
                              fcl_metric=train_metric,
                              lambda2_start=lam2, lambda2_end=lam2)
        fit(manifest, var_cfg, resume_from=base_ckpt, out_dir=var_dir)
        variant_ckpts[(train_metric, lam2)] = var_dir / f"epoch_{total:04d}.ckpt"

    rows = []
    for train_metric, lam2, test_metric, pca in spec.cells():
        bank, _ = bank_from_checkpoint(variant_ckpts[(train_metric, lam2)])
        index = build_index(bank, manifest, metric=test_metric, pca_spec=pca)
        report = evaluate(index, bank, manifest)
        rows.append({
            "train": train_metric or "none",
            "lambda2": lam2,
            "test": test_metric,
            "pca": "none" if pca is None else str(pca),
            "accuracy": report.per_regime_accuracy,
        })
    return rows


def cmd_ablate(args) -> int:
    cfg = load_train_config(args.config, _parse_set(args.set or []))
    manifest = load_manifest(args.manifest)

    train_cells: list[tuple[str | None, float]] = [(None, 0.0)]
    for metric in args.train_metric or ["l2"]:
        for lam2 in args.lambda2 or [0.1]:
            train_cells.append((metric, lam2))
    spec = AblationSpec(train_cells=train_cells,
                        test_metrics=args.test_metric or ["cosine", "l2"],
                        pca_specs=[_parse_pca(p) for p in (args.pca or ["none"])])
    rows = run_ablation(manifest, cfg, spec, Path(args.out),
                        args.fcl_epochs if args.fcl_epochs is not None
                        else cfg.total_epochs)

    writer = csv.writer(sys.stdout)
    writer.writerow(["train", "lambda2", "test", "pca", "hp", "mp", "cp"])
    out_rows = []
    for row in rows:
        cols = [row["train"], row["lambda2"], row["test"], row["pca"],
                *[f"{a:.1f}" for a in row["accuracy"]]]
        writer.writerow(cols)
        out_rows.append(cols)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["train", "lambda2", "test", "pca", "hp", "mp", "cp"])
            w.writerows(out_rows)
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    trials = []
    for path in args.history:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [(int(r["epoch"]), float(r["hp"]), float(r["mp"]),
                     float(r["cp"])) for r in reader]
        if not rows:
            raise ManifestError(f"history file {path} has no rows")
        rows.sort()
        trials.append((Path(path).stem, rows))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    colors = ["tab:blue", "tab:red", "tab:green", "tab:orange", "tab:purple"]
    markers = [("hp", "o"), ("mp", "s"), ("cp", "D")]
    for t, (label, rows) in enumerate(trials):
        epochs = [r[0] for r in rows]
        for k, (regime, marker) in enumerate(markers):
            ax.plot(epochs, [r[k + 1] for r in rows],
                    color=colors[t % len(colors)], marker=marker,
                    markersize=4, linewidth=1.2,
                    label=f"{label} {regime.upper()}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("localization accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120, metadata={"Software": None})
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="difl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the procedural toy benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--places", type=int, default=50)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter-pos", type=float, default=0.2)
    p.add_argument("--jitter-rot", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the translation model")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-fcl", action="store_true",
                   help="force lambda2 = 0 (baseline trial)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log", help="per-iteration loss log CSV")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="pre-encode references into an index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["cosine", "l2"], default="cosine")
    p.add_argument("--pca", default="none", help="none, slice, or integer k")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="rank references for queries")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query", help="single query id (default: all)")
    p.add_argument("--top-k", type=int, default=1)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="localization benchmark report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index")
    p.add_argument("--checkpoint")
    p.add_argument("--from-log", help="recompute from a saved retrieval log")
    p.add_argument("--report", help="write report CSV here")
    p.add_argument("--log", help="write retrieval log CSV here")
    p.add_argument("--history", help="append epoch,hp,mp,cp to this CSV")
    p.add_argument("--epoch", type=int, default=0,
                   help="epoch column for --history")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/test metric and PCA grid")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-metric", action="append", choices=["l2", "cosine"])
    p.add_argument("--lambda2", action="append", type=float)
    p.add_argument("--test-metric", action="append", choices=["cosine", "l2"])
    p.add_argument("--pca", action="append")
    p.add_argument("--fcl-epochs", type=int)
    p.add_argument("--report", help="write grid CSV here")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="accuracy-vs-epoch curves")
    p.add_argument("history", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ManifestError, IndexFormatError, ImageReadError, CheckpointError,
            ShapeError, SliceNotFoundError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DIVERGED


if __name__ == "__main__":
    sys.exit(main())
