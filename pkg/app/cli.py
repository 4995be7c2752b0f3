"""Command-line experiment runner.

    python -m app.cli run --strategy dictpfl --clients 3 --rounds 10 --out metrics.csv
    python -m app.cli dryrun --manifest manifests/vit_b.txt
    python -m app.cli synth --classes 2 --dim 2 --out blobs.bin --csv blobs.csv

Settings precedence: RunConfig defaults < --config file < flags < DICTPFL_SEED.
Exit codes: 0 success, 2 bad configuration or input, 3 protocol/runtime failure.
"""

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from app.core.config import Settings
from app.core.exceptions import DictPFLError, ParameterError
from app.dictpfl.netsim import dry_run_accounting, load_manifest
from app.dictpfl.protocol import metrics_csv, simulate
from app.dictpfl.trainer import save_dataset, synth_task
from app.schemas.schemas import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# flag destination -> RunConfig field
FLAG_FIELDS = {
    "strategy": "strategy",
    "clients": "clients",
    "rounds": "rounds",
    "rank": "rank",
    "prune": "prune",
    "tau": "tau",
    "beta": "beta",
    "alpha": "alpha",
    "lr": "lr",
    "seed": "seed",
    "backend": "backend",
    "net": "net",
    "threads": "threads",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "top_k": "top_k",
    "sae_fraction": "sae_fraction",
    "layout": "layout",
    "timing": "timing",
    "accounting": "accounting",
    "reactivation": "reactivation",
    "accumulate": "accumulate",
    "classes": "classes",
    "dim": "dim",
    "hidden": "hidden",
    "samples_per_class": "samples_per_class",
    "margin": "margin",
    "data": "data_path",
    "target_accuracy": "target_accuracy",
}


def parse_config_file(path: str) -> Dict[str, str]:
    """Flat key=value lines; '#' comments; keys may use '-' or '_'"""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged: Dict[str, object] = {}
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for dest, field in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            merged[field] = value
    env_seed = Settings().DICTPFL_SEED
    if env_seed is not None:
        merged["seed"] = env_seed
    return RunConfig(**merged)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # defaults stay None so only given flags override the file
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--strategy", choices=["dictpfl", "full", "topk", "sae", "plaintext"])
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--prune", type=float, help="prune fraction s")
    p.add_argument("--tau", type=int, help="pruning patience")
    p.add_argument("--beta", type=float, help="reactivation decay factor")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration; 'inf' for homogeneous")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["mock", "toy-rlwe"])
    p.add_argument("--net", choices=["lan", "wan"])
    p.add_argument("--threads", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--sae-fraction", dest="sae_fraction", type=float)
    p.add_argument("--layout", choices=["compact", "dense"])
    p.add_argument("--timing", choices=["modeled", "measured"])
    p.add_argument("--accounting", choices=["production", "backend"], help="HE parameters used for byte counts")
    p.add_argument("--no-reactivation", dest="reactivation", action="store_const", const=False)
    p.add_argument("--no-accumulate", dest="accumulate", action="store_const", const=False)
    p.add_argument("--classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--data", help="binary dataset file instead of the synthetic task")
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dictpfl", description="DictPFL federated learning simulator")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train with a strategy and emit per-round metrics")
    _add_run_flags(run)
    run.add_argument("--out", help="CSV path (stdout if omitted)")

    dry = sub.add_parser("dryrun", help="analytic per-strategy communication cost")
    _add_run_flags(dry)
    dry.add_argument("--manifest", required=True, help="layer shapes, one 'name n m' per line")
    dry.add_argument("--out", help="CSV path (stdout if omitted)")

    synth = sub.add_parser("synth", help="write a synthetic blob dataset")
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--dim", type=int, default=32)
    synth.add_argument("--samples-per-class", dest="samples_per_class", type=int, default=150)
    synth.add_argument("--margin", type=float, default=3.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="binary dataset path")
    synth.add_argument("--csv", help="optional CSV export (features..., label)")
    return parser


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    rows, summary = simulate(config)
    _emit(metrics_csv(rows), args.out)
    print(summary.line(), file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def dryrun_csv(costs: Dict[str, object]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    rows: List[dict] = [cost.as_row() for cost in costs.values()]
    writer.writerow(list(rows[0].keys()))
    for row in rows:
        writer.writerow(list(row.values()))
    return buffer.getvalue()


def cmd_dryrun(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = load_manifest(args.manifest)
    costs = dry_run_accounting(
        manifest, rank=config.rank, s=config.prune, top_k=config.top_k, sae_fraction=config.sae_fraction,
    )
    _emit(dryrun_csv(costs), args.out)
    full, ours = costs["full"], costs["dictpfl"]
    print(
        f"reduction elements={full.encrypted_elements / max(ours.encrypted_elements, 1):.1f}x "
        f"bytes={full.ciphertext_bytes / max(ours.ciphertext_bytes, 1):.1f}x",
        file=sys.stderr if not args.out else sys.stdout,
    )
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = synth_task(args.classes, args.dim, args.samples_per_class, args.seed, margin=args.margin)
    save_dataset(dataset, args.out)
    if args.csv:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\r\n")
        writer.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for features, label in zip(dataset.features, dataset.labels):
            writer.writerow([format(v, ".12g") for v in features] + [int(label)])
        Path(args.csv).write_text(buffer.getvalue(), encoding="utf-8", newline="")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "dryrun": cmd_dryrun, "synth": cmd_synth}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or Settings().LOG_LEVEL).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParameterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DictPFLError as exc:
        logger.error("run aborted: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
