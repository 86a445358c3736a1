"""Command line interface.

Subcommands: synth, train, embed, eval, gradcheck, ablate. Training options
resolve with flag > config file > built-in default; the config file is flat
`key = value` text selected by --config or the SKYREID_CONFIG environment
variable. Exit codes: 0 success, 1 usage or validation, 2 data or file
format, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import statistics
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .evaluation import (
    EmbeddingFormatError,
    PROTOCOLS,
    embed_records,
    evaluate_all,
    evaluate_protocol,
    format_report,
    machine_report,
    read_embeddings,
    write_embeddings,
)
from .gradcheck import COMPONENTS, TOLERANCE, run_gradcheck
from .synth import ManifestError, SynthConfig, dataset_checksum, generate_dataset, read_manifest
from .trainer import (
    ABLATION_LADDER,
    TrainConfig,
    TrainingDivergedError,
    load_model_for_eval,
    run_ablation,
    split_by_identity,
    train,
)

CONFIG_ENV_VAR = "SKYREID_CONFIG"


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    items = tuple(int(x) for x in text.split(",") if x.strip())
    if not items:
        raise ValueError(f"empty integer list: {text!r}")
    return items


_FIELD_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "tuple[int, ...]": _parse_int_tuple,
}


def _config_fields() -> list[tuple[str, object]]:
    out = []
    for f in fields(TrainConfig):
        parser = _FIELD_PARSERS.get(str(f.type))
        if parser is None:
            raise RuntimeError(f"unhandled config field type {f.type!r} for {f.name}")
        out.append((f.name, parser))
    return out


def load_config_file(path: str | Path) -> dict[str, object]:
    """Parse flat `key = value` lines into typed TrainConfig overrides."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"config file not found: {path}")
    parsers = dict(_config_fields())
    out: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in parsers:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = parsers[key](value)
        except ValueError as e:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return out


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training configuration (override config file)")
    for name, value_parser in _config_fields():
        flag = "--" + name.replace("_", "-")
        if value_parser is _parse_bool:
            group.add_argument(
                flag, default=None, type=_parse_bool, metavar="BOOL", help=f"{name} (true/false)"
            )
        elif value_parser is _parse_int_tuple:
            group.add_argument(flag, default=None, type=_parse_int_tuple, metavar="N,N,...")
        else:
            group.add_argument(flag, default=None, type=value_parser)


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then config file (flag or environment), then explicit flags."""
    overrides: dict[str, object] = {}
    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    if config_path:
        overrides.update(load_config_file(config_path))
    for name, _ in _config_fields():
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    try:
        config = TrainConfig(**overrides)
        config.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return config


def _cmd_synth(args: argparse.Namespace) -> int:
    config = SynthConfig(
        num_identities=args.identities,
        tracklets_per_cell=args.tracklets_per_cell,
        frames_per_tracklet=args.frames,
        sessions=args.sessions,
        height=args.height,
        width=args.width,
        noise_std=args.noise_std,
        blur_aerial=args.blur,
        occlusion_prob=args.occlusion,
        seed=args.seed,
    )
    try:
        config.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    records = generate_dataset(config, args.out)
    print(f"wrote {len(records)} tracklets under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'}")
    print(f"checksum: {dataset_checksum(records)}")
    return 0


def _split_for_training(records, train_identities: int):
    if train_identities <= 0:
        return records
    train_records, _ = split_by_identity(records, train_identities)
    return train_records


def _cmd_train(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    records = read_manifest(args.data)
    if not records:
        raise ManifestError(f"{args.data}: manifest is empty")
    records = _split_for_training(records, args.train_identities)
    result = train(config, records, out_dir=args.out, resume_from=args.resume)
    last = result.log_rows[-1]
    print(f"trained {config.epochs} epochs on {len(records)} tracklets")
    print(f"final losses: total {last.total:.4f} tri {last.triplet:.4f} id {last.identity:.4f} me {last.memory:.4f} alpha {last.alpha:.4f}")
    if result.metrics_path is not None:
        print(f"metrics: {result.metrics_path}")
    for path in result.checkpoint_paths:
        print(f"checkpoint: {path}")
    return 0


def _cmd_embed(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    records = read_manifest(args.data)
    if not records:
        raise ManifestError(f"{args.data}: manifest is empty")
    model = load_model_for_eval(args.checkpoint, config)
    embeddings = embed_records(model, records)
    write_embeddings(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings of dim {embeddings[0].vector.size} to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    embeddings = read_embeddings(args.embeddings)
    if args.protocol == "all":
        results = evaluate_all(embeddings)
    else:
        results = {args.protocol: evaluate_protocol(embeddings, args.protocol)}
    if args.machine:
        for line in machine_report(results):
            print(line)
    else:
        print(format_report(results))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    errors = run_gradcheck(args.component or None, seed=args.seed)
    failed = False
    for name, err in errors.items():
        status = "PASS" if err <= TOLERANCE else "FAIL"
        failed = failed or status == "FAIL"
        print(f"{name:<12} max_rel_err {err:.3e} {status}")
    return 3 if failed else 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    records = read_manifest(args.data)
    if not records:
        raise ManifestError(f"{args.data}: manifest is empty")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    runs = run_ablation(config, records, args.train_identities, seeds=seeds)
    print(f"{'rung':<14} " + " ".join(f"seed{s:<4}" for s in seeds) + " median")
    lines = ["rung\tseed\tmap3\t" + "\t".join(PROTOCOLS)]
    for rung, _ in ABLATION_LADDER:
        per_seed = [r.map3 for r in runs if r.rung == rung]
        med = statistics.median(per_seed)
        print(f"{rung:<14} " + " ".join(f"{v:8.4f}" for v in per_seed) + f" {med:8.4f}")
        for r in runs:
            if r.rung == rung:
                lines.append(
                    f"{rung}\t{r.seed}\t{r.map3:.6f}\t"
                    + "\t".join(f"{r.protocol_map[p]:.6f}" for p in PROTOCOLS)
                )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skyreid", description=__doc__)
    parser.add_argument("--version", action="version", version=f"skyreid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--identities", type=int, default=32)
    p.add_argument("--tracklets-per-cell", type=int, default=6)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--height", type=int, default=56)
    p.add_argument("--width", type=int, default=28)
    p.add_argument("--noise-std", type=float, default=0.03)
    p.add_argument("--blur", type=int, default=2)
    p.add_argument("--occlusion", type=float, default=0.12, help="per-frame occlusion probability")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--data", required=True, help="path to manifest.tsv")
    p.add_argument("--out", required=True, help="output directory for metrics/checkpoints")
    p.add_argument("--config", help=f"config file (else ${CONFIG_ENV_VAR})")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument(
        "--train-identities",
        type=int,
        default=0,
        help="train on the first N identities only (0 = all)",
    )
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed tracklets with a trained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--config", help=f"config file (else ${CONFIG_ENV_VAR})")
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("eval", help="score an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--protocol", choices=[*PROTOCOLS, "all"], default="all")
    p.add_argument("--machine", action="store_true", help="tab-separated metric lines")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--component", action="append", choices=sorted(COMPONENTS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="run the component ablation ladder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="optional TSV output path")
    p.add_argument("--config", help=f"config file (else ${CONFIG_ENV_VAR})")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument(
        "--train-identities",
        type=int,
        required=True,
        help="first N identities train; the rest are the retrieval split",
    )
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ManifestError, CheckpointError, EmbeddingFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
