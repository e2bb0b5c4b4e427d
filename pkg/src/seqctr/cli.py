"""Command-line entry points: gen-data, pretrain, train, eval, ablate.

Every command resolves its options from (in order of precedence) explicit
flags, an optional key=value config file, and built-in defaults, then writes
a manifest of the fully resolved options next to its artifacts. Re-running a
command with ``--config <manifest>`` reproduces the run bit-exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Opt:
    name: str
    type: type
    default: object
    help: str


SCHEMAS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("out", str, None, "output directory for the bundle"),
        Opt("users", int, 2000, "number of users"),
        Opt("items", int, 1000, "number of items"),
        Opt("categories", int, 50, "number of categories"),
        Opt("train_size", int, 50_000, "training examples"),
        Opt("test_size", int, 10_000, "test examples"),
        Opt("seq_min", int, 30, "min behavior stream length"),
        Opt("seq_max", int, 120, "max behavior stream length"),
        Opt("max_seq_len", int, 200, "history truncation cap"),
        Opt("latent_dim", int, 8, "planted latent dimension"),
        Opt("markov_sharpness", float, 3.0, "category chain concentration"),
        Opt("self_loop_bonus", float, 1.5, "category self-transition bonus"),
        Opt("within_affinity", float, 5.0, "within-category choice sharpness"),
        Opt("target_follow_prob", float, 0.6, "shown target follows the chain"),
        Opt("alpha", float, 2.5, "click weight: static affinity"),
        Opt("beta", float, 2.5, "click weight: recency match"),
        Opt("recency_decay", float, 0.8, "recency decay per step"),
        Opt("click_bias", float, -1.0, "click logit bias"),
        Opt("click_noise", float, 0.4, "click logit noise std"),
        Opt("train_day_frac", float, 0.8, "fraction of stream in train days"),
        Opt("user_features", int, 3, "number of profile features"),
        Opt("user_buckets", int, 8, "buckets per profile feature"),
        Opt("seed", int, 0, "generator seed"),
    ],
    "pretrain": [
        Opt("data", str, None, "bundle directory"),
        Opt("out", str, None, "output directory"),
        Opt("mode", str, "cs+cd", "sampling+decoder: cs+cd|cs+sd|rs+cd|rs+sd"),
        Opt("epochs", int, 3, "pretraining epochs"),
        Opt("lr", float, 0.001, "Adam learning rate"),
        Opt("negatives", int, 10, "negatives per position"),
        Opt("batch_size", int, 1, "sequences per batch"),
        Opt("seed", int, 0, "run seed"),
    ],
    "train": [
        Opt("data", str, None, "bundle directory"),
        Opt("out", str, None, "output directory"),
        Opt("backbone", str, "dnn", "dnn|dcnv2|dcnv2_ta"),
        Opt("decoder", bool, False, "attach the decoder slot"),
        Opt("ps", bool, False, "share pretrained embeddings"),
        Opt("mi", bool, False, "inherit pretrained decoder"),
        Opt("pretrained", str, None, "pretrain checkpoint path"),
        Opt("epochs", int, 1, "CTR training epochs"),
        Opt("lr", float, 0.001, "Adam learning rate"),
        Opt("batch_size", int, 8, "examples per batch"),
        Opt("seed", int, 0, "run seed"),
    ],
    "eval": [
        Opt("data", str, None, "bundle directory"),
        Opt("model", str, None, "model checkpoint path"),
        Opt("split", str, "test", "test|train"),
        Opt("out", str, None, "optional directory for metrics.json"),
    ],
    "ablate": [
        Opt("data", str, None, "bundle directory"),
        Opt("out", str, None, "output directory"),
        Opt("backbones", str, "dnn,dcnv2,dcnv2_ta", "comma-separated backbones"),
        Opt("rows", str, "1,2,3,4,5,6,7,8", "comma-separated configuration rows"),
        Opt("seeds", int, 5, "independent repetitions per cell"),
        Opt("workers", int, 0, "parallel workers (0 = auto)"),
        Opt("pretrain_epochs", int, 3, "pretraining epochs"),
        Opt("epochs", int, 1, "CTR training epochs"),
        Opt("lr", float, 0.001, "Adam learning rate"),
        Opt("negatives", int, 10, "negatives per position"),
        Opt("batch_size", int, 8, "CTR batch size"),
        Opt("pretrain_batch_size", int, 1, "pretraining batch size"),
        Opt("seed", int, 0, "base seed for derived run seeds"),
        Opt("save_models", bool, True, "write per-run model checkpoints"),
    ],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="seqctr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"seqctr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in SCHEMAS.items():
        sp = sub.add_parser(cmd, help=f"{cmd} command")
        sp.add_argument("--config", type=str, default=None, help="key=value config file; flags win")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.type is bool:
                sp.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=opt.help)
            else:
                sp.add_argument(flag, type=opt.type, default=None, help=opt.help)
    return parser


def _parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value", EXIT_USAGE)
        out[key.strip()] = value.strip()
    return out


def _coerce(opt: Opt, raw: str):
    if opt.type is bool:
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise CliError(f"option {opt.name}: expected boolean, got {raw!r}", EXIT_USAGE)
    if raw == "none":
        return None
    return opt.type(raw)


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge CLI flags over config-file values over schema defaults."""
    file_cfg = _parse_config_file(args.config) if args.config else {}
    known = {o.name: o for o in SCHEMAS[command]}
    for key in file_cfg:
        if key not in known and key != "command":
            raise CliError(f"unknown config key {key!r} for {command}", EXIT_USAGE)
    resolved = {}
    for opt in SCHEMAS[command]:
        cli_val = getattr(args, opt.name)
        if cli_val is not None:
            resolved[opt.name] = cli_val
        elif opt.name in file_cfg:
            resolved[opt.name] = _coerce(opt, file_cfg[opt.name])
        else:
            resolved[opt.name] = opt.default
    return resolved


def write_manifest(out_dir: Path, command: str, resolved: dict, timings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# seqctr {__version__} manifest", f"command={command}"]
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={'none' if value is None else value}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    info = {"version": __version__, **timings}
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _require(resolved: dict, *names: str) -> None:
    for name in names:
        if resolved[name] is None:
            raise CliError(f"missing required option --{name.replace('_', '-')}", EXIT_USAGE)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(resolved: dict) -> int:
    from .data import GeneratorConfig, generate, save_bundle

    _require(resolved, "out")
    try:
        config = GeneratorConfig(
            n_users=resolved["users"],
            n_items=resolved["items"],
            n_categories=resolved["categories"],
            n_train=resolved["train_size"],
            n_test=resolved["test_size"],
            seq_len_min=resolved["seq_min"],
            seq_len_max=resolved["seq_max"],
            max_seq_len=resolved["max_seq_len"],
            latent_dim=resolved["latent_dim"],
            markov_sharpness=resolved["markov_sharpness"],
            self_loop_bonus=resolved["self_loop_bonus"],
            within_affinity=resolved["within_affinity"],
            target_follow_prob=resolved["target_follow_prob"],
            alpha=resolved["alpha"],
            beta=resolved["beta"],
            recency_decay=resolved["recency_decay"],
            click_bias=resolved["click_bias"],
            click_noise=resolved["click_noise"],
            train_day_frac=resolved["train_day_frac"],
            n_user_features=resolved["user_features"],
            user_feature_buckets=resolved["user_buckets"],
            seed=resolved["seed"],
        )
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from None
    t0 = time.time()
    bundle, _, report = generate(config)
    out = Path(resolved["out"])
    save_bundle(bundle, out, report)
    write_manifest(out, "gen-data", resolved, {"generate_seconds": time.time() - t0})
    print(
        f"wrote bundle to {out}: {len(bundle.train)} train / {len(bundle.test)} test / "
        f"{len(bundle.pretrain)} pretrain records"
    )
    print(
        f"oracle auc (test) {report.oracle_auc_test:.4f}, base rate {report.base_rate_test:.3f}, "
        f"cs-feasible positions {report.cs_feasible_frac:.4f}"
    )
    return EXIT_OK


def cmd_pretrain(resolved: dict) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_bundle
    from .pretrain import PretrainConfig, pretrain

    _require(resolved, "data", "out")
    bundle = load_bundle(resolved["data"])
    try:
        cfg = PretrainConfig(
            mode=resolved["mode"],
            epochs=resolved["epochs"],
            lr=resolved["lr"],
            k_negatives=resolved["negatives"],
            batch_size=resolved["batch_size"],
            seed=resolved["seed"],
        )
    except ValueError as err:
        raise CliError(str(err), EXIT_USAGE) from None
    t0 = time.time()
    result = pretrain(bundle.pretrain, bundle.cat_item_table, bundle.vocab, cfg)
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    arrays = {f"emb.{n}": t.weights.data for n, t in result.tables.items()}
    arrays.update({f"dec.{n}": p.data for n, p in result.dec_params.items()})
    meta = {
        "kind": "pretrain",
        "mode": cfg.mode,
        "n_items": str(bundle.vocab.n_items),
        "n_categories": str(bundle.vocab.n_categories),
    }
    meta.update(result.dec_cfg.meta())
    save_checkpoint(out / "pretrained.ckpt", arrays, meta)
    with (out / "pretrain_log.jsonl").open("w") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(out, "pretrain", resolved, {"train_seconds": time.time() - t0})
    for entry in result.log:
        print(
            f"epoch {entry['epoch']}: mean_loss {entry['mean_loss']:.6f} "
            f"(cs fallbacks {entry['cs_fallback_count']})"
        )
    print(f"checkpoint: {out / 'pretrained.ckpt'}")
    return EXIT_OK


def cmd_train(resolved: dict) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_bundle
    from .decoder import DecoderConfig
    from .integration import (
        CtrModel,
        IntegrationConfig,
        IntegrationError,
        TrainConfig,
        apply_transfers,
        evaluate,
        train_ctr,
    )

    _require(resolved, "data", "out")
    if (resolved["ps"] or resolved["mi"]) and not resolved["pretrained"]:
        raise CliError("--ps/--mi require --pretrained <checkpoint>", EXIT_USAGE)
    pre_mode = None
    if resolved["pretrained"]:
        meta, _ = load_checkpoint(resolved["pretrained"])
        pre_mode = meta.get("mode")
    try:
        cfg = IntegrationConfig(
            backbone=resolved["backbone"],
            decoder_attached=resolved["decoder"] or resolved["mi"],
            ps=resolved["ps"],
            mi=resolved["mi"],
            pretrain_mode=pre_mode if (resolved["ps"] or resolved["mi"]) else None,
        )
        cfg.validate()
    except (IntegrationError, ValueError) as err:
        raise CliError(str(err), EXIT_USAGE) from None
    bundle = load_bundle(resolved["data"])
    t0 = time.time()
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(resolved["seed"])))
    model = CtrModel(bundle.vocab, cfg, rng, DecoderConfig())
    try:
        apply_transfers(model, resolved["pretrained"] if (cfg.ps or cfg.mi) else None)
    except IntegrationError as err:
        raise CliError(str(err), EXIT_USAGE) from None
    train_cfg = TrainConfig(
        epochs=resolved["epochs"], lr=resolved["lr"], batch_size=resolved["batch_size"]
    )
    log = train_ctr(model, bundle.train, train_cfg, rng)
    res = evaluate(model, bundle.test)
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt")
    metrics = {
        "train_initial_loss": log.initial_loss,
        "train_epoch_losses": log.epoch_losses,
        "test_auc": res.auc,
        "test_logloss": res.logloss,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", resolved, {"train_seconds": time.time() - t0})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(resolved: dict) -> int:
    from .data import load_bundle
    from .integration import evaluate, load_model

    _require(resolved, "data", "model")
    if resolved["split"] not in ("test", "train"):
        raise CliError("--split must be test or train", EXIT_USAGE)
    bundle = load_bundle(resolved["data"])
    model = load_model(resolved["model"])
    examples = bundle.test if resolved["split"] == "test" else bundle.train
    res = evaluate(model, examples)
    metrics = {"split": resolved["split"], "auc": res.auc, "logloss": res.logloss, "n": res.n}
    if resolved["out"]:
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "eval", resolved, {})
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_ablate(resolved: dict) -> int:
    from .ablation import ROWS, MatrixConfig, run_ablation
    from .report import render_figures, render_pretrain_curves, render_text_table, write_records_jsonl, write_tsv

    _require(resolved, "data", "out")
    backbones = tuple(b.strip() for b in resolved["backbones"].split(",") if b.strip())
    try:
        rows = tuple(int(r) for r in resolved["rows"].split(",") if r.strip())
    except ValueError:
        raise CliError(f"bad --rows value {resolved['rows']!r}", EXIT_USAGE) from None
    bad = [r for r in rows if r not in ROWS]
    if bad:
        raise CliError(f"unknown configuration rows {bad}; valid rows are 1-8", EXIT_USAGE)
    from .backbones import BACKBONE_KINDS

    bad_b = [b for b in backbones if b not in BACKBONE_KINDS]
    if bad_b:
        raise CliError(f"unknown backbones {bad_b}", EXIT_USAGE)
    workers = resolved["workers"] or min(8, os.cpu_count() or 1)
    cfg = MatrixConfig(
        backbones=backbones,
        rows=rows,
        n_seeds=resolved["seeds"],
        base_seed=resolved["seed"],
        pretrain_epochs=resolved["pretrain_epochs"],
        ctr_epochs=resolved["epochs"],
        lr=resolved["lr"],
        k_negatives=resolved["negatives"],
        batch_size=resolved["batch_size"],
        pretrain_batch_size=resolved["pretrain_batch_size"],
        workers=workers,
        save_models=resolved["save_models"],
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    records, cells = run_ablation(resolved["data"], out, cfg)
    elapsed = time.time() - t0

    write_records_jsonl(out / "results.jsonl", records)
    write_tsv(out / "results.tsv", cells)
    table = render_text_table(cells, list(backbones))
    (out / "results.txt").write_text(table)
    render_figures(out / "figures", cells, list(backbones))
    pre_logs = {}
    for mode_file in sorted((out / "pretrain").glob("*.log.jsonl")):
        mode = mode_file.stem.replace(".log", "")
        if mode.endswith("_s0"):
            pre_logs[mode[:-3].replace("_", "+")] = [
                json.loads(line) for line in mode_file.read_text().splitlines()
            ]
    render_pretrain_curves(out / "figures", pre_logs)
    write_manifest(out, "ablate", resolved, {"matrix_seconds": elapsed})

    print(table)
    failures = [r for r in records if r.error is not None]
    if failures:
        for rec in failures:
            print(
                f"FAILED row {rec.row} {rec.backbone} seed {rec.seed_idx}:\n{rec.error}",
                file=sys.stderr,
            )
        print(f"{len(failures)}/{len(records)} runs failed", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"matrix completed in {elapsed / 60:.1f} min; results under {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = resolve_options(args.command, args)
        return COMMANDS[args.command](resolved)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # DataFormatError and friends
        from .data import DataFormatError

        if isinstance(err, DataFormatError):
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
        from .checkpoint import CheckpointError

        if isinstance(err, CheckpointError):
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
        import traceback

        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
