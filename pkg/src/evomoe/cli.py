"""Command-line entry point.

Verbs: train, eval, probe, export-config, inspect. Every run prints the
resolved config and seed before doing work. Exit codes: 0 success, 2 for
usage/validation/contract problems, 3 for numerical failures. EVOMOE_LOG
(quiet, info, debug) controls logging verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import LabConfig, load_config
from .errors import ConfigError
from .diagnostics import (
    logit_kde,
    modality_distribution,
    shuffle_probe,
    tv_distance,
    write_dist_csv,
    write_kde_csv,
    write_shuffle_csv,
)
from .errors import EvomoeError, NumericError
from .pipeline import evaluate, new_run, run_stage
from .rng import STREAM_SHUFFLE, Rng

log = logging.getLogger("evomoe")

_STAGE_BY_NUMBER = {1: "I", 2: "II", 3: "III"}


def _setup_logging() -> None:
    level = os.environ.get("EVOMOE_LOG", "info").strip().lower()
    chosen = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        level, logging.INFO
    )
    logging.basicConfig(level=chosen, format="%(levelname)s %(name)s: %(message)s")


def _resolve_config_and_seed(args) -> tuple[LabConfig, int, str]:
    cfg = load_config(args.config) if getattr(args, "config", None) else LabConfig()
    cfg.validate()
    if getattr(args, "seed", None) is not None:
        seed, source = int(args.seed), "flag"
        cfg.model.seed = seed
        cfg.task.seed = seed
    else:
        seed, source = cfg.model.seed, "config" if getattr(args, "config", None) else "default"
    return cfg, seed, source


def _announce(cfg: LabConfig, seed: int, source: str) -> None:
    print(f"seed={seed} (source: {source})")
    print(f"config={cfg.canonical_json()}")


def _write_sidecar(artifact_path: str, cfg: LabConfig, seed: int) -> None:
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "version": __version__,
    }
    with open(artifact_path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _adopt_config(state, cfg: LabConfig) -> None:
    """Swap a loaded state onto the resolved config after an architecture check.

    Stage schedules, alpha, and seeds may differ between the checkpoint and
    the flags; the model architecture may not.
    """
    from dataclasses import asdict

    old = {k: v for k, v in asdict(state.lab.model).items() if k != "seed"}
    new = {k: v for k, v in asdict(cfg.model).items() if k != "seed"}
    if old != new:
        diff = sorted(k for k in new if new[k] != old.get(k))
        raise ConfigError(f"config architecture differs from checkpoint on: {diff}")
    state.lab = cfg
    state.model.config = cfg.model


def _cmd_train(args) -> int:
    cfg, seed, source = _resolve_config_and_seed(args)
    _announce(cfg, seed, source)
    stage_name = _STAGE_BY_NUMBER[args.stage]

    if args.stage == 1:
        if args.from_ckpt:
            state = load_checkpoint(args.from_ckpt)
            _adopt_config(state, cfg)
        else:
            state = new_run(cfg)
    else:
        if not args.from_ckpt:
            print(f"train --stage {args.stage} requires --from <checkpoint>", file=sys.stderr)
            return 2
        state = load_checkpoint(args.from_ckpt)
        _adopt_config(state, cfg)

    state, records = run_stage(state, cfg.stages[stage_name])
    save_checkpoint(args.out, state)
    _write_sidecar(args.out, cfg, seed)

    log_path = args.log or (args.out + ".log.jsonl")
    header = {
        "event": "header",
        "stage": stage_name,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "alpha": cfg.alpha,
        "optimizer": "adam",
        "lr_policy": "constant",
        "note": "desk-scale run: constant learning rate, no decay schedule",
        "version": __version__,
    }
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_sidecar(log_path, cfg, seed)
    final_eval = evaluate(state.model, cfg, n_batches=8)
    print(f"stage {stage_name} done: steps={state.step} eval_ce={final_eval:.17g}")
    print(f"checkpoint={args.out}")
    print(f"log={log_path}")
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.lab
    if args.seed is not None:
        cfg.task.seed = int(args.seed)
        cfg.model.seed = int(args.seed)
        seed, source = int(args.seed), "flag"
    else:
        seed, source = cfg.model.seed, "checkpoint"
    _announce(cfg, seed, source)
    ce = evaluate(state.model, cfg, n_batches=args.batches)
    print(f"eval_ce={ce:.17g}")
    return 0


def _cmd_probe(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.lab
    if args.seed is not None:
        seed, source = int(args.seed), "flag"
    else:
        seed, source = cfg.model.seed, "checkpoint"
    _announce(cfg, seed, source)
    model = state.model
    os.makedirs(args.out, exist_ok=True)

    if args.kind == "shuffle":
        rng = Rng(seed, STREAM_SHUFFLE)
        report = shuffle_probe(model, cfg, n_trials=args.trials, rng=rng, n_batches=args.batches)
        csv_path = os.path.join(args.out, "shuffle.csv")
        write_shuffle_csv(csv_path, report)
        report.path = csv_path
        stats = report.stats
        report_doc = {
            "kind": "shuffle",
            "baseline_ce": stats["baseline_ce"],
            "mean_abs_delta": stats["mean_abs_delta"],
            "trials": stats["trials"],
            "samples_used": report.samples_used,
            "seed": seed,
            "csv": csv_path,
        }
    elif args.kind == "kde":
        layer = args.layer if args.layer is not None else cfg.model.moe_layers()[-1]
        curve_v, curve_t, overlap = logit_kde(model, cfg, layer, n_batches=args.batches)
        csv_path = os.path.join(args.out, "kde.csv")
        write_kde_csv(csv_path, curve_v, curve_t)
        report_doc = {
            "kind": "kde",
            "layer": layer,
            "overlap": overlap,
            "bandwidth_V": curve_v.bandwidth,
            "bandwidth_T": curve_t.bandwidth,
            "integral_V": curve_v.integral(),
            "integral_T": curve_t.integral(),
            "samples_used": int(args.batches * 8 * cfg.task.seq_len),
            "seed": seed,
            "csv": csv_path,
        }
    else:  # dist
        matrices = modality_distribution(model, cfg, n_batches=args.batches)
        csv_path = os.path.join(args.out, "modal_dist.csv")
        write_dist_csv(csv_path, matrices)
        report_doc = {
            "kind": "dist",
            "tv_distance": {str(k): tv_distance(m) for k, m in sorted(matrices.items())},
            "samples_used": int(args.batches * 8 * cfg.task.seq_len),
            "seed": seed,
            "csv": csv_path,
        }

    _write_sidecar(csv_path, cfg, seed)
    report_path = os.path.join(args.out, f"probe_{args.kind}.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_sidecar(report_path, cfg, seed)
    print(f"probe={args.kind} csv={csv_path} report={report_path}")
    return 0


def _cmd_export_config(args) -> int:
    cfg = LabConfig()
    doc = json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(doc)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(doc)
    return 0


def _cmd_inspect(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = state.lab
    n_params = sum(p.data.size for p in state.model.params.values())
    doc = {
        "stage": state.stage,
        "step": state.step,
        "adam_t": state.adam_t,
        "beta_counter": state.beta_counter,
        "config_hash": cfg.config_hash(),
        "n_arrays": len(state.model.params),
        "n_scalars": int(n_params),
        "moe": state.model.is_moe,
        "moe_layers": cfg.model.moe_layers() if state.model.is_moe else [],
        "router_kind": cfg.model.router_kind,
    }
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evomoe",
        description="Desk-scale lab for evolved mixture-of-experts training "
        "with token-aware routing.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("--config", help="config JSON path (defaults built in)")
    p_train.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p_train.add_argument("--from", dest="from_ckpt", help="input checkpoint")
    p_train.add_argument("--out", required=True, help="output checkpoint path")
    p_train.add_argument("--log", help="JSON-lines log path (default: <out>.log.jsonl)")
    p_train.add_argument("--seed", type=int)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="held-out cross entropy of a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--batches", type=int, default=50)
    p_eval.add_argument("--seed", type=int)
    p_eval.set_defaults(func=_cmd_eval)

    p_probe = sub.add_parser("probe", help="run a diagnostic probe")
    p_probe.add_argument("--kind", choices=("shuffle", "kde", "dist"), required=True)
    p_probe.add_argument("--ckpt", required=True)
    p_probe.add_argument("--out", required=True, help="output directory")
    p_probe.add_argument("--trials", type=int, default=8)
    p_probe.add_argument("--layer", type=int)
    p_probe.add_argument("--batches", type=int, default=8)
    p_probe.add_argument("--seed", type=int)
    p_probe.set_defaults(func=_cmd_probe)

    p_export = sub.add_parser("export-config", help="print the default config JSON")
    p_export.add_argument("--out")
    p_export.set_defaults(func=_cmd_export_config)

    p_inspect = sub.add_parser("inspect", help="summarize a checkpoint")
    p_inspect.add_argument("--ckpt", required=True)
    p_inspect.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except EvomoeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
