"""Command-line pipeline: data generation, three-stage training, adaptation,
active selection, evaluation, and checkpoint inspection.

Every subcommand is deterministic given (config, seed): artifacts are
byte-identical across reruns. Heavy imports happen after thread setup so
``--threads`` (or GPTRAJ_THREADS) can cap the BLAS pools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_threads(argv: list[str]) -> None:
    threads = os.environ.get("GPTRAJ_THREADS")
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif a.startswith("--threads="):
            threads = a.split("=", 1)[1]
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(int(threads)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gptraj",
        description="GP-codebook trajectory prediction pipeline")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config path (defaults used when omitted)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed for all RNG streams")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric thread pools (env: GPTRAJ_THREADS)")
    parser.add_argument("--out-dir", type=str, default=None,
                        help="override the config output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the configured dataset splits")
    p.add_argument("--domain", type=str, default=None,
                   help="generate a single domain instead of the default splits")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--labeled", action="store_true", default=True)
    p.add_argument("--unlabeled", dest="labeled", action="store_false")

    p = sub.add_parser("pretrain", help="stage 1: pretrain the base model")
    p.add_argument("--data", type=str, default=None)

    p = sub.add_parser("fit-gp", help="stage 2: fit basis tokens and GP params")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)

    p = sub.add_parser("finetune", help="stage 3: teacher-regularized finetuning")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)

    p = sub.add_parser("adapt", help="target-domain adaptation")
    p.add_argument("--mode", choices=("sup", "unsup"), required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--subset-from", type=str, default=None,
                   help="selection CSV; adapt only on its selected scenes")

    p = sub.add_parser("active-select", help="rank target scenes by GP variance")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--strategy", choices=("variance", "random"), default="variance")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("eval", help="planning metrics on a labeled dataset")
    p.add_argument("--mode", choices=("base", "roca"), default="base")
    p.add_argument("--subset", type=str, default="full")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("inspect-ckpt", help="print checkpoint schema and tensors")
    p.add_argument("--ckpt", type=str, required=True)

    return parser


def _load_config(args):
    from . import config as config_mod

    if args.config is not None:
        cfg = config_mod.load(args.config, seed_override=args.seed)
    else:
        cfg = config_mod.resolve(seed_override=args.seed)
    if args.out_dir is not None:
        cfg.out_dir = Path(args.out_dir)
        cfg.raw["out_dir"] = str(args.out_dir)
    return cfg


def _log_resolved(cfg) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.out_dir / "resolved_config.json"
    resolved.write_text(json.dumps(cfg.resolved_dict(), sort_keys=True, indent=2)
                        + "\n", encoding="utf-8")
    print(f"resolved config -> {resolved}")


def _data_path(cfg, name: str) -> Path:
    return cfg.out_dir / "data" / f"{name}.jsonl"


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _load_ckpt(args, cfg, default_name: str):
    from .trainer import Checkpoint

    path = Path(args.ckpt) if args.ckpt else cfg.out_dir / default_name
    return Checkpoint.load(_require(path, "checkpoint"))


def _load_data(args, cfg, default_split: str):
    from .core import load_dataset

    path = Path(args.data) if args.data else _data_path(cfg, default_split)
    return load_dataset(_require(path, "dataset"))


def cmd_gen_data(args, cfg) -> int:
    from .synthdomain import gen_dataset, strip_labels
    from .core import save_dataset

    if args.domain is not None:
        if args.count is None or args.out is None:
            raise ValueError("--domain requires --count and --out")
        spec = cfg.domain(args.domain)
        records = gen_dataset(spec, args.count, cfg.seed, path=None,
                              obs_dim=cfg.model.obs_dim)
        if not args.labeled:
            records = strip_labels(records)
        save_dataset(records, args.out)
        print(f"wrote {len(records)} scenes -> {args.out}")
        return 0

    src = cfg.domain(cfg.data["source_domain"])
    tgt = cfg.domain(cfg.data["target_domain"])
    splits = (
        ("source_train", src, cfg.data["n_source"], 0),
        ("source_val", src, cfg.data["n_source_val"], 1),
        ("target_train", tgt, cfg.data["n_target"], 2),
        ("target_val", tgt, cfg.data["n_target_val"], 3),
    )
    for name, spec, count, offset in splits:
        path = _data_path(cfg, name)
        gen_dataset(spec, count, cfg.seed * 4 + offset, path=path,
                    obs_dim=cfg.model.obs_dim)
        print(f"wrote {count} scenes -> {path}")
    return 0


def cmd_pretrain(args, cfg) -> int:
    from .trainer import stage1_pretrain

    records = _load_data(args, cfg, "source_train")
    ckpt = stage1_pretrain(records, cfg.train, cfg.model,
                           log_path=cfg.out_dir / "train_log.csv")
    out = cfg.out_dir / "ckpt_stage1.bin"
    ckpt.save(out)
    print(f"stage1 checkpoint -> {out}")
    return 0


def cmd_fit_gp(args, cfg) -> int:
    from .trainer import stage2_fit_gp

    records = _load_data(args, cfg, "source_train")
    ckpt = _load_ckpt(args, cfg, "ckpt_stage1.bin")
    out_ckpt = stage2_fit_gp(records, ckpt, cfg.train,
                             log_path=cfg.out_dir / "train_log.csv")
    out = cfg.out_dir / "ckpt_stage2.bin"
    out_ckpt.save(out)
    print(f"stage2 checkpoint -> {out}")
    return 0


def cmd_finetune(args, cfg) -> int:
    from .trainer import stage3_finetune

    records = _load_data(args, cfg, "source_train")
    ckpt = _load_ckpt(args, cfg, "ckpt_stage2.bin")
    out_ckpt = stage3_finetune(records, ckpt, cfg.train,
                               log_path=cfg.out_dir / "train_log.csv")
    out = cfg.out_dir / "ckpt_stage3.bin"
    out_ckpt.save(out)
    print(f"stage3 checkpoint -> {out}")
    return 0


def cmd_adapt(args, cfg) -> int:
    import csv as csv_mod

    from .adapt import adapt_supervised, adapt_unsupervised

    records = _load_data(args, cfg, "target_train")
    if args.subset_from:
        with open(_require(Path(args.subset_from), "selection file"),
                  newline="", encoding="utf-8") as f:
            keep = {row["scene_id"] for row in csv_mod.DictReader(f)
                    if row["selected"] == "1"}
        records = [r for r in records if r.scene_id in keep]
    ckpt = _load_ckpt(args, cfg, "ckpt_stage3.bin")
    fn = adapt_supervised if args.mode == "sup" else adapt_unsupervised
    out_ckpt = fn(records, ckpt, cfg.train,
                  log_path=cfg.out_dir / "train_log.csv")
    out = cfg.out_dir / f"ckpt_adapt_{args.mode}.bin"
    out_ckpt.save(out)
    print(f"adaptation ({args.mode}) checkpoint -> {out}")
    return 0


def cmd_active_select(args, cfg) -> int:
    from .adapt import active_select

    records = _load_data(args, cfg, "target_train")
    ckpt = _load_ckpt(args, cfg, "ckpt_stage3.bin")
    report = active_select(records, ckpt, budget=args.budget,
                           strategy=args.strategy, seed=cfg.seed)
    out = Path(args.out) if args.out else cfg.out_dir / f"selection_{args.strategy}.csv"
    report.write_csv(out)
    print(f"selected {len(report.selected)}/{len(records)} scenes "
          f"({args.strategy}, budget {args.budget}) -> {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .evalmetrics import evaluate

    records = _load_data(args, cfg, "source_val")
    ckpt = _load_ckpt(args, cfg, "ckpt_stage3.bin")
    report = evaluate(records, ckpt.model, mode=args.mode, subset=args.subset,
                      rarity_bins=cfg.rarity_bins)
    out = Path(args.out) if args.out else (
        cfg.out_dir / f"eval_{args.mode}_{args.subset}.csv")
    report.write_csv(out)
    print(report.summary_text())
    print(f"eval report -> {out}")
    return 0


def cmd_inspect_ckpt(args, cfg) -> int:
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(_require(Path(args.ckpt), "checkpoint"))
    print(f"schema: 1  stage: {ckpt.stage}")
    print(f"model_spec: {ckpt.model_spec}")
    for name, arr in sorted(ckpt.named_tensors().items()):
        print(f"  {name}  {list(arr.shape)}")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "fit-gp": cmd_fit_gp,
    "finetune": cmd_finetune,
    "adapt": cmd_adapt,
    "active-select": cmd_active_select,
    "eval": cmd_eval,
    "inspect-ckpt": cmd_inspect_ckpt,
}


def cli_run(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command != "inspect-ckpt":
            _log_resolved(cfg)
        return _HANDLERS[args.command](args, cfg)
    except Exception as e:  # noqa: BLE001 - single line, machine-parsable
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_run())


if __name__ == "__main__":
    main()
