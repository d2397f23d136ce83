"""Command-line interface.

Subcommands: gen-data, train-organ, train, route-select, finetune,
eval, ablate, report. Configuration is a single JSON document mirroring
TrainConfig; flags override the seed, output directory, center, shot
count, top-k, and training method.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .caseio import read_dataset, write_dataset
from .metrics import read_report
from .segnet import SegModel
from .synth import build_default_policies, dataset_meta, generate_dataset, sample_fewshot
from .workflows import (
    TrainConfig,
    ablate,
    attach_organ_inputs,
    evaluate,
    finetune_closed,
    load_pools_from_dirs,
    route_select,
    train_multicenter,
    train_organ_model,
)


def _load_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        overrides["top_k"] = args.k
    if getattr(args, "mode", None) is not None:
        overrides["variant"] = args.mode
    if getattr(args, "shots", None) is not None:
        overrides["shots"] = args.shots
    if overrides:
        d = json.loads(cfg.to_json())
        d.update(overrides)
        cfg = TrainConfig.from_json(json.dumps(d))
    return cfg


def _prepare_pools(cfg: TrainConfig, organ_model=None):
    pools_raw = load_pools_from_dirs(cfg.data_dirs)
    rng = np.random.default_rng(cfg.seed)
    pools = {}
    val = []
    for flag in cfg.centers:
        if flag not in pools_raw:
            raise SystemExit(f"config data_dirs lacks center {flag!r}")
        cases = pools_raw[flag]
        attach_organ_inputs(cases, organ_model, oracle=cfg.organ_oracle)
        if flag == "A":
            pools[flag] = cases
        else:
            shot, val_case = sample_fewshot(cases, cfg.shots, rng)
            pools[flag] = shot
            val.append((val_case, flag))
    return pools, val


def cmd_gen_data(args):
    policies = build_default_policies()
    if args.center not in policies:
        raise SystemExit(f"unknown center {args.center!r}")
    policy = policies[args.center]
    cases = generate_dataset(policy, args.n, seed=args.seed)
    write_dataset(args.out_dir, cases, meta=dataset_meta(policy, args.seed, args.n))
    print(f"wrote {args.n} center-{args.center} cases to {args.out_dir}")


def cmd_train_organ(args):
    cfg = _load_config(args)
    cases = read_dataset(args.data)
    model = train_organ_model(cases, grid=cfg.grid, seed=cfg.seed,
                              epochs=args.epochs, out_dir=args.out_dir)
    print(f"organ model saved under {args.out_dir}")
    return model


def cmd_train(args):
    cfg = _load_config(args)
    organ_model = SegModel.load(args.organ_model) if args.organ_model else None
    pools, val = _prepare_pools(cfg, organ_model)
    model, log = train_multicenter(cfg, pools, val, out_dir=args.out_dir)
    print(f"best epoch {log.best_epoch} (val dice {log.best_val_dice:.4f}); "
          f"checkpoint {log.checkpoint}")


def cmd_route_select(args):
    model = SegModel.load(args.model)
    cases = read_dataset(args.samples)
    if args.n:
        cases = cases[:args.n]
    attach_organ_inputs(cases, None, oracle=True)
    flag, scores = route_select(model, cases)
    table = {"selected": flag, "scores": scores}
    print(json.dumps(table, indent=1, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=1, sort_keys=True))


def cmd_finetune(args):
    cfg = _load_config(args)
    model = SegModel.load(args.model)
    cases = read_dataset(args.data)
    attach_organ_inputs(cases, None, oracle=cfg.organ_oracle)
    rng = np.random.default_rng(cfg.seed)
    shot, val_case = sample_fewshot(cases, cfg.shots, rng)
    copy_from = None
    if cfg.closed_router_init == "copy" and model.cfg.variant == "mome":
        copy_from, _ = route_select(model, shot)
    log = finetune_closed(model, args.center, shot, val_case, cfg,
                          copy_from=copy_from, out_dir=args.out_dir)
    print(f"fine-tuned for center {args.center}; best epoch {log.best_epoch} "
          f"(val dice {log.best_val_dice:.4f}); checkpoint {log.checkpoint}")


def cmd_eval(args):
    cfg = _load_config(args)
    model = SegModel.load(args.model)
    cases = read_dataset(args.data)
    attach_organ_inputs(cases, None, oracle=cfg.organ_oracle)
    out_csv = Path(args.out_dir) / "eval.csv"
    rows, summaries = evaluate(model, cases, args.center, seed=cfg.seed,
                               report_path=out_csv)
    summary = {name: {"mean": s.mean, "ci_low": s.ci_low, "ci_high": s.ci_high,
                      "n": s.n}
               for name, s in summaries.items()}
    (Path(args.out_dir) / "eval_summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1, sort_keys=True))


def cmd_ablate(args):
    cfg = _load_config(args)
    pools, val = _prepare_pools(cfg)
    test_sets = {}
    for spec_item in args.test or []:
        flag, path = spec_item.split("=", 1)
        cases = read_dataset(path)
        attach_organ_inputs(cases, None, oracle=True)
        test_sets[flag] = cases
    rows = ablate(cfg, pools, val, test_sets,
                  methods=tuple(args.methods.split(",")),
                  ks=tuple(int(k) for k in args.ks.split(",")),
                  out_dir=args.out_dir)
    out = Path(args.out_dir) / "ablation.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} ablation rows to {out}")


def cmd_report(args):
    lines = ["| source | metric | mean | 95% CI | n |", "| --- | --- | --- | --- | --- |"]
    for path in args.inputs:
        _, summaries = read_report(path)
        for s in summaries:
            lines.append(f"| {Path(path).stem} | {s['metric']} | {float(s['mean']):.4f} | "
                         f"[{float(s['ci_low']):.4f}, {float(s['ci_high']):.4f}] | {s['n']} |")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="centermix")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic center dataset")
    p.add_argument("--center", required=True, choices=tuple("ABCDE"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-organ", help="train the organ extraction model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train_organ)

    p = sub.add_parser("train", help="multicenter training")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, choices=(1, 2, 3))
    p.add_argument("--mode", choices=("mome", "vanilla-moe", "text-prompt", "vision-only"))
    p.add_argument("--shots", type=int, choices=(1, 2, 3))
    p.add_argument("--organ-model")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("route-select", help="pick the best router for unseen samples")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_route_select)

    p = sub.add_parser("finetune", help="closed-center few-shot fine-tuning")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--center", required=True)
    p.add_argument("--shots", type=int, choices=(1, 2, 3))
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--center", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare method/top-k cells")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", default="text-prompt,vanilla-moe,mome")
    p.add_argument("--ks", default="2")
    p.add_argument("--test", nargs="*", metavar="FLAG=DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render Markdown tables from eval CSVs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
