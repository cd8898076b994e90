"""Command-line entry points: dataset generation, training, evaluation, and
multi-seed ablation sweeps.

Flags override config-file values; the effective configuration is echoed to
`config.echo` in the output directory so every run is auditable. Exit codes:
0 success, 2 configuration error, 3 file-format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import configfile, metrics
from .data import load_dataset, make_bundle, save_dataset
from .errors import ConfigurationError, FormatError, GenerationError, NumericError
from .trainer import METHODS, evaluate, load_checkpoint, train

_DEFAULT_ABLATE_METHODS = ("part", "independent", "dct", "ours")

CONFIG_ECHO = "config.echo"
METRICS_CSV = "metrics.csv"


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value (repeatable)")


def _effective_config(args) -> dict:
    cfg = configfile.load_config(args.config) if args.config else configfile.default_config()
    for assignment in args.overrides:
        configfile.apply_override(cfg, assignment, where="--set")
    if getattr(args, "method", None) is not None:
        cfg["train.method"] = args.method
    if getattr(args, "seed", None) is not None:
        cfg["train.global_seed"] = args.seed
    return cfg


def _load_bundle(cfg: dict, data_dir):
    if data_dir is not None:
        return load_dataset(data_dir)
    return make_bundle(configfile.synthetic_spec(cfg), configfile.split_spec(cfg),
                       n_test=cfg["data.n_test"])


def cmd_generate_data(args) -> int:
    cfg = _effective_config(args)
    bundle = make_bundle(configfile.synthetic_spec(cfg), configfile.split_spec(cfg),
                         n_test=cfg["data.n_test"])
    save_dataset(bundle, args.out)
    m1, m2 = len(bundle.labeled_1), len(bundle.labeled_2)
    print(f"wrote {args.out}: {m1 + m2} labeled ({m1} + {m2}), "
          f"{len(bundle.unlabeled)} unlabeled, {len(bundle.test)} test")
    return 0


def _run_one(cfg: dict, bundle, out_dir):
    tcfg = configfile.train_config(cfg, num_classes=bundle.num_classes)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_ECHO), "w") as f:
        f.write(configfile.serialize_config(cfg))
    report = train(tcfg, bundle, out_dir=out_dir)
    rows = metrics.report_rows(report.final_avg, tcfg.global_seed, tcfg.method)
    rows += metrics.report_rows(report.final_vot, tcfg.global_seed, tcfg.method)
    metrics.write_metrics_csv(os.path.join(out_dir, METRICS_CSV), rows)
    return tcfg, report


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    bundle = _load_bundle(cfg, args.data)
    tcfg, report = _run_one(cfg, bundle, args.out)
    print(f"method={tcfg.method} seed={tcfg.global_seed} epochs={tcfg.epochs}: "
          f"avg DSC {report.final_avg.mean_dsc:.2f} / HD {report.final_avg.mean_hd:.2f}, "
          f"vot DSC {report.final_vot.mean_dsc:.2f} / HD {report.final_vot.mean_hd:.2f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    models, _, _, record = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.data)
    avg, vot = evaluate(models, bundle.test, bundle.num_classes)
    run_seed = int(record.get("global_seed", 0))
    method = str(record.get("method", "unknown"))
    rows = metrics.report_rows(avg, run_seed, method)
    rows += metrics.report_rows(vot, run_seed, method)
    metrics.write_metrics_csv(args.out, rows)
    summary = {"avg": avg.to_dict(), "vot": vot.to_dict(),
               "run_seed": run_seed, "method": method}
    json_path = os.path.splitext(args.out)[0] + ".json"
    metrics.write_summary_json(json_path, summary)
    print(f"avg DSC {avg.mean_dsc:.2f} / HD {avg.mean_hd:.2f}, "
          f"vot DSC {vot.mean_dsc:.2f} / HD {vot.mean_hd:.2f}")
    return 0


def _parse_csv_list(text: str, what: str) -> list[str]:
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ConfigurationError(f"empty {what} list: {text!r}")
    return items


def cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    seeds = [int(s) for s in _parse_csv_list(args.seeds, "seed")]
    methods = _parse_csv_list(args.methods, "method")
    for method in methods:
        if method not in METHODS:
            raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    bundle = _load_bundle(cfg, args.data)

    table: dict[str, dict[str, metrics.MetricsReport]] = {}
    for method in methods:
        per_seed = {"avg": [], "vot": []}
        for seed in seeds:
            cell = dict(cfg)
            cell["train.method"] = method
            cell["train.global_seed"] = seed
            out_dir = os.path.join(args.out, method, f"seed_{seed}")
            _, report = _run_one(cell, bundle, out_dir)
            per_seed["avg"].append(report.final_avg)
            per_seed["vot"].append(report.final_vot)
            print(f"{method} seed {seed}: vot DSC {report.final_vot.mean_dsc:.2f}")
        table[method] = {mode: metrics.seed_summary(reps, mode=mode)
                         for mode, reps in per_seed.items()}

    _write_ablate_summary(args.out, table)
    width = max(len("method"), max(len(m) for m in methods)) + 2
    print(f"{'method':<{width}}{'avg DSC':<16}{'vot DSC':<16}")
    for method in methods:
        row = table[method]
        cells = [metrics.fmt_mean_std(row[mode].mean_dsc, row[mode].seed_stats["mean_dsc_std"])
                 for mode in ("avg", "vot")]
        print(f"{method:<{width}}{cells[0]:<16}{cells[1]:<16}")
    print(f"summary in {args.out}")
    return 0


def _write_ablate_summary(out_dir, table) -> None:
    rows = []
    summary = {}
    for method, modes in table.items():
        summary[method] = {}
        for mode, rep in modes.items():
            stats = rep.seed_stats
            summary[method][mode] = rep.to_dict()
            for c in rep.per_class_dsc:
                rows.append((method, mode, str(c),
                             f"{rep.per_class_dsc[c]:.4f}",
                             f"{stats['per_class_dsc_std'][str(c)]:.4f}",
                             f"{rep.per_class_hd[c]:.4f}",
                             f"{stats['per_class_hd_std'][str(c)]:.4f}"))
            rows.append((method, mode, "mean",
                         f"{rep.mean_dsc:.4f}", f"{stats['mean_dsc_std']:.4f}",
                         f"{rep.mean_hd:.4f}", f"{stats['mean_hd_std']:.4f}"))
    import csv

    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mode", "class", "dsc_mean", "dsc_std", "hd_mean", "hd_std"])
        writer.writerows(rows)
    metrics.write_summary_json(os.path.join(out_dir, "summary.json"), summary)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uaseg",
        description="Uncertainty-aware co-training for semi-supervised segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize a dataset and write it to disk")
    p.add_argument("--spec", dest="config", default=None, help="config file with data.* keys")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_overrides(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one method on one seed")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--data", default=None, help="dataset directory (default: generate per config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", choices=METHODS, default=None, help="override train.method")
    p.add_argument("--seed", type=int, default=None, help="override train.global_seed")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="metrics CSV path (JSON written alongside)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a method x seed sweep and summarize")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--data", default=None, help="dataset directory (default: generate per config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--methods", default=",".join(_DEFAULT_ABLATE_METHODS),
                   help="comma-separated methods")
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
