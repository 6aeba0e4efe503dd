"""Command-line runner: ``planfl run | eval | sweep | export-dataset``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or empty
sweep grid, 3 unreadable or corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec
from .aggregation import AggregatorParams
from .config import ABLATIONS, METHODS, ExperimentConfig, build_config, load_config
from .dataset import experiment_domains, export_datasets, generate_domain, import_datasets
from .encoder import BackboneParams, PromptSet
from .errors import ConfigError, PlanError, ProtocolError
from .federation import GlobalState, build_backbone, evaluate, output_root, run_experiment
from .tensor import Tensor

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3

log = logging.getLogger("planfl")


def _resolve(args, extra: list[str] | None = None) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "method", None):
        overrides.append(f"method={args.method}")
    for flag in getattr(args, "ablate", None) or []:
        overrides.append(f"ablations.{flag}=true")
    overrides.extend(extra or [])
    return load_config(args.config, overrides)


def _default_out(cfg: ExperimentConfig) -> Path:
    return output_root() / f"{cfg.method}-{cfg.config_hash()}"


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else _default_out(cfg)
    result = run_experiment(cfg, out_dir=out)
    rep = result.report
    for m in result.metrics:
        print(f"round {m.round:3d}  target_acc {m.target_accuracy:.4f}  stage1_ce {m.mean_stage1_ce:.4f}  "
              f"bytes {m.bytes_total}")
    print(f"final accuracy {rep['final_accuracy']:.4f}  total bytes {rep['bytes_total']}  "
          f"wall time {rep['wall_time']:.1f}s")
    print(f"outputs in {out}")
    return EXIT_OK


def _load_run(args):
    """(config, state, backbone) from a run directory or explicit checkpoint paths."""
    run = Path(args.run) if args.run else None
    prompts_path = Path(args.prompts) if args.prompts else (run / "checkpoints" / "global_prompts.plnc" if run else None)
    if prompts_path is None:
        raise ConfigError("eval needs --run or --prompts")
    meta, tensors = codec.load_checkpoint(prompts_path)
    if "config" not in meta:
        raise ProtocolError(f"{prompts_path}: checkpoint metadata lacks a config")
    cfg = build_config(meta["config"])
    prompts = PromptSet.from_tensors(tensors)
    agg_t = agg_v = None
    agg_path = Path(args.aggregators) if args.aggregators else (run / "checkpoints" / "aggregators.plnc" if run else None)
    if agg_path is not None and agg_path.exists():
        _, agg_tensors = codec.load_checkpoint(agg_path)
        agg_t = AggregatorParams.from_tensors(agg_tensors, "text", cfg.agg_ratio)
        agg_v = AggregatorParams.from_tensors(agg_tensors, "visual", cfg.agg_ratio)
    bb_path = Path(args.backbone) if args.backbone else (run / "checkpoints" / "backbone.plnc" if run else None)
    if bb_path is not None and bb_path.exists():
        _, bb_tensors = codec.load_checkpoint(bb_path)
        backbone = BackboneParams(cfg.model, {k: Tensor(v) for k, v in bb_tensors.items()})
    else:
        backbone = build_backbone(cfg)
    return cfg, GlobalState(prompts, agg_t, agg_v, meta.get("round", 0)), backbone


def cmd_eval(args) -> int:
    cfg, state, backbone = _load_run(args)
    if args.dataset:
        _, domains = import_datasets(args.dataset)
    else:
        domains = [generate_domain(s, cfg.seed, cfg.model) for s in experiment_domains(cfg.data, cfg.model, cfg.seed)]
    accs = []
    for ds in domains:
        acc = evaluate(state, backbone, ds)
        accs.append(acc)
        tag = "  (held out)" if ds.domain_id == cfg.held_out and not args.dataset else ""
        print(f"domain {ds.domain_id}: {acc:.4f}{tag}")
    print(f"average: {float(np.mean(accs)):.4f}")
    return EXIT_OK


def _axis(text: str | None, cast, name: str):
    if text is None:
        return None
    values = [cast(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"sweep axis {name} is empty")
    return values


def sweep_cells(args) -> list[dict]:
    axes = {
        "train.alpha": _axis(args.alpha, float, "--alpha"),
        "model.prompt_depth": _axis(args.prompt_depth, int, "--prompt-depth"),
        "prompt_length": _axis(args.prompt_length, int, "--prompt-length"),
        "rounds": _axis(args.rounds, int, "--rounds"),
    }
    given = {k: v for k, v in axes.items() if v is not None}
    return [dict(zip(given, combo)) for combo in itertools.product(*given.values())]


def _cell_overrides(cell: dict) -> list[str]:
    out = []
    for key, value in cell.items():
        if key == "prompt_length":
            out += [f"model.m_text={value}", f"model.m_vis={value}"]
        else:
            out.append(f"{key}={value}")
    return out


def cmd_sweep(args) -> int:
    cells = sweep_cells(args)
    configs = [_resolve(args, _cell_overrides(c)) for c in cells]  # validate everything before running
    root = Path(args.out) if args.out else output_root() / "sweep"
    rows = []
    for i, (cell, cfg) in enumerate(zip(cells, configs)):
        result = run_experiment(cfg, out_dir=root / f"cell{i:03d}")
        rows.append((cfg.train.alpha, cfg.model.prompt_blocks, cfg.model.m_text, cfg.rounds,
                     result.report["final_accuracy"], result.report["bytes_total"]))
    header = f"{'cell':>4} {'alpha':>7} {'depth':>5} {'length':>6} {'rounds':>6} {'final_acc':>9} {'bytes':>12}"
    print(header)
    for i, (a, d, m, r, acc, b) in enumerate(rows):
        print(f"{i:>4} {a:>7g} {d:>5} {m:>6} {r:>6} {acc:>9.4f} {b:>12}")
    return EXIT_OK


def cmd_export_dataset(args) -> int:
    cfg = _resolve(args)
    domains = [generate_domain(s, cfg.seed, cfg.model) for s in experiment_domains(cfg.data, cfg.model, cfg.seed)]
    out = Path(args.out) if args.out else output_root() / f"dataset-{cfg.config_hash()}.plnc"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_datasets(out, domains, {"config": cfg.to_dict()})
    print(f"wrote {len(domains)} domains ({n} bytes) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--config", default="toy", help="profile name (toy, tiny, full) or YAML/JSON path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default under $PLANFL_OUTPUT_ROOT)")
        if method:
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--ablate", action="append", choices=ABLATIONS)

    p = sub.add_parser("run", help="run one federated experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate saved global prompts on every domain")
    p.add_argument("--run", help="run directory containing checkpoints/")
    p.add_argument("--prompts", help="global prompt checkpoint")
    p.add_argument("--aggregators", help="aggregator checkpoint")
    p.add_argument("--backbone", help="backbone checkpoint (rebuilt from the config if absent)")
    p.add_argument("--dataset", help="exported dataset file to evaluate on")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="cartesian hyperparameter sweep")
    common(p)
    p.add_argument("--alpha", help="comma-separated KL weights")
    p.add_argument("--prompt-depth", help="comma-separated prompt depths")
    p.add_argument("--prompt-length", help="comma-separated prompt lengths (text and visual)")
    p.add_argument("--rounds", help="comma-separated round counts")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-dataset", help="write the experiment domains to a tensor file")
    common(p, method=False)
    p.set_defaults(func=cmd_export_dataset)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (PlanError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
