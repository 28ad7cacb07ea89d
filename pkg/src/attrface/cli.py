"""Command-line entry point.

Subcommands: ``train`` (staged training with checkpoints), ``eval``
(verification and attribute tables for a checkpoint), ``ablate`` (the
fusion / reduction-ratio / attribute-count experiment grids) and
``gradcheck`` (finite-difference validation of the autograd engine).

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datagen import generate, load_dataset, make_pairs
from .errors import (
    ConfigError,
    DivergenceError,
    ProtocolError,
    StagingError,
    WeightFileError,
)
from .evaluation import (
    attribute_accuracy,
    format_verification_table,
    report_records,
    score_pairs,
    verification_report,
    write_report_csv,
)
from .gradcheck import run_gradcheck
from .network import MultiBranchModel
from .tensor import GraphError, ShapeError
from .training import STAGES, run_all, run_stage
from .weights import load_into_model, save_weights

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

# evaluation branch per training extent: the no-attribute baseline is the
# recognition branch after its own stage only
FUSION_GRID = ("baseline", "concat", "add", "se", "channel", "dual")
RATIO_GRID = (4, 8, 16)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrface",
        description="attribute-aware attentional fusion experiments at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run staged training")
    p_train.add_argument("--config", required=True, type=Path)
    p_train.add_argument("--stage", choices=(*STAGES, "all"), default="all")
    p_train.add_argument("--seed", type=int, default=None,
                         help="master seed overriding every configured seed")
    p_train.add_argument("--out", type=Path, default=Path("runs/train"))
    p_train.add_argument("--data", type=Path, default=None,
                         help="dataset container directory (default: synthesize)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--weights", required=True, type=Path)
    p_eval.add_argument("--config", required=True, type=Path)
    p_eval.add_argument("--pairs", type=int, default=None)
    p_eval.add_argument("--branch", choices=("baseline", "fused"), default="fused")
    p_eval.add_argument("--data", type=Path, default=None)
    p_eval.add_argument("--out", type=Path, default=None)

    p_abl = sub.add_parser("ablate", help="run an experiment grid")
    p_abl.add_argument("--config", required=True, type=Path)
    p_abl.add_argument("--grid", choices=("fusion", "ratio", "attrs"), required=True)
    p_abl.add_argument("--seeds", type=int, default=3)
    p_abl.add_argument("--out", type=Path, default=Path("runs/ablate"))

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p_gc.add_argument("--module", choices=("ops", "aai", "network", "all"), default="all")
    p_gc.add_argument("--dtype", choices=("f64",), default="f64")
    p_gc.add_argument("--seeds", type=int, default=10)
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_master_seed(args.seed)
    return cfg


def _dataset_for(cfg: RunConfig, data_dir: Path | None):
    if data_dir is not None:
        return load_dataset(data_dir, eval_identities=cfg["data.eval_identities"])
    return generate(cfg.synthetic_spec())


def _model_for(cfg: RunConfig, dataset) -> MultiBranchModel:
    ncfg = cfg.network_config()
    n_train = len(dataset.train_identities)
    if ncfg.n_identities != n_train:
        ncfg = dataclasses.replace(ncfg, n_identities=n_train)
    return MultiBranchModel(ncfg)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = _dataset_for(cfg, args.data)
    model = _model_for(cfg, dataset)
    tcfg = cfg.train_config()
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.stage == "all":
        log = run_all(model, dataset, tcfg, out_dir=out)
    else:
        prereqs = {"fr": None, "sb": "fr", "joint": "sb"}[args.stage]
        if prereqs is not None:
            checkpoint = out / f"stage_{prereqs}.weights"
            if not checkpoint.exists():
                raise StagingError(
                    f"stage '{args.stage}' needs checkpoint {checkpoint}; "
                    f"run the earlier stages first"
                )
            load_into_model(model, checkpoint)
            model.completed_stages.update(
                STAGES[: STAGES.index(prereqs) + 1]
            )
        log = run_stage(args.stage, model, dataset, tcfg, out_dir=out)

    log.write(out / "trainlog.txt", deterministic=tcfg.deterministic)
    save_weights(out / "final.weights", model.params)
    for record in log.records:
        print(f"stage={record.stage} epoch={record.epoch} lr={record.lr:g} "
              f"loss={record.loss_total:.5f} ({record.wall_seconds:.2f}s)")
    print(f"checkpoints and trainlog written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    dataset = _dataset_for(cfg, args.data)
    model = _model_for(cfg, dataset)
    load_into_model(model, args.weights)

    n_pairs = args.pairs if args.pairs is not None else cfg["eval.pairs"]
    protocol = make_pairs(dataset, n_pairs, seed=cfg["eval.seed"])
    genuine, impostor = score_pairs(model, dataset, protocol, branch=args.branch)
    far_targets = cfg["eval.far_targets"]
    report = verification_report(genuine, impostor, far_targets)

    accuracy = attribute_accuracy(model, dataset)
    print("attribute accuracy (eval split):")
    for name, acc in accuracy.items():
        print(f"  {name:16s} {acc * 100:6.2f}%")
    print()
    label = f"{cfg['network.fusion']}/{args.branch}"
    text = format_verification_table([(label, report.tar_at_far)], far_targets)
    print(text)

    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report_csv(args.out / "report.csv", report_records(label, report))
        (args.out / "report.txt").write_text(text + "\n")
        print(f"\nreports written to {args.out}")
    return EXIT_OK


def _grid_cells(cfg: RunConfig, grid: str) -> list[tuple[str, RunConfig]]:
    if grid == "fusion":
        return [(variant, cfg.derived({"network.fusion": variant}))
                for variant in FUSION_GRID]
    if grid == "ratio":
        return [(f"dual-r{r}", cfg.derived({"network.fusion": "dual",
                                            "network.reduction": r}))
                for r in RATIO_GRID]
    if grid == "attrs":
        names = cfg["attributes.names"]
        counts = [c for c in (1, 2, 3, len(names)) if c <= len(names)]
        cells = []
        for count in dict.fromkeys(counts):  # unique, ordered
            label = "+".join(names[:count]) if count <= 3 else f"all-{count}"
            cells.append((label, cfg.derived({"attributes.use": count})))
        return cells
    raise ConfigError(f"unknown grid '{grid}'")


def _cell_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence((base, index)).generate_state(1)[0])


def _run_cell(label: str, cell_cfg: RunConfig, seed: int):
    """Train and score one ablation cell; returns its VerificationReport."""
    run_cfg = cell_cfg.with_master_seed(seed)
    dataset = generate(run_cfg.synthetic_spec())
    model = _model_for(run_cfg, dataset)
    tcfg = run_cfg.train_config()
    if label == "baseline":
        run_stage("fr", model, dataset, tcfg)
        branch = "baseline"
    else:
        run_all(model, dataset, tcfg)
        branch = "fused"
    protocol = make_pairs(dataset, run_cfg["eval.pairs"], seed=run_cfg["eval.seed"])
    genuine, impostor = score_pairs(model, dataset, protocol, branch=branch)
    return verification_report(genuine, impostor, run_cfg["eval.far_targets"])


def cmd_ablate(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    cells = _grid_cells(cfg, args.grid)
    far_targets = cfg["eval.far_targets"]
    base_seed = cfg["train.seed"]
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    rows = []       # (label, far, tar_mean, tar_std)
    cell_rows = []  # (label, seed, far, threshold, tar)
    summary_text_rows = []
    for label, cell_cfg in cells:
        per_far: dict[float, list[float]] = {f: [] for f in far_targets}
        for k in range(args.seeds):
            seed = _cell_seed(base_seed, k)
            report = _run_cell(label, cell_cfg, seed)
            for f in far_targets:
                point = report.tar_at_far[f]
                per_far[f].append(point.tar)
                cell_rows.append((label, k, f, point.threshold, point.tar))
            print(f"[{label}] seed {k}: "
                  + " ".join(f"tar@{f:g}={report.tar_at_far[f].tar:.3f}"
                             for f in far_targets), flush=True)
        means = {f: float(np.mean(per_far[f])) for f in far_targets}
        stds = {f: float(np.std(per_far[f])) for f in far_targets}
        for f in far_targets:
            rows.append((label, f, means[f], stds[f]))
        summary_text_rows.append(
            (label, " ".join(f"{means[f] * 100:6.2f}±{stds[f] * 100:.2f}"
                             for f in far_targets))
        )

    header = "method".ljust(18) + "  ".join(f"TAR@{f:g}" for f in far_targets)
    lines = [header, "-" * len(header)]
    lines += [label.ljust(18) + cells_text for label, cells_text in summary_text_rows]
    text = "\n".join(lines)
    print("\nseed-mean TAR (%, ±std) per FAR target:")
    print(text)

    import csv

    with open(out / "ablation_cells.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("label", "seed", "far", "threshold", "tar"))
        for row in cell_rows:
            writer.writerow((row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])))
    with open(out / "ablation_summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("label", "far", "tar_mean", "tar_std"))
        for label, far, mean, std in rows:
            writer.writerow((label, repr(far), repr(mean), repr(std)))
    (out / "ablation_summary.txt").write_text(text + "\n")
    print(f"\nablation reports written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    modules = {"ops": ("ops",), "aai": ("fusion",), "network": ("network",),
               "all": ("ops", "fusion", "network")}[args.module]
    worst, ok = run_gradcheck(modules=modules, seeds=range(args.seeds))
    for name in sorted(worst):
        status = "ok" if worst[name] <= 1e-4 else "FAIL"
        print(f"{name:24s} worst rel err {worst[name]:.3e}  {status}")
    if not ok:
        print("gradient check FAILED (tolerance 1e-4)")
        return EXIT_NUMERICAL
    print(f"all gradient checks passed over {args.seeds} seeds (tolerance 1e-4)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
                "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigError, ProtocolError, StagingError, ShapeError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (WeightFileError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
