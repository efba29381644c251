"""Command-line entry point wiring every stage of the laboratory.

One executable, ``head``, with eight subcommands covering the full loop:
dataset creation, detector training and evaluation, closed-form and Monte
Carlo policy economics, decision-step and completeness sweeps, live
abort-and-reseed campaigns, and plain-text report rendering.

Exit codes: 0 on success, 1 when the invocation or its inputs are invalid,
2 when a computation fails at runtime.  Every subcommand that takes
``--out`` writes its artifacts there together with ``config_snapshot.json``,
a sorted-key JSON record sufficient to reproduce the outputs bit for bit
(nothing here ever reads the clock or ambient entropy).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, asdict, fields
from pathlib import Path

from .dataset import (DEFAULT_CRITICAL_STEPS, DatasetConfig, build_prompt_grid,
                      generate_dataset, load_manifest, CATALOG_NAME)
from .detector import (DetectorModel, VARIANTS, build_design_matrix,
                       calibrate_threshold, evaluate_detector, fit_detector,
                       merge_counts)
from .engine import make_schedule
from .errors import (DegenerateLabels, DegenerateVariance, DimensionMismatch,
                     EmptyTargets, GrammarError, InvalidT, MissingCapture,
                     MissingReport, NeverAccepts, NonFiniteLoss,
                     RestartLimitExceeded, TrialBudgetExceeded, UnknownObject,
                     UsageError)
from .runtime import (BASELINE, HEAD, RunPolicy, measure_campaign,
                      write_campaign_csv)
from .scene import build_conditional_mixture, default_catalog, load_catalog
from .timesaver import (AttemptDistribution, PolicyParams, RatePoint,
                        baseline_cost, expected_cost_closed_form,
                        monte_carlo_cost, relative_saving, sweep_probability,
                        sweep_tlast, write_sweep_p_csv, write_sweep_tlast_csv)

_VALIDATION_ERRORS = (UsageError, GrammarError, UnknownObject, EmptyTargets,
                      InvalidT, MissingReport, DimensionMismatch)
_RUNTIME_ERRORS = (NeverAccepts, TrialBudgetExceeded, RestartLimitExceeded,
                   DegenerateVariance, DegenerateLabels, NonFiniteLoss,
                   MissingCapture, OSError, ValueError)

SNAPSHOT_NAME = "config_snapshot.json"


@dataclass(frozen=True)
class DetectorSettings:
    """Training hyperparameters and model variant selection."""

    variant: str = "combined"
    steps: tuple[int, ...] = (8,)
    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    threshold: float = 0.5
    target_recall: float | None = None
    calibration_split: str = "val"


@dataclass(frozen=True)
class SimulationSettings:
    """Monte Carlo budget and the completeness sweep grid."""

    mc_runs: int = 2000
    seed: int = 0
    p_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class RuntimeSettings:
    """Live campaign sizing and seeding."""

    runs_per_prompt: int = 20
    root_seed: int = 2024
    max_restarts: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description: one section per pipeline stage."""

    dataset: DatasetConfig = DatasetConfig()
    detector: DetectorSettings = DetectorSettings()
    simulation: SimulationSettings = SimulationSettings()
    runtime: RuntimeSettings = RuntimeSettings()

    def to_dict(self) -> dict:
        return {"dataset": self.dataset.to_dict(),
                "detector": asdict(self.detector),
                "simulation": asdict(self.simulation),
                "runtime": asdict(self.runtime)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"dataset", "detector", "simulation", "runtime"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")

        def section(klass, payload):
            names = {f.name for f in fields(klass)}
            bad = set(payload) - names
            if bad:
                raise UsageError(f"unknown keys in {klass.__name__}: {sorted(bad)}")
            kwargs = dict(payload)
            for name in ("steps", "p_grid"):
                if name in kwargs:
                    kwargs[name] = tuple(kwargs[name])
            return klass(**kwargs)

        return cls(
            dataset=DatasetConfig.from_dict(d.get("dataset", {})),
            detector=section(DetectorSettings, d.get("detector", {})),
            simulation=section(SimulationSettings, d.get("simulation", {})),
            runtime=section(RuntimeSettings, d.get("runtime", {})),
        )


def load_experiment_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(raw)


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_snapshot(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **payload}
    (out_dir / SNAPSHOT_NAME).write_text(
        json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated floats, got {text!r}") from exc


def _load_dataset(dataset_dir):
    root = Path(dataset_dir)
    manifest = load_manifest(root)
    catalog = load_catalog(root / CATALOG_NAME)
    return root, manifest, catalog


def _override(value, fallback):
    return fallback if value is None else value


# ---------------------------------------------------------------- dataset


def _cmd_make_dataset(args) -> None:
    config = load_experiment_config(args.config).dataset
    updates = {}
    for flag in ("global_seed", "seeds_per_prompt", "num_steps", "faithfulness"):
        value = getattr(args, flag)
        if value is not None:
            updates[flag] = value
    if updates:
        config = DatasetConfig.from_dict({**config.to_dict(), **updates})
    if args.catalog is not None:
        catalog = load_catalog(args.catalog)
    else:
        catalog = default_catalog()
    out = Path(args.out)
    _write_snapshot(out, "make-dataset",
                    {"dataset": config.to_dict(), "jobs": args.jobs})
    manifest = generate_dataset(config, catalog, out, jobs=args.jobs)
    stats = manifest.stats
    print(f"dataset {out}: {len(manifest.samples)} samples, "
          f"complete fraction {stats['complete_fraction']:.4f}")


# ---------------------------------------------------------------- detector


def _resolved_detector_settings(args) -> DetectorSettings:
    base = load_experiment_config(args.config).detector
    return DetectorSettings(
        variant=_override(args.variant, base.variant),
        steps=(tuple(_parse_int_list(args.steps)) if args.steps is not None
               else tuple(base.steps)),
        lr=_override(args.lr, base.lr),
        epochs=_override(args.epochs, base.epochs),
        l2=_override(args.l2, base.l2),
        threshold=_override(args.threshold, base.threshold),
        target_recall=_override(args.target_recall, base.target_recall),
        calibration_split=_override(args.calibration_split,
                                    base.calibration_split),
    )


def _cmd_train(args) -> None:
    settings = _resolved_detector_settings(args)
    if settings.variant not in VARIANTS:
        raise UsageError(f"variant must be one of {VARIANTS}")
    root, manifest, catalog = _load_dataset(args.dataset)
    design = build_design_matrix(root, manifest, catalog, settings.steps,
                                 variant=settings.variant, split="train")
    model = fit_detector(design, lr=settings.lr, epochs=settings.epochs,
                         l2=settings.l2, threshold=settings.threshold)
    if settings.target_recall is not None:
        cal = build_design_matrix(root, manifest, catalog, settings.steps,
                                  variant=settings.variant,
                                  split=settings.calibration_split)
        model.threshold = calibrate_threshold(model.scores(cal.x), cal.y,
                                              settings.target_recall)
    out = Path(args.out)
    _write_snapshot(out, "train", {"dataset": str(args.dataset),
                                   "detector": asdict(settings)})
    model.save(out / "model.json")
    report = {}
    for split in ("train", "val"):
        if not manifest.samples_for_split(split):
            continue
        report[split] = evaluate_detector(
            model, build_design_matrix(root, manifest, catalog, settings.steps,
                                       variant=settings.variant,
                                       split=split)).to_dict()
    _write_json(out / "train_report.json", report)
    shown = "val" if "val" in report else "train"
    pooled = report[shown]["pooled"]
    print(f"model {out / 'model.json'}: {shown} recall "
          f"{pooled['recall']:.4f}, tn_rate {pooled['true_negative_rate']:.4f}")


def _cmd_eval(args) -> None:
    root, manifest, catalog = _load_dataset(args.dataset)
    model = DetectorModel.load(args.model)
    design = build_design_matrix(root, manifest, catalog, model.steps,
                                 variant=model.variant, split=args.split)
    report = evaluate_detector(model, design)
    out = Path(args.out)
    _write_snapshot(out, "eval", {"dataset": str(args.dataset),
                                  "model": str(args.model),
                                  "split": args.split})
    _write_json(out / "eval_report.json",
                {"split": args.split, "variant": model.variant,
                 "steps": list(model.steps), **report.to_dict()})
    pooled = report.pooled
    print(f"split {args.split}: recall {pooled.recall:.4f}, "
          f"tn_rate {pooled.true_negative_rate:.4f}, "
          f"accuracy {pooled.accuracy:.4f}")


# ---------------------------------------------------------------- economics


def _cmd_simulate(args) -> None:
    names = tuple(f"object{i}" for i in range(args.objects))
    q = args.p ** (1.0 / args.objects)
    dist = AttemptDistribution.from_faithfulness(names, q)
    policy = PolicyParams.symmetric(names, args.recall, args.tn_rate, args.f)
    expected = expected_cost_closed_form(dist, policy)
    base = baseline_cost(dist)
    saving = relative_saving(dist, policy)
    print(f"saving {saving:.4f}")
    result = {"p": args.p, "recall": args.recall, "tn_rate": args.tn_rate,
              "f": args.f, "objects": args.objects,
              "expected_cost": expected, "baseline_cost": base,
              "saving_closed_form": saving}
    if args.mc_runs > 0:
        report = monte_carlo_cost(dist, policy, args.mc_runs, seed=args.seed)
        mc_saving = 1.0 - report.mean_cost / base
        print(f"mc saving {mc_saving:.4f} "
              f"(ci {1.0 - report.ci_hi / base:.4f}..{1.0 - report.ci_lo / base:.4f})")
        result.update({"mc_runs": args.mc_runs, "seed": args.seed,
                       "saving_monte_carlo": mc_saving,
                       "mc_mean_cost": report.mean_cost,
                       "mc_stderr": report.stderr})
    if args.out is not None:
        out = Path(args.out)
        _write_snapshot(out, "simulate",
                        {k: result[k] for k in
                         ("p", "recall", "tn_rate", "f", "objects")})
        _write_json(out / "simulate_result.json", result)


def _rate_point(report, manifest, t_last: int) -> RatePoint:
    """Collapse per-object-id confusion into per-role policy rates."""
    roles = {"subject": manifest.config.subjects,
             "thing": manifest.config.objects}
    recall_by, tn_by = {}, {}
    for role, ids in roles.items():
        counts = merge_counts(report.per_object[i] for i in ids
                              if i in report.per_object)
        if counts.recall is None or counts.true_negative_rate is None:
            raise MissingReport(
                f"role {role!r} lacks both outcome classes at t_last={t_last}")
        recall_by[role] = counts.recall
        tn_by[role] = counts.true_negative_rate
    return RatePoint(t_last=t_last, recall_by_object=recall_by,
                     tn_by_object=tn_by,
                     pooled_recall=report.pooled.recall,
                     pooled_tn=report.pooled.true_negative_rate)


def _cmd_sweep_tlast(args) -> None:
    root, manifest, catalog = _load_dataset(args.dataset)
    model_paths = [p for p in args.models.split(",") if p.strip()]
    points = []
    for path in model_paths:
        model = DetectorModel.load(path)
        design = build_design_matrix(root, manifest, catalog, model.steps,
                                     variant=model.variant, split=args.split)
        report = evaluate_detector(model, design)
        points.append(_rate_point(report, manifest, max(model.steps)))
    num_steps = manifest.config.num_steps
    dist = AttemptDistribution.from_faithfulness(
        ("subject", "thing"), manifest.config.faithfulness)
    rows = sweep_tlast(dist, points, num_steps, n_runs=args.mc_runs,
                       seed=args.seed)
    out = Path(args.out)
    _write_snapshot(out, "sweep-tlast",
                    {"dataset": str(args.dataset), "models": model_paths,
                     "split": args.split, "mc_runs": args.mc_runs,
                     "seed": args.seed})
    write_sweep_tlast_csv(rows, out / "sweep_tlast.csv")
    for row in rows:
        print(f"t_last {row.t_last:3d}  f {row.cost_fraction:.2f}  "
              f"saving_cf {row.saving_closed_form:+.4f}")


def _cmd_sweep_p(args) -> None:
    config = load_experiment_config(args.config).simulation
    grid = (_parse_float_list(args.p_grid) if args.p_grid is not None
            else config.p_grid)
    names = tuple(f"object{i}" for i in range(args.objects))
    rows = sweep_probability(names, args.recall, args.tn_rate, args.t_last,
                             args.num_steps, grid)
    out = Path(args.out)
    _write_snapshot(out, "sweep-p",
                    {"recall": args.recall, "tn_rate": args.tn_rate,
                     "t_last": args.t_last, "num_steps": args.num_steps,
                     "objects": args.objects, "p_grid": list(grid)})
    write_sweep_p_csv(rows, out / "sweep_p.csv")
    print(f"wrote {len(rows)} rows to {out / 'sweep_p.csv'}")


# ---------------------------------------------------------------- runtime


def _cmd_run(args) -> None:
    base = load_experiment_config(args.config).runtime
    settings = RuntimeSettings(
        runs_per_prompt=_override(args.runs_per_prompt, base.runs_per_prompt),
        root_seed=_override(args.root_seed, base.root_seed),
        max_restarts=_override(args.max_restarts, base.max_restarts),
    )
    root, manifest, catalog = _load_dataset(args.dataset)
    model = DetectorModel.load(args.model)
    config = manifest.config
    prompts = build_prompt_grid(config.subjects, config.objects)
    if args.split != "all":
        keep = set(manifest.splits.get(args.split, ()))
        if not keep:
            raise UsageError(f"split {args.split!r} selects no prompts")
        prompts = tuple(p for i, p in enumerate(prompts) if i in keep)
    mixtures = [build_conditional_mixture(p.targets, config.faithfulness,
                                          catalog, s2=config.component_std**2)
                for p in prompts]
    schedule = make_schedule(config.num_steps)
    reference = RunPolicy(mode=BASELINE, max_restarts=settings.max_restarts)
    treatment = RunPolicy(mode=HEAD, model=model,
                          capture_steps=config.critical_steps,
                          max_restarts=settings.max_restarts)
    report = measure_campaign(prompts, mixtures, schedule, reference,
                              treatment, catalog, settings.runs_per_prompt,
                              settings.root_seed,
                              label_threshold=config.label_threshold)
    out = Path(args.out)
    _write_snapshot(out, "run",
                    {"dataset": str(args.dataset), "model": str(args.model),
                     "split": args.split, **asdict(settings)})
    write_campaign_csv(report, out / "campaign.csv")
    print(f"pooled saving {report.pooled_saving:+.4f} "
          f"({settings.runs_per_prompt} runs x {len(prompts)} prompts)")


# ---------------------------------------------------------------- report


def _render_table(path: Path) -> str:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cmd_report(args) -> None:
    src = Path(args.dir)
    sections = []
    for name in ("sweep_tlast.csv", "sweep_p.csv", "campaign.csv"):
        path = src / name
        if path.exists():
            sections.append(f"== {name} ==\n{_render_table(path)}")
    if not sections:
        raise UsageError(f"no known CSV artifacts found under {src}")
    text = "\n\n".join(sections) + "\n"
    out = Path(args.out)
    _write_snapshot(out, "report", {"dir": str(args.dir)})
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")


# ---------------------------------------------------------------- dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="head",
                     description="Early-abort diffusion laboratory")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="generate the capture dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--global-seed", dest="global_seed", type=int, default=None)
    p.add_argument("--seeds-per-prompt", dest="seeds_per_prompt", type=int,
                   default=None)
    p.add_argument("--num-steps", dest="num_steps", type=int, default=None)
    p.add_argument("--faithfulness", type=float, default=None)
    p.add_argument("--catalog", default=None)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("train", help="fit a presence detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", default=None, choices=VARIANTS)
    p.add_argument("--steps", default=None,
                   help="comma-separated capture labels, e.g. 8 or 4,8,16")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--target-recall", dest="target_recall", type=float,
                   default=None)
    p.add_argument("--calibration-split", dest="calibration_split",
                   default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="confusion report on a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("simulate", help="closed-form and MC policy economics")
    p.add_argument("--p", type=float, required=True,
                   help="probability an attempt is complete")
    p.add_argument("--recall", type=float, required=True)
    p.add_argument("--tn-rate", dest="tn_rate", type=float, required=True)
    p.add_argument("--f", type=float, required=True,
                   help="cost fraction sunk at the abort decision")
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--mc-runs", dest="mc_runs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep-tlast", help="saving vs decision step")
    p.add_argument("--dataset", required=True)
    p.add_argument("--models", required=True,
                   help="comma-separated model.json paths")
    p.add_argument("--split", default="val")
    p.add_argument("--mc-runs", dest="mc_runs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep_tlast)

    p = sub.add_parser("sweep-p", help="saving vs completeness probability")
    p.add_argument("--recall", type=float, required=True)
    p.add_argument("--tn-rate", dest="tn_rate", type=float, required=True)
    p.add_argument("--t-last", dest="t_last", type=int, required=True)
    p.add_argument("--num-steps", dest="num_steps", type=int, default=50)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--p-grid", dest="p_grid", default=None,
                   help="comma-separated completeness values")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep_p)

    p = sub.add_parser("run", help="live head-vs-baseline campaign")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", default="all")
    p.add_argument("--runs-per-prompt", dest="runs_per_prompt", type=int,
                   default=None)
    p.add_argument("--root-seed", dest="root_seed", type=int, default=None)
    p.add_argument("--max-restarts", dest="max_restarts", type=int,
                   default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="render CSV artifacts as text tables")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError(parser.format_usage().strip())
        args.func(args)
        return 0
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
