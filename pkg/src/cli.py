"""Command-line front end: generate -> fit -> evaluate / curves / audit -> correct.

Every command writes its outputs plus a manifest.json into --out. Errors are
reported as a JSON record on stderr (exit code 2, or 1 when unexpected).
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

import src
from src.data_generation.synthetic_data import GeneratorParams, OracleDataset, generate, summarize, train_test_split
from src.evaluation.curves import DEFAULT_BINS, EvalMode, all_curves, curves_frame, metric_under_mode
from src.evaluation.estimators import CLIP_MODES, DEFAULT_CLIP, METRICS, estimate_mean_y0
from src.experiments.pipeline import PIPELINE_CLIP_MODE, fit_models
from src.experiments.reproduce import EXPERIMENT_ALIASES, EXPERIMENTS, reproduce, write_postprocess_outputs
from src.fairness.balance import N_BOOTSTRAP, balance_residuals, independence_report
from src.fairness.corrections import DEFAULT_K_GRID, postprocess_experiment, reweigh_experiment
from src.fairness.metrics import fairness_report, group_metrics
from src.models.logistic_model import FitConfig, threshold_labels
from src.models.nuisance import NuisanceSet, attach_scores
from src.utils.config import get_settings
from src.utils.helpers import CFEvalError, ParameterError, build, to_jsonable, write_json, write_manifest
from src.utils.logger import configure_logging, get_logger

logger = get_logger(__name__)

SCORE_COLUMNS = {"observational": "obs_hat", "counterfactual": "s0_hat"}


class CommandLineParser(argparse.ArgumentParser):
    """Reports usage errors as the same JSON record other failures use."""

    def error(self, message: str):
        record = {"error": "UsageError", "message": message, "details": {"usage": self.format_usage().strip()}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        self.exit(2)


class RunConfig(BaseModel):
    command: str
    input: Optional[str] = None
    output_dir: str
    generator: Optional[GeneratorParams] = None
    fit: FitConfig = Field(default_factory=FitConfig)
    threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    n_bins: int = Field(default=DEFAULT_BINS, ge=1)
    clip: float = Field(default=DEFAULT_CLIP, gt=0.0, lt=0.5)
    clip_mode: str = PIPELINE_CLIP_MODE
    modes: List[str] = Field(default_factory=lambda: [m.value for m in EvalMode])
    group_column: str = "a"
    seed: int = Field(default=0, ge=0)

    @field_validator("clip_mode")
    @classmethod
    def _known_clip_mode(cls, value: str) -> str:
        if value not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}")
        return value

    @field_validator("modes")
    @classmethod
    def _known_modes(cls, value: List[str]) -> List[str]:
        for mode in value:
            EvalMode(mode)
        return value


def _run_config(args, **values) -> RunConfig:
    return build(
        RunConfig,
        command=args.command,
        output_dir=str(args.out),
        input=getattr(args, "data", None),
        threshold=getattr(args, "threshold", 0.5),
        n_bins=getattr(args, "n_bins", DEFAULT_BINS),
        clip=getattr(args, "clip", DEFAULT_CLIP),
        clip_mode=getattr(args, "clip_mode", PIPELINE_CLIP_MODE),
        seed=getattr(args, "seed", 0),
        **values,
    )


def _finish(config: RunConfig, outputs: List[Path], extra: Optional[dict] = None) -> None:
    write_manifest(
        config.output_dir,
        config.command,
        config.model_dump(),
        config.seed,
        {"outputs": [str(p) for p in outputs], **(extra or {})},
    )


def _emit(record: dict) -> None:
    print(json.dumps(to_jsonable(record), indent=2, sort_keys=True))


def _load_scored(path: str):
    dataset, extra = OracleDataset.from_csv(path)
    nuisances = NuisanceSet.from_frame(extra) if {"pi_hat", "s0_hat"} <= set(extra.columns) else None
    return dataset, extra, nuisances


def _model_scores(extra, model: str) -> np.ndarray:
    column = SCORE_COLUMNS[model]
    if column not in extra.columns:
        raise ParameterError(f"input has no {column!r} column; run `fit` first")
    return extra[column].to_numpy(dtype=float)


def cmd_generate(args) -> None:
    params = build(GeneratorParams, n=args.n, c=args.c, k=args.k, offset=args.offset, seed=args.seed)
    config = _run_config(args, generator=params)
    out = Path(args.out)
    dataset = generate(params, n_jobs=args.n_jobs)
    path = dataset.to_csv(out / "dataset.csv")
    moments = summarize(dataset).to_dict()
    write_json(moments, out / "moments.json")
    _finish(config, [path, out / "moments.json"])
    _emit({"dataset": str(path), "moments": moments})


def cmd_fit(args) -> None:
    fit_config = build(FitConfig, max_iterations=args.max_iterations, gradient_tolerance=args.tol, l2_penalty=args.l2)
    dataset, _ = OracleDataset.from_csv(args.data)
    if args.seed is None:
        args.seed = dataset.params.seed if dataset.params is not None else 0
    config = _run_config(args, fit=fit_config)
    out = Path(args.out)
    train, test, train_idx, test_idx = train_test_split(dataset, test_fraction=args.test_fraction, seed=args.seed)
    models = fit_models(train, args.include_treatment, args.shift_correction, fit_config, args.clip_mode)
    outputs = [model.save(out / "models" / f"{role}.json") for role, model in models.items()]
    nuisances = attach_scores(test, models["propensity"], models["counterfactual"], models["observational"])
    outputs.append(test.to_csv(out / "scored.csv", extra_columns=nuisances.to_columns()))
    split = {"n_train": len(train_idx), "n_test": len(test_idx), "test_fraction": args.test_fraction}
    _finish(config, outputs, {"split": split, "test_indices": test_idx})
    _emit({"models": {role: m.diagnostics for role, m in models.items()}, "split": split})


def cmd_evaluate(args) -> None:
    config = _run_config(args)
    dataset, extra, nuisances = _load_scored(args.data)
    kwargs = {"clip": args.clip, "clip_mode": args.clip_mode}
    if nuisances is None and args.method in ("plugin", "ipw", "dr"):
        raise ParameterError(f"method {args.method!r} needs pi_hat and s0_hat columns; run `fit` first")
    if args.metric == "mean_y0" and args.method in ("plugin", "ipw", "dr"):
        estimate = estimate_mean_y0(dataset, nuisances, method=args.method, **kwargs)
    elif args.method in ("plugin", "ipw"):
        raise ParameterError(f"method {args.method!r} only applies to mean_y0")
    else:
        metric = "base_rate" if args.metric == "mean_y0" else args.metric
        values = None
        if metric != "base_rate":
            scores = _model_scores(extra, args.model)
            values = threshold_labels(scores, args.threshold) if metric in ("tpr", "fpr", "precision") else scores
        estimate = metric_under_mode(metric, args.method, dataset, nuisances, values, r1=args.r1, r2=args.r2, **kwargs)
    path = write_json(estimate.to_dict(), Path(args.out) / "estimate.json")
    _finish(config, [path])
    _emit(estimate.to_dict())


def cmd_curves(args) -> None:
    config = _run_config(args, modes=args.modes)
    dataset, extra, nuisances = _load_scored(args.data)
    thresholds = np.linspace(0.0, 1.0, args.n_thresholds)
    curves = all_curves(
        dataset,
        nuisances,
        _model_scores(extra, args.model),
        model_id=args.model,
        modes=args.modes,
        thresholds=thresholds,
        n_bins=args.n_bins,
        clip=args.clip,
        clip_mode=args.clip_mode,
    )
    out = Path(args.out)
    path = out / "curves.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    curves_frame(list(curves.values())).to_csv(path, index=False)
    areas = {key: curve.area() for key, curve in curves.items() if not key.startswith("calibration")}
    area_path = write_json(areas, out / "areas.json")
    _finish(config, [path, area_path])
    _emit({"curves": str(path), "areas": areas})


def cmd_audit(args) -> None:
    config = _run_config(args, group_column=args.group)
    dataset, extra, nuisances = _load_scored(args.data)
    scores = _model_scores(extra, args.model)
    metrics = group_metrics(
        dataset, nuisances, scores, by_group=args.group, threshold=args.threshold, clip=args.clip, clip_mode=args.clip_mode
    )
    labels = threshold_labels(scores, args.threshold)
    residuals = []
    if args.balance:
        residuals = balance_residuals(dataset, labels, n_bootstrap=args.n_bootstrap, seed=args.seed, n_jobs=args.n_jobs)
    independence = independence_report(dataset, labels) if args.independence else {}
    report = fairness_report(metrics, residuals, independence)
    path = report.save(Path(args.out) / "fairness_report.json")
    _finish(config, [path])
    _emit(
        {
            "report": str(path),
            "disparities": report.disparities,
            "significant_residuals": [r.to_dict() for r in residuals if r.significant],
            "failed_independencies": [
                c.statement for checks in independence.values() for c in checks if not c.passed
            ],
        }
    )


def cmd_reweigh(args) -> None:
    config = _run_config(args)
    table = reweigh_experiment(args.k_grid, c=args.c, n=args.n, seed=args.seed, n_jobs=args.n_jobs)
    path = Path(args.out) / "reweigh.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    table.drop(columns=["weights"]).to_csv(path, index=False)
    _finish(config, [path], {"k_grid": list(args.k_grid), "c": args.c, "n": args.n})
    _emit({"table": str(path), "cf_disparity_after": table["cf_disparity_after"].tolist()})


def cmd_postprocess(args) -> None:
    config = _run_config(args)
    results = postprocess_experiment(
        args.c_grid,
        args.k_grid,
        n=args.n,
        seed=args.seed,
        threshold=args.threshold,
        randomize=not args.expected,
        clip_mode=args.clip_mode,
        n_jobs=args.n_jobs,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = write_postprocess_outputs(out, "postprocess", results)
    path = write_json(summary, out / "postprocess_summary.json")
    _finish(config, [out / "postprocess_table.csv", out / "postprocess_roc_curves.csv", path])
    _emit({"points": [{"c": p["c"], "k": p["k"], "policy": p["policy"]} for p in summary["points"]]})


def cmd_reproduce(args) -> None:
    config = _run_config(args)
    summary = reproduce(args.experiment, args.out, seed=args.seed, n=args.n, n_jobs=args.n_jobs)
    _finish(config, [Path(args.out) / "summary.json"], {"experiment": summary["experiment"]})
    _emit(summary)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = CommandLineParser(prog="cfeval", description="Counterfactual risk-assessment evaluation and fairness audits")
    parser.add_argument("--version", action="version", version=f"%(prog)s {src.__version__}")
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--out", default=str(Path(settings.output_dir) / name), help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--n-jobs", type=int, default=settings.n_jobs)
        return p

    def estimation_options(p):
        p.add_argument("--clip", type=float, default=DEFAULT_CLIP)
        p.add_argument("--clip-mode", choices=CLIP_MODES, default=PIPELINE_CLIP_MODE)

    p = command("generate", cmd_generate, "draw a synthetic potential-outcomes dataset")
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--c", type=float, default=0.1)
    p.add_argument("--k", type=float, default=1.6)
    p.add_argument("--offset", type=float, default=-0.5)

    p = command("fit", cmd_fit, "fit observational, propensity and counterfactual models; score the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--include-treatment", action="store_true", help="use t as a feature of the observational model")
    p.add_argument("--shift-correction", action="store_true", help="weight control rows by 1/(1 - propensity)")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--clip-mode", choices=CLIP_MODES, default=PIPELINE_CLIP_MODE)
    # the split follows the generator seed recorded next to the dataset
    p.set_defaults(seed=None)

    p = command("evaluate", cmd_evaluate, "estimate one metric")
    p.add_argument("--data", required=True, help="scored CSV written by `fit`")
    p.add_argument("--metric", choices=METRICS, default="mean_y0")
    p.add_argument("--method", choices=["plugin", "ipw"] + [m.value for m in EvalMode], default="dr")
    p.add_argument("--model", choices=sorted(SCORE_COLUMNS), default="counterfactual")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--r1", type=float, default=None)
    p.add_argument("--r2", type=float, default=None)
    estimation_options(p)

    p = command("curves", cmd_curves, "PR, ROC and calibration curves under each evaluation mode")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=sorted(SCORE_COLUMNS), default="counterfactual")
    p.add_argument("--modes", nargs="+", choices=[m.value for m in EvalMode], default=[m.value for m in EvalMode])
    p.add_argument("--n-thresholds", type=int, default=101)
    p.add_argument("--n-bins", type=int, default=DEFAULT_BINS)
    estimation_options(p)

    p = command("audit", cmd_audit, "group fairness metrics, balance residuals and independence checks")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=sorted(SCORE_COLUMNS), default="counterfactual")
    p.add_argument("--group", default="a")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--independence", action="store_true")
    p.add_argument("--n-bootstrap", type=int, default=N_BOOTSTRAP)
    estimation_options(p)

    p = command("reweigh", cmd_reweigh, "base rates before and after reweighing over a k grid")
    p.add_argument("--k-grid", type=float, nargs="+", default=list(DEFAULT_K_GRID))
    p.add_argument("--c", type=float, default=0.1)
    p.add_argument("--n", type=int, default=100000)

    p = command("postprocess", cmd_postprocess, "generalized equalized-odds post-processing over a (c, k) grid")
    p.add_argument("--c-grid", type=float, nargs="+", default=[0.1])
    p.add_argument("--k-grid", type=float, nargs="+", default=[1.6])
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--expected", action="store_true", help="mix scores in expectation instead of at random")
    p.add_argument("--clip-mode", choices=CLIP_MODES, default=PIPELINE_CLIP_MODE)

    p = command("reproduce", cmd_reproduce, "write the data behind one synthetic-experiment artifact")
    p.add_argument("experiment", choices=EXPERIMENTS + tuple(EXPERIMENT_ALIASES))
    p.add_argument("--n", type=int, default=100000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.log_level:
        configure_logging(level=args.log_level)
    try:
        args.handler(args)
    except CFEvalError as e:
        print(json.dumps(to_jsonable(e.to_record()), sort_keys=True), file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure")
        record = {"error": type(e).__name__, "message": str(e), "details": {}}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
