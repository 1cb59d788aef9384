"""Command-line front end: ``enkf-fcnn {truth,dataset,train,run,eval,bench}``.

Exit codes: 0 success, 2 invalid configuration or input, 3 provenance error,
4 numerical failure, 5 training failure.
"""

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, artifacts, formats, pipeline, plotting
from .config import load_config, preset_names
from .errors import ContractViolation, ProvenanceError, ToolkitError
from .fcnn import load_model, save_model

log = logging.getLogger("enkf_fcnn")


def _sidecar(out, suffix):
    out = Path(out)
    return out.with_name(out.stem + suffix)


def cmd_truth(args):
    started = time.time()
    config = load_config(args.config, seed=args.seed)
    truths = pipeline.generate_truths(config, workers=args.workers)
    out = formats.save_truths(args.out, config, truths)
    formats.write_manifest(out, "truth", config, outputs=[out], started=started,
                           extra={"truth_key": config.truth_key()})
    log.info("wrote %d trajectories of %d states to %s", len(truths), config.windows + 1, out)
    return 0


def cmd_dataset(args):
    started = time.time()
    config = load_config(args.config, seed=args.seed)
    truths, truth_sha = formats.load_truths(args.truth, config)
    dataset = pipeline.generate_dataset(config, truths, workers=args.workers)
    out = formats.save_dataset(args.out, config, dataset, truth_sha)
    formats.write_manifest(out, "dataset", config, inputs=[args.truth], outputs=[out], started=started,
                           extra={"truth_sha256": truth_sha, "truth_key": config.truth_key()})
    log.info("wrote %d trajectories (train %d, validation %d, test %d) to %s",
             len(dataset.trajectories), len(dataset.train_ids), len(dataset.val_ids), len(dataset.test_ids), out)
    return 0


def _check_dataset(config, dataset):
    layout = dataset.meta.get("input_layout", {})
    if layout != config.input_layout():
        raise ContractViolation(f"dimension mismatch: dataset layout {layout} vs configuration {config.input_layout()}")


def cmd_train(args):
    started = time.time()
    config = load_config(args.config, seed=args.seed)
    dataset = formats.load_dataset(args.dataset)
    _check_dataset(config, dataset)
    inputs = [args.dataset]
    truths = None
    if config.fcnn.get("refinement_rounds", 0):
        if args.truth is None:
            raise ContractViolation("fcnn.refinement_rounds > 0 needs --truth")
        truths, truth_sha = formats.load_truths(args.truth, config)
        if truth_sha != dataset.meta.get("truth_sha256"):
            raise ProvenanceError(f"{args.truth} is not the truth file the dataset was built from")
        inputs.append(args.truth)

    def progress(rec):
        if rec["epoch"] % 50 == 0:
            log.info("round %d epoch %d: %s", rec["round"], rec["epoch"],
                     ", ".join(f"{k}={v:.4g}" for k, v in rec.items() if k.endswith("loss")))

    model = pipeline.train_model(config, dataset, truths=truths, log_fn=progress)
    model.training_meta["dataset_file_sha256"] = dataset.meta["content_sha256"]
    out = save_model(model, args.out)
    metrics = formats.write_history_csv(_sidecar(out, ".metrics.csv"), model.history)
    formats.write_manifest(out, "train", config, inputs=inputs, outputs=[out, metrics], started=started,
                           extra={"dataset_sha256": dataset.meta["content_sha256"], **model.training_meta})
    log.info("model written to %s (test MSE %s)", out, model.training_meta.get("final_test_mse"))
    return 0


def _run_one(args):
    config, model, truth, size = args
    if model is None:
        return truth, pipeline.run_filter(config, truth, size)
    return truth, pipeline.run_coupled(config, model, truth)


def cmd_run(args):
    started = time.time()
    config = load_config(args.config, seed=args.seed)
    truths, truth_sha = formats.load_truths(args.truth, config)
    inputs = [args.truth]
    model = None
    if args.model is not None:
        if args.ensemble == "large":
            raise ContractViolation("a coupled run uses the small ensemble; drop --ensemble large")
        model = load_model(args.model)
        pipeline.check_model(config, model)
        inputs.append(args.model)
    if args.subset == "test":
        if args.dataset is None:
            raise ContractViolation("--subset test needs --dataset")
        dataset = formats.load_dataset(args.dataset)
        if dataset.meta.get("truth_sha256") != truth_sha:
            raise ProvenanceError(f"{args.dataset} was not built from {args.truth}")
        keep = set(dataset.test_ids)
        truths = [t for t in truths if t.index in keep]
        inputs.append(args.dataset)
    size = config.large if args.ensemble == "large" else config.small
    runs = pipeline.parallel_map(_run_one, [(config, model, t, size) for t in truths], args.workers)
    out = formats.write_run_csv(args.out, config, runs, coupled=model is not None)
    outputs = [out]
    if args.plot and runs:
        fig = plotting.plot_run(_sidecar(out, ".png"), formats.read_run_csv(out), runs[0][0].index)
        outputs.append(fig)
    formats.write_manifest(out, "run", config, inputs=inputs, outputs=outputs, started=started, extra={
        "truth_sha256": truth_sha,
        "ensemble_size": size,
        "coupled": model is not None,
        "model_sha256": None if args.model is None else artifacts.file_sha256(args.model),
        "trajectories": [t.index for t in truths],
    })
    log.info("wrote %d trajectories to %s", len(runs), out)
    return 0


def _aligned(run_a, run_b, path_a, path_b):
    if not (np.array_equal(run_a["trajectory"], run_b["trajectory"]) and np.array_equal(run_a["step"], run_b["step"])):
        raise ProvenanceError(f"{path_a} and {path_b} are not on the same trajectory/step grid")


def cmd_eval(args):
    started = time.time()
    paths = {"small": args.small, "large": args.large}
    if args.baseline is not None:
        paths["baseline"] = args.baseline
    manifests = {k: formats.read_manifest(p) for k, p in paths.items()}
    truth_hashes = {m["provenance"].get("truth_sha256") for m in manifests.values()}
    if len(truth_hashes) != 1 or None in truth_hashes:
        raise ProvenanceError("runs were produced from different truth files")
    runs = {k: formats.read_run_csv(p) for k, p in paths.items()}
    for k in runs:
        _aligned(runs["large"], runs[k], paths["large"], paths[k])

    ids, steps, large = formats.grouped(runs["large"], formats.estimate_means(runs["large"]))
    _, _, small = formats.grouped(runs["small"], formats.estimate_means(runs["small"]))
    columns = {"epsilon": pipeline.epsilon_metric(small, large)}
    if "baseline" in runs:
        _, _, base = formats.grouped(runs["baseline"], formats.estimate_means(runs["baseline"]))
        columns["epsilon_baseline"] = pipeline.epsilon_metric(base, large)
    times = formats.grouped(runs["large"], runs["large"]["time"][:, None])[2][0, :, 0]

    out = formats.write_epsilon_csv(args.out, steps, times, columns)
    after0 = steps >= 1
    summary = {
        "trajectories": ids,
        "steps": int(len(steps)),
        "time_mean_epsilon": float(columns["epsilon"][after0].mean()) if after0.any() else 0.0,
    }
    if "epsilon_baseline" in columns:
        base_mean = float(columns["epsilon_baseline"][after0].mean()) if after0.any() else 0.0
        summary["time_mean_epsilon_baseline"] = base_mean
        summary["ratio_baseline_to_small"] = (
            base_mean / summary["time_mean_epsilon"] if summary["time_mean_epsilon"] > 0 else None
        )
    summary_path = artifacts.write_json(_sidecar(out, ".summary.json"), summary)
    outputs = [out, summary_path]
    if not args.no_plot:
        labels = {"epsilon": "corrected" if "corrected_mean" in runs["small"] else "small ensemble",
                  "epsilon_baseline": "baseline"}
        outputs.append(plotting.plot_epsilon(_sidecar(out, ".png"), times, columns, labels))
    formats.write_manifest(out, "eval", inputs=list(paths.values()), outputs=outputs, started=started,
                           extra={"truth_sha256": truth_hashes.pop(), **summary})
    print(json.dumps({k: v for k, v in summary.items() if k != "trajectories"}))
    return 0


def cmd_bench(args):
    started = time.time()
    config = load_config(args.config, seed=args.seed)
    model = load_model(args.model)
    result = pipeline.timing_benchmark(config, model, repetitions=args.repetitions)
    result["machine"] = {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
    }
    result["config"] = config.name
    out = artifacts.write_json(args.out, result)
    formats.write_manifest(out, "bench", config, inputs=[args.model], outputs=[out], started=started)
    print(json.dumps({k: result[k] for k in ("single_window_seconds", "fcnn_inference_seconds", "repetitions")}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="enkf-fcnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help=f"config file or preset name ({', '.join(preset_names())})")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="parallel workers over trajectories")
        p.add_argument("--out", required=True, help="output path")
        return p

    p = common(sub.add_parser("truth", help="generate reference trajectories"))
    p.set_defaults(func=cmd_truth)

    p = common(sub.add_parser("dataset", help="paired large/small EnKF runs and training targets"))
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_dataset)

    p = common(sub.add_parser("train", help="train the correction network"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", help="truth file, required when refinement rounds are configured")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("run", help="plain or coupled filter run, written as CSV"))
    p.add_argument("--truth", required=True)
    p.add_argument("--model", help="trained model; enables the coupled run")
    p.add_argument("--ensemble", choices=("small", "large"), default="small")
    p.add_argument("--dataset", help="dataset whose split selects trajectories for --subset test")
    p.add_argument("--subset", choices=("all", "test"), default="all")
    p.add_argument("--plot", action="store_true", help="also render the first trajectory")
    p.set_defaults(func=cmd_run)

    p = common(sub.add_parser("eval", help="epsilon(t) between a small-ensemble and a large-ensemble run"),
               config_required=False)
    p.add_argument("--small", required=True, help="run to evaluate (corrected means when present)")
    p.add_argument("--large", required=True, help="large-ensemble reference run")
    p.add_argument("--baseline", help="second small-ensemble run for the ratio, e.g. the plain EnKF")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("bench", help="time one window propagation against one network call"))
    p.add_argument("--model", required=True)
    p.add_argument("--repetitions", type=int, default=1000)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: file not found", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
