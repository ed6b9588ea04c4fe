import argparse
import logging
from pathlib import Path

import numpy as np

from src.classification.classifier import evaluate_accuracy
from src.diffusion.score_models import MlpScoreNet, load_checkpoint, save_checkpoint
from src.evaluation.report import ExperimentResults, collect_report, emit_report
from src.experiments.datasets import GmmOracle, gen_gmm_dataset, gen_toyimage_dataset, sample_pairs
from src.experiments.interpolation import CURVE_CSV_FIELDS, default_t_grid, interpolation_experiment
from src.experiments.trace_convergence import CONVERGENCE_CSV_FIELDS, trace_convergence_experiment
from src.likelihood.prob_flow import (
    SolverError,
    TraceCfg,
    TraceMode,
    bits_per_dim,
    likelihood_record,
    log_likelihood,
    uniform_reference_logp,
)
from src.robustness.attacks import EXACT_DIVERGENCE_MAX_DIM, AttackCfg, AttackNorm, default_attack_cfg, run_attacks
from src.robustness.corruptions import CORRUPTION_CSV_FIELDS, corruption_eval
from src.training.dsm import LOSS_TRACE_FIELDS, train
from src.utils.config import DataKind, cli_overrides, default_modes, load_config, substream_seed
from src.utils.io import load_dataset, read_json, save_dataset, write_json

logger = logging.getLogger(__name__)

COMMANDS = [
    "gen-data", "train", "likelihood", "classify", "attack",
    "corrupt-eval", "interpolate", "trace-convergence", "report",
]


def out_path(config, name):
    return Path(config.out_dir) / name


def cmd_gen_data(args, config):
    dc = config.data
    if dc.kind == DataKind.GMM:
        modes = np.asarray(dc.modes) if dc.modes is not None else default_modes(dc.num_classes, dc.dim, dc.mode_radius)
        train_set, oracle = gen_gmm_dataset(
            dc.num_classes, dc.dim, modes, dc.scale, dc.n_train_per_class, substream_seed(config.seed, "data-train")
        )
        test_set, _ = gen_gmm_dataset(
            dc.num_classes, dc.dim, modes, dc.scale, dc.n_test_per_class, substream_seed(config.seed, "data-test")
        )
        write_json(out_path(config, "oracle.json"), {
            "weights": oracle.weights.tolist(),
            "means": oracle.means.tolist(),
            "s2": oracle.s2.tolist(),
        })
        bayes = oracle.bayes_accuracy(test_set) if len(test_set) else None
    else:
        train_set = gen_toyimage_dataset(
            dc.num_classes, dc.height, dc.width, dc.n_train_per_class,
            substream_seed(config.seed, "data-train"), dc.noise_amplitude, dc.levels,
        )
        test_set = gen_toyimage_dataset(
            dc.num_classes, dc.height, dc.width, dc.n_test_per_class,
            substream_seed(config.seed, "data-test"), dc.noise_amplitude, dc.levels,
        )
        bayes = None

    save_dataset(train_set, out_path(config, "train.sbgc"))
    save_dataset(test_set, out_path(config, "test.sbgc"))
    print(f"Generated {len(train_set)} train / {len(test_set)} test samples in {config.out_dir}")
    return ExperimentResults(
        name="gen-data",
        config=config,
        summary={
            "kind": dc.kind.value,
            "n_train": len(train_set),
            "n_test": len(test_set),
            "dim": train_set.dim,
            "num_classes": train_set.num_classes,
            "domain": list(train_set.domain),
            "bayes_accuracy_test": bayes,
        },
    )


def load_split(args, config, split):
    path = args.data or out_path(config, f"{split}.sbgc")
    return load_dataset(path)


def load_model(args, config):
    """Checkpoint (default model.sbgc) or, with --analytic, the GMM oracle's closed-form score."""
    if args.analytic:
        oracle_file = out_path(config, "oracle.json")
        params = read_json(oracle_file)
        oracle = GmmOracle(params["weights"], params["means"], params["s2"])
        print(f"Using the analytic class scores from {oracle_file}")
        return oracle.score_model(config.sde)
    path = args.model or out_path(config, "model.sbgc")
    net = load_checkpoint(path)
    if net.spec != config.sde:
        logger.warning(f"checkpoint {path} was trained with {net.spec}, config says {config.sde}; using the checkpoint's")
    net.eval()
    print(f"Loaded model from {path}")
    return net


def cmd_train(args, config):
    dataset = load_split(args, config, "train")
    net = MlpScoreNet(
        dataset.dim, dataset.num_classes, config.sde, config.model,
        init_seed=substream_seed(config.seed, "init"),
    )
    tcfg = config.train.model_copy(update={"seed": substream_seed(config.seed, "train", config.train.seed)})
    result = train(net, dataset, tcfg)
    save_checkpoint(result.ema_net, out_path(config, "model.sbgc"))
    save_checkpoint(result.net, out_path(config, "model_last.sbgc"))

    losses = np.array([row["loss"] for row in result.loss_trace])
    window = min(1000, len(losses))
    return ExperimentResults(
        name="train",
        config=config,
        summary={
            "steps": len(losses),
            "final_loss": float(losses[-1]) if len(losses) else None,
            "leading_mean_loss": float(losses[:window].mean()) if window else None,
            "trailing_mean_loss": float(losses[-window:].mean()) if window else None,
            "n_parameters": sum(p.numel() for p in net.parameters()),
        },
        tables={"loss": (LOSS_TRACE_FIELDS, result.loss_trace)},
    )


def eval_limit(config, n):
    return n if config.eval_limit is None else min(config.eval_limit, n)


def cmd_likelihood(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    x = dataset.continuous(substream_seed(config.seed, "dequant"))
    n = eval_limit(config, len(dataset))
    records, failed = [], 0
    for i in range(n):
        label = int(dataset.labels[i])
        y_cond = None if args.unconditional else label
        print(f"[{i+1}/{n}] sample {i} (label {label})")
        try:
            out = log_likelihood(model, model.spec, x[i], config.solver, config.trace, y=y_cond, sample_id=i)
        except SolverError:
            failed += 1
            records.append({"sample_id": i, "label": label, "y_cond": y_cond, "failed": True})
            continue
        rec = likelihood_record(i, label, y_cond, out, config.trace)
        if dataset.quantized:
            rec["bits_per_dim"] = bits_per_dim(out.logp, dataset.dim, dataset.levels)
        records.append(rec)

    ok = [r for r in records if not r.get("failed")]
    summary = {
        "n_samples": n,
        "n_failed": failed,
        "conditional": not args.unconditional,
        "mean_logp": float(np.mean([r["logp"] for r in ok])) if ok else None,
        "mean_nfe": float(np.mean([r["nfe"] for r in ok])) if ok else None,
    }
    if dataset.quantized:
        summary["mean_bits_per_dim"] = float(np.mean([r["bits_per_dim"] for r in ok])) if ok else None
        summary["uniform_reference_bits_per_dim"] = bits_per_dim(
            uniform_reference_logp(dataset.dim), dataset.dim, dataset.levels
        )
    return ExperimentResults(name="likelihood", config=config, summary=summary, records={"records": records})


def cmd_classify(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    accuracy, records, summary = evaluate_accuracy(
        model, dataset, config.solver, config.trace,
        dequant_seed=substream_seed(config.seed, "dequant"), limit=config.eval_limit,
    )
    oracle_file = out_path(config, "oracle.json")
    if not dataset.quantized and oracle_file.exists():
        params = read_json(oracle_file)
        subset = dataset.subset(np.arange(summary["n_samples"]))
        summary["bayes_accuracy"] = GmmOracle(params["weights"], params["means"], params["s2"]).bayes_accuracy(subset)
    print(f"Accuracy: {accuracy:.4f}")
    return ExperimentResults(name="classify", config=config, summary=summary, records={"records": records})


def robustness_trace_cfg(config, dim):
    """Exact divergence when configured and affordable, else Hutchinson with the sweep probe count."""
    if config.trace.mode == TraceMode.EXACT and dim <= EXACT_DIVERGENCE_MAX_DIM:
        return None
    return TraceCfg(
        mode=TraceMode.HUTCHINSON, n_probes=config.robustness_probes,
        probe=config.trace.probe, seed=config.trace.seed,
    )


def cmd_attack(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    lo, hi = dataset.continuous_domain
    norm = AttackNorm(args.norm) if args.norm else config.attack.norm
    if args.eps is not None:
        acfg = AttackCfg(**{**config.attack.model_dump(), "norm": norm, "eps": args.eps})
    else:
        acfg = default_attack_cfg(
            norm, hi - lo,
            step_size=config.attack.step_size, n_steps=config.attack.n_steps,
            random_start=config.attack.random_start, seed=config.attack.seed,
        )
    records, summary = run_attacks(
        model, dataset, acfg, config.solver.fixed_steps, config.solver,
        robustness_trace_cfg(config, dataset.dim), limit=config.eval_limit,
        dequant_seed=substream_seed(config.seed, "dequant"),
    )
    summary["attack"] = acfg.model_dump(mode="json")
    print(f"Clean accuracy {summary['clean_accuracy']:.4f}, adversarial accuracy {summary['adversarial_accuracy']:.4f}")
    return ExperimentResults(name=f"attack_{norm.value}", config=config, summary=summary, records={"records": records})


def cmd_corrupt_eval(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    tcfg = robustness_trace_cfg(config, dataset.dim) or TraceCfg(mode=TraceMode.EXACT)
    report = corruption_eval(
        model, dataset, config.corruption, config.solver, tcfg,
        seed=substream_seed(config.seed, "corrupt"), limit=config.eval_limit,
    )
    return ExperimentResults(
        name="corrupt-eval",
        config=config,
        summary=report.summary(),
        tables={"matrix": (CORRUPTION_CSV_FIELDS, report.rows)},
    )


def cmd_interpolate(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    pairs = sample_pairs(dataset, config.interpolation.n_pairs, substream_seed(config.seed, "pairs"))
    result = interpolation_experiment(
        model, model.spec, pairs, default_t_grid(config.interpolation.grid_points), config.solver, config.trace
    )
    per_pair = [
        {"pair": i, "failed": i in result.failed_pairs, "logp": row}
        for i, row in enumerate(result.per_pair)
    ]
    return ExperimentResults(
        name="interpolate",
        config=config,
        summary=result.summary(),
        tables={"curve": (CURVE_CSV_FIELDS, result.curve.rows())},
        records={"pairs": per_pair},
    )


def cmd_trace_convergence(args, config):
    dataset = load_split(args, config, "test")
    model = load_model(args, config)
    rows = trace_convergence_experiment(
        model, dataset, config.convergence.probe_counts, config.solver,
        seed=config.trace.seed, probe=config.trace.probe, limit=config.eval_limit,
        dequant_seed=substream_seed(config.seed, "dequant"),
    )
    return ExperimentResults(
        name="trace-convergence",
        config=config,
        summary={"rows": rows},
        tables={"table": (CONVERGENCE_CSV_FIELDS, rows)},
    )


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "likelihood": cmd_likelihood,
    "classify": cmd_classify,
    "attack": cmd_attack,
    "corrupt-eval": cmd_corrupt_eval,
    "interpolate": cmd_interpolate,
    "trace-convergence": cmd_trace_convergence,
}


def build_parser():
    # Typical session (outputs land in --out-dir, default results/):
    #    python run_pipeline.py gen-data
    #    python run_pipeline.py train
    #    python run_pipeline.py --trace exact classify
    #    python run_pipeline.py attack --norm l2
    #    python run_pipeline.py report
    # --analytic swaps the trained net for the closed-form GMM scores written by gen-data.
    parser = argparse.ArgumentParser(description="Score-based generative classifier lab")
    parser.add_argument("--config", type=str, default=None, help="JSON config file (any subset of fields).")
    parser.add_argument("--seed", type=int, default=None, help="Root seed for every RNG stream.")
    parser.add_argument("--out-dir", type=str, default=None, help="Directory for datasets, models and metrics.")
    parser.add_argument("--sde", choices=["vp", "subvp"], default=None, help="Diffusion kind.")
    parser.add_argument("--trace", choices=["exact", "hutchinson"], default=None, help="Divergence estimator.")
    parser.add_argument("--probes", type=int, default=None, help="Number of Hutchinson probes.")
    parser.add_argument("--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--data", type=str, default=None, help="Dataset file (default <out-dir>/{train,test}.sbgc).")
    parser.add_argument("--model", type=str, default=None, help="Checkpoint file (default <out-dir>/model.sbgc).")
    parser.add_argument("--analytic", action="store_true", help="Use the analytic GMM class scores.")
    parser.add_argument("--unconditional", action="store_true", help="likelihood: evaluate log p(x) without a label.")
    parser.add_argument("--norm", choices=["linf", "l2"], default=None, help="attack: perturbation norm.")
    parser.add_argument("--eps", type=float, default=None, help="attack: budget in data units.")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    config = load_config(
        args.config,
        cli_overrides(seed=args.seed, out_dir=args.out_dir, sde=args.sde, trace=args.trace, probes=args.probes),
    )
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    print(f"Running {args.command} (seed {config.seed}, out-dir {config.out_dir})")

    if args.command == "report":
        collect_report(config.out_dir, config)
        return

    results = HANDLERS[args.command](args, config)
    written = emit_report(results)
    print("Pipeline completed")
    print(f"Results saved to: {', '.join(str(p) for p in written)}")


if __name__ == "__main__":
    main()
