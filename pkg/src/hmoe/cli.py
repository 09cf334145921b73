"""Command-line front end: train, analyze, report.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
failure.  Runs are reproducible from the config file alone; nothing is read
from the environment.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_as_dict, emit_config, parse_config
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DimensionError,
    SchemaError,
    TrainingDivergedError,
)
from .data import eval_windows, load_corpus
from .telemetry import (
    FORMAT_VERSION,
    AnalysisReport,
    TelemetryAccumulator,
    analysis_to_json,
    expert_param_costs,
    expert_similarity_matrix,
    expert_synergy_matrix,
    export_report,
    read_telemetry_csv,
    read_telemetry_json,
    token_activation_ratios,
)
from .tensor import no_grad, token_nll
from .training import train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _prepare_out_dir(out_dir: str, force: bool) -> None:
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigurationError(
            f"output directory {out_dir!r} is not empty; pass --force to overwrite"
        )
    os.makedirs(out_dir, exist_ok=True)


def cmd_train(config_path: str, force: bool, seed: int | None, steps: int | None) -> int:
    cfg = parse_config(config_path)
    if seed is not None:
        cfg.model.seed = seed
    if steps is not None:
        cfg.run.steps = steps
    cfg.validate()
    _prepare_out_dir(cfg.run.out_dir, force)

    sink = TelemetryAccumulator()

    def progress(report):
        if report.step % cfg.train.log_interval == 0 or report.step == 1:
            print(
                f"step {report.step:>6}  lm_loss {report.lm_loss:.4f}  "
                f"combined {report.aux.combined:.4f}  lr {report.lr:.2e}"
            )

    result = train_loop(cfg.model, cfg.run.corpus, cfg.run.steps, cfg.train, sink=sink, progress=progress)

    ckpt_path = os.path.join(cfg.run.out_dir, "checkpoint.hmoe")
    save_checkpoint(ckpt_path, result.checkpoint())
    with open(os.path.join(cfg.run.out_dir, "config.txt"), "w") as f:
        f.write(emit_config(cfg))
    if cfg.run.export_telemetry:
        analysis = sink.analysis(result.model.profile, cfg.model) if result.records else None
        export_report(
            result.records,
            analysis,
            cfg.run.out_dir,
            config=config_as_dict(cfg),
            loss_curve=result.loss_curve,
        )
    final = result.loss_curve[-1]["lm_loss"] if result.loss_curve else float("nan")
    print(f"done: {result.steps_run} steps, final lm_loss {final:.4f}, checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_analyze(ckpt_path: str, corpus_path: str, out_dir: str, force: bool) -> int:
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.rebuild_model()
    cfg = model.cfg
    ids = load_corpus(corpus_path)

    out_path = os.path.join(out_dir, "analysis.json")
    if os.path.exists(out_path) and not force:
        raise ConfigurationError(f"{out_path!r} already exists; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    n = cfg.n_experts
    hist = np.zeros((cfg.n_layers, n, cfg.vocab_size), dtype=np.int64)
    activation_chunks: list[np.ndarray] = []
    nll_chunks: list[np.ndarray] = []
    ap_chunks: list[np.ndarray] = []
    costs = expert_param_costs(model.profile, cfg.h_input)

    by_length: dict[int, list] = {}
    for window in eval_windows(ids, cfg.context_length):
        by_length.setdefault(len(window[0]), []).append(window)
    chunks = [
        group[start : start + 16]
        for _, group in sorted(by_length.items())
        for start in range(0, len(group), 16)
    ]
    with no_grad():
        for chunk in chunks:
            inputs = np.stack([w[0] for w in chunk])
            targets = np.concatenate([w[1] for w in chunk])
            flat_ids = inputs.reshape(-1)
            logits, decisions = model.forward(inputs)
            nll_chunks.append(token_nll(logits.data, targets))
            stacked = np.zeros((flat_ids.size, n), dtype=np.int64)
            ap = np.zeros(flat_ids.size)
            for layer, decision in enumerate(decisions):
                stacked += decision.mask
                ap += decision.mask.astype(np.float64) @ costs
                for e in range(n):
                    hist[layer, e] += np.bincount(flat_ids[decision.mask[:, e]], minlength=cfg.vocab_size)
            activation_chunks.append(stacked)
            ap_chunks.append(ap)

    activations = np.concatenate(activation_chunks)
    nll = np.concatenate(nll_chunks)
    ap_per_token = np.concatenate(ap_chunks)

    combined_hist = hist.sum(axis=0)
    empty = np.flatnonzero(combined_hist.sum(axis=1) == 0)
    for e in empty:
        print(f"warning: expert {e} received no tokens; emitting no-data entries", file=sys.stderr)

    hard = nll >= np.quantile(nll, 0.75)
    easy = nll <= np.quantile(nll, 0.25)
    ratios = {
        "hard": token_activation_ratios(activations, hard, "hard"),
        "easy": token_activation_ratios(activations, easy, "easy"),
        "all": token_activation_ratios(activations, np.ones_like(hard), "all"),
    }
    layer_params = 3.0 * cfg.h_input * model.profile.budget * cfg.n_layers
    ap_ratio = {
        "all": float(ap_per_token.mean() / layer_params),
        "hard": float(ap_per_token[hard].mean() / layer_params),
        "easy": float(ap_per_token[easy].mean() / layer_params),
    }
    report = AnalysisReport(
        expert_sizes=list(model.profile.h_ffn),
        similarity=expert_similarity_matrix(combined_hist),
        synergy=expert_synergy_matrix(combined_hist),
        activation_ratios=ratios,
        activated_param_ratio=ap_ratio,
    )
    payload = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "analysis": analysis_to_json(report),
    }
    with open(out_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
    print(f"analysis written to {out_path}")
    return EXIT_OK


def cmd_report(telemetry_dir: str) -> int:
    csv_path = os.path.join(telemetry_dir, "telemetry.csv")
    json_path = os.path.join(telemetry_dir, "telemetry.json")
    if not os.path.exists(csv_path):
        raise SchemaError(f"no telemetry.csv in {telemetry_dir!r}")
    rows = read_telemetry_csv(csv_path)
    payload = read_telemetry_json(json_path)

    loss_curve = payload.get("loss_curve", [])
    final_loss = loss_curve[-1]["lm_loss"] if loss_curve else float("nan")
    config = payload.get("config", {})
    tokens_per_step = config.get("train", {}).get("batch_size", 0) * config.get("model", {}).get(
        "context_length", 0
    )

    steps = sorted({r["step"] for r in rows})
    counts_by_expert: dict[int, int] = {}
    sizes: dict[int, int] = {}
    params_total = 0.0
    for r in rows:
        counts_by_expert[r["expert"]] = counts_by_expert.get(r["expert"], 0) + r["activation_count"]
        sizes[r["expert"]] = r["size"]
        params_total += r["activated_params"]
    total_count = sum(counts_by_expert.values())

    print(f"telemetry: {len(rows)} rows over {len(steps)} logged steps")
    print(f"final lm_loss: {final_loss:.4f}")
    if tokens_per_step and steps:
        mean_ap = params_total / (len(steps) * tokens_per_step)
        print(f"mean activated expert params/token: {mean_ap:.1f}")
    if rows:
        print(f"cumulative training FLOPs: {rows[-1]['cum_flops']:.3e}")
    print("expert  size  activation_share")
    for e in sorted(counts_by_expert):
        share = counts_by_expert[e] / total_count if total_count else 0.0
        print(f"{e:>6}  {sizes[e]:>4}  {share:.4f}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="hmoe", description="Train and analyze heterogeneous mixture-of-experts byte LMs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config file")
    p_train.add_argument("config")
    p_train.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--steps", type=int, default=None, help="override the configured step count")

    p_an = sub.add_parser("analyze", help="run a checkpoint over a corpus and export expert analyses")
    p_an.add_argument("checkpoint")
    p_an.add_argument("corpus")
    p_an.add_argument("out_dir")
    p_an.add_argument("--force", action="store_true")

    p_rep = sub.add_parser("report", help="summarize exported telemetry")
    p_rep.add_argument("telemetry_dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(args.config, args.force, args.seed, args.steps)
        if args.command == "analyze":
            return cmd_analyze(args.checkpoint, args.corpus, args.out_dir, args.force)
        if args.command == "report":
            return cmd_report(args.telemetry_dir)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (
        ContractError,
        DimensionError,
        SchemaError,
        CheckpointFormatError,
        OSError,
        IndexError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
