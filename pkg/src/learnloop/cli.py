"""Operator entry point: synthesize or ingest data, train and evaluate the
diagnosis model, simulate selection policies, serve live sessions, and
produce feedback reports.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import reports, synthetic
from .diagnosis import (
    DivergenceError,
    ModelFormatError,
    NcdModel,
    TrainConfig,
    evaluate,
    fit,
    mastery_table,
    q_mask_array,
)
from .feedback import (
    FeedbackContext,
    ProviderConfig,
    build_prompt,
    generate_feedback,
    render_report,
    report_document,
)
from .ingest import IngestError, ingest_pipeline, load_canonical, split_dataset
from .selection import create_selection_state, select_next
from .simulate import POLICIES, SimulationConfig, run_simulation

logger = logging.getLogger("learnloop")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliConfig:
    """Config-file values overlaid by explicitly passed flags."""

    def __init__(self, path: str | None):
        self.doc: dict = {}
        if path:
            with open(path) as fh:
                self.doc = json.load(fh)

    def get(self, section: str, key: str, flag_value, default):
        if flag_value is not None:
            return flag_value
        return self.doc.get(section, {}).get(key, default)


def _provider_from(args, cfg: CliConfig) -> ProviderConfig:
    return ProviderConfig(
        endpoint=cfg.get("provider", "endpoint", args.llm_endpoint, ""),
        model=cfg.get("provider", "model", args.llm_model, ""),
        token_env=cfg.get("provider", "token_env", args.llm_token_env,
                          "EDULOOP_LLM_TOKEN"),
        timeout=float(cfg.get("provider", "timeout", args.llm_timeout, 20.0)),
    )


def _train_config_from(args, cfg: CliConfig) -> TrainConfig:
    hidden = cfg.get("train", "hidden_sizes", args.hidden, [64, 32])
    if isinstance(hidden, str):
        hidden = [int(h) for h in hidden.split(",") if h]
    return TrainConfig(
        epochs=int(cfg.get("train", "epochs", args.epochs, 10)),
        learning_rate=float(cfg.get("train", "learning_rate",
                                    args.learning_rate, 0.002)),
        batch_size=int(cfg.get("train", "batch_size", args.batch_size, 256)),
        hidden_sizes=tuple(int(h) for h in hidden),
        seed=int(cfg.get("train", "seed", args.seed, 0)),
        init_scale=float(cfg.get("train", "init_scale", args.init_scale, 0.1)),
        test_fraction=float(cfg.get("train", "test_fraction",
                                    args.test_fraction, 0.2)),
    )


def cmd_synth(args, cfg: CliConfig) -> int:
    out = Path(args.out)
    info = synthetic.generate(
        out, n_students=args.students, n_items=args.items,
        n_knowledge=args.knowledge, min_logs=args.min_logs,
        max_logs=args.max_logs, seed=args.seed or 0, sharpness=args.sharpness)
    reports.write_manifest(out, "synth", info, [])
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_ingest(args, cfg: CliConfig) -> int:
    schema = {}
    for field, flag in (("student", args.col_student), ("item", args.col_item),
                        ("skill", args.col_skill), ("correct", args.col_correct),
                        ("order", args.col_order)):
        if flag:
            schema[field] = flag
    report = ingest_pipeline(
        args.responses, args.out, mapping=args.q_matrix,
        graph_file=args.knowledge_graph, names_file=args.knowledge_names,
        texts_file=args.item_texts, schema=schema or None)
    inputs = [p for p in (args.responses, args.q_matrix, args.knowledge_graph,
                          args.knowledge_names, args.item_texts) if p]
    reports.write_manifest(args.out, "ingest", {"schema": schema}, inputs)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def _data_inputs(data_dir: str) -> list[Path]:
    return sorted(Path(data_dir).glob("*.csv"))


def cmd_train(args, cfg: CliConfig) -> int:
    bundle = load_canonical(args.data)
    train_cfg = _train_config_from(args, cfg)
    train, test = split_dataset(bundle.dataset, train_cfg.test_fraction,
                                train_cfg.seed)
    if len(test) == 0:
        raise IngestError("held-out split is empty; not enough data to train")
    logger.info("training on %d records, validating on %d", len(train), len(test))
    model, history = fit(train, test, bundle.q_matrix, train_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    reports.write_history(out / "history.json", history)
    reports.write_mastery_csv(out / "mastery.csv", mastery_table(model),
                              bundle.id_maps)
    reports.render_history_figure(history, out / "training_curves.png")
    if args.emit_plot_data:
        reports.write_history_csvs(history, out)
    reports.write_manifest(out, "train", train_cfg.to_dict(),
                           _data_inputs(args.data))
    final = history[-1].val
    print(json.dumps({"epochs": len(history),
                      "final_train_loss": history[-1].train_loss,
                      "validation": final.to_dict() if final else None},
                     indent=2))
    return EXIT_OK


def cmd_evaluate(args, cfg: CliConfig) -> int:
    bundle = load_canonical(args.data)
    model = NcdModel.load(args.model)
    _, test = split_dataset(bundle.dataset, model.config.test_fraction,
                            model.config.seed)
    if len(test) == 0:
        raise IngestError("held-out split is empty")
    metrics = evaluate(model, test, bundle.q_matrix)
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args, cfg: CliConfig) -> int:
    bundle = load_canonical(args.data)
    model = NcdModel.load(args.model)
    _, test = split_dataset(bundle.dataset, model.config.test_fraction,
                            model.config.seed)
    train, _ = split_dataset(bundle.dataset, model.config.test_fraction,
                             model.config.seed)
    policies = tuple(args.policy) if args.policy else POLICIES
    sim_cfg = SimulationConfig(
        policies=policies,
        n_students=int(cfg.get("simulate", "n_students", args.n_students, 100)),
        budget=int(cfg.get("simulate", "budget", args.budget, 10)),
        seed=int(cfg.get("simulate", "seed", args.seed, 0)),
        lambda_mix=float(cfg.get("simulate", "lambda_mix", args.lambda_mix, 0.5)),
        ability_lr=float(cfg.get("simulate", "ability_lr", args.ability_lr, 0.2)),
        pool_size=int(cfg.get("simulate", "pool_size", args.pool_size, 48)),
        test_fraction=model.config.test_fraction,
    )
    report = run_simulation(model, bundle, train, test, sim_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "simulation_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    reports.render_simulation_figure(report, out / "simulation_curves.png")
    reports.write_manifest(out, "simulate", sim_cfg.to_dict(),
                           [args.model, *_data_inputs(args.data)])
    summary = {
        policy: report["policies"][policy]["mean_final_error"]
        for policy in policies
    }
    if "paired" in report:
        summary["becat_vs_random"] = report["paired"]["becat_vs_random"]
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_feedback(args, cfg: CliConfig) -> int:
    bundle = load_canonical(args.data)
    model = NcdModel.load(args.model)
    raw_student = str(args.student)
    if raw_student not in bundle.id_maps.student_map:
        raise IngestError(f"unknown student {raw_student}")
    s = bundle.id_maps.student_map[raw_student]

    q_mask = q_mask_array(bundle.q_matrix, model.d)
    state = create_selection_state(
        model, model.theta[s], bundle.q_matrix, q_mask, bundle.graph,
        budget=min(args.budget, model.n_items), lambda_mix=args.lambda_mix,
        threshold=args.threshold, seed=args.seed or 0)
    while state.remaining:
        select_next(state, model, q_mask)

    context = FeedbackContext(
        mastery_row=expit(model.theta[s]),
        knowledge_names=list(bundle.id_maps.knowledge_names),
        recommended=list(state.selected),
        item_texts=list(bundle.id_maps.item_texts),
        q_matrix=bundle.q_matrix,
    )
    provider = _provider_from(args, cfg)
    report = generate_feedback(build_prompt(context), provider, context)
    document = report_document(
        report, raw_student,
        [bundle.id_maps.raw_item(q) for q in state.selected],
        datetime.now(timezone.utc).isoformat())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"feedback_report_{raw_student}.json", "w") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("feedback provider: %s", report.provider)
    print(f"[provider: {report.provider}]")
    print(render_report(report))
    return EXIT_OK


def cmd_serve(args, cfg: CliConfig) -> int:
    import uvicorn

    from .service import SelectionDefaults, create_app

    bundle = load_canonical(args.data_dir)
    model = NcdModel.load(args.model)
    defaults = SelectionDefaults(
        budget=int(cfg.get("selection", "budget", args.budget, 10)),
        lambda_mix=float(cfg.get("selection", "lambda_mix", args.lambda_mix, 0.5)),
        threshold=float(cfg.get("selection", "threshold", args.threshold, 0.6)),
        ability_lr=float(cfg.get("selection", "ability_lr", args.ability_lr, 0.5)),
    )
    app = create_app(model, bundle, args.sessions_dir,
                     provider=_provider_from(args, cfg), defaults=defaults,
                     cors_origins=[args.cors_origin] if args.cors_origin else None)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _add_provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--llm-endpoint", default=None,
                   help="chat-completion endpoint URL (no endpoint: fallback reports)")
    p.add_argument("--llm-model", default=None, help="provider model identifier")
    p.add_argument("--llm-token-env", default=None,
                   help="environment variable holding the auth token")
    p.add_argument("--llm-timeout", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="learnloop",
        description="Closed-loop personalized learning engine")
    parser.add_argument("--config", default=None,
                        help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic raw dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--students", type=int, default=200)
    p.add_argument("--items", type=int, default=120)
    p.add_argument("--knowledge", type=int, default=10)
    p.add_argument("--min-logs", type=int, default=15)
    p.add_argument("--max-logs", type=int, default=25)
    p.add_argument("--sharpness", type=float, default=6.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="clean raw files into the canonical format")
    p.add_argument("--responses", required=True, help="raw response log CSV")
    p.add_argument("--q-matrix", default=None,
                   help="item-skill pair CSV (derived from the log when omitted)")
    p.add_argument("--knowledge-graph", default=None)
    p.add_argument("--knowledge-names", default=None)
    p.add_argument("--item-texts", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--col-student", default=None)
    p.add_argument("--col-item", default=None)
    p.add_argument("--col-skill", default=None)
    p.add_argument("--col-correct", default=None)
    p.add_argument("--col-order", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the diagnosis model")
    p.add_argument("--data", required=True, help="canonical data directory")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--hidden", default=None, help="comma-separated layer sizes")
    p.add_argument("--init-scale", type=float, default=None)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--emit-plot-data", action="store_true",
                   help="write per-metric CSV files next to history.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model on the held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="compare selection policies offline")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", action="append", choices=POLICIES, default=None,
                   help="repeatable; all policies when omitted")
    p.add_argument("--n-students", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--lambda-mix", type=float, default=None)
    p.add_argument("--ability-lr", type=float, default=None)
    p.add_argument("--pool-size", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the HTTP session service")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--sessions-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--cors-origin", default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--lambda-mix", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--ability-lr", type=float, default=None)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("feedback", help="diagnose, recommend, and explain")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--student", required=True, help="raw student id")
    p.add_argument("--out", default=".")
    p.add_argument("--budget", type=int, default=5,
                   help="number of items to recommend")
    p.add_argument("--lambda-mix", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.6)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_feedback)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = CliConfig(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, config)
    except (IngestError, ModelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: non-finite loss — training diverged ({exc})",
              file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
