"""
Command-line entry point: ingest, tag, split, profile, metrics, stats, simulate, report, serve
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .exceptions import DecisionBenchError, StatsError
from .metrics import (
    CeilingConfig,
    FidelityGrouping,
    HvConfig,
    ceiling_sensitivity,
    condition_hypervolumes,
    counterfactual_ceiling,
    fidelity_by_group,
    per_skill_lift,
    rollup,
    rollup_by_condition,
    self_preference,
    vendor_matrix,
)
from .profiles import build_all_c2_cards, compute_skill_stats, write_cards
from .reports import (
    AUDIT_COLUMNS,
    CAPABILITY_COLUMNS,
    CEILING_COLUMNS,
    CI_COLUMNS,
    CONDITION_COLUMNS,
    FIDELITY_COLUMNS,
    HYPERVOLUME_COLUMNS,
    LIFT_COLUMNS,
    ROLLUP_COLUMNS,
    SELF_PREF_COLUMNS,
    SENSITIVITY_COLUMNS,
    STEP_COLUMNS,
    VENDOR_MATRIX_COLUMNS,
    RunManifest,
    audit_rows,
    build_report,
    capability_row,
    ceiling_rows,
    ci_row,
    condition_rows,
    config_hash,
    fidelity_rows,
    hypervolume_rows,
    lift_rows,
    rollup_rows,
    self_pref_rows,
    sensitivity_rows,
    step_rows,
    vendor_matrix_rows,
    write_csv,
    write_text,
)
from .simulator import DEFAULT_CONDITION_POLICIES, default_sim_config, simulate_sweep
from .stats import (
    BootstrapConfig,
    BootstrapStatistic,
    capability_points,
    fit_random_intercept,
    format_mixed_table,
    hypervolume_pairs,
    matched_pairs,
    mixed_rows,
    paired_bootstrap,
    quad_fit,
)
from .tagger import DEFAULT_TAGGER_CONFIG, AuditConfig, TaggerConfig, audit_cluster
from .trace_model import (
    BASELINE_CONDITION,
    Benchmark,
    Condition,
    build_split_spec,
    default_pool_registry,
    extract_all_delegations,
    read_records,
    render_violations,
    split_key,
    stratified_split,
    validate_records,
    write_records,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

METRIC_NAMES = ["rollup", "fidelity", "self-pref", "ceiling", "lift", "all"]


class RunContext:
    """Resolved flags, configuration hash and manifest bookkeeping for one invocation"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.tagger_cfg = TaggerConfig.from_yaml(args.tagger_config) if args.tagger_config else DEFAULT_TAGGER_CONFIG
        self.params: Dict[str, Any] = {
            "seed": args.seed,
            "n_boot": args.n_boot,
            "k": args.k,
            "realization_rate": args.realization_rate,
            "cost_ref_multiplier": args.cost_ref_multiplier,
        }
        self.manifest_hash = config_hash(self.tagger_cfg, self.params)
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.skipped: List[str] = []

    @property
    def records_path(self) -> Path:
        return Path(self.args.records) if self.args.records else self.out_dir / "records.jsonl.gz"

    @property
    def stage1_path(self) -> Path:
        return Path(self.args.stage1) if self.args.stage1 else self.out_dir / "split" / "stage1.jsonl.gz"

    def read(self, path: Path):
        self.inputs.append(path)
        return read_records(path)

    def csv(self, rel: str, columns: Sequence[str], rows, delimiter: str = ",") -> Path:
        path = write_csv(self.out_dir / rel, columns, rows, self.manifest_hash, delimiter)
        self.outputs.append(path)
        return path

    def text(self, rel: str, text: str) -> Path:
        path = write_text(self.out_dir / rel, text, self.manifest_hash)
        self.outputs.append(path)
        return path

    def finish(self, subcommand: str) -> Path:
        manifest = RunManifest(
            subcommand=subcommand,
            inputs=[str(p) for p in self.inputs],
            outputs=[str(p) for p in self.outputs],
            tagger_version=self.tagger_cfg.version,
            config_hashes={"run": self.manifest_hash, "tagger": config_hash(self.tagger_cfg, {})},
            params=self.params,
            skipped=self.skipped,
            out_dir=self.out_dir.name,
        )
        return manifest.write(self.out_dir)


def cmd_ingest(ctx: RunContext) -> int:
    records = ctx.read(ctx.records_path)
    violations = validate_records(records, default_pool_registry())
    ctx.text("analysis/validation.txt", render_violations(violations))
    if violations:
        logger.error("%d validation failures; see analysis/validation.txt", len(violations))
        ctx.finish("ingest")
        return EXIT_FAILURE
    target = ctx.out_dir / "records.jsonl.gz"
    if target.resolve() != ctx.records_path.resolve():
        ctx.outputs.append(write_records(target, records))
    ctx.finish("ingest")
    return EXIT_OK


def cmd_tag(ctx: RunContext) -> int:
    records = ctx.read(ctx.records_path)
    ctx.csv("tagged/steps.tsv", STEP_COLUMNS, step_rows(records, ctx.tagger_cfg), delimiter="\t")
    if ctx.args.audit_labels:
        path = Path(ctx.args.audit_labels)
        ctx.inputs.append(path)
        labels = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        ctx.csv("analysis/emergent_audit.csv", AUDIT_COLUMNS, audit_rows(audit_cluster(labels, AuditConfig())))
    ctx.finish("tag")
    return EXIT_OK


def cmd_split(ctx: RunContext) -> int:
    records = ctx.read(ctx.records_path)
    spec = build_split_spec(records, fraction=ctx.args.fraction, seed=ctx.args.split_seed)
    stage1_ids, _ = stratified_split(spec.stratum_of.keys(), spec)
    stage1 = [r for r in records if split_key(r) in stage1_ids and r.condition == BASELINE_CONDITION]
    stage2 = [r for r in records if split_key(r) not in stage1_ids]
    ctx.outputs.append(write_records(ctx.out_dir / "split" / "stage1.jsonl.gz", stage1))
    ctx.outputs.append(write_records(ctx.out_dir / "split" / "stage2.jsonl.gz", stage2))
    logger.info("Stage-1: %d ids, %d records; stage-2: %d records", len(stage1_ids), len(stage1), len(stage2))
    ctx.finish("split")
    return EXIT_OK


def cmd_profile(ctx: RunContext) -> int:
    stage1 = ctx.read(ctx.stage1_path)
    cards = build_all_c2_cards(stage1, ctx.tagger_cfg)
    ctx.outputs.extend(write_cards(cards, ctx.out_dir, ctx.manifest_hash))
    ctx.finish("profile")
    return EXIT_OK


def _stage1_stats(ctx: RunContext):
    if not ctx.stage1_path.exists():
        logger.warning("No stage-1 records at %s; skipping fidelity and ceiling", ctx.stage1_path)
        return None
    return compute_skill_stats(ctx.read(ctx.stage1_path), ctx.tagger_cfg)


def cmd_metrics(ctx: RunContext) -> int:
    which = ctx.args.metric
    records = ctx.read(ctx.records_path)
    wanted = set(METRIC_NAMES[:-1]) if which == "all" else {which}
    registry = default_pool_registry()
    hv_cfg = HvConfig(cost_ref_multiplier=ctx.args.cost_ref_multiplier)

    if "rollup" in wanted:
        summaries = rollup(records)
        ctx.csv("analysis/rollup.csv", ROLLUP_COLUMNS, rollup_rows(summaries))
        ctx.csv("analysis/latency_by_condition.csv", CONDITION_COLUMNS, condition_rows(rollup_by_condition(summaries)))
        ctx.csv("analysis/hypervolume.csv", HYPERVOLUME_COLUMNS, hypervolume_rows(condition_hypervolumes(summaries, hv_cfg)))

    delegations = extract_all_delegations(records) if wanted & {"fidelity", "self-pref"} else []
    if "self-pref" in wanted:
        ctx.csv("analysis/vendor_self_pref.csv", SELF_PREF_COLUMNS, self_pref_rows(self_preference(delegations, registry)))
        ctx.csv("analysis/vendor_matrix.csv", VENDOR_MATRIX_COLUMNS, vendor_matrix_rows(vendor_matrix(delegations, registry)))

    if "lift" in wanted:
        blind = [r for r in records if r.condition == BASELINE_CONDITION]
        aware = [r for r in records if r.condition != BASELINE_CONDITION]
        lifts, coverage = per_skill_lift(blind, aware, ctx.tagger_cfg)
        ctx.csv("analysis/skill_lift.csv", LIFT_COLUMNS, lift_rows(lifts))
        logger.info("Lift coverage: %s", coverage.model_dump())

    if wanted & {"fidelity", "ceiling"}:
        pool_stats = _stage1_stats(ctx)
        if pool_stats is None:
            ctx.skipped.extend(m for m in ("fidelity", "ceiling") if m in wanted)
        else:
            k = ctx.args.k
            if "fidelity" in wanted:
                for by, rel, key in (
                    (FidelityGrouping.CONDITION, "analysis/fidelity_per_cond.csv", "condition"),
                    (FidelityGrouping.CELL, "analysis/delegation_fidelity_by_cell.csv", "cell"),
                    (FidelityGrouping.SKILL, "analysis/fidelity_by_skill.csv", "skill"),
                ):
                    results = fidelity_by_group(delegations, records, pool_stats, by, k, ctx.tagger_cfg)
                    ctx.csv(rel, [key] + FIDELITY_COLUMNS, fidelity_rows(key, results, k))
            if "ceiling" in wanted:
                blind = [r for r in records if r.condition == BASELINE_CONDITION]
                cfg = CeilingConfig(realization_rate=ctx.args.realization_rate)
                ctx.csv("analysis/ceiling_per_agent.csv", CEILING_COLUMNS,
                        ceiling_rows(counterfactual_ceiling(blind, pool_stats, cfg, ctx.tagger_cfg)))
                ctx.csv("analysis/ceiling_sensitivity.csv", SENSITIVITY_COLUMNS,
                        sensitivity_rows(ceiling_sensitivity(blind, pool_stats, tagger_cfg=ctx.tagger_cfg)))

    ctx.finish(f"metrics_{which}")
    # a single metric that could not run is a failure; "all" reports the skip in its manifest
    if which in ctx.skipped:
        logger.error("metric %s needs stage-1 records at %s", which, ctx.stage1_path)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_stats(ctx: RunContext) -> int:
    records = ctx.read(ctx.records_path)
    boot = BootstrapConfig(n_boot=ctx.args.n_boot, seed=ctx.args.seed)
    summaries = rollup(records)
    benchmarks = sorted({r.benchmark for r in records}, key=lambda b: b.value)
    conditions = [c for c in Condition if c != BASELINE_CONDITION and any(r.condition == c for r in records)]

    dq, hv = [], []
    for bench in benchmarks:
        ref = max((s.mean_cost for s in summaries if s.cell.benchmark == bench), default=0.0) * ctx.args.cost_ref_multiplier
        for cond in conditions:
            pairs = matched_pairs(records, bench, cond)
            if pairs:
                dq.append(ci_row(bench.value, cond.value, len(pairs), paired_bootstrap(pairs, boot)))
            agent_pairs = hypervolume_pairs(summaries, bench, cond)
            if agent_pairs:
                result = paired_bootstrap(agent_pairs, boot, BootstrapStatistic.HYPERVOLUME_DIFFERENCE, cost_ref=ref)
                hv.append(ci_row(bench.value, cond.value, len(agent_pairs), result))
    ctx.csv("stats/dq_ci.csv", CI_COLUMNS, dq)
    ctx.csv("stats/hv_ci.csv", CI_COLUMNS, hv)

    fits = []
    for bench in benchmarks:
        points = capability_points(summaries, bench)
        try:
            fits.append(capability_row(bench.value, quad_fit(points), len(points)))
        except StatsError as e:
            logger.warning("Skipping capability fit for %s: %s", bench.value, e)
    ctx.csv("stats/capability_fit.csv", CAPABILITY_COLUMNS, fits)

    ctx.text("stats/mixedlm.txt", format_mixed_table(fit_random_intercept(mixed_rows(records))))
    ctx.finish("stats")
    return EXIT_OK


def _parse_cells(text: str) -> List[int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cells must look like AxBxC, got {text!r}")
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"cells must look like AxBxC with positive counts, got {text!r}")
    return parts


def cmd_simulate(ctx: RunContext) -> int:
    n_agents, n_benchmarks, n_conditions = ctx.args.cells
    benchmarks = list(Benchmark)[:n_benchmarks]
    cfg = default_sim_config(seed=ctx.args.seed, n_tasks=ctx.args.tasks, benchmarks=benchmarks)
    cfg = cfg.model_copy(update={"delegations_per_task": ctx.args.delegations_per_task})
    records = simulate_sweep(
        cfg,
        DEFAULT_CONDITION_POLICIES[:n_conditions],
        ctx.args.tasks,
        orchestrators=[p.name for p in cfg.pool][:n_agents],
        benchmarks=benchmarks,
    )
    ctx.outputs.append(write_records(ctx.out_dir / "records.jsonl.gz", records))
    ctx.finish("simulate")
    return EXIT_OK


def cmd_report(ctx: RunContext) -> int:
    ctx.outputs.append(build_report(ctx.out_dir, ctx.manifest_hash))
    ctx.finish("report")
    return EXIT_OK


def cmd_serve(ctx: RunContext) -> int:
    import uvicorn

    logger.info("Starting analysis service on %s:%d", ctx.args.host, ctx.args.port)
    uvicorn.run("src.api:app", host=ctx.args.host, port=ctx.args.port, reload=ctx.args.reload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--records", help="Record stream (default: <out-dir>/records.jsonl.gz)")
    common.add_argument("--stage1", help="Stage-1 records (default: <out-dir>/split/stage1.jsonl.gz)")
    common.add_argument("--out-dir", default="out", help="Output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, help="Seed for every random draw (default: 0)")
    common.add_argument("--n-boot", type=int, default=5000, help="Bootstrap replicates (default: 5000)")
    common.add_argument("--k", type=int, default=1, help="Fidelity top-k (default: 1)")
    common.add_argument("--realization-rate", type=float, default=1.0, help="Ceiling peer-realization rate (default: 1.0)")
    common.add_argument("--cost-ref-multiplier", type=float, default=1.05, help="Hypervolume cost reference multiplier (default: 1.05)")
    common.add_argument("--tagger-config", help="YAML tagger configuration override")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Log level (default: INFO)")

    parser = argparse.ArgumentParser(prog="decisionbench", description="DecisionBench offline analysis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Parse and validate a record stream")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("tag", parents=[common], help="Tag every step with the frozen tagger")
    p.add_argument("--audit-labels", help="Free-form skill labels, one per line, for the emergent audit")
    p.set_defaults(handler=cmd_tag)

    p = sub.add_parser("split", parents=[common], help="Stratified Stage-1/Stage-2 split")
    p.add_argument("--fraction", type=float, default=0.2, help="Stage-1 share per stratum (default: 0.2)")
    p.add_argument("--split-seed", type=int, default=10, help="Split seed (default: 10)")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("profile", help="Profile cards")
    profile_sub = p.add_subparsers(dest="profile_command", required=True)
    build = profile_sub.add_parser("build-c2", parents=[common], help="Build C2 cards from Stage-1 records")
    build.set_defaults(handler=cmd_profile)

    p = sub.add_parser("metrics", parents=[common], help="Per-cell metric suite")
    p.add_argument("metric", choices=METRIC_NAMES, help="Metric family to compute")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("stats", parents=[common], help="Bootstrap CIs, mixed model and capability fit")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("simulate", parents=[common], help="Generate a synthetic record stream")
    p.add_argument("--cells", type=_parse_cells, default=[11, 3, 5], help="Orchestrators x benchmarks x conditions (default: 11x3x5)")
    p.add_argument("--tasks", type=int, default=20, help="Tasks per cell (default: 20)")
    p.add_argument("--delegations-per-task", type=int, default=1, help="call_model steps per delegated task (default: 1)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="Summarise upstream artefacts into report.md")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("serve", parents=[common], help="Run the local HTTP analysis service")
    p.add_argument("--host", default="127.0.0.1", help="Host to bind to (default: 127.0.0.1)")
    p.add_argument("--port", type=int, default=8000, help="Port to bind to (default: 8000)")
    p.add_argument("--reload", action="store_true", help="Enable auto-reload for development")
    p.set_defaults(handler=cmd_serve)
    return parser


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand

    Returns:
        0 on success, 1 on validation failure or analysis error, 2 on usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    handler: Callable[[RunContext], int] = args.handler
    try:
        return handler(RunContext(args))
    except DecisionBenchError as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        logger.error("Missing input: %s", e)
        return EXIT_FAILURE
