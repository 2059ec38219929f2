"""
Artefact emitters: manifest-stamped CSV/TSV/text files, run manifests and report.md
"""

import csv
import hashlib
import io
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field

from .exceptions import ManifestMismatchError
from .metrics import (
    CeilingResult,
    CellSummary,
    ConditionSummary,
    FidelityResult,
    HypervolumeRow,
    SelfPreference,
    SensitivityRow,
    SkillLift,
)
from .stats import BootstrapResult, QuadFit
from .tagger import AuditResult, TaggerConfig, tag_trajectory
from .trace_model import TaskRecord

logger = logging.getLogger(__name__)

MANIFEST_PREFIX = "# manifest: "
REPORT_MANIFEST_PREFIX = "<!-- manifest: "

ROLLUP_COLUMNS = ["cell", "mean_q", "mean_cost", "mean_latency", "p90_latency", "dlg_rate", "n"]
CONDITION_COLUMNS = ["benchmark", "condition", "mean_q", "delta_q", "mean_cost", "mean_latency", "p90_latency", "dlg_rate", "n_agents"]
FIDELITY_COLUMNS = ["k", "hits", "n", "excluded", "fidelity"]
SELF_PREF_COLUMNS = ["orchestrator", "vendor", "n", "same_vendor", "observed_share", "chance", "ratio"]
VENDOR_MATRIX_COLUMNS = ["orchestrator_vendor", "peer_vendor", "count"]
CEILING_COLUMNS = ["cell", "actual", "ceiling", "gap", "n"]
SENSITIVITY_COLUMNS = ["benchmark", "realization_rate", "actual", "ceiling", "gap"]
HYPERVOLUME_COLUMNS = ["benchmark", "condition", "hypervolume", "cost_ref", "n_agents"]
LIFT_COLUMNS = ["condition", "skill", "n", "blind_mean_q", "aware_mean_q", "delta_q"]
AUDIT_COLUMNS = ["label", "cluster", "skill"]
CI_COLUMNS = ["benchmark", "condition", "n", "estimate", "ci_low", "ci_high"]
CAPABILITY_COLUMNS = ["benchmark", "a", "b", "c", "vertex_x", "vertex_y", "concave", "n_points"]
STEP_COLUMNS = ["agent", "benchmark", "condition", "task_id", "step_index", "role", "tag"]


def fmt(value: Optional[float], digits: int = 6) -> str:
    """Fixed-precision float for diff-stable artefacts; absent values are empty"""
    if value is None:
        return ""
    return f"{value:.{digits}f}"


def config_hash(tagger_cfg: TaggerConfig, params: Dict[str, Any]) -> str:
    """sha256 over the tagger configuration and run parameters, never the clock"""
    payload = {"tagger": tagger_cfg.model_dump(mode="json"), "params": params}
    normalized = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


def build_timestamp() -> str:
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0") or 0)
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _relative(path: Union[str, Path], out_dir: Path) -> str:
    try:
        return Path(path).resolve().relative_to(out_dir.resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


class RunManifest(BaseModel):
    """What a subcommand read, under which configuration, and what it wrote"""

    subcommand: str
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    tagger_version: str
    config_hashes: Dict[str, str] = Field(..., description="'run' covers tagger config and parameters")
    params: Dict[str, Any] = Field(default_factory=dict)
    skipped: List[str] = Field(default_factory=list, description="Requested outputs that could not be produced")
    out_dir: str = "."
    timestamp: str = Field(default_factory=build_timestamp)

    @property
    def manifest_hash(self) -> str:
        return self.config_hashes["run"]

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        data = self.model_dump(mode="json")
        data["inputs"] = [_relative(p, out_dir) for p in self.inputs]
        data["outputs"] = sorted(_relative(p, out_dir) for p in self.outputs)
        path = out_dir / "manifests" / f"{self.subcommand.replace(' ', '_')}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n")
        return path


def write_csv(
    path: Union[str, Path],
    fieldnames: Sequence[str],
    rows: Iterable[Dict[str, Any]],
    manifest_hash: str,
    delimiter: str = ",",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    buffer.write(f"{MANIFEST_PREFIX}{manifest_hash}\n")
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), delimiter=delimiter, lineterminator="\n")
    writer.writeheader()
    n = 0
    for row in rows:
        writer.writerow(row)
        n += 1
    path.write_text(buffer.getvalue(), encoding="utf-8", newline="\n")
    logger.info("Wrote %s (%d rows)", path, n)
    return path


def write_text(path: Union[str, Path], text: str, manifest_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{MANIFEST_PREFIX}{manifest_hash}\n{text}", encoding="utf-8", newline="\n")
    logger.info("Wrote %s", path)
    return path


def read_manifest_hash(path: Union[str, Path]) -> Optional[str]:
    with Path(path).open(encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    for prefix, suffix in ((MANIFEST_PREFIX, ""), (REPORT_MANIFEST_PREFIX, " -->")):
        if first.startswith(prefix) and first.endswith(suffix):
            return first[len(prefix):len(first) - len(suffix)]
    return None


def verify_manifests(paths: Iterable[Union[str, Path]], expected: str) -> None:
    """
    Check that every artefact was produced under the current configuration

    Raises:
        ManifestMismatchError: Listing each file whose header hash differs or is missing
    """
    bad = []
    for path in paths:
        found = read_manifest_hash(path)
        if found != expected:
            bad.append(f"{path} ({found or 'no manifest header'})")
    if bad:
        raise ManifestMismatchError(f"artefacts built under a different configuration: {', '.join(bad)}")


def read_csv_rows(path: Union[str, Path], delimiter: str = ",") -> List[Dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    body = [line for line in lines if not line.startswith(MANIFEST_PREFIX)]
    return list(csv.DictReader(body, delimiter=delimiter))


def rollup_rows(summaries: Iterable[CellSummary]) -> List[Dict[str, Any]]:
    return [
        {
            "cell": str(s.cell),
            "mean_q": fmt(s.mean_q),
            "mean_cost": fmt(s.mean_cost),
            "mean_latency": fmt(s.mean_latency_s, 3),
            "p90_latency": fmt(s.p90_latency_s, 3),
            "dlg_rate": fmt(s.delegation_rate, 4),
            "n": s.n_tasks,
        }
        for s in summaries
    ]


def condition_rows(rows: Iterable[ConditionSummary]) -> List[Dict[str, Any]]:
    return [
        {
            "benchmark": r.benchmark.value,
            "condition": r.condition.value,
            "mean_q": fmt(r.mean_q),
            "delta_q": fmt(r.delta_q),
            "mean_cost": fmt(r.mean_cost),
            "mean_latency": fmt(r.mean_latency_s, 3),
            "p90_latency": fmt(r.p90_latency_s, 3),
            "dlg_rate": fmt(r.delegation_rate, 4),
            "n_agents": r.n_agents,
        }
        for r in rows
    ]


def fidelity_rows(key_column: str, results: Dict[str, FidelityResult], k: int) -> List[Dict[str, Any]]:
    return [
        {key_column: key, "k": k, "hits": r.hits, "n": r.n, "excluded": r.excluded, "fidelity": fmt(r.share, 4)}
        for key, r in results.items()
    ]


def self_pref_rows(rows: Iterable[SelfPreference]) -> List[Dict[str, Any]]:
    return [
        {
            "orchestrator": r.orchestrator,
            "vendor": r.vendor,
            "n": r.n,
            "same_vendor": r.same_vendor,
            "observed_share": fmt(r.observed_share, 4),
            "chance": fmt(r.chance, 4),
            "ratio": fmt(r.ratio, 3),
        }
        for r in rows
    ]


def vendor_matrix_rows(matrix: Dict[Tuple[str, str], int]) -> List[Dict[str, Any]]:
    return [{"orchestrator_vendor": a, "peer_vendor": b, "count": n} for (a, b), n in sorted(matrix.items())]


def ceiling_rows(rows: Iterable[CeilingResult]) -> List[Dict[str, Any]]:
    return [
        {"cell": str(r.cell), "actual": fmt(r.actual), "ceiling": fmt(r.ceiling), "gap": fmt(r.gap), "n": r.n_tasks}
        for r in rows
    ]


def sensitivity_rows(rows: Iterable[SensitivityRow]) -> List[Dict[str, Any]]:
    return [
        {
            "benchmark": r.benchmark.value,
            "realization_rate": fmt(r.realization_rate, 2),
            "actual": fmt(r.actual),
            "ceiling": fmt(r.ceiling),
            "gap": fmt(r.gap),
        }
        for r in rows
    ]


def hypervolume_rows(rows: Iterable[HypervolumeRow]) -> List[Dict[str, Any]]:
    return [
        {
            "benchmark": r.benchmark.value,
            "condition": r.condition.value,
            "hypervolume": fmt(r.hypervolume),
            "cost_ref": fmt(r.cost_ref),
            "n_agents": r.n_agents,
        }
        for r in rows
    ]


def lift_rows(rows: Iterable[SkillLift]) -> List[Dict[str, Any]]:
    return [
        {
            "condition": r.condition.value,
            "skill": r.skill.value,
            "n": r.n,
            "blind_mean_q": fmt(r.blind_mean_q),
            "aware_mean_q": fmt(r.aware_mean_q),
            "delta_q": fmt(r.delta_q),
        }
        for r in rows
    ]


def audit_rows(result: AuditResult) -> List[Dict[str, Any]]:
    return [
        {"label": label, "cluster": cluster, "skill": skill.value if skill else ""}
        for label, cluster, skill in zip(result.labels, result.cluster_of, result.skills)
    ]


def ci_row(benchmark: str, condition: str, n: int, result: BootstrapResult) -> Dict[str, Any]:
    return {
        "benchmark": benchmark,
        "condition": condition,
        "n": n,
        "estimate": fmt(result.estimate),
        "ci_low": fmt(result.ci_low),
        "ci_high": fmt(result.ci_high),
    }


def capability_row(benchmark: str, fit: QuadFit, n_points: int) -> Dict[str, Any]:
    a, b, c = fit.coefficients
    return {
        "benchmark": benchmark,
        "a": fmt(a),
        "b": fmt(b),
        "c": fmt(c),
        "vertex_x": fmt(fit.vertex_x),
        "vertex_y": fmt(fit.vertex_y),
        "concave": str(fit.concave).lower(),
        "n_points": n_points,
    }


def step_rows(records: Iterable[TaskRecord], cfg: TaggerConfig) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    for r in records:
        for step, tag in zip(r.steps, tag_trajectory(r.steps, r.benchmark, cfg)):
            rows.append({
                "agent": r.agent,
                "benchmark": r.benchmark.value,
                "condition": r.condition.value,
                "task_id": r.task_id,
                "step_index": step.index,
                "role": step.role.value,
                "tag": tag.label,
            })
    return rows


REPORT_SECTIONS = [
    ("Cell rollup", "analysis/rollup.csv"),
    ("Quality, cost and latency by condition", "analysis/latency_by_condition.csv"),
    ("Delegation fidelity by condition", "analysis/fidelity_per_cond.csv"),
    ("Vendor self-preference", "analysis/vendor_self_pref.csv"),
    ("Counterfactual-delegation ceiling", "analysis/ceiling_per_agent.csv"),
    ("Ceiling sensitivity to peer realization", "analysis/ceiling_sensitivity.csv"),
    ("Pareto hypervolume", "analysis/hypervolume.csv"),
    ("Per-skill lift", "analysis/skill_lift.csv"),
    ("Quality change vs blind (paired bootstrap)", "stats/dq_ci.csv"),
    ("Hypervolume change vs blind (agent bootstrap)", "stats/hv_ci.csv"),
    ("Capability-lift fit", "stats/capability_fit.csv"),
]


def _markdown_table(rows: List[Dict[str, str]]) -> List[str]:
    if not rows:
        return ["(no rows)"]
    columns = list(rows[0])
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(row[c] or "-" for c in columns) + " |" for row in rows]
    return lines


def upstream_artefacts(out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    names = [rel for _, rel in REPORT_SECTIONS] + ["stats/mixedlm.txt"]
    return [out_dir / rel for rel in names if (out_dir / rel).exists()]


def build_report(out_dir: Union[str, Path], manifest_hash: str) -> Path:
    """
    Summarise the upstream tables into report.md

    Raises:
        ManifestMismatchError: If any upstream artefact carries another configuration hash
    """
    out_dir = Path(out_dir)
    present = upstream_artefacts(out_dir)
    verify_manifests(present, manifest_hash)

    lines = [f"{REPORT_MANIFEST_PREFIX}{manifest_hash} -->", "# DecisionBench analysis report", ""]
    for title, rel in REPORT_SECTIONS:
        path = out_dir / rel
        if path not in present:
            continue
        lines += [f"## {title}", "", f"Source: `{rel}`", ""]
        lines += _markdown_table(read_csv_rows(path))
        lines.append("")
    mixed = out_dir / "stats" / "mixedlm.txt"
    if mixed in present:
        body = [line for line in mixed.read_text(encoding="utf-8").splitlines() if not line.startswith(MANIFEST_PREFIX)]
        lines += ["## Random-intercept mixed model", "", "```", *body, "```", ""]
    if len(lines) == 3:
        lines += ["No upstream artefacts found.", ""]

    path = out_dir / "report.md"
    path.write_text("\n".join(lines), encoding="utf-8", newline="\n")
    logger.info("Wrote %s from %d artefacts", path, len(present))
    return path
