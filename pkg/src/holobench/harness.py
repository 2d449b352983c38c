"""Benchmark harness: suites, runs, artifacts, comparison.

A suite is the experiment plan: one shop model, one order book, a list of
scenario documents, and a list of seeds.  The harness executes the full
cross product scenario x seed, each run in a fresh kernel/control pair over
a recorded wire session, then reduces the tapped streams to KPI reports and
compares every scenario against the null (no-disturbance) baseline with
mean/min/max aggregates.

Artifacts are byte-reproducible: manifest, reports, comparison table, and
summary carry no timestamps or machine-local paths.  Wall-clock decision
latencies live only in the session logs and in a timing sidecar next to
them, which is excluded from the reproducibility digest.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable

from .canon import sha256_hex
from .control import ProductOrder, ReferenceControl, load_orders_file
from .interface import (
    ControlClient,
    InProcEndpoint,
    RecordingEndpoint,
    RoundDriver,
    RunRecorder,
)
from .kernel import EmulationKernel
from .kpi import KpiEngine, KpiReport, VOLATILE_METRICS
from .messages import ControlCommand, SimEvent
from .model import ShopModel, load_model_file
from .scenario import CategoryRegistry, RegistryError, Scenario, ScenarioManager, load_scenario_file

DEFAULT_CAP = 1_000_000

HASHED_ARTIFACTS = ("manifest.json", "comparison.csv", "summary.txt")


class SuiteError(ValueError):
    """Invalid suite document; message names the offending field."""


class ArtifactError(RuntimeError):
    """Artifact directory problems: refusal to overwrite, missing files."""


@dataclass(frozen=True)
class BenchmarkSuite:
    id: str
    model_path: str
    orders_path: str
    scenario_paths: tuple[str, ...]
    seeds: tuple[int, ...]
    cap: int

    def load_model(self) -> ShopModel:
        return load_model_file(self.model_path)

    def load_orders(self) -> list[ProductOrder]:
        return load_orders_file(self.orders_path)

    def load_scenarios(self) -> list[Scenario]:
        model = self.load_model()
        orders = self.load_orders()
        scenarios = [
            load_scenario_file(p, model=model, orders=orders) for p in self.scenario_paths
        ]
        ids = [s.id for s in scenarios]
        if len(set(ids)) != len(ids):
            raise SuiteError(f"scenario ids are not unique: {sorted(ids)}")
        return scenarios


def load_suite(path: str) -> BenchmarkSuite:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise SuiteError(f"suite document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SuiteError("suite document must be a JSON object")
    extra = set(doc) - {"id", "model", "orders", "scenarios", "seeds", "cap"}
    if extra:
        raise SuiteError(f"suite has unknown keys: {sorted(extra)}")
    sid = doc.get("id")
    if not isinstance(sid, str) or not sid:
        raise SuiteError("suite id must be a non-empty string")
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: Any, fld: str) -> str:
        if not isinstance(p, str) or not p:
            raise SuiteError(f"suite {fld} must be a path string")
        return p if os.path.isabs(p) else os.path.join(base, p)

    scenarios = doc.get("scenarios")
    if not isinstance(scenarios, list) or not scenarios:
        raise SuiteError("suite scenarios must be a non-empty list of paths")
    seeds = doc.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        raise SuiteError("suite seeds must be a non-empty list of integers")
    for s in seeds:
        if not isinstance(s, int):
            raise SuiteError("suite seeds must be integers")
    if len(set(seeds)) != len(seeds):
        raise SuiteError(f"suite seeds contain duplicates: {seeds}")
    cap = doc.get("cap", DEFAULT_CAP)
    if not isinstance(cap, int) or cap <= 0:
        raise SuiteError("suite cap must be a positive integer")
    return BenchmarkSuite(
        id=sid,
        model_path=resolve(doc.get("model"), "model"),
        orders_path=resolve(doc.get("orders"), "orders"),
        scenario_paths=tuple(resolve(p, f"scenarios[{i}]") for i, p in enumerate(scenarios)),
        seeds=tuple(seeds),
        cap=cap,
    )


@dataclass
class RunResult:
    run_id: str
    scenario_id: str
    category: str | None
    seed: int
    status: str  # completed | stalled | cap-exceeded
    rounds: int
    final_t: int
    log: bytes
    report: KpiReport | None


def run_single(
    model: ShopModel,
    orders: list[ProductOrder],
    scenario: Scenario,
    seed: int,
    cap: int = DEFAULT_CAP,
    attach_kpi: bool = True,
    latency_clock: Callable[[], float] | None = None,
    endpoint: Any | None = None,
) -> RunResult:
    """Execute one run over a recorded wire session.

    By default the reference control is served in process over a lock-step
    endpoint pair.  Pass ``endpoint`` to talk to a control served elsewhere
    (over a socket, typically); its far side must already be listening.
    """
    kernel = EmulationKernel(model)
    manager = ScenarioManager(scenario, seed)
    recorder = RunRecorder()
    engine: KpiEngine | None = None
    if attach_kpi:
        engine = KpiEngine()
        recorder.attach(engine.observe_record)

    if endpoint is None:
        control = ReferenceControl(model)
        emu_raw, ctl_raw = InProcEndpoint.pair()
        client = ControlClient(ctl_raw, control, clock=latency_clock or time.perf_counter)

        def pump() -> None:
            while ctl_raw.has_line():
                client.serve_one()

    else:
        emu_raw = endpoint

        def pump() -> None:
            pass

    emu_ep = RecordingEndpoint(emu_raw, recorder)
    driver = RoundDriver(emu_ep, model.model_hash)

    run_id = f"{scenario.id}-s{seed}"
    driver.handshake()
    pump()
    driver.finish_handshake()
    driver.send_run_meta(
        {
            "run_id": run_id,
            "scenario": scenario.id,
            "seed": seed,
            "cap": cap,
            "orders": [o.to_dict() for o in orders],
            "machines": sorted(model.machines),
        }
    )
    pump()

    status = _drive(kernel, manager, driver, pump, cap)

    driver.send_run_end(kernel.clock, status)
    pump()
    driver.collect_closing()
    driver.close()

    report: KpiReport | None = None
    if engine is not None and status == "completed":
        report = engine.finalize()
    return RunResult(
        run_id=run_id,
        scenario_id=scenario.id,
        category=scenario.category,
        seed=seed,
        status=status,
        rounds=driver.round_no,
        final_t=kernel.clock,
        log=recorder.log_bytes(),
        report=report,
    )


def _drive(
    kernel: EmulationKernel,
    manager: ScenarioManager,
    driver: RoundDriver,
    pump: Callable[[], None],
    cap: int,
) -> str:
    """Round loop; returns the run-end reason."""
    queue: deque[tuple[int, list[SimEvent]]] = deque()
    buffer: list[ControlCommand] = []
    while True:
        if not queue:
            events = kernel.advance(buffer)
            buffer = []
            queue.append((kernel.clock, events))
        t, events = queue.popleft()
        if t > cap:
            return "cap-exceeded"
        directives = []
        for firing in manager.process_batch(t, events):
            for inj in firing.injections:
                driver.send_injection_audit(t, firing.rule_id, inj.to_dict())
                injected = kernel.apply_injection(inj)
                if injected:
                    queue.append((kernel.clock, injected))
            # Directives ride ahead of this round's event batch.
            directives.extend(firing.directives)
        driver.open_round(t, directives)
        driver.send_batch(t, events, kernel.drain_notices())
        pump()
        commands, idle = driver.collect_reply()
        buffer.extend(commands)
        if not events and not commands and not queue:
            return "completed" if idle else "stalled"


def run_suite(
    suite: BenchmarkSuite,
    out_dir: str,
    seeds: tuple[int, ...] | None = None,
    cap: int | None = None,
    force: bool = False,
) -> dict[str, Any]:
    """Execute the full suite and write artifacts; returns the manifest."""
    use_seeds = seeds if seeds is not None else suite.seeds
    if len(set(use_seeds)) != len(use_seeds):
        raise SuiteError(f"seeds contain duplicates: {list(use_seeds)}")
    use_cap = cap if cap is not None else suite.cap

    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path) and not force:
        raise ArtifactError(
            f"{out_dir} already holds benchmark artifacts; pass force to overwrite"
        )

    model = suite.load_model()
    orders = suite.load_orders()
    scenarios = suite.load_scenarios()
    registry = CategoryRegistry.load()
    for sc in scenarios:
        # When a scenario is named after a registry label, its declared
        # category must agree with the registry.
        try:
            expected = registry.classify(sc.id)
        except RegistryError:
            continue
        if sc.category != expected:
            raise SuiteError(
                f"scenario {sc.id!r} declares category {sc.category!r}, "
                f"registry says {expected!r}"
            )

    results: list[RunResult] = []
    for sc in scenarios:
        for seed in use_seeds:
            results.append(run_single(model, orders, sc, seed, cap=use_cap))

    os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)

    runs_doc = []
    for r in results:
        log_rel = f"logs/{r.run_id}.il1.log"
        with open(os.path.join(out_dir, log_rel), "wb") as f:
            f.write(r.log)
        report_rel = None
        if r.report is not None:
            report_rel = f"reports/{r.run_id}.json"
            _write_json(os.path.join(out_dir, report_rel), r.report.to_doc())
            _write_json(
                os.path.join(out_dir, f"logs/{r.run_id}.timing.json"),
                {
                    k: v
                    for k, v in r.report.to_doc(include_volatile=True).items()
                    if k in VOLATILE_METRICS
                },
            )
        runs_doc.append(
            {
                "run_id": r.run_id,
                "scenario": r.scenario_id,
                "category": r.category,
                "seed": r.seed,
                "status": r.status,
                "rounds": r.rounds,
                "final_t": r.final_t,
                "makespan": r.report.makespan if r.report else None,
                "log": log_rel,
                "report": report_rel,
            }
        )

    manifest = {
        "suite": suite.id,
        "model_hash": model.model_hash,
        "registry_sha256": registry.sha256,
        "cap": use_cap,
        "seeds": list(use_seeds),
        "scenarios": [
            {"id": sc.id, "category": sc.category, "file": os.path.basename(p)}
            for sc, p in zip(scenarios, suite.scenario_paths)
        ],
        "runs": runs_doc,
    }
    _write_json(manifest_path, manifest)
    compare(out_dir)
    return manifest


def _write_json(path: str, doc: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path: str) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def compare(out_dir: str) -> dict[str, Any]:
    """Aggregate reports per scenario and diff against the null baseline.

    Writes comparison.csv and summary.txt into the artifact directory and
    returns the comparison structure.  Only mean/min/max across seeds are
    reported; single-seed scenarios simply repeat the value.
    """
    manifest_path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ArtifactError(f"{out_dir} holds no manifest.json")
    manifest = _read_json(manifest_path)

    by_scenario: dict[str, list[dict[str, float]]] = {}
    categories: dict[str, str | None] = {}
    incomplete: dict[str, int] = {}
    for run in manifest["runs"]:
        sid = run["scenario"]
        categories[sid] = run["category"]
        if run["report"] is None:
            incomplete[sid] = incomplete.get(sid, 0) + 1
            continue
        report = KpiReport.from_doc(_read_json(os.path.join(out_dir, run["report"])))
        by_scenario.setdefault(sid, []).append(report.scalar_metrics())

    scenario_order = [s["id"] for s in manifest["scenarios"]]
    baseline_id = next(
        (s["id"] for s in manifest["scenarios"] if s["category"] is None), None
    )

    aggregates: dict[str, dict[str, dict[str, float]]] = {}
    for sid in scenario_order:
        metrics = by_scenario.get(sid, [])
        if not metrics:
            continue
        names = sorted(metrics[0])
        aggregates[sid] = {
            name: {
                "mean": sum(m[name] for m in metrics) / len(metrics),
                "min": min(m[name] for m in metrics),
                "max": max(m[name] for m in metrics),
            }
            for name in names
        }

    base = aggregates.get(baseline_id) if baseline_id else None

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["scenario", "category", "metric", "mean", "min", "max", "baseline_mean", "delta_mean"]
    )
    for sid in scenario_order:
        if sid not in aggregates:
            continue
        for name in sorted(aggregates[sid]):
            agg = aggregates[sid][name]
            if base is not None and name in base:
                base_mean = base[name]["mean"]
                delta = agg["mean"] - base_mean
                writer.writerow(
                    [sid, categories.get(sid) or "baseline", name,
                     _num(agg["mean"]), _num(agg["min"]), _num(agg["max"]),
                     _num(base_mean), _num(delta)]
                )
            else:
                writer.writerow(
                    [sid, categories.get(sid) or "baseline", name,
                     _num(agg["mean"]), _num(agg["min"]), _num(agg["max"]), "", ""]
                )
    csv_text = buf.getvalue()
    with open(os.path.join(out_dir, "comparison.csv"), "w", encoding="utf-8") as f:
        f.write(csv_text)

    summary = _render_summary(manifest, aggregates, scenario_order, baseline_id, incomplete)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary)

    return {
        "baseline": baseline_id,
        "aggregates": aggregates,
        "incomplete": incomplete,
        "summary": summary,
    }


_SUMMARY_METRICS = (
    "makespan",
    "throughput_per_1000",
    "lead_time_mean",
    "tardiness_total",
    "reschedules",
)


def _num(v: float) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return repr(v)


def _render_summary(
    manifest: dict[str, Any],
    aggregates: dict[str, dict[str, dict[str, float]]],
    scenario_order: list[str],
    baseline_id: str | None,
    incomplete: dict[str, int],
) -> str:
    lines: list[str] = []
    lines.append(f"suite: {manifest['suite']}")
    lines.append(f"model: {manifest['model_hash'][:16]}")
    lines.append(f"seeds: {', '.join(str(s) for s in manifest['seeds'])}")
    if baseline_id:
        lines.append(f"baseline: {baseline_id}")
    else:
        lines.append("baseline: none (no null scenario in the suite)")
    lines.append("")
    base = aggregates.get(baseline_id) if baseline_id else None
    for sid in scenario_order:
        if sid not in aggregates:
            skipped = incomplete.get(sid, 0)
            lines.append(f"{sid}: no completed runs ({skipped} incomplete)")
            lines.append("")
            continue
        cat = next(
            (s["category"] for s in manifest["scenarios"] if s["id"] == sid), None
        )
        lines.append(f"{sid} [{cat or 'baseline'}]")
        for name in _SUMMARY_METRICS:
            if name not in aggregates[sid]:
                continue
            agg = aggregates[sid][name]
            row = (
                f"  {name:<22} mean {_num(agg['mean']):>12}  "
                f"min {_num(agg['min']):>10}  max {_num(agg['max']):>10}"
            )
            if base is not None and sid != baseline_id and name in base:
                delta = agg["mean"] - base[name]["mean"]
                sign = "+" if delta >= 0 else ""
                row += f"  ({sign}{_num(delta)} vs baseline)"
            lines.append(row)
        bad = incomplete.get(sid, 0)
        if bad:
            lines.append(f"  note: {bad} run(s) did not complete")
        lines.append("")
    return "\n".join(lines) + "\n"


def artifact_digest(out_dir: str) -> str:
    """Combined sha256 over the deterministic artifact set.

    Session logs and timing sidecars are excluded: they carry wall-clock
    decision latencies, which vary between otherwise identical runs.
    """
    names = [n for n in HASHED_ARTIFACTS if os.path.exists(os.path.join(out_dir, n))]
    reports_dir = os.path.join(out_dir, "reports")
    if os.path.isdir(reports_dir):
        names.extend(sorted(f"reports/{p}" for p in os.listdir(reports_dir)))
    digest_lines = []
    for name in names:
        with open(os.path.join(out_dir, name), "rb") as f:
            digest_lines.append(f"{name}\0{sha256_hex(f.read())}")
    return sha256_hex("\n".join(digest_lines).encode("utf-8"))
