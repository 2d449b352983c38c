"""Deterministic benchmarking harness for holonic manufacturing control.

The package splits a benchmark run into strictly separated layers: a lean
shop-floor emulation kernel, a recorded wire protocol between emulation and
control, an event-triggered scenario manager for disturbances, an
externalized KPI engine tapping the recorded streams, and a suite harness
that runs scenario x seed grids and compares them against a null baseline.
"""

from .control import ProductOrder, ReferenceControl, load_orders
from .harness import BenchmarkSuite, RunResult, load_suite, run_single, run_suite
from .kernel import EmulationKernel
from .kpi import KpiEngine, KpiReport, recompute_from_log
from .messages import ControlCommand, ControlDirective, Injection, SimEvent
from .model import ShopModel, load_model
from .scenario import CategoryRegistry, Scenario, ScenarioManager, load_scenario

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSuite",
    "CategoryRegistry",
    "ControlCommand",
    "ControlDirective",
    "EmulationKernel",
    "Injection",
    "KpiEngine",
    "KpiReport",
    "ProductOrder",
    "ReferenceControl",
    "RunResult",
    "Scenario",
    "ScenarioManager",
    "ShopModel",
    "SimEvent",
    "load_model",
    "load_orders",
    "load_scenario",
    "load_suite",
    "recompute_from_log",
    "run_single",
    "run_suite",
    "__version__",
]
