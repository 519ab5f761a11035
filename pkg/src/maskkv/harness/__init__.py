"""Sweep harness: toy tasks, traces, reports and the command line."""
from .compare import CompareConfig, build_profile, run_compare, task_for
from .memory import kv_memory_bytes
from .report import RunReport, RunResult, parse_report, pretty
from .tasks import NEEDLE_MODEL, NeedleTask, agreement_rate, needle_hit, needle_task

__all__ = [
    "CompareConfig", "NEEDLE_MODEL", "NeedleTask", "RunReport", "RunResult", "agreement_rate",
    "build_profile", "kv_memory_bytes", "needle_hit", "needle_task", "parse_report", "pretty",
    "run_compare", "task_for",
]
