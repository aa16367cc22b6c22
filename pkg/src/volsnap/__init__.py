"""Memory-snapshot forensics over Volatility-3 plugin JSON."""

__version__ = "0.1.0"

from .anomaly import Finding, RuleConfig, run_all  # noqa: E402
from .delta import DeltaReport, delta_findings, diff_snapshots, summarize_delta  # noqa: E402
from .model import EntityKey, Snapshot, load_snapshot  # noqa: E402
from .timeline import TimelineSeries, build_timeline, connection_timeline  # noqa: E402

__all__ = [
    "__version__",
    "DeltaReport",
    "EntityKey",
    "Finding",
    "RuleConfig",
    "Snapshot",
    "TimelineSeries",
    "build_timeline",
    "connection_timeline",
    "delta_findings",
    "diff_snapshots",
    "load_snapshot",
    "run_all",
    "summarize_delta",
]
