"""Closed-form encoder-pass and update counts per training batch, and
reconciliation of those counts against what a run actually did."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .config import Mode
from .errors import ConfigError


@dataclass
class CostQuery:
    mode: Mode
    b: int
    k: int | None = None
    m: int | None = None
    l: int | None = None
    double_q: bool = False

    def __post_init__(self):
        self.mode = Mode(self.mode)
        need = {Mode.RISE: ("b", "k"), Mode.R2D2: ("b", "m", "l"), Mode.PLAIN: ("b",)}[self.mode]
        for name in need:
            v = getattr(self, name)
            if v is None:
                raise ConfigError(f"{self.mode.value} cost query needs {name}")
            if v < (0 if name == "l" else 1):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.double_q and self.mode is Mode.R2D2:
            raise ConfigError("double_q is not modelled for r2d2")


@dataclass
class CostReport:
    encoder_passes_per_batch: int
    q_updates_per_batch: int
    non_temporally_correlated_updates: int
    min_context_any_update: int

    def to_dict(self) -> dict:
        return asdict(self)


def analytic_cost(q: CostQuery) -> CostReport:
    b = q.b
    if q.mode is Mode.RISE:
        passes = (3 if q.double_q else 2) * b
        return CostReport(passes, b, b, q.k)
    if q.mode is Mode.R2D2:
        return CostReport(2 * b * (q.m + q.l), b * q.m, b, q.l)
    return CostReport((3 if q.double_q else 2) * b, b, b, 1)


@dataclass
class Reconciliation:
    ok: bool
    batches: int
    diffs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def reconcile(report: CostReport, observed) -> Reconciliation:
    """Compare per-batch observed (passes, updates) pairs against ``report``.

    ``observed`` is a sequence of (encoder_passes, q_updates), one per batch.
    Every batch must match exactly; each mismatch is listed with its delta.
    """
    diffs = []
    observed = list(observed)
    for i, (passes, updates) in enumerate(observed):
        if passes != report.encoder_passes_per_batch:
            diffs.append({"batch": i, "field": "encoder_passes", "expected": report.encoder_passes_per_batch,
                          "observed": passes, "delta": passes - report.encoder_passes_per_batch})
        if updates != report.q_updates_per_batch:
            diffs.append({"batch": i, "field": "q_updates", "expected": report.q_updates_per_batch,
                          "observed": updates, "delta": updates - report.q_updates_per_batch})
    return Reconciliation(ok=not diffs and bool(observed), batches=len(observed), diffs=diffs)


def format_table(q: CostQuery, r: CostReport) -> str:
    rows = [
        ("mode", q.mode.value),
        ("encoder passes per batch", r.encoder_passes_per_batch),
        ("Q-values updated per batch", r.q_updates_per_batch),
        ("non-temporally correlated updates", r.non_temporally_correlated_updates),
        ("min context for any updated Q", r.min_context_any_update),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
