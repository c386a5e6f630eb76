"""Per-server agent: symptom report generation and local screening."""

from __future__ import annotations

import logging
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import DetectorConfig
from .flows import FlowTable, WindowMetrics

log = logging.getLogger(__name__)

# Symptom vector component order. Dominant-symptom indices are 1-based.
SYMPTOM_NAMES = ("rtt", "rst", "dupack", "flows", "size")


class UnknownVmError(LookupError):
    """History requested for a VM this agent does not manage."""


@dataclass(slots=True)
class SymptomReport:
    """Per-VM, per-window 5-component symptom intensity vector.

    Components lie in [0, 1] and are oriented so 0 is normal and 1 is the
    strongest symptom: (rtt shift, rst rate, dup-ack rate, flow-count change,
    flow-size change). raw_signs keeps the direction of the two change
    metrics (flows, size) for mitigation-time classification.
    """

    vm: str
    agent: str
    window_index: int
    s: tuple
    raw_signs: tuple


@dataclass(slots=True)
class ReportEntry:
    """A suspicious report as forwarded to the controller."""

    report: SymptomReport
    dominant: int  # 1-based symptom index


@dataclass(slots=True)
class ScreenedReports:
    """Output of the agent-side nearest-representative screening."""

    suspicious: list
    filtered_count: int


def fluctuation(x_prev: float, x_cur: float) -> float:
    """Signed relative change (cur - prev) / cur, clamped to [-1, 1].

    Defined as 0 when both values are 0 and -1 when the current value
    collapses to 0 from a positive previous value.
    """
    if x_cur == 0:
        return 0.0 if x_prev == 0 else -1.0
    raw = (x_cur - x_prev) / x_cur
    return max(-1.0, min(1.0, raw))


def jaccard(a, b) -> float:
    """Set similarity |a&b| / |a|b|; two empty sets count as identical."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def saturate(count: float, half_count: float) -> float:
    """Map a nonnegative event count into [0, 1); half_count maps to 0.5."""
    return count / (count + half_count)


def band_labels(samples, boundaries) -> frozenset:
    """Dequantize samples into band indices split by ascending boundaries.

    N boundaries define N+1 bands; a sample equal to a boundary falls into
    the band above it. Returns the set of distinct band indices hit.
    """
    bounds = list(boundaries)
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError("band boundaries must be strictly ascending")
    return frozenset(bisect_right(bounds, s) for s in samples)


def _sign(x: float) -> int:
    if x > 0:
        return 1
    if x < 0:
        return -1
    return 0


def make_report(
    prev: WindowMetrics,
    prev_labels: frozenset,
    cur: WindowMetrics,
    cur_labels: frozenset,
    cfg: DetectorConfig,
    agent_id: str,
) -> SymptomReport:
    """Build the symptom vector for cur from two consecutive windows."""
    if prev.vm != cur.vm or cur.window_index != prev.window_index + 1:
        raise ValueError("reports require consecutive windows of one VM")
    f_flows = fluctuation(prev.active_flows, cur.active_flows)
    f_size = fluctuation(prev.mean_flow_size, cur.mean_flow_size)
    s = (
        1.0 - jaccard(prev_labels, cur_labels),
        saturate(cur.rst_count, cfg.freq_half_count),
        saturate(cur.dup_ack_count, cfg.freq_half_count),
        abs(f_flows),
        abs(f_size),
    )
    return SymptomReport(
        vm=cur.vm,
        agent=agent_id,
        window_index=cur.window_index,
        s=s,
        raw_signs=(_sign(f_flows), _sign(f_size)),
    )


def screen_reports(reports) -> ScreenedReports:
    """Assign each report to the nearest of {zero vector, 5 unit vectors}.

    Euclidean distance, ties broken toward the lowest representative index.
    Reports nearest the zero vector are normal and only counted; the rest are
    returned tagged with their dominant symptom (the unit vector's index).
    """
    suspicious = []
    filtered = 0
    for report in reports:
        s = report.s
        best_idx = 0
        best_d = None
        for rep in range(6):
            d = 0.0
            for j, c in enumerate(s):
                target = 1.0 if rep == j + 1 else 0.0
                diff = c - target
                d += diff * diff
            if best_d is None or d < best_d:
                best_d = d
                best_idx = rep
        if best_idx == 0:
            filtered += 1
        else:
            suspicious.append(ReportEntry(report=report, dominant=best_idx))
    return ScreenedReports(suspicious=suspicious, filtered_count=filtered)


def format_report_line(entry: ReportEntry) -> str:
    """Agent-to-controller wire line; doubles as the audit log format."""
    r = entry.report
    comps = ",".join(repr(float(c)) for c in r.s)
    return (
        f"{r.agent},{r.vm},{r.window_index},{comps},"
        f"{r.raw_signs[0]},{r.raw_signs[1]},{entry.dominant}"
    )


def parse_report_line(line: str) -> ReportEntry:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 11:
        raise ValueError(f"expected 11 fields, got {len(parts)}")
    report = SymptomReport(
        vm=parts[1],
        agent=parts[0],
        window_index=int(parts[2]),
        s=tuple(float(p) for p in parts[3:8]),
        raw_signs=(int(parts[8]), int(parts[9])),
    )
    return ReportEntry(report=report, dominant=int(parts[10]))


@dataclass(slots=True)
class _VmState:
    calibration_samples: list = field(default_factory=list)
    boundaries: list | None = None
    prev_metrics: WindowMetrics | None = None
    prev_labels: frozenset = frozenset()
    history: deque = None  # type: ignore[assignment]


class Agent:
    """Monitors one server's VMs: tracks flows, emits and screens reports.

    RTT band boundaries are calibrated per VM from the first few windows'
    samples (percentiles of the observed distribution) and frozen thereafter.
    Until a VM is calibrated its RTT component stays 0.
    """

    def __init__(self, agent_id: str, vms, cfg: DetectorConfig | None = None):
        self.agent_id = agent_id
        self.cfg = cfg or DetectorConfig()
        self.vms = sorted(vms)
        self.table = FlowTable(
            window_us=self.cfg.window_us,
            idle_timeout_us=self.cfg.idle_timeout_us,
            ooo_tolerance_us=self.cfg.ooo_tolerance_us,
        )
        self._state = {vm: _VmState(history=deque(maxlen=self.cfg.history_depth)) for vm in self.vms}
        self.filtered_total = 0

    def ingest(self, pkt) -> bool:
        return self.table.track_packet(pkt)

    def _freeze_boundaries(self, st: _VmState):
        samples = np.asarray(st.calibration_samples, dtype=float)
        bounds = [float(np.percentile(samples, p)) for p in self.cfg.band_percentiles]
        # Percentiles of a narrow distribution can coincide; nudge to keep
        # the boundaries strictly ascending.
        for i in range(1, len(bounds)):
            if bounds[i] <= bounds[i - 1]:
                bounds[i] = bounds[i - 1] + 1e-6
        st.boundaries = bounds
        st.calibration_samples = []

    def close_window(self, window_index: int):
        """Finish one window: returns (metrics by VM, screened reports)."""
        cfg = self.cfg
        metrics_by_vm = {}
        reports = []
        for vm in self.vms:
            m = self.table.close_window(vm, window_index)
            metrics_by_vm[vm] = m
            st = self._state[vm]
            if st.boundaries is None:
                st.calibration_samples.extend(m.rtt_samples)
                done_calibrating = window_index + 1 >= cfg.calibration_windows
                if done_calibrating and len(st.calibration_samples) >= cfg.min_calibration_samples:
                    self._freeze_boundaries(st)
            cur_labels = (
                band_labels(m.rtt_samples, st.boundaries) if st.boundaries is not None else frozenset()
            )
            if st.prev_metrics is not None:
                report = make_report(st.prev_metrics, st.prev_labels, m, cur_labels, cfg, self.agent_id)
                reports.append(report)
                st.history.append(report)
            st.prev_metrics = m
            st.prev_labels = cur_labels
        self.table.end_window(window_index)
        screened = screen_reports(reports)
        self.filtered_total += screened.filtered_count
        return metrics_by_vm, screened

    def history_window(self, vm: str, depth: int | None = None):
        """Most recent reports for one VM, oldest first."""
        if vm not in self._state:
            raise UnknownVmError(vm)
        depth = depth or self.cfg.history_depth
        return list(self._state[vm].history)[-depth:]
