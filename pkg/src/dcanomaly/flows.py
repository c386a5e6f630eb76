"""Flow tracking: TCP state, RTT estimation, and per-window traffic metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .records import TCP, FlowKey, PacketHeaderRecord, canonical_flow_key

log = logging.getLogger(__name__)

DEFAULT_WINDOW_US = 10_000_000
DEFAULT_IDLE_TIMEOUT_US = 60_000_000
DEFAULT_OOO_TOLERANCE_US = 1_000


@dataclass(slots=True)
class _AckRun:
    """Duplicate-ACK run tracker for one direction of a flow."""

    last_ack: int | None = None
    dup_count: int = 0
    fired: bool = False

    def reset(self, ack: int | None):
        self.last_ack = ack
        self.dup_count = 0
        self.fired = False


@dataclass(slots=True)
class FlowState:
    """Accumulated state for one bidirectional flow."""

    key: FlowKey
    first_seen: int
    last_seen: int
    bytes_total: int = 0
    dup_ack_runs: int = 0
    rst_count: int = 0
    rtt_samples: list = field(default_factory=list)
    open: bool = True

    # Per-direction internals, indexed by forward=True/False.
    _pending: dict = field(default_factory=lambda: {True: {}, False: {}})
    _seen_seq: dict = field(default_factory=lambda: {True: set(), False: set()})
    _ack_runs: dict = field(default_factory=lambda: {True: _AckRun(), False: _AckRun()})
    _fin_seen: dict = field(default_factory=lambda: {True: False, False: False})


def estimate_rtt(flow: FlowState, pkt: PacketHeaderRecord, forward: bool) -> list:
    """Match ACKs against outstanding segments and register new ones.

    Returns the RTT samples (microseconds) completed by this packet: one per
    data segment first covered by the packet's ACK. Retransmitted segments
    never produce samples (Karn's rule); SYN and FIN occupy one sequence
    number each, so handshake and teardown exchanges also yield samples.
    """
    if pkt.protocol != TCP:
        return []
    samples = []
    if "ACK" in pkt.tcp_flags:
        pending = flow._pending[not forward]
        if pending:
            covered = [end for end in pending if end <= pkt.ack]
            for end in covered:
                sent_at = pending.pop(end)
                if sent_at is not None and pkt.timestamp >= sent_at:
                    samples.append(pkt.timestamp - sent_at)
    seg_len = pkt.payload_len
    if "SYN" in pkt.tcp_flags:
        seg_len += 1
    if "FIN" in pkt.tcp_flags:
        seg_len += 1
    if seg_len > 0:
        seq_end = pkt.seq + seg_len
        seen = flow._seen_seq[forward]
        if pkt.seq in seen:
            # Retransmission: poison any pending sample for this range.
            flow._pending[forward][seq_end] = None
        else:
            seen.add(pkt.seq)
            flow._pending[forward][seq_end] = pkt.timestamp
    return samples


def _note_ack_run(flow: FlowState, pkt: PacketHeaderRecord, forward: bool) -> bool:
    """Track duplicate-ACK runs; True when a triple-duplicate event fires.

    The third duplicate (fourth identical ACK) of a run counts exactly one
    event; the run resets when the ack number advances or data flows in the
    ACKing direction.
    """
    run = flow._ack_runs[forward]
    flags = pkt.tcp_flags
    if pkt.payload_len > 0 or "SYN" in flags or "FIN" in flags or "RST" in flags:
        run.reset(pkt.ack if "ACK" in flags else run.last_ack)
        return False
    if "ACK" not in flags:
        return False
    if pkt.ack == run.last_ack:
        run.dup_count += 1
        if run.dup_count == 3 and not run.fired:
            run.fired = True
            return True
        return False
    run.reset(pkt.ack)
    return False


@dataclass(slots=True)
class WindowMetrics:
    """Per-VM aggregate of one reporting window."""

    vm: str
    window_index: int
    active_flows: int = 0
    mean_flow_size: float = 0.0
    dup_ack_count: int = 0
    rst_count: int = 0
    rtt_samples: list = field(default_factory=list)


class _WindowAcc:
    __slots__ = ("flow_bytes", "dup_ack_count", "rst_count", "rtt_samples")

    def __init__(self):
        self.flow_bytes: dict = {}
        self.dup_ack_count = 0
        self.rst_count = 0
        self.rtt_samples: list = []


class FlowTable:
    """Flow bookkeeping for one agent's packet stream.

    Ingestion must be sequential per agent; timestamps may regress at most
    `ooo_tolerance_us` (later records are rejected and counted). Window
    handling: call `close_window(vm, idx)` for every VM of interest once all
    of window idx has been ingested, then `end_window(idx)` to expire idle
    flows and release per-window accumulators.
    """

    def __init__(
        self,
        window_us: int = DEFAULT_WINDOW_US,
        idle_timeout_us: int = DEFAULT_IDLE_TIMEOUT_US,
        ooo_tolerance_us: int = DEFAULT_OOO_TOLERANCE_US,
    ):
        self.window_us = int(window_us)
        self.idle_timeout_us = int(idle_timeout_us)
        self.ooo_tolerance_us = int(ooo_tolerance_us)
        self.flows: dict = {}
        self.rejected_count = 0
        self.dup_ack_total = 0
        self._max_ts: int | None = None
        self._acc: dict = {}  # window_index -> {vm -> _WindowAcc}

    def _acc_for(self, window_index: int, vm: str) -> _WindowAcc:
        per_vm = self._acc.get(window_index)
        if per_vm is None:
            per_vm = self._acc[window_index] = {}
        acc = per_vm.get(vm)
        if acc is None:
            acc = per_vm[vm] = _WindowAcc()
        return acc

    def track_packet(self, pkt: PacketHeaderRecord) -> bool:
        """Ingest one packet. Returns False when rejected as out of order."""
        if self._max_ts is not None and pkt.timestamp < self._max_ts - self.ooo_tolerance_us:
            self.rejected_count += 1
            log.debug("rejected out-of-order packet at %d (max seen %d)", pkt.timestamp, self._max_ts)
            return False
        if self._max_ts is None or pkt.timestamp > self._max_ts:
            self._max_ts = pkt.timestamp

        key, forward = canonical_flow_key(pkt)
        flow = self.flows.get(key)
        if flow is None or (not flow.open and "SYN" in pkt.tcp_flags):
            flow = FlowState(key=key, first_seen=pkt.timestamp, last_seen=pkt.timestamp)
            self.flows[key] = flow
        flow.last_seen = pkt.timestamp
        flow.bytes_total += pkt.payload_len

        widx = pkt.timestamp // self.window_us
        acc_src = self._acc_for(widx, pkt.src_vm)
        acc_dst = self._acc_for(widx, pkt.dst_vm)
        acc_src.flow_bytes[key] = flow.bytes_total
        acc_dst.flow_bytes[key] = flow.bytes_total

        if pkt.protocol == TCP:
            samples = estimate_rtt(flow, pkt, forward)
            if samples:
                flow.rtt_samples.extend(samples)
                acc_src.rtt_samples.extend(samples)
                acc_dst.rtt_samples.extend(samples)
            if _note_ack_run(flow, pkt, forward):
                flow.dup_ack_runs += 1
                self.dup_ack_total += 1
                acc_src.dup_ack_count += 1
                acc_dst.dup_ack_count += 1
            if "RST" in pkt.tcp_flags:
                flow.rst_count += 1
                flow.open = False
                acc_src.rst_count += 1
                acc_dst.rst_count += 1
            if "FIN" in pkt.tcp_flags:
                flow._fin_seen[forward] = True
                if flow._fin_seen[True] and flow._fin_seen[False]:
                    flow.open = False
        return True

    def close_window(self, vm: str, window_index: int) -> WindowMetrics:
        """Aggregate one VM's activity within [idx*W, (idx+1)*W)."""
        acc = self._acc.get(window_index, {}).get(vm)
        if acc is None:
            return WindowMetrics(vm=vm, window_index=window_index)
        n = len(acc.flow_bytes)
        mean_size = sum(acc.flow_bytes.values()) / n if n else 0.0
        return WindowMetrics(
            vm=vm,
            window_index=window_index,
            active_flows=n,
            mean_flow_size=mean_size,
            dup_ack_count=acc.dup_ack_count,
            rst_count=acc.rst_count,
            rtt_samples=list(acc.rtt_samples),
        )

    def end_window(self, window_index: int):
        """Expire idle flows at the window boundary and drop old accumulators."""
        boundary = (window_index + 1) * self.window_us
        horizon = window_index * self.window_us - self.window_us
        stale = []
        for key, flow in self.flows.items():
            if flow.open and boundary - flow.last_seen > self.idle_timeout_us:
                flow.open = False
            if not flow.open and flow.last_seen < horizon:
                stale.append(key)
        for key in stale:
            del self.flows[key]
        for widx in [w for w in self._acc if w <= window_index]:
            del self._acc[widx]
