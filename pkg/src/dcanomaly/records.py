"""Packet header records and the line-oriented trace file format."""

from __future__ import annotations

from dataclasses import dataclass, field

VALID_FLAGS = frozenset({"SYN", "ACK", "FIN", "RST"})
_FLAG_ORDER = ("SYN", "ACK", "FIN", "RST")

TCP = "TCP"
UDP = "UDP"
OTHER = "OTHER"
PROTOCOLS = (TCP, UDP, OTHER)


class TraceFormatError(ValueError):
    """A trace line that does not follow the record format."""

    def __init__(self, message: str, path: str | None = None, lineno: int | None = None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}:{lineno}: " if lineno is not None else f"{path}: "
        super().__init__(f"{where}{message}")


@dataclass(slots=True)
class PacketHeaderRecord:
    """One mirrored packet header as seen by a monitoring agent.

    Timestamps are integer microseconds since epoch. TCP flags are a
    (frozen)set drawn from VALID_FLAGS; seq/ack are only meaningful for TCP.
    """

    timestamp: int
    src_vm: str
    dst_vm: str
    src_port: int
    dst_port: int
    protocol: str
    payload_len: int
    tcp_flags: frozenset = field(default_factory=frozenset)
    seq: int = 0
    ack: int = 0

    def __post_init__(self):
        if self.payload_len < 0:
            raise ValueError(f"payload_len must be >= 0, got {self.payload_len}")
        if self.tcp_flags and self.protocol != TCP:
            raise ValueError("tcp_flags only valid for TCP packets")


@dataclass(slots=True, frozen=True)
class FlowKey:
    """Canonical bidirectional 5-tuple: endpoint A sorts before endpoint B."""

    vm_a: str
    port_a: int
    vm_b: str
    port_b: int
    protocol: str

    def endpoints(self) -> tuple[str, str]:
        return (self.vm_a, self.vm_b)


def canonical_flow_key(pkt: PacketHeaderRecord) -> tuple[FlowKey, bool]:
    """Map a packet to its bidirectional flow key.

    Returns (key, forward) where forward is True when the packet travels
    from endpoint A to endpoint B of the canonical key.
    """
    a = (pkt.src_vm, pkt.src_port)
    b = (pkt.dst_vm, pkt.dst_port)
    if a <= b:
        return FlowKey(a[0], a[1], b[0], b[1], pkt.protocol), True
    return FlowKey(b[0], b[1], a[0], a[1], pkt.protocol), False


def format_trace_line(pkt: PacketHeaderRecord) -> str:
    """Serialize one record; flags are '+'-joined in canonical order."""
    flags = "+".join(f for f in _FLAG_ORDER if f in pkt.tcp_flags)
    return (
        f"{pkt.timestamp},{pkt.src_vm},{pkt.dst_vm},{pkt.src_port},{pkt.dst_port},"
        f"{pkt.protocol},{pkt.payload_len},{flags},{pkt.seq},{pkt.ack}"
    )


def parse_trace_line(line: str, path: str | None = None, lineno: int | None = None) -> PacketHeaderRecord:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 10:
        raise TraceFormatError(f"expected 10 fields, got {len(parts)}", path, lineno)
    try:
        flags_field = parts[7]
        if flags_field:
            flags = frozenset(flags_field.split("+"))
            if not flags <= VALID_FLAGS:
                raise ValueError(f"unknown flag in {flags_field!r}")
        else:
            flags = frozenset()
        protocol = parts[5]
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        return PacketHeaderRecord(
            timestamp=int(parts[0]),
            src_vm=parts[1],
            dst_vm=parts[2],
            src_port=int(parts[3]),
            dst_port=int(parts[4]),
            protocol=protocol,
            payload_len=int(parts[6]),
            tcp_flags=flags,
            seq=int(parts[8]),
            ack=int(parts[9]),
        )
    except ValueError as exc:
        raise TraceFormatError(str(exc), path, lineno) from exc
