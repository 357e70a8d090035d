"""Simulated TDD round between APs, UEs and a central unit.

Stage I    every AP and UE runs a loopback measurement and reports it.
Stage II   each UE sends a CW pilot in its own slot; APs measure pilot and
           reference phases, align the CSI and forward it to the CPU, which
           aggregates the channel estimate.
Stage III  the CPU runs the precoder and assigns per-AP weights; APs apply
           downlink compensation and transmit; UEs observe the result.

Nodes only talk through typed messages. A scheduler delivers them in
logical ticks; each stage has a deadline in ticks. Message delivery order
inside a tick can be shuffled without changing the outcome.
"""

from __future__ import annotations

import hashlib
import json
import socket
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import calibration as cal
from . import gnn as gnn_mod
from . import precoders as pc
from ._jsonio import dumps17
from .numkit import RngStream

STAGES = ("I", "II", "III")
ROLES = ("AP", "UE", "CPU")

LOOPBACK_REPORT = "LoopbackReport"
PILOT_REPORT = "PilotReport"
CSI_AGGREGATE = "CsiAggregate"
PRECODER_ASSIGNMENT = "PrecoderAssignment"
DOWNLINK_FRAME = "DownlinkFrame"

PAYLOAD_FIELDS = {
    LOOPBACK_REPORT: {"phi_loop"},
    PILOT_REPORT: {"ap", "ue", "phi_csi", "amplitude"},
    CSI_AGGREGATE: {"H"},
    PRECODER_ASSIGNMENT: {"ap", "weights", "symbols"},
    DOWNLINK_FRAME: {"ap", "weights", "symbols"},
}
KIND_STAGE = {
    LOOPBACK_REPORT: "I",
    PILOT_REPORT: "II",
    CSI_AGGREGATE: "II",
    PRECODER_ASSIGNMENT: "III",
    DOWNLINK_FRAME: "III",
}
COMPLEX_FIELDS = {CSI_AGGREGATE: "H", PRECODER_ASSIGNMENT: "weights", DOWNLINK_FRAME: "weights"}


class ProtocolViolation(RuntimeError):
    """A message is malformed, duplicated, missing or arrives out of stage."""


class StageTimeout(RuntimeError):
    """A stage deadline passed with reports still outstanding."""

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = list(missing)
        names = ", ".join(f"{n.role}{n.index}" for n in self.missing)
        super().__init__(f"stage {stage} timed out waiting for {names}")


@dataclass(frozen=True, order=True)
class NodeId:
    role: str
    index: int

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def __str__(self):
        return f"{self.role}{self.index}"


CPU = NodeId("CPU", 0)


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str
    sender: NodeId
    receiver: NodeId
    stage: str
    payload: dict

    def validate(self):
        if self.kind not in PAYLOAD_FIELDS:
            raise ProtocolViolation(f"unknown message kind {self.kind!r}")
        if self.stage != KIND_STAGE[self.kind]:
            raise ProtocolViolation(f"{self.kind} tagged with stage {self.stage}")
        missing = PAYLOAD_FIELDS[self.kind] - set(self.payload)
        if missing:
            raise ProtocolViolation(f"{self.kind} from {self.sender} lacks {sorted(missing)}")

    def to_wire(self) -> dict:
        payload = dict(self.payload)
        key = COMPLEX_FIELDS.get(self.kind)
        if key is not None:
            arr = np.asarray(payload[key], dtype=complex)
            payload[key] = np.stack([arr.real, arr.imag], axis=-1)
        if "symbols" in payload:
            s = np.asarray(payload["symbols"], dtype=complex)
            payload["symbols"] = np.stack([s.real, s.imag], axis=-1)
        return {"kind": self.kind, "from": [self.sender.role, self.sender.index],
                "to": [self.receiver.role, self.receiver.index], "stage": self.stage,
                "payload": payload}

    @classmethod
    def from_wire(cls, doc: dict) -> "ProtocolMessage":
        try:
            kind, stage, payload = doc["kind"], doc["stage"], dict(doc["payload"])
            sender, receiver = NodeId(*doc["from"]), NodeId(*doc["to"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolViolation(f"malformed wire message: {exc}") from None
        key = COMPLEX_FIELDS.get(kind)
        for k in (key, "symbols"):
            if k is not None and k in payload:
                arr = np.asarray(payload[k], dtype=float)
                payload[k] = arr[..., 0] + 1j * arr[..., 1]
        msg = cls(kind, sender, receiver, stage, payload)
        msg.validate()
        return msg

    def digest(self) -> str:
        return hashlib.sha256(encode_frame(self)).hexdigest()


def encode_frame(msg: ProtocolMessage) -> bytes:
    """4-byte big-endian length prefix followed by UTF-8 JSON."""
    body = dumps17(msg.to_wire()).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode_frame(data: bytes) -> tuple[ProtocolMessage, bytes]:
    """Decode one frame; returns the message and any remaining bytes."""
    if len(data) < 4:
        raise ProtocolViolation("truncated frame header")
    (n,) = struct.unpack(">I", data[:4])
    if len(data) < 4 + n:
        raise ProtocolViolation("truncated frame body")
    try:
        doc = json.loads(data[4:4 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"undecodable frame: {exc}") from None
    return ProtocolMessage.from_wire(doc), data[4 + n:]


class TcpLoopback:
    """Carries messages through a real TCP connection on 127.0.0.1."""

    def __init__(self):
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        self._tx = socket.create_connection(server.getsockname())
        self._rx, _ = server.accept()
        server.close()

    def roundtrip(self, msg: ProtocolMessage) -> ProtocolMessage:
        frame = encode_frame(msg)
        self._tx.sendall(frame)
        buf = b""
        while len(buf) < 4:
            buf += self._rx.recv(4 - len(buf))
        (n,) = struct.unpack(">I", buf)
        while len(buf) < 4 + n:
            chunk = self._rx.recv(4 + n - len(buf))
            if not chunk:
                raise ProtocolViolation("connection closed mid-frame")
            buf += chunk
        out, _ = decode_frame(buf)
        return out

    def close(self):
        self._tx.close()
        self._rx.close()


@dataclass
class Event:
    tick: int
    stage: str
    action: str
    source: str
    target: str
    detail: str = ""

    def as_row(self) -> dict:
        return {"tick": self.tick, "stage": self.stage, "action": self.action,
                "source": self.source, "target": self.target, "detail": self.detail}


@dataclass
class TddSchedule:
    """Per-stage deadlines in logical ticks."""

    deadlines: dict = field(default_factory=lambda: {"I": 4, "II": 4, "III": 4})

    def __post_init__(self):
        if set(self.deadlines) != set(STAGES):
            raise ValueError(f"deadlines needed for stages {STAGES}")


# --------------------------------------------------------------------------
# aggregation and precoder selection
# --------------------------------------------------------------------------


def cpu_aggregate(reports, M: int, K: int = 1) -> np.ndarray:
    """Assemble the M x K channel estimate from pilot reports.

    Each report is a PilotReport message or a payload dict with keys
    ``ap``, ``ue``, ``phi_csi`` and ``amplitude``.
    """
    H = np.full((M, K), np.nan + 0j)
    for rep in reports:
        p = rep.payload if isinstance(rep, ProtocolMessage) else rep
        i, k = int(p["ap"]), int(p.get("ue", 0))
        if not (0 <= i < M and 0 <= k < K):
            raise ProtocolViolation(f"report for AP {i}/UE {k} outside {M}x{K}")
        if not np.isnan(H[i, k]):
            raise ProtocolViolation(f"duplicate report from AP {i} for UE {k}")
        H[i, k] = float(p["amplitude"]) * np.exp(1j * float(p["phi_csi"]))
    missing = sorted({i for i, k in zip(*np.nonzero(np.isnan(H)))})
    if missing:
        raise ProtocolViolation(f"missing reports from AP index {', '.join(map(str, missing))}")
    return H


def make_precoder(kind: str, P: float = 1.0, sigma2: float = 1.0, alpha: float | None = None,
                  model=None) -> Callable:
    """Return ``H -> W`` for ``kind`` in {"mrt", "rzf", "gnn"}.

    For ``gnn``, ``model`` is a GnnModel or a path to a saved model file.
    """
    if kind == "mrt":
        return lambda H: pc.mrt(H, P)
    if kind == "rzf":
        return lambda H: pc.rzf(H, pc.default_alpha(H.shape[1], sigma2, P) if alpha is None else alpha, P)
    if kind == "gnn":
        if model is None:
            raise ValueError("gnn precoder needs a model")
        if not isinstance(model, gnn_mod.GnnModel):
            model = gnn_mod.load_model(model)
        return lambda H: gnn_mod.forward(model, H, P)
    raise ValueError(f"unknown precoder {kind!r}")


def _assignment(W, equal_power: bool):
    # equal per-AP power: unit amplitude per entry, precoder phases only
    return np.exp(1j * np.angle(W)) if equal_power else W


# --------------------------------------------------------------------------
# nodes
# --------------------------------------------------------------------------


class ApNode:
    def __init__(self, index, hw, mode):
        self.id = NodeId("AP", index)
        self.i = index
        self.hw = hw
        self.stage = "I"
        self.ledger = cal.PhaseLedger(hw.phi_cable.copy(), mode=mode)
        self.W_tx = None

    def start_stage(self, stage):
        self.stage = stage
        if stage == "I":
            self.ledger.phi_Loop[self.i] = cal.measure_loopback(self.hw, self.i)
            return [ProtocolMessage(LOOPBACK_REPORT, self.id, CPU, "I",
                                    {"phi_loop": self.ledger.phi_Loop[self.i]})]
        return []

    def hear_pilot(self, k):
        """Over-the-air pilot of UE ``k``: measure, align and report."""
        if self.ledger.phi_Ref[self.i] is None:
            self.ledger.phi_Ref[self.i] = cal.measure_reference(self.hw, self.i)
        self.ledger.phi_Pilot[(self.i, k)] = cal.measure_pilot(self.hw, self.i, k)
        phi_csi = cal.align_csi(self.ledger, self.i, k)
        return [ProtocolMessage(PILOT_REPORT, self.id, CPU, "II",
                                {"ap": self.i, "ue": k, "phi_csi": phi_csi,
                                 "amplitude": float(self.hw.a[self.i, k])})]

    def handle(self, msg):
        if msg.kind != PRECODER_ASSIGNMENT:
            raise ProtocolViolation(f"{self.id} cannot handle {msg.kind}")
        if int(msg.payload["ap"]) != self.i:
            raise ProtocolViolation(f"{self.id} received assignment for AP {msg.payload['ap']}")
        w = np.asarray(msg.payload["weights"], dtype=complex)
        theta = cal.compensate_downlink(self.ledger, np.angle(w), self.i)
        self.W_tx = np.abs(w) * np.exp(1j * np.atleast_1d(theta))
        return [ProtocolMessage(DOWNLINK_FRAME, self.id, NodeId("UE", k), "III",
                                {"ap": self.i, "weights": self.W_tx, "symbols": msg.payload["symbols"]})
                for k in range(self.hw.K)]


class UeNode:
    def __init__(self, index, hw):
        self.id = NodeId("UE", index)
        self.k = index
        self.hw = hw
        self.stage = "I"
        self.frames = {}
        self.phi_loop = None

    def start_stage(self, stage):
        self.stage = stage
        if stage == "I":
            self.phi_loop = cal.measure_ue_loopback(self.hw, self.k)
            return [ProtocolMessage(LOOPBACK_REPORT, self.id, CPU, "I", {"phi_loop": self.phi_loop})]
        return []

    def handle(self, msg):
        if msg.kind != DOWNLINK_FRAME:
            raise ProtocolViolation(f"{self.id} cannot handle {msg.kind}")
        i = int(msg.payload["ap"])
        if i in self.frames:
            raise ProtocolViolation(f"{self.id} got a second frame from AP {i}")
        self.frames[i] = np.asarray(msg.payload["weights"], dtype=complex)
        return []

    def complete(self):
        return len(self.frames) == self.hw.M


class CpuNode:
    def __init__(self, M, K, precoder, equal_power, symbols):
        self.id = CPU
        self.M, self.K = M, K
        self.stage = "I"
        self.precoder = precoder
        self.equal_power = equal_power
        self.symbols = symbols
        self.loop_reports = {}
        self.pilot_reports = {}
        self.H_est = None
        self.W = None
        self.assigned = False

    def expected(self, stage):
        if stage == "I":
            nodes = [NodeId("AP", i) for i in range(self.M)] + [NodeId("UE", k) for k in range(self.K)]
            return [n for n in nodes if n not in self.loop_reports]
        if stage == "II":
            return sorted({NodeId("AP", i) for (i, k) in np.ndindex(self.M, self.K)
                           if (i, k) not in self.pilot_reports})
        return []

    def start_stage(self, stage):
        self.stage = stage
        if stage != "III":
            return []
        W = self.precoder(self.H_est)
        self.W = _assignment(W, self.equal_power)
        self.assigned = True
        return [ProtocolMessage(PRECODER_ASSIGNMENT, CPU, NodeId("AP", i), "III",
                                {"ap": i, "weights": self.W[i], "symbols": self.symbols})
                for i in range(self.M)]

    def handle(self, msg):
        if msg.kind == LOOPBACK_REPORT:
            if msg.sender in self.loop_reports:
                raise ProtocolViolation(f"duplicate loopback report from {msg.sender}")
            self.loop_reports[msg.sender] = msg.payload["phi_loop"]
            return []
        if msg.kind == PILOT_REPORT:
            key = (int(msg.payload["ap"]), int(msg.payload["ue"]))
            if key in self.pilot_reports:
                raise ProtocolViolation(f"duplicate pilot report from AP {key[0]} for UE {key[1]}")
            self.pilot_reports[key] = msg
            if len(self.pilot_reports) == self.M * self.K:
                self.H_est = cpu_aggregate(list(self.pilot_reports.values()), self.M, self.K)
                return [ProtocolMessage(CSI_AGGREGATE, CPU, CPU, "II", {"H": self.H_est})]
            return []
        if msg.kind == CSI_AGGREGATE:
            return []
        raise ProtocolViolation(f"CPU cannot handle {msg.kind}")


# --------------------------------------------------------------------------
# scheduler
# --------------------------------------------------------------------------


@dataclass
class RoundResult:
    W: np.ndarray
    W_cpu: np.ndarray
    H_est: np.ndarray
    received_power: np.ndarray
    sinr: np.ndarray
    events: list

    def stage_order_ok(self) -> bool:
        idx = [STAGES.index(e.stage) for e in self.events]
        return idx == sorted(idx) and set(e.stage for e in self.events) == set(STAGES)


def _sort_key(msg):
    return (STAGES.index(msg.stage), msg.kind, msg.sender, msg.receiver, msg.digest())


def run_tdd_round(hw: cal.HardwarePhaseModel, precoder: Callable, P: float = 1.0,
                  sigma2: float = 1.0, rng: RngStream | None = None, *, mode: str = "anchored",
                  equal_power: bool | None = None, schedule: TddSchedule | None = None,
                  shuffle: bool = False, transport: str = "inproc", drop=()) -> RoundResult:
    """Run one TDD round over the phase model ``hw``.

    Parameters
    ----------
    precoder : callable
        Maps the CPU's channel estimate (M, K) to a precoder; see
        :func:`make_precoder`.
    rng : RngStream, optional
        Source of the data symbols and, with ``shuffle``, of the delivery order.
    equal_power : bool, optional
        If true every AP radiates unit amplitude and only precoder phases are
        used. Defaults to true for a single UE.
    transport : {"inproc", "tcp"}
        ``tcp`` pushes every message through a loopback TCP connection.
    drop : iterable of (kind, NodeId)
        Fault injection: messages of that kind from that sender are lost.
    """
    rng = rng or RngStream(0)
    schedule = schedule or TddSchedule()
    M, K = hw.M, hw.K
    equal_power = K == 1 if equal_power is None else equal_power
    symbols = rng.child("symbols").complex_gaussian(K)
    order_rng = rng.child("delivery")
    aps = [ApNode(i, hw, mode) for i in range(M)]
    ues = [UeNode(k, hw) for k in range(K)]
    cpu = CpuNode(M, K, precoder, equal_power, symbols)
    nodes = {n.id: n for n in [*aps, *ues, cpu]}
    drop = {(kind, node) for kind, node in drop}
    tcp = TcpLoopback() if transport == "tcp" else None
    if transport not in ("inproc", "tcp"):
        raise ValueError(f"unknown transport {transport!r}")
    events: list[Event] = []
    tick = 0

    def deliver(pending, stage):
        nonlocal tick
        deadline = tick + schedule.deadlines[stage]
        while True:
            done = {"I": not cpu.expected("I"), "II": cpu.H_est is not None,
                    "III": all(u.complete() for u in ues)}[stage]
            if done and not pending:
                return
            if tick >= deadline:
                missing = cpu.expected(stage) if stage != "III" else [
                    NodeId("AP", i) for i in range(M) if any(i not in u.frames for u in ues)]
                raise StageTimeout(stage, missing)
            tick += 1
            batch = sorted(pending, key=_sort_key)
            if shuffle:
                batch = [batch[j] for j in order_rng.permutation(len(batch))]
            pending = []
            for msg in batch:
                msg.validate()
                if (msg.kind, msg.sender) in drop:
                    events.append(Event(tick, msg.stage, "drop", str(msg.sender), str(msg.receiver), msg.kind))
                    continue
                if tcp is not None:
                    msg = tcp.roundtrip(msg)
                node = nodes.get(msg.receiver)
                if node is None:
                    raise ProtocolViolation(f"no node {msg.receiver}")
                if STAGES.index(msg.stage) > STAGES.index(node.stage):
                    raise ProtocolViolation(f"{node.id} in stage {node.stage} got a stage-{msg.stage} message")
                events.append(Event(tick, msg.stage, "deliver", str(msg.sender), str(msg.receiver), msg.kind))
                pending.extend(node.handle(msg))

    try:
        # Stage I: loopback calibration on every device
        pending = []
        for node in nodes.values():
            pending.extend(node.start_stage("I"))
        events.append(Event(tick, "I", "loopback", "all", "self", f"{M} APs, {K} UEs"))
        deliver(pending, "I")

        # Stage II: one pilot slot per UE
        for node in nodes.values():
            node.start_stage("II")
        pending = []
        for k in range(K):
            events.append(Event(tick, "II", "pilot", str(NodeId("UE", k)), "air", f"slot {k}"))
            for ap in aps:
                pending.extend(ap.hear_pilot(k))
        deliver(pending, "II")

        # Stage III: precode, compensate, transmit
        pending = []
        for node in [*aps, *ues, cpu]:
            pending.extend(node.start_stage("III"))
        events.append(Event(tick, "III", "precode", str(CPU), "self", "precoder evaluated"))
        deliver(pending, "III")
    finally:
        if tcp is not None:
            tcp.close()

    W_tx = np.stack([ap.W_tx for ap in aps])
    G = cal.simulate_downlink_matrix(hw, W_tx)
    G2 = np.abs(G) ** 2
    signal = np.diag(G2)
    sinr = signal / (G2.sum(axis=1) - signal + sigma2)
    return RoundResult(W_tx, cpu.W, cpu.H_est, signal, sinr, events)


def monolithic_round(hw: cal.HardwarePhaseModel, precoder: Callable, *, mode: str = "anchored",
                     equal_power: bool | None = None) -> np.ndarray:
    """Reference pipeline without message passing: estimate -> precode -> compensate."""
    equal_power = hw.K == 1 if equal_power is None else equal_power
    ledger = cal.measure_all(hw, mode)
    H_est = cal.estimate_channel(ledger, hw.a)
    W = _assignment(precoder(H_est), equal_power)
    return cal.compensate_precoder(ledger, W)


def run_rps_round(hw: cal.HardwarePhaseModel, slots: int, rng: RngStream, k: int = 0) -> np.ndarray:
    """Received power per slot with fresh uniform transmit phases and unit amplitudes."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    theta = rng.uniform(0.0, 2 * np.pi, (slots, hw.M))
    field_ = hw.a[:, k] * np.exp(1j * (theta + hw.phi_tx + hw.phi_ch[:, k]))
    return np.abs(field_.sum(axis=1)) ** 2
