"""Canonical big-endian encodings exchanged between gateways and the CSS.

Analysis request (27 bytes, under the 40-byte uplink limit):

    box_id u32 | request_id u32 | src_addr u32 | dst_addr u32 |
    src_port u16 | dst_port u16 | protocol u8 | device_id u16 |
    flags u8 | reserved u24

Policy (35 bytes):

    policy_id u64 | mask u8 | src u32 | dst u32 | sport u16 | dport u16 |
    proto u8 | device u16 | verdict u8 | priority u8 | issuer u8 | issued_at u64

Frame:

    length u32 (type + payload + signature) | type u8 | payload | signature[64]

The signature covers ``type + payload``.  Encodings are deterministic so equal
values always produce identical bytes.
"""

from __future__ import annotations
import json
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable

from .errors import MalformedFrame, WrongLength
from .types import (
    FIELDS, AnalysisRequest, AnalysisResponse, EventKind, FlowMetadata,
    GatewayEvent, Issuer, MatchPattern, PolicyUpdate, Priority,
    SecurityPolicy, SensorReport, UpdateTier, Verdict,
)

SIGNATURE_SIZE = 64

_REQUEST = struct.Struct(">IIIIHHBHB3s")
REQUEST_SIZE = _REQUEST.size
assert REQUEST_SIZE == 27 < 40, "analysis request exceeds the uplink budget"

_POLICY = struct.Struct(">QBIIHHBHBBBQ")
POLICY_SIZE = _POLICY.size

_RESPONSE_HEAD = struct.Struct(">I")
_UPDATE_HEAD = struct.Struct(">IIBBH")   # box_id, seq, tier, flags, count
_FRAME_HEAD = struct.Struct(">IB")
_RESYNC = struct.Struct(">IIQ")    # box_id, seq watermark, since tick

UPDATE_SEALED = 0x01

# Largest frame a reader will buffer before declaring the stream corrupt.
MAX_FRAME_SIZE = 1 << 24


class MessageType(IntEnum):
    REQUEST = 1
    RESPONSE = 2
    UPDATE = 3
    SENSOR_REPORT = 4
    ROGUE_REPORT = 5
    RESYNC = 6


# ------------------------------------------------------------------
# Analysis request
# ------------------------------------------------------------------

def encode_request(req: AnalysisRequest) -> bytes:
    m = req.metadata
    return _REQUEST.pack(
        req.box_id, req.request_id, m.src_addr, m.dst_addr, m.src_port,
        m.dst_port, m.protocol, m.device_id, req.flags,
        req.reserved.to_bytes(3, "big"),
    )


def decode_request(data: bytes) -> AnalysisRequest:
    if len(data) != REQUEST_SIZE:
        raise WrongLength(f"analysis request is {REQUEST_SIZE} bytes, got {len(data)}")
    (box_id, request_id, src, dst, sport, dport, proto, device,
     flags, reserved) = _REQUEST.unpack(data)
    flow = FlowMetadata(src, dst, sport, dport, proto, device)
    return AnalysisRequest(box_id, request_id, flow, flags, int.from_bytes(reserved, "big"))


# ------------------------------------------------------------------
# Policies
# ------------------------------------------------------------------

def encode_policy(policy: SecurityPolicy) -> bytes:
    p = policy.pattern
    values = [0 if v is None else v for v in p.values()]
    return _POLICY.pack(
        policy.policy_id, p.mask, *values,
        int(policy.verdict), int(policy.priority), int(policy.issuer),
        policy.issued_at,
    )


def decode_policy(data: bytes) -> SecurityPolicy:
    if len(data) != POLICY_SIZE:
        raise MalformedFrame(f"policy record is {POLICY_SIZE} bytes, got {len(data)}")
    (policy_id, mask, *values, verdict, priority, issuer, issued_at) = _POLICY.unpack(data)
    if mask >> len(FIELDS):
        raise MalformedFrame(f"policy {policy_id}: mask {mask:#x} has unknown bits")
    constraints = [v if mask >> i & 1 else None for i, v in enumerate(values)]
    try:
        return SecurityPolicy(
            policy_id=policy_id,
            pattern=MatchPattern(*constraints),
            verdict=Verdict(verdict),
            priority=Priority(priority),
            issuer=Issuer(issuer),
            issued_at=issued_at,
        )
    except ValueError as e:
        raise MalformedFrame(f"policy {policy_id}: {e}") from None


def _decode_policies(body: bytes, count: int) -> tuple[SecurityPolicy, ...]:
    if len(body) != count * POLICY_SIZE:
        raise MalformedFrame(f"expected {count} policies, body is {len(body)} bytes")
    return tuple(decode_policy(body[i:i + POLICY_SIZE])
                 for i in range(0, len(body), POLICY_SIZE))


# ------------------------------------------------------------------
# Responses and updates (payloads only; frames add type and signature)
# ------------------------------------------------------------------

def encode_response(resp: AnalysisResponse) -> bytes:
    return _RESPONSE_HEAD.pack(resp.request_id) + encode_policy(resp.policy)


def decode_response(payload: bytes, signature: bytes = b"") -> AnalysisResponse:
    if len(payload) != _RESPONSE_HEAD.size + POLICY_SIZE:
        raise MalformedFrame(f"response payload has {len(payload)} bytes")
    (request_id,) = _RESPONSE_HEAD.unpack_from(payload)
    policy = decode_policy(payload[_RESPONSE_HEAD.size:])
    return AnalysisResponse(request_id, policy, signature)


def encode_update(
    update: PolicyUpdate,
    *,
    sealer: Callable[[bytes, bytes], bytes] | None = None,
) -> bytes:
    """Encode an update payload.

    ``sealer(body, header)`` encrypts the policy block with the header as
    associated data; without it the block travels in the clear.
    """
    flags = UPDATE_SEALED if sealer else 0
    header = _UPDATE_HEAD.pack(update.box_id, update.seq, int(update.tier),
                               flags, len(update.policies))
    body = b"".join(encode_policy(p) for p in update.policies)
    if sealer:
        body = sealer(body, header)
    return header + body


def peek_update_header(payload: bytes) -> tuple[int, int, UpdateTier, int, int]:
    """(box_id, seq, tier, flags, count) without touching the body."""
    if len(payload) < _UPDATE_HEAD.size:
        raise MalformedFrame("update payload shorter than its header")
    box_id, seq, tier, flags, count = _UPDATE_HEAD.unpack_from(payload)
    try:
        return box_id, seq, UpdateTier(tier), flags, count
    except ValueError:
        raise MalformedFrame(f"unknown update tier {tier}") from None


def decode_update(
    payload: bytes,
    signature: bytes = b"",
    *,
    opener: Callable[[bytes, bytes], bytes] | None = None,
) -> PolicyUpdate:
    box_id, seq, tier, flags, count = peek_update_header(payload)
    header, body = payload[:_UPDATE_HEAD.size], payload[_UPDATE_HEAD.size:]
    if flags & UPDATE_SEALED:
        if opener is None:
            raise MalformedFrame(f"update {seq} is sealed but no link key is configured")
        body = opener(body, header)
    return PolicyUpdate(box_id, seq, tier, _decode_policies(body, count), signature)


# ------------------------------------------------------------------
# Resync (box → CSS after a reboot or an outage)
# ------------------------------------------------------------------

def encode_resync(box_id: int, watermark: int, since: int) -> bytes:
    return _RESYNC.pack(box_id, watermark, since)


def decode_resync(payload: bytes) -> tuple[int, int, int]:
    """(box_id, watermark, since).

    Every update seq up to ``watermark`` is applied on the box; responses
    sent before tick ``since`` are still held.
    """
    if len(payload) != _RESYNC.size:
        raise MalformedFrame(f"resync payload is {_RESYNC.size} bytes, got {len(payload)}")
    return _RESYNC.unpack(payload)


# ------------------------------------------------------------------
# Sensor and rogue reports (canonical JSON payloads)
# ------------------------------------------------------------------

def _canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _event_to_dict(ev: GatewayEvent) -> dict:
    return {
        "tick": ev.tick,
        "kind": ev.kind.value,
        "flow": list(ev.metadata.values()) if ev.metadata else None,
        "source": ev.source,
        "detail": ev.detail,
    }


def _event_from_dict(d: dict) -> GatewayEvent:
    flow = FlowMetadata(*d["flow"]) if d.get("flow") else None
    return GatewayEvent(d["tick"], EventKind(d["kind"]), flow, d.get("source"), d.get("detail", ""))


def encode_sensor_report(report: SensorReport) -> bytes:
    return _canonical_json({
        "box_id": report.box_id,
        "window": [report.tick_start, report.tick_end],
        "flows": {str(k): v for k, v in report.flows.items()},
        "drops": {str(k): v for k, v in report.drops.items()},
        "remotes": {str(k): v for k, v in report.remotes.items()},
        "suspicious": [_event_to_dict(e) for e in report.suspicious],
        "contacts": [list(c) for c in report.contacts],
    })


def decode_sensor_report(payload: bytes) -> SensorReport:
    try:
        d = json.loads(payload.decode("utf-8"))
        start, end = d["window"]
        return SensorReport(
            box_id=d["box_id"],
            tick_start=start,
            tick_end=end,
            flows={int(k): v for k, v in d["flows"].items()},
            drops={int(k): v for k, v in d["drops"].items()},
            remotes={int(k): v for k, v in d["remotes"].items()},
            suspicious=tuple(_event_from_dict(e) for e in d["suspicious"]),
            contacts=tuple(tuple(c) for c in d["contacts"]),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedFrame(f"sensor report: {e}") from None


def encode_rogue_report(source: str, reason: str, digest: str, tick: int) -> bytes:
    return _canonical_json({"source": source, "reason": reason, "digest": digest, "tick": tick})


def decode_rogue_report(payload: bytes) -> dict:
    try:
        d = json.loads(payload.decode("utf-8"))
        return {"source": d["source"], "reason": d["reason"],
                "digest": d["digest"], "tick": d["tick"]}
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedFrame(f"rogue report: {e}") from None


# ------------------------------------------------------------------
# Frames
# ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Frame:
    msg_type: MessageType
    payload: bytes
    signature: bytes

    @property
    def signed_bytes(self) -> bytes:
        return signed_body(self.msg_type, self.payload)


def signed_body(msg_type: MessageType, payload: bytes) -> bytes:
    """The bytes a frame signature covers."""
    return bytes([int(msg_type)]) + payload


def assemble_frame(msg_type: MessageType, payload: bytes, signature: bytes) -> bytes:
    if len(signature) != SIGNATURE_SIZE:
        raise ValueError(f"signature must be {SIGNATURE_SIZE} bytes")
    body_len = 1 + len(payload) + SIGNATURE_SIZE
    return _FRAME_HEAD.pack(body_len, int(msg_type)) + payload + signature


def encode_frame(
    msg_type: MessageType,
    payload: bytes,
    signer: Callable[[bytes], bytes],
) -> bytes:
    return assemble_frame(msg_type, payload, signer(signed_body(msg_type, payload)))


def frame_length(header: bytes) -> int:
    """Total frame size announced by the first four bytes."""
    (body_len,) = struct.unpack_from(">I", header)
    if body_len < 1 + SIGNATURE_SIZE or body_len > MAX_FRAME_SIZE:
        raise MalformedFrame(f"impossible frame length {body_len}")
    return 4 + body_len


def decode_frame(data: bytes) -> Frame:
    if len(data) < _FRAME_HEAD.size + SIGNATURE_SIZE:
        raise MalformedFrame(f"frame too short ({len(data)} bytes)")
    if frame_length(data) != len(data):
        raise MalformedFrame("frame length prefix does not match its size")
    _, raw_type = _FRAME_HEAD.unpack_from(data)
    try:
        msg_type = MessageType(raw_type)
    except ValueError:
        raise MalformedFrame(f"unknown message type {raw_type}") from None
    payload = data[_FRAME_HEAD.size:-SIGNATURE_SIZE]
    return Frame(msg_type, payload, data[-SIGNATURE_SIZE:])
