"""Replication log between the primary Cloud Manager and its backup.

Every input that mutates the primary (registrations, frames, ticks,
blacklistings, middlebox failures) is appended as a record and applied by
the backup before the primary continues, so both hold the same state
after every step.  Records the backup has applied are not kept on the
primary; the backup holds the history from then on.

Record layout:

    seq u64 | kind u8 | payload length u32 | payload (canonical JSON) | crc32 u32
"""

from __future__ import annotations
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING, Any

from .errors import MalformedFrame

if TYPE_CHECKING:
    from .cloud import CloudService

logger = logging.getLogger(__name__)

_HEAD = struct.Struct(">QBI")
_CRC = struct.Struct(">I")


class RecordKind(IntEnum):
    REGISTER = 1
    FRAME = 2
    REQUEST = 3
    REPORT = 4
    TICK = 5
    DETECT = 6
    UPDATE = 7
    DISSEMINATE = 8
    BLACKLIST = 9
    REQUEST_SEEN = 10
    MIDDLEBOX_FAIL = 11
    RESYNC = 12


@dataclass(frozen=True, slots=True)
class ReplicationRecord:
    seq: int
    kind: RecordKind
    payload: dict[str, Any]


def encode_record(record: ReplicationRecord) -> bytes:
    body = json.dumps(record.payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = _HEAD.pack(record.seq, int(record.kind), len(body)) + body
    return head + _CRC.pack(zlib.crc32(head))


def decode_record(data: bytes) -> ReplicationRecord:
    if len(data) < _HEAD.size + _CRC.size:
        raise MalformedFrame(f"replication record too short ({len(data)} bytes)")
    head, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(head) != crc:
        raise MalformedFrame("replication record checksum mismatch")
    seq, kind, length = _HEAD.unpack_from(head)
    if len(head) != _HEAD.size + length:
        raise MalformedFrame("replication record length mismatch")
    try:
        return ReplicationRecord(seq, RecordKind(kind), json.loads(head[_HEAD.size:]))
    except ValueError as e:
        raise MalformedFrame(f"replication record: {e}") from None


def failover(primary: "CloudService", backup: "CloudService") -> "CloudService":
    """Mark the primary failed and promote the backup.

    Raises ReplicationGap when the backup missed a record; the primary is
    left failed either way.
    """
    primary.fail()
    backup.promote()
    logger.info("cloud manager failover complete at replication seq %d", backup.applied_seq)
    return backup
