"""Pol-DB snapshots for reboot recovery.

Layout (big-endian):

    magic "EGPD" | version u8 | inbound default u8 | outbound default u8 |
    policy count u32 | applied-seq count u32 |
    policies (35 bytes each, (issuer, policy_id) order) |
    applied seqs (u32 each, ascending) | crc32 u32 over everything before it
"""

from __future__ import annotations
import struct
import zlib

from .errors import CorruptSnapshot, MalformedFrame
from .policy_db import PolicyDb
from .types import DefaultVerdict, Verdict
from .wire import POLICY_SIZE, decode_policy, encode_policy

MAGIC = b"EGPD"
VERSION = 1

_HEAD = struct.Struct(">4sBBBII")
_SEQ = struct.Struct(">I")
_CRC = struct.Struct(">I")


def snapshot(db: PolicyDb) -> bytes:
    policies = db.policies()
    seqs = sorted(db.applied_seqs)
    body = bytearray(_HEAD.pack(
        MAGIC, VERSION,
        int(db.default_verdict.inbound), int(db.default_verdict.outbound),
        len(policies), len(seqs),
    ))
    for policy in policies:
        body += encode_policy(policy)
    for seq in seqs:
        body += _SEQ.pack(seq)
    body += _CRC.pack(zlib.crc32(body))
    return bytes(body)


def restore(data: bytes) -> PolicyDb:
    if len(data) < _HEAD.size + _CRC.size:
        raise CorruptSnapshot(f"snapshot too short ({len(data)} bytes)")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CorruptSnapshot("checksum mismatch")
    magic, version, inbound, outbound, n_policies, n_seqs = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CorruptSnapshot(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptSnapshot(f"unsupported snapshot version {version}")
    expected = _HEAD.size + n_policies * POLICY_SIZE + n_seqs * _SEQ.size
    if len(body) != expected:
        raise CorruptSnapshot(f"snapshot body is {len(body)} bytes, header implies {expected}")

    try:
        defaults = DefaultVerdict(Verdict(inbound), Verdict(outbound))
    except ValueError:
        raise CorruptSnapshot("bad default verdict") from None
    db = PolicyDb(defaults)
    offset = _HEAD.size
    for _ in range(n_policies):
        try:
            db.insert(decode_policy(body[offset:offset + POLICY_SIZE]))
        except MalformedFrame as e:
            raise CorruptSnapshot(str(e)) from None
        offset += POLICY_SIZE
    db.mark_applied([_SEQ.unpack_from(body, offset + i * _SEQ.size)[0] for i in range(n_seqs)])
    return db
