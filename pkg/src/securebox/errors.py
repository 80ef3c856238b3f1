"""Exceptions raised across the gateway, the cloud service and the simulator."""

from __future__ import annotations


class SecureboxError(Exception):
    """Base class for every error this package raises on purpose."""


# ── Wire / codec ─────────────────────────────────────────────────────

class WrongLength(SecureboxError):
    """A fixed-size record was decoded from the wrong number of bytes."""


class MalformedFrame(SecureboxError):
    """A frame or payload could not be parsed."""


class BadSignature(SecureboxError):
    """A signature did not verify under the expected key."""


# ── Policy engine ────────────────────────────────────────────────────

class StaleSequence(SecureboxError):
    """An update sequence number was already applied."""


class CorruptSnapshot(SecureboxError):
    """A Pol-DB snapshot failed its magic, version or checksum check."""


# ── Gateway ──────────────────────────────────────────────────────────

class UnknownRequestId(SecureboxError):
    """A response named a request id that is not parked."""


# ── Cloud service ────────────────────────────────────────────────────

class UnknownBox(SecureboxError):
    """A message came from a box that never registered."""


class BlacklistedBox(SecureboxError):
    """A message came from a blacklisted box."""


class ReplicationGap(SecureboxError):
    """The backup manager's replication log has holes."""


# ── Middleboxes ──────────────────────────────────────────────────────

class InstanceUnavailable(SecureboxError):
    """A chain stage has neither a live primary nor a live replica."""


class NoInstance(SecureboxError):
    """No live instance can serve the requested service."""


class NoReplica(SecureboxError):
    """A failed instance had no replica to promote."""


# ── Trust authority ──────────────────────────────────────────────────

class DuplicateSubject(SecureboxError):
    """A subject id was registered twice."""


class UnknownSubject(SecureboxError):
    """A subject id was never registered."""


# ── Scenario configuration and metrics files ─────────────────────────

class MetricsFileInvalid(SecureboxError, ValueError):
    """A metrics CSV has a foreign header or an unparseable row."""


class ConfigInvalid(SecureboxError):
    """A scenario failed validation. ``line`` is 1-based when known."""

    def __init__(self, message: str, *, line: int | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.line = line

    def __str__(self) -> str:
        if self.line is None:
            return self.message
        return f"line {self.line}: {self.message}"
