"""Pol-DB — the gateway-local policy store.

Design goals:
  - Deterministic: lookup is a pure function of the stored policies and the flow
  - Fast: one hash probe per distinct wildcard mask, no scan over policies
  - Total order: (priority, specificity, issued_at, policy_id) picks one winner

Policies are hashed by their concrete fields inside one table per wildcard
mask, so an exact 6-tuple policy lives in the full-mask table and a
``{src_addr}`` policy in the one-field table.
"""

from __future__ import annotations
import logging
from collections import defaultdict

from .types import (
    MISS, DefaultVerdict, FlowMetadata, LookupResult, PolicyUpdate,
    SecurityPolicy, UpdateResult, project,
)

logger = logging.getLogger(__name__)


class PolicyDb:
    """Ordered policy storage with deterministic conflict resolution."""

    __slots__ = ("_by_identity", "_tables", "_applied", "default_verdict")

    def __init__(self, default_verdict: DefaultVerdict | None = None) -> None:
        self._by_identity: dict[tuple[int, int], SecurityPolicy] = {}
        # mask → concrete-value key → policies sharing that key
        self._tables: dict[int, dict[tuple[int, ...], list[SecurityPolicy]]] = {}
        self._applied: set[int] = set()
        self.default_verdict = default_verdict or DefaultVerdict()

    # ------------------------------------------------------------------
    # Core API
    # ------------------------------------------------------------------

    def lookup(self, flow: FlowMetadata) -> LookupResult:
        """Return the winning policy among all that match ``flow``."""
        best: SecurityPolicy | None = None
        best_rank: tuple[int, int, int, int] | None = None
        for mask, table in self._tables.items():
            candidates = table.get(project(flow, mask))
            if not candidates:
                continue
            for policy in candidates:
                rank = policy.rank()
                if best_rank is None or rank > best_rank:
                    best, best_rank = policy, rank
        return LookupResult(best) if best is not None else MISS

    def insert(self, policy: SecurityPolicy) -> bool:
        """Store ``policy``, replacing any with the same (issuer, policy_id).

        Returns False when an identical policy was already present.
        """
        existing = self._by_identity.get(policy.identity)
        if existing == policy:
            return False
        if existing is not None:
            self._unindex(existing)
        self._by_identity[policy.identity] = policy
        mask = policy.pattern.mask
        self._tables.setdefault(mask, defaultdict(list))[policy.pattern.key()].append(policy)
        return True

    def remove(self, policy: SecurityPolicy) -> bool:
        existing = self._by_identity.pop(policy.identity, None)
        if existing is None:
            return False
        self._unindex(existing)
        return True

    def apply_update(self, update: PolicyUpdate) -> UpdateResult:
        """Insert every policy of a verified update, once per sequence number."""
        if update.seq in self._applied:
            logger.debug("update seq %d already applied, skipping %d policies",
                         update.seq, len(update.policies))
            return UpdateResult(applied=0, skipped=len(update.policies))
        for policy in update.policies:
            self.insert(policy)
        self._applied.add(update.seq)
        return UpdateResult(applied=len(update.policies), skipped=0)

    def mark_applied(self, seqs: set[int] | list[int]) -> None:
        self._applied.update(seqs)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._by_identity)

    @property
    def applied_seqs(self) -> frozenset[int]:
        return frozenset(self._applied)

    def policies(self) -> list[SecurityPolicy]:
        """All stored policies in (issuer, policy_id) order."""
        return [self._by_identity[k] for k in sorted(self._by_identity)]

    def get(self, issuer: int, policy_id: int) -> SecurityPolicy | None:
        return self._by_identity.get((int(issuer), policy_id))

    def clear(self) -> None:
        self._by_identity.clear()
        self._tables.clear()
        self._applied.clear()

    def _unindex(self, policy: SecurityPolicy) -> None:
        mask = policy.pattern.mask
        table = self._tables[mask]
        key = policy.pattern.key()
        bucket = table[key]
        bucket.remove(policy)
        if not bucket:
            del table[key]
            if not table:
                del self._tables[mask]
