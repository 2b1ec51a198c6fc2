"""Pairwise pull synchronisation with other instances.

A peer is pinned by its self-claim the first time it is contacted. Its
anchor receipts are imported into a namespace of their own, so nothing a
peer sends can change how local claims verify.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .anchor import Ledger, receipt_from_json, receipt_problem
from .cas import ContentHash, is_hex32
from .claims import SELF_CLAIM, Claim
from .claimstore import Namespace
from .clock import parse_ts
from .errors import (
    AlreadyIssued,
    IdMismatch,
    MalformedClaim,
    PeerIdentityChanged,
    SyncFailed,
    UnknownPeer,
)
from .identity import Registry, self_claim_key

if TYPE_CHECKING:
    from .engine import Advocate

TIMEOUT_S = 5.0


@dataclass
class PeerRecord:
    peer_url: str
    peer_self_claim: Claim
    peer_key_id: str
    last_sync_height: int = 0

    def to_json(self) -> dict:
        return {
            "peer_url": self.peer_url,
            "peer_key_id": self.peer_key_id,
            "peer_self_claim": self.peer_self_claim.to_json(),
            "last_sync_height": self.last_sync_height,
        }

    @classmethod
    def from_json(cls, data: dict) -> PeerRecord:
        return cls(
            peer_url=data["peer_url"],
            peer_self_claim=Claim.from_json(data["peer_self_claim"]),
            peer_key_id=data["peer_key_id"],
            last_sync_height=int(data["last_sync_height"]),
        )

    def summary(self) -> dict:
        return {
            "id": self.peer_key_id,
            "peer_url": self.peer_url,
            "peer_key_id": self.peer_key_id,
            "self_claim_id": str(self.peer_self_claim.id),
            "last_sync_height": self.last_sync_height,
        }


@dataclass(frozen=True)
class SyncReport:
    peer_url: str
    receipts_imported: int
    receipts_rejected: int
    new_height: int

    def to_json(self) -> dict:
        return {
            "peer_url": self.peer_url,
            "receipts_imported": self.receipts_imported,
            "receipts_rejected": self.receipts_rejected,
            "new_height": self.new_height,
        }


def fetch_json(url: str) -> Any:
    """GET ``url`` and decode JSON; returns None on 404."""
    try:
        with urllib.request.urlopen(url, timeout=TIMEOUT_S) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            return None
        raise SyncFailed(f"{url}: HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise SyncFailed(f"{url}: {exc}") from None


def _verified_self_claim(data: Any) -> tuple[Claim, str]:
    try:
        claim = Claim.from_json(data)
    except MalformedClaim as exc:
        raise SyncFailed(f"peer self-claim is malformed: {exc}") from None
    if claim.kind != SELF_CLAIM or claim.self_ref is not None or claim.computed_id() != claim.id:
        raise SyncFailed("peer did not present a self-claim")
    key = self_claim_key(claim)
    if key is None:
        raise SyncFailed("peer self-claim signature does not verify under its embedded key")
    return claim, key.key_id


class PeerDirectory:
    """Pinned peers of one instance, persisted in ``peers.json``."""

    def __init__(self, advocate: Advocate) -> None:
        self.advocate = advocate
        self.path = advocate.home / "peers.json"
        self._lock = threading.RLock()
        self._peer_locks: dict[str, threading.Lock] = {}
        self._peers: dict[str, PeerRecord] = {}
        self._ledgers: dict[str, Ledger] = {}
        self._load()

    def _load(self) -> None:
        try:
            data = json.loads(self.path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return
        for item in data.get("peers", []):
            record = PeerRecord.from_json(item)
            self._peers[record.peer_key_id] = record

    def _save(self) -> None:
        data = {"peers": [p.to_json() for p in self._peers.values()]}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".peers-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(data, fh, sort_keys=True, indent=1)
        os.replace(tmp, self.path)

    def __iter__(self):
        return iter(list(self._peers.values()))

    def __len__(self) -> int:
        return len(self._peers)

    def get(self, peer_key_id: str) -> PeerRecord:
        try:
            return self._peers[peer_key_id]
        except KeyError:
            raise UnknownPeer(f"no peer {peer_key_id!r}") from None

    def ledger(self, peer_key_id: str) -> Ledger:
        with self._lock:
            if peer_key_id not in self._ledgers:
                path = self.advocate.home / "peers" / peer_key_id / "ledger.jsonl"
                self._ledgers[peer_key_id] = Ledger(path, sequential=False)
            return self._ledgers[peer_key_id]

    def namespaces(self) -> dict[str, Namespace]:
        spaces = {}
        for record in self._peers.values():
            key = self_claim_key(record.peer_self_claim)
            if key is None:
                continue
            registry = Registry(self.advocate.store, key, origin=record.peer_key_id)
            spaces[record.peer_key_id] = Namespace(
                origin=record.peer_key_id,
                self_claim_id=record.peer_self_claim.id,
                deployment_key_id=key.key_id,
                deployment_public_key=key.public_key,
                ledger=self.ledger(record.peer_key_id),
                publishers=registry.public_keys(),
                stored_proofs=False,
            )
        return spaces

    def add(self, peer_url: str) -> PeerRecord:
        """Fetch, verify and pin a peer's self-claim (trust on first use)."""
        peer_url = peer_url.rstrip("/")
        data = fetch_json(f"{peer_url}/v1/self-claim")
        if data is None:
            raise SyncFailed(f"{peer_url} has no self-claim")
        claim, key_id = _verified_self_claim(data)
        if key_id == self.advocate.instance_key_id:
            raise SyncFailed("refusing to peer with this instance itself")
        with self._lock:
            for existing in self._peers.values():
                same_url = existing.peer_url == peer_url
                if (same_url or existing.peer_key_id == key_id) and existing.peer_self_claim.id != claim.id:
                    raise PeerIdentityChanged(f"{peer_url} presents a different self-claim than the pinned one")
                if existing.peer_key_id == key_id:
                    return existing
            self.advocate.store.store_claim(claim, origin=key_id, anchor=False)
            record = PeerRecord(peer_url, claim, key_id)
            self._peers[key_id] = record
            self._save()
            return record

    def sync(self, peer_key_id: str) -> SyncReport:
        record = self.get(peer_key_id)
        with self._lock:
            lock = self._peer_locks.setdefault(peer_key_id, threading.Lock())
        with lock:
            return sync_with_peer(self, record)


def sync_with_peer(directory: PeerDirectory, peer: PeerRecord) -> SyncReport:
    """Import a peer's anchor receipts above ``last_sync_height``.

    Everything is fetched before anything is written, so an unreachable
    peer leaves local state untouched.
    """
    base = peer.peer_url
    current = fetch_json(f"{base}/v1/self-claim")
    if current is None:
        raise SyncFailed(f"{base} has no self-claim")
    try:
        current_id = Claim.from_json(current).id
    except MalformedClaim as exc:
        raise SyncFailed(f"peer self-claim is malformed: {exc}") from None
    if current_id != peer.peer_self_claim.id:
        raise PeerIdentityChanged(f"{base} no longer presents the pinned self-claim")

    offered = fetch_json(f"{base}/v1/anchors?since_height={peer.last_sync_height}")
    if not isinstance(offered, list):
        raise SyncFailed(f"{base}/v1/anchors did not return a list")
    revocations = fetch_json(f"{base}/v1/revocations") or []

    ledger = directory.ledger(peer.peer_key_id)
    # only accepted receipts move last_sync_height, so a forged receipt with a
    # large height cannot make later legitimate ones look already seen
    accepted, rejected = [], 0
    floor = max(peer.last_sync_height, ledger.height)
    for item in sorted(offered, key=lambda r: r.get("height", 0) if isinstance(r, dict) and type(r.get("height")) is int else 0):
        problem = receipt_problem(item, origin=peer.peer_key_id)
        if problem is None and item["height"] <= floor:
            problem = "height does not advance"
        if problem is None and bytes.fromhex(item["root_hex"]) in ledger.issued:
            problem = "root already imported"
        if problem is not None:
            rejected += 1
            continue
        accepted.append(receipt_from_json(item))
        floor = item["height"]

    claims: list[Claim] = []
    for receipt in accepted:
        for leaf in receipt.leaves:
            cid = ContentHash("sha2-256", leaf)
            if cid in directory.advocate.store:
                continue
            data = fetch_json(f"{base}/v1/claims/{urllib.parse.quote(str(cid))}")
            if data is None:
                continue
            try:
                claim = Claim.from_json(data)
            except MalformedClaim:
                continue
            if claim.id == cid and claim.computed_id() == cid:
                claims.append(claim)

    store = directory.advocate.store
    for claim in claims:
        try:
            store.store_claim(claim, origin=peer.peer_key_id, anchor=False)
        except IdMismatch:
            continue
    for receipt in accepted:
        try:
            ledger.import_receipt(receipt)
        except (AlreadyIssued, ValueError):
            pass
    for item in revocations if isinstance(revocations, list) else []:
        if isinstance(item, dict) and is_hex32(item.get("hash_hex")):
            try:
                parse_ts(item.get("revoked_at"))
            except (ValueError, TypeError):
                continue
            ledger.revoke(bytes.fromhex(item["hash_hex"]), item["revoked_at"])

    with directory._lock:
        peer.last_sync_height = max([peer.last_sync_height] + [r.height for r in accepted])
        directory._save()
    return SyncReport(base, len(accepted), rejected, peer.last_sync_height)
