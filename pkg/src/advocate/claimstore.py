"""Claim persistence, the window index, and trail verification.

Full claim JSON goes into the content store; ``index.jsonl`` maps each
claim id to its blob and to the fields used for window queries, and holds
the Merkle proof recorded when the claim's batch was anchored.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Mapping, Sequence

from .anchor import AnchorReceipt, Ledger, MerkleProof, merkle_proof, merkle_proofs, verify_inclusion
from .cas import ContentHash, ContentStore, is_hex32
from .claims import SELF_CLAIM, Claim, submission_bytes, verify_signature
from .clock import parse_ts
from .errors import IdMismatch, IntegrityViolation, MalformedClaim, NotFound, StoreUnavailable
from .keys import unb64, verify

LOCAL = "local"

_CLAIM_KEYS = {"op", "id", "blob", "kind", "subject", "issuer_key_id", "issued_at", "origin", "anchor"}
_PROOF_KEYS = {"op", "id", "leaf_index", "path", "root_hex", "receipt_digest_hex"}


@dataclass(frozen=True, slots=True)
class IndexEntry:
    id: ContentHash
    blob: ContentHash
    kind: str
    subject: str
    issuer_key_id: str
    issued_at: str
    origin: str
    anchor: bool
    source: str | None = None

    def to_json(self) -> dict:
        record = {
            "op": "claim",
            "id": str(self.id),
            "blob": str(self.blob),
            "kind": self.kind,
            "subject": self.subject,
            "issuer_key_id": self.issuer_key_id,
            "issued_at": self.issued_at,
            "origin": self.origin,
            "anchor": self.anchor,
        }
        if self.source is not None:
            record["source"] = self.source
        return record

    @classmethod
    def from_json(cls, record: dict) -> IndexEntry:
        keys = set(record)
        if keys != _CLAIM_KEYS and keys != _CLAIM_KEYS | {"source"}:
            raise ValueError("unexpected index fields")
        strings = ("kind", "subject", "issuer_key_id", "issued_at", "origin")
        if not all(isinstance(record[k], str) for k in strings) or type(record["anchor"]) is not bool:
            raise ValueError("bad index field types")
        if "source" in record and not isinstance(record["source"], str):
            raise ValueError("bad source")
        parse_ts(record["issued_at"])
        return cls(
            id=ContentHash.parse(record["id"]),
            blob=ContentHash.parse(record["blob"]),
            kind=record["kind"],
            subject=record["subject"],
            issuer_key_id=record["issuer_key_id"],
            issued_at=record["issued_at"],
            origin=record["origin"],
            anchor=record["anchor"],
            source=record.get("source"),
        )


@dataclass(frozen=True, slots=True)
class StoredProof:
    proof: MerkleProof
    receipt_digest: bytes


def claim_source(claim: Claim) -> str | None:
    """The collector source a claim came from, if its payload names one."""
    payload = claim.payload
    if isinstance(payload, dict) and isinstance(payload.get("source_id"), str):
        return payload["source_id"]
    return None


class ClaimStore:
    """Claims in a :class:`ContentStore` plus an append-only JSON-lines index."""

    def __init__(self, cas: ContentStore, index_path: str | os.PathLike[str]) -> None:
        self.cas = cas
        self.index_path = Path(index_path)
        self._lock = threading.RLock()
        self._offset = 0
        self._entries: dict[ContentHash, IndexEntry] = {}
        self._order: list[ContentHash] = []
        self._proofs: dict[ContentHash, StoredProof] = {}
        self._by_kind: dict[str, list[ContentHash]] = {}
        self._by_source: dict[str, list[ContentHash]] = {}
        self.damaged: list[int] = []
        self._line_no = 0
        self.refresh()

    # -- index ------------------------------------------------------------

    def refresh(self) -> None:
        with self._lock:
            try:
                with open(self.index_path, "rb") as fh:
                    fh.seek(self._offset)
                    chunk = fh.read()
            except FileNotFoundError:
                return
            end = chunk.rfind(b"\n")
            if end < 0:
                return
            for raw in chunk[: end + 1].splitlines():
                self._line_no += 1
                try:
                    self._apply(json.loads(raw.decode("utf-8")))
                except (ValueError, KeyError, TypeError, UnicodeDecodeError, AttributeError):
                    self.damaged.append(self._line_no)
            self._offset += end + 1

    def _apply(self, record: dict) -> None:
        op = record["op"]
        if op == "claim":
            entry = IndexEntry.from_json(record)
            if entry.id in self._entries:
                return
            self._entries[entry.id] = entry
            self._order.append(entry.id)
            self._by_kind.setdefault(entry.kind, []).append(entry.id)
            if entry.source is not None:
                self._by_source.setdefault(entry.source, []).append(entry.id)
        elif op == "proof":
            if set(record) != _PROOF_KEYS or not is_hex32(record["receipt_digest_hex"]):
                raise ValueError("bad proof record")
            cid = ContentHash.parse(record["id"])
            proof = MerkleProof.from_json(record)
            self._proofs.setdefault(cid, StoredProof(proof, bytes.fromhex(record["receipt_digest_hex"])))
        else:
            raise ValueError(f"unknown op {op!r}")

    def _append(self, records: Sequence[dict]) -> None:
        if not records:
            return
        data = b"".join(
            json.dumps(r, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"
            for r in records
        )
        try:
            self.index_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.index_path, "ab") as fh:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
                try:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                finally:
                    fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        except OSError as exc:
            raise StoreUnavailable(f"cannot append to index: {exc}") from exc
        self.refresh()

    # -- claims -----------------------------------------------------------

    def store_claim(
        self, claim: Claim, *, origin: str = LOCAL, anchor: bool = False
    ) -> ContentHash:
        """Persist a claim and index it. Storing the same claim again is a no-op."""
        if claim.computed_id() != claim.id:
            raise IdMismatch(f"claim id {claim.id} does not match its body")
        with self._lock:
            self.refresh()
            if claim.id in self._entries:
                return claim.id
            blob = self.cas.put(claim.to_bytes())
            entry = IndexEntry(
                id=claim.id,
                blob=blob,
                kind=claim.kind,
                subject=claim.subject,
                issuer_key_id=claim.issuer_key_id,
                issued_at=claim.issued_at,
                origin=origin,
                anchor=anchor,
                source=claim_source(claim),
            )
            self._append([entry.to_json()])
        return claim.id

    def load_claim(self, claim_id: ContentHash) -> Claim:
        entry = self.entry(claim_id)
        if entry is None:
            raise NotFound(f"claim {claim_id} is not indexed")
        return Claim.from_bytes(self.cas.get(entry.blob))

    def entry(self, claim_id: ContentHash) -> IndexEntry | None:
        self.refresh()
        return self._entries.get(claim_id)

    def __contains__(self, claim_id: ContentHash) -> bool:
        return self.entry(claim_id) is not None

    def __len__(self) -> int:
        self.refresh()
        return len(self._entries)

    def entries(
        self,
        *,
        kind: str | None = None,
        subject: str | None = None,
        source: str | None = None,
        origin: str | None = None,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list[IndexEntry]:
        """Index entries in insertion order; ``[start, end)`` bounds issued_at."""
        self.refresh()
        if kind is not None:
            ids = self._by_kind.get(kind, [])
        elif source is not None:
            ids = self._by_source.get(source, [])
        else:
            ids = self._order
        out = []
        for cid in ids:
            e = self._entries[cid]
            if (kind is not None and e.kind != kind) or (source is not None and e.source != source):
                continue
            if (subject is not None and e.subject != subject) or (origin is not None and e.origin != origin):
                continue
            if start is not None or end is not None:
                t = parse_ts(e.issued_at)
                if (start is not None and t < start) or (end is not None and t >= end):
                    continue
            out.append(e)
        return out

    def claims(self, **filters) -> list[Claim]:
        return [self.load_claim(e.id) for e in self.entries(**filters)]

    def pending(self, ledger: Ledger) -> list[ContentHash]:
        """Local anchor-enabled claims not yet covered by any issued batch."""
        return [
            e.id
            for e in self.entries(origin=LOCAL)
            if e.anchor and not ledger.is_anchored(e.id.digest)
        ]

    def find_in_cas(self, claim_id: ContentHash) -> Claim | None:
        """Scan the content store for a claim whose id matches; slow path."""
        for address in self.cas.addresses():
            try:
                claim = Claim.from_bytes(self.cas.get(address))
            except (MalformedClaim, IntegrityViolation, NotFound):
                continue
            if claim.id == claim_id:
                return claim
        return None

    # -- proofs -----------------------------------------------------------

    def proof(self, claim_id: ContentHash) -> StoredProof | None:
        self.refresh()
        return self._proofs.get(claim_id)

    def has_proof(self, claim_id: ContentHash) -> bool:
        return self.proof(claim_id) is not None

    def record_proofs(
        self,
        receipt: AnchorReceipt,
        proofs: Sequence[tuple[ContentHash, MerkleProof]],
        receipt_digest: bytes,
    ) -> None:
        records = [
            {"op": "proof", "id": str(cid), **p.to_json(), "receipt_digest_hex": receipt_digest.hex()}
            for cid, p in proofs
        ]
        with self._lock:
            self._append(records)


def rebuild_index(
    cas: ContentStore,
    index_path: str | os.PathLike[str],
    *,
    deployment_key_id: str,
    ledger: Ledger | None = None,
) -> ClaimStore:
    """Recreate a lost index by scanning the content store.

    Claims rooted in the self-claim issued by ``deployment_key_id`` are local;
    claims rooted in another instance's self-claim are attributed to that
    instance's key id. Anything else in the store is left out. Local proofs
    are recomputed from ``ledger`` batches when one is given.
    """
    index_path = Path(index_path)
    if index_path.exists():
        raise FileExistsError(f"{index_path} exists; move it aside before rebuilding")
    found: list[Claim] = []
    for address in cas.addresses():
        try:
            found.append(Claim.from_bytes(cas.get(address)))
        except (MalformedClaim, IntegrityViolation, NotFound):
            continue
    roots = {c.id: c.issuer_key_id for c in found if c.kind == SELF_CLAIM and c.computed_id() == c.id}
    store = ClaimStore(cas, index_path)
    found.sort(key=lambda c: (c.kind != SELF_CLAIM, parse_ts(c.issued_at), str(c.id)))
    for claim in found:
        root = claim.id if claim.kind == SELF_CLAIM else claim.self_ref
        if root not in roots or claim.computed_id() != claim.id:
            continue
        origin = LOCAL if roots[root] == deployment_key_id else roots[root]
        store.store_claim(claim, origin=origin, anchor=origin == LOCAL)
    if ledger is not None:
        for receipt in ledger.receipts():
            ids = [ContentHash("sha2-256", leaf) for leaf in receipt.leaves]
            wanted = [(i, cid) for i, cid in enumerate(ids) if (e := store.entry(cid)) and e.origin == LOCAL]
            if wanted:
                every = merkle_proofs(list(receipt.leaves))
                proofs = [(cid, every[i]) for i, cid in wanted]
                store.record_proofs(receipt, proofs, ledger.receipt_digest(receipt.root))
    return store


# --------------------------------------------------------------------------
# verification


@dataclass
class Namespace:
    """Everything needed to judge claims issued by one instance.

    The local instance keeps Merkle proofs in the index; peer namespaces
    recompute them from the imported batch membership.
    """

    origin: str
    self_claim_id: ContentHash | None
    deployment_key_id: str | None
    deployment_public_key: bytes | None
    ledger: Ledger
    publishers: Mapping[str, bytes] = field(default_factory=dict)
    stored_proofs: bool = True

    def public_key(self, key_id: str) -> bytes | None:
        if key_id == self.deployment_key_id:
            return self.deployment_public_key
        return self.publishers.get(key_id)


@dataclass(frozen=True)
class VerificationReport:
    claim_id: ContentHash
    signature_valid: bool
    issuer_known: bool
    cas_intact: bool
    self_linked: bool
    anchored: bool
    revoked: bool

    @property
    def overall(self) -> bool:
        return (
            self.signature_valid
            and self.issuer_known
            and self.cas_intact
            and self.self_linked
            and self.anchored
            and not self.revoked
        )

    def to_json(self) -> dict:
        data = asdict(self)
        data["claim_id"] = str(self.claim_id)
        data["overall"] = self.overall
        return data


def _signature_ok(claim: Claim, ns: Namespace) -> bool:
    key = ns.public_key(claim.proof.verification_key_id)
    if key is None or not verify_signature(claim, key):
        return False
    if claim.issuer_key_id == claim.proof.verification_key_id:
        return True
    # countersigned on behalf of a publisher: the instance signs the claim,
    # the publisher's own signature over the submission travels in the payload
    if claim.proof.verification_key_id != ns.deployment_key_id:
        return False
    publisher_key = ns.publishers.get(claim.issuer_key_id)
    payload = claim.payload
    if publisher_key is None or not isinstance(payload, dict):
        return False
    try:
        signature = unb64(payload["publisher_signature_b64"])
        message = submission_bytes(claim.kind, claim.subject, payload["content"])
    except (KeyError, ValueError, TypeError):
        return False
    return verify(publisher_key, message, signature)


def _entry_matches(entry: IndexEntry, claim: Claim, ns: Namespace) -> bool:
    return (
        entry.kind == claim.kind
        and entry.subject == claim.subject
        and entry.issuer_key_id == claim.issuer_key_id
        and entry.issued_at == claim.issued_at
        and entry.source == claim_source(claim)
        and entry.origin == ns.origin
    )


def _anchored(claim_id: ContentHash, store: ClaimStore, ns: Namespace) -> tuple[bool, AnchorReceipt | None]:
    ledger = ns.ledger
    receipt = ledger.batch_of(claim_id.digest)
    if receipt is None:
        return False, None
    if ledger.damaged:
        return False, receipt
    position = receipt.leaves.index(claim_id.digest)
    if ns.stored_proofs:
        stored = store.proof(claim_id)
        if stored is None or stored.receipt_digest != ledger.receipt_digest(receipt.root):
            return False, receipt
        proof = stored.proof
        if proof.leaf_index != position:
            return False, receipt
    else:
        proof = merkle_proof(list(receipt.leaves), position)
    return proof.root == receipt.root and verify_inclusion(claim_id.digest, proof), receipt


def verify_trail(
    claim_id: ContentHash,
    store: ClaimStore,
    namespaces: Mapping[str, Namespace],
) -> VerificationReport:
    """Check one claim end to end.

    Failures are reported field by field; :class:`NotFound` is raised only
    when the claim is neither indexed nor present in the content store.
    """
    entry = store.entry(claim_id)
    claim: Claim | None = None
    blob_ok = entry is not None
    if entry is not None:
        try:
            claim = Claim.from_bytes(store.cas.get(entry.blob))
        except (IntegrityViolation, NotFound, MalformedClaim):
            blob_ok = False
    else:
        claim = store.find_in_cas(claim_id)
        if claim is None:
            raise NotFound(f"claim {claim_id} is unknown")

    ns: Namespace | None = None
    if entry is not None:
        ns = namespaces.get(entry.origin)
    if ns is None and claim is not None:
        root_ref = claim.id if claim.kind == SELF_CLAIM else claim.self_ref
        ns = next((n for n in namespaces.values() if n.self_claim_id == root_ref), None)
    if ns is None:
        ns = namespaces[LOCAL]

    anchored, receipt = _anchored(claim_id, store, ns)
    status = ns.ledger.status(claim_id.digest, receipt.root if receipt else b"")

    if claim is None:
        return VerificationReport(claim_id, False, False, False, False, anchored, status.revoked)

    cas_intact = (
        blob_ok
        and claim.computed_id() == claim_id
        and claim.id == claim_id
        and entry is not None
        and _entry_matches(entry, claim, ns)
    )
    if claim.kind == SELF_CLAIM:
        issuer_known = claim.issuer_key_id == ns.deployment_key_id
        self_linked = claim.self_ref is None and claim_id == ns.self_claim_id
    else:
        issuer_known = claim.issuer_key_id == ns.deployment_key_id or claim.issuer_key_id in ns.publishers
        self_linked = claim.self_ref is not None and claim.self_ref == ns.self_claim_id
    return VerificationReport(
        claim_id=claim_id,
        signature_valid=claim.computed_id() == claim_id and _signature_ok(claim, ns),
        issuer_known=issuer_known,
        cas_intact=cas_intact,
        self_linked=self_linked,
        anchored=anchored,
        revoked=status.revoked,
    )
