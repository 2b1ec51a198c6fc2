"""Merkle batching and the append-only anchor ledger.

The ledger mimics a DocumentStore contract: batch roots are *issued*, and
either a root or a single claim digest can be *revoked*. It is persisted as
JSON lines, one event per line, and is only ever appended to.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Literal, Protocol, Sequence

from .cas import ContentHash, is_hex32
from .clock import format_ts, parse_ts
from .errors import AlreadyIssued, AnchorUnavailable, EmptyBatch, IndexOutOfRange

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

Side = Literal["left", "right"]


def leaf_hash(data: bytes) -> bytes:
    return hashlib.sha256(LEAF_PREFIX + data).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def _split(n: int) -> int:
    # largest power of two strictly below n
    return 1 << ((n - 1).bit_length() - 1)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """RFC 6962 tree hash, built incrementally with a stack of perfect subtrees."""
    if not leaves:
        raise EmptyBatch("cannot build a tree over zero leaves")
    stack: list[tuple[int, bytes]] = []
    for leaf in leaves:
        size, h = 1, leaf_hash(leaf)
        while stack and stack[-1][0] == size:
            left_size, left = stack.pop()
            size, h = left_size + size, node_hash(left, h)
        stack.append((size, h))
    _, root = stack.pop()
    while stack:
        _, left = stack.pop()
        root = node_hash(left, root)
    return root


@dataclass(frozen=True, slots=True)
class MerkleProof:
    leaf_index: int
    path: tuple[tuple[Side, bytes], ...]
    root: bytes

    def to_json(self) -> dict:
        return {
            "leaf_index": self.leaf_index,
            "path": [[side, h.hex()] for side, h in self.path],
            "root_hex": self.root.hex(),
        }

    @classmethod
    def from_json(cls, data: dict) -> MerkleProof:
        index = data["leaf_index"]
        if type(index) is not int or index < 0:
            raise ValueError("leaf_index must be a non-negative integer")
        path = []
        for step in data["path"]:
            side, h = step
            if side not in ("left", "right") or not is_hex32(h):
                raise ValueError(f"bad path step {step!r}")
            path.append((side, bytes.fromhex(h)))
        if not is_hex32(data["root_hex"]):
            raise ValueError("bad root")
        return cls(index, tuple(path), bytes.fromhex(data["root_hex"]))


def _subtree(hashes: list[bytes]) -> tuple[bytes, list[list[tuple[Side, bytes]]]]:
    if len(hashes) == 1:
        return hashes[0], [[]]
    k = _split(len(hashes))
    left_root, left_paths = _subtree(hashes[:k])
    right_root, right_paths = _subtree(hashes[k:])
    for p in left_paths:
        p.append(("right", right_root))
    for p in right_paths:
        p.append(("left", left_root))
    return node_hash(left_root, right_root), left_paths + right_paths


def merkle_proofs(leaves: Sequence[bytes]) -> list[MerkleProof]:
    """Audit paths for every leaf at once, in O(n log n)."""
    if not leaves:
        raise EmptyBatch("cannot build a tree over zero leaves")
    root, paths = _subtree([leaf_hash(x) for x in leaves])
    return [MerkleProof(i, tuple(p), root) for i, p in enumerate(paths)]


def merkle_proof(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not leaves:
        raise EmptyBatch("cannot build a tree over zero leaves")
    if not 0 <= index < len(leaves):
        raise IndexOutOfRange(f"leaf {index} out of range for {len(leaves)} leaves")
    return merkle_proofs(leaves)[index]


def verify_inclusion(leaf: bytes, proof: MerkleProof) -> bool:
    h = leaf_hash(leaf)
    for side, sibling in proof.path:
        if side == "left":
            h = node_hash(sibling, h)
        elif side == "right":
            h = node_hash(h, sibling)
        else:
            return False
    return h == proof.root


# --------------------------------------------------------------------------
# ledger


@dataclass(frozen=True, slots=True)
class AnchorReceipt:
    root: bytes
    height: int
    anchored_at: str
    leaf_count: int
    origin: str
    leaves: tuple[bytes, ...] = ()

    def to_json(self) -> dict:
        return {
            "root_hex": self.root.hex(),
            "height": self.height,
            "anchored_at": self.anchored_at,
            "leaf_count": self.leaf_count,
            "origin": self.origin,
            "leaves_hex": [leaf.hex() for leaf in self.leaves],
        }


@dataclass(frozen=True, slots=True)
class RevocationRecord:
    hash: bytes
    revoked_at: str


@dataclass(frozen=True, slots=True)
class AnchorStatus:
    issued: bool
    revoked: bool


def receipt_problem(data: object, *, origin: str | None = None) -> str | None:
    """Why a receipt dict is not well formed, or None if it is."""
    if not isinstance(data, dict):
        return "receipt is not an object"
    expected = {"root_hex", "height", "anchored_at", "leaf_count", "origin", "leaves_hex"}
    if set(data) - {"op"} != expected:
        return "unexpected receipt fields"
    if not is_hex32(data["root_hex"]):
        return "root must be 32 bytes of lowercase hex"
    count, height = data["leaf_count"], data["height"]
    if type(count) is not int or count < 1:
        return "leaf_count must be a positive integer"
    if type(height) is not int or height < 1:
        return "height must be a positive integer"
    leaves = data["leaves_hex"]
    if not isinstance(leaves, list) or len(leaves) != count or not all(map(is_hex32, leaves)):
        return "leaves_hex must hold leaf_count 32-byte hex digests"
    if not isinstance(data["origin"], str) or (origin is not None and data["origin"] != origin):
        return "unexpected origin"
    try:
        parse_ts(data["anchored_at"])
    except (ValueError, TypeError):
        return "bad anchored_at"
    if merkle_root([bytes.fromhex(x) for x in leaves]).hex() != data["root_hex"]:
        return "root does not match leaves"
    return None


def receipt_from_json(data: dict) -> AnchorReceipt:
    return AnchorReceipt(
        root=bytes.fromhex(data["root_hex"]),
        height=data["height"],
        anchored_at=data["anchored_at"],
        leaf_count=data["leaf_count"],
        origin=data["origin"],
        leaves=tuple(bytes.fromhex(x) for x in data["leaves_hex"]),
    )


def _line(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("ascii") + b"\n"


class Ledger:
    """JSON-lines ledger of issue/revoke events.

    ``sequential`` ledgers (the local one) require heights to equal the
    ordinal of the issue event; imported peer namespaces only require them
    to increase. Malformed lines are skipped and remembered in ``damaged``.
    """

    def __init__(self, path: str | os.PathLike[str], *, sequential: bool = True) -> None:
        self.path = Path(path)
        self.sequential = sequential
        self._lock = threading.RLock()
        self._offset = 0
        self.issued: dict[bytes, AnchorReceipt] = {}
        self.revoked: dict[bytes, RevocationRecord] = {}
        self.height = 0
        self.damaged: list[int] = []
        self._line_no = 0
        self._line_digest: dict[bytes, bytes] = {}
        self._batch_of: dict[bytes, bytes] = {}
        self._order: list[bytes] = []
        self.refresh()

    # -- reading ----------------------------------------------------------

    def refresh(self) -> None:
        """Pick up lines appended since the last read (possibly by another process)."""
        with self._lock:
            try:
                with open(self.path, "rb") as fh:
                    fh.seek(self._offset)
                    chunk = fh.read()
            except FileNotFoundError:
                return
            end = chunk.rfind(b"\n")
            if end < 0:
                return
            for raw in chunk[: end + 1].splitlines(keepends=True):
                self._line_no += 1
                self._apply(raw)
            self._offset += end + 1

    def _apply(self, raw: bytes) -> None:
        try:
            record = json.loads(raw.decode("utf-8"))
            op = record["op"]
            if op == "issue":
                if receipt_problem(record) is not None:
                    raise ValueError("bad receipt")
                receipt = receipt_from_json(record)
                expected = self.height + 1
                if (self.sequential and receipt.height != expected) or receipt.height <= self.height:
                    raise ValueError("height out of order")
                if receipt.root in self.issued:
                    raise ValueError("duplicate root")
                self._add_receipt(receipt, hashlib.sha256(raw).digest())
            elif op == "revoke":
                if set(record) != {"op", "hash_hex", "revoked_at"} or not is_hex32(record["hash_hex"]):
                    raise ValueError("bad revocation")
                parse_ts(record["revoked_at"])
                h = bytes.fromhex(record["hash_hex"])
                self.revoked.setdefault(h, RevocationRecord(h, record["revoked_at"]))
            else:
                raise ValueError("unknown op")
        except (ValueError, KeyError, TypeError, UnicodeDecodeError, AttributeError):
            self.damaged.append(self._line_no)

    def _add_receipt(self, receipt: AnchorReceipt, digest: bytes) -> None:
        self.issued[receipt.root] = receipt
        self._line_digest[receipt.root] = digest
        self._order.append(receipt.root)
        self.height = receipt.height
        for leaf in receipt.leaves:
            self._batch_of.setdefault(leaf, receipt.root)

    def receipt_digest(self, root: bytes) -> bytes | None:
        """SHA-256 of the exact ledger line that issued ``root``."""
        self.refresh()
        return self._line_digest.get(root)

    def batch_of(self, leaf: bytes) -> AnchorReceipt | None:
        self.refresh()
        root = self._batch_of.get(leaf)
        return self.issued.get(root) if root is not None else None

    def is_anchored(self, leaf: bytes) -> bool:
        self.refresh()
        return leaf in self._batch_of

    def receipts(self, since_height: int = 0) -> list[AnchorReceipt]:
        self.refresh()
        return [self.issued[r] for r in self._order if self.issued[r].height > since_height]

    def revocations(self) -> list[RevocationRecord]:
        self.refresh()
        return list(self.revoked.values())

    def status(self, claim_digest: bytes, root: bytes) -> AnchorStatus:
        self.refresh()
        return AnchorStatus(
            issued=root in self.issued,
            revoked=claim_digest in self.revoked or root in self.revoked,
        )

    # -- writing ----------------------------------------------------------

    def _append(self, build: Callable[[], dict | None]) -> None:
        """Append the record ``build`` returns while holding the file lock.

        ``build`` runs after the ledger has caught up with every line written
        so far, by this or any other process, so its checks see current state.
        """
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
                try:
                    self.refresh()
                    record = build()
                    if record is None:
                        return
                    fh.write(_line(record))
                    fh.flush()
                    os.fsync(fh.fileno())
                finally:
                    fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        except OSError as exc:
            raise AnchorUnavailable(f"cannot append to ledger: {exc}") from exc
        self.refresh()

    def issue(
        self, root: bytes, origin: str, leaves: Sequence[bytes], when: datetime | str
    ) -> AnchorReceipt:
        if not leaves:
            raise EmptyBatch("a receipt needs at least one leaf")
        stamp = when if isinstance(when, str) else format_ts(when)

        def build() -> dict:
            if root in self.issued:
                raise AlreadyIssued(f"root {root.hex()} already issued")
            receipt = AnchorReceipt(root, self.height + 1, stamp, len(leaves), origin, tuple(leaves))
            return {"op": "issue", **receipt.to_json()}

        with self._lock:
            self._append(build)
            return self.issued[root]

    def import_receipt(self, receipt: AnchorReceipt) -> AnchorReceipt:
        """Append a receipt that was issued elsewhere, keeping its height."""

        def build() -> dict:
            if receipt.root in self.issued:
                raise AlreadyIssued(f"root {receipt.root.hex()} already imported")
            if receipt.height <= self.height:
                raise ValueError("receipt height does not advance the namespace")
            return {"op": "issue", **receipt.to_json()}

        with self._lock:
            self._append(build)
            return self.issued[receipt.root]

    def revoke(self, h: bytes, when: datetime | str) -> RevocationRecord:
        """Revoke a batch root or a claim digest. Repeat calls are no-ops."""
        if len(h) != 32:
            raise ValueError("revocation target must be 32 bytes")
        stamp = when if isinstance(when, str) else format_ts(when)

        def build() -> dict | None:
            if h in self.revoked:
                return None
            return {"op": "revoke", "hash_hex": h.hex(), "revoked_at": stamp}

        with self._lock:
            self._append(build)
            return self.revoked[h]


# --------------------------------------------------------------------------
# batching


class ProofSink(Protocol):
    def record_proofs(
        self, receipt: AnchorReceipt, proofs: Sequence[tuple[ContentHash, MerkleProof]], receipt_digest: bytes
    ) -> None: ...


def _no_fault(stage: str) -> None:
    return None


def flush_batch(
    pending: Iterable[ContentHash],
    origin: str,
    *,
    ledger: Ledger,
    sink: ProofSink,
    when: datetime | str,
    journal: str | os.PathLike[str] | None = None,
    fault: Callable[[str], None] = _no_fault,
) -> AnchorReceipt:
    """Commit ``pending`` claim ids under one Merkle root.

    The root is written to ``journal`` before it is issued and the journal is
    removed once every proof is persisted, so a crash in between leaves
    enough on disk for :func:`recover` to finish the job.
    """
    ids = list(pending)
    if not ids:
        raise EmptyBatch("nothing pending")
    leaves = [cid.digest for cid in ids]
    proofs = merkle_proofs(leaves)
    root = proofs[0].root
    if journal is not None:
        Path(journal).write_text(root.hex() + "\n", encoding="ascii")
    receipt = ledger.issue(root, origin, leaves, when)
    fault("after-issue")
    sink.record_proofs(receipt, list(zip(ids, proofs)), ledger.receipt_digest(root))
    if journal is not None:
        os.unlink(journal)
    return receipt


def recover(
    *, ledger: Ledger, sink: ProofSink, journal: str | os.PathLike[str], has_proof: Callable[[ContentHash], bool]
) -> AnchorReceipt | None:
    """Finish an interrupted flush by rebuilding proofs from the recorded leaves."""
    journal = Path(journal)
    if not journal.exists():
        return None
    root_hex = journal.read_text(encoding="ascii").strip()
    receipt = ledger.issued.get(bytes.fromhex(root_hex)) if is_hex32(root_hex) else None
    if receipt is not None:
        ids = [ContentHash("sha2-256", leaf) for leaf in receipt.leaves]
        proofs = merkle_proofs(list(receipt.leaves))
        missing = [(cid, p) for cid, p in zip(ids, proofs) if not has_proof(cid)]
        if missing:
            sink.record_proofs(receipt, missing, ledger.receipt_digest(receipt.root))
    journal.unlink()
    return receipt
