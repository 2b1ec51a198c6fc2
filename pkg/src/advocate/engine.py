"""An Advocate instance bound to one home directory.

Home layout::

    keys/deployment.json   deployment key (owner-only permissions)
    cas/                   content-addressed claim blobs
    index.jsonl            claim index and Merkle proofs
    ledger.jsonl           local anchor ledger
    anchor.journal         present only while a batch is being anchored
    peers.json             pinned peer identities
    peers/<key_id>/        imported peer ledger namespaces
    policies/              installed *.apl policies and their .sig files
    sources.state.json     collector cursors
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import os
import shutil
import signal
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable

from . import anchor, federation
from .aggregate import Policy, emit_aggregate_claim, evaluate, load_signed_policy, verify_policy
from .anchor import AnchorReceipt, Ledger, RevocationRecord
from .cas import ContentHash, ContentStore
from .claims import KEY_REGISTRATION, SELF_CLAIM, Claim, make_claim, submission_bytes
from .claimstore import LOCAL, ClaimStore, Namespace, VerificationReport, verify_trail
from .clock import Clock, SystemClock
from .collect import Collector, SourceHandle, SourceSpec
from .errors import (
    AdvocateError,
    AlreadyBootstrapped,
    EmptyBatch,
    MalformedClaim,
    NonCanonicalNumber,
    NonCanonicalValue,
    NotBootstrapped,
    PolicyRejected,
)
from .identity import InstanceConfig, KeyRecord, Registry, create_self_claim, find_self_claim, self_claim_id
from .keys import KeyPair, generate_keypair, load_keypair, save_keypair, verify

log = logging.getLogger(__name__)

FAULT_ENV = "ADVOCATE_FAULT"
RESERVED_PUBLISH_KINDS = frozenset({SELF_CLAIM, KEY_REGISTRATION, "aggregate", "collector-error"})


class PublishRejected(AdvocateError):
    """A publish request failed authentication (``status`` 403) or validation (400)."""

    def __init__(self, message: str, status: int) -> None:
        super().__init__(message)
        self.status = status


def env_fault(stage: str) -> None:
    """Kill this process at ``stage`` when ADVOCATE_FAULT names it; used by crash tests."""
    if os.environ.get(FAULT_ENV) == stage:
        os.kill(os.getpid(), signal.SIGKILL)


def is_initialized(home: str | os.PathLike[str]) -> bool:
    home = Path(home)
    return (home / "keys" / "deployment.json").is_file() and (home / "index.jsonl").is_file()


class Advocate:
    def __init__(
        self,
        home: str | os.PathLike[str],
        *,
        clock: Clock | None = None,
        anchor_granularity: str = "kind",
        anchor_kinds: Iterable[str] | None = None,
        fault: Callable[[str], None] = env_fault,
    ) -> None:
        self.home = Path(home)
        self.clock = clock or SystemClock()
        self.anchor_granularity = anchor_granularity
        self.anchor_kinds = None if anchor_kinds is None else frozenset(anchor_kinds)
        self.fault = fault
        self.cas = ContentStore(self.home / "cas")
        self.store = ClaimStore(self.cas, self.home / "index.jsonl")
        self.ledger = Ledger(self.home / "ledger.jsonl")
        key_file = self.key_path
        self.key: KeyPair | None = load_keypair(key_file) if key_file.exists() else None
        self.registry = Registry(self.store, self.key.public() if self.key else None)
        self.collector = Collector(self)
        self.peers = federation.PeerDirectory(self)
        self._write_lock = threading.RLock()
        if self.key is not None:
            self.recover()

    # -- paths and identity ------------------------------------------------

    @property
    def key_path(self) -> Path:
        return self.home / "keys" / "deployment.json"

    @property
    def journal_path(self) -> Path:
        return self.home / "anchor.journal"

    @property
    def policy_dir(self) -> Path:
        return self.home / "policies"

    @property
    def instance_key_id(self) -> str:
        return self.key.key_id if self.key else ""

    @property
    def self_claim_id(self) -> ContentHash | None:
        return self_claim_id(self.store)

    def self_claim(self) -> Claim:
        claim = find_self_claim(self.store)
        if claim is None:
            raise NotBootstrapped("no self-claim; run init first")
        return claim

    def _require_bootstrap(self) -> tuple[KeyPair, ContentHash]:
        sid = self.self_claim_id
        if self.key is None or sid is None:
            raise NotBootstrapped("no self-claim; run init first")
        return self.key, sid

    def bootstrap(self, config: InstanceConfig, *, seed: bytes | None = None) -> Claim:
        """Create the deployment key (unless present) and the anchored self-claim."""
        config.validate()
        with self._write_lock:
            if self.self_claim_id is not None:
                raise AlreadyBootstrapped(f"{self.home} already holds a self-claim")
            if self.key is None:
                key = generate_keypair(seed)
                save_keypair(key, self.key_path)
                self.key = key
                self.registry.deployment = key.public()
            return create_self_claim(config, self.key, store=self.store, ledger=self.ledger, clock=self.clock)

    def recover(self) -> AnchorReceipt | None:
        """Finish a flush that was interrupted between issuing and proof persistence."""
        with self._write_lock:
            return anchor.recover(
                ledger=self.ledger, sink=self.store, journal=self.journal_path, has_proof=self.store.has_proof
            )

    # -- emitting claims -------------------------------------------------

    def should_anchor(self, kind: str, spec: SourceSpec | None = None) -> bool:
        if kind == SELF_CLAIM:
            return True
        if self.anchor_granularity == "source" and spec is not None:
            return spec.anchor
        return self.anchor_kinds is None or kind in self.anchor_kinds

    def emit_claim(
        self,
        kind: str,
        subject: str,
        payload: Any,
        prev_ref: ContentHash | None,
        now: datetime,
        spec: SourceSpec | None = None,
    ) -> Claim:
        key, sid = self._require_bootstrap()
        claim = make_claim(kind, subject, payload, sid, prev_ref, key, issued_at=now)
        with self._write_lock:
            self.store.store_claim(claim, anchor=self.should_anchor(kind, spec))
        return claim

    def register_publisher(self, owner: str, public_key: bytes) -> KeyRecord:
        key, _ = self._require_bootstrap()
        return self.registry.register_publishing_key(
            owner, public_key, key, clock=self.clock, anchor=self.should_anchor(KEY_REGISTRATION)
        )

    def publish(self, key_id: str | None, body: Any) -> Claim:
        """Accept a claim submitted by a registered publisher.

        ``body`` is ``{kind, subject, payload, signature_b64}`` where the
        signature covers :func:`submission_bytes` of the first three fields.
        The resulting claim names the publisher as issuer and is countersigned
        by the deployment key.
        """
        key, sid = self._require_bootstrap()
        if not isinstance(body, dict) or set(body) != {"kind", "subject", "payload", "signature_b64"}:
            raise PublishRejected("body must be {kind, subject, payload, signature_b64}", 400)
        kind, subject, payload, sig_text = body["kind"], body["subject"], body["payload"], body["signature_b64"]
        if not isinstance(kind, str) or not kind or kind in RESERVED_PUBLISH_KINDS:
            raise PublishRejected(f"kind {kind!r} cannot be published", 400)
        if not isinstance(subject, str) or not isinstance(sig_text, str):
            raise PublishRejected("subject and signature_b64 must be strings", 400)
        try:
            message = submission_bytes(kind, subject, payload)
        except (NonCanonicalNumber, NonCanonicalValue) as exc:
            raise PublishRejected(str(exc), 400) from None
        record = self.registry.lookup_publisher(key_id) if key_id else None
        if record is None:
            raise PublishRejected(f"key {key_id!r} is not a registered publishing key", 403)
        try:
            signature = base64.b64decode(sig_text.encode("ascii"), validate=True)
        except (binascii.Error, ValueError, UnicodeEncodeError):
            raise PublishRejected("signature is not base64", 403) from None
        if not verify(record.public_key, message, signature):
            raise PublishRejected("signature does not verify", 403)
        content = {"content": payload, "publisher_signature_b64": sig_text}
        claim = make_claim(kind, subject, content, sid, None, key, clock=self.clock, issuer_key_id=record.key_id)
        with self._write_lock:
            self.store.store_claim(claim, anchor=self.should_anchor(kind))
        return claim

    # -- anchoring ---------------------------------------------------------

    def pending(self) -> list[ContentHash]:
        return self.store.pending(self.ledger)

    def flush(self, now: datetime | None = None) -> AnchorReceipt:
        key, _ = self._require_bootstrap()
        with self._write_lock:
            return anchor.flush_batch(
                self.pending(),
                key.key_id,
                ledger=self.ledger,
                sink=self.store,
                when=now or self.clock.now(),
                journal=self.journal_path,
                fault=self.fault,
            )

    def flush_if_pending(self, now: datetime | None = None) -> AnchorReceipt | None:
        try:
            return self.flush(now)
        except EmptyBatch:
            return None

    def revoke(self, target: bytes | ContentHash, now: datetime | None = None) -> RevocationRecord:
        digest = target.digest if isinstance(target, ContentHash) else target
        with self._write_lock:
            return self.ledger.revoke(digest, now or self.clock.now())

    # -- verification ----------------------------------------------------

    def local_namespace(self) -> Namespace:
        return Namespace(
            origin=LOCAL,
            self_claim_id=self.self_claim_id,
            deployment_key_id=self.key.key_id if self.key else None,
            deployment_public_key=self.key.public_key if self.key else None,
            ledger=self.ledger,
            publishers=self.registry.public_keys(),
            stored_proofs=True,
        )

    def namespaces(self) -> dict[str, Namespace]:
        spaces = {LOCAL: self.local_namespace()}
        spaces.update(self.peers.namespaces())
        return spaces

    def verify(self, claim_id: ContentHash | str) -> VerificationReport:
        if isinstance(claim_id, str):
            claim_id = ContentHash.parse(claim_id)
        return verify_trail(claim_id, self.store, self.namespaces())

    # -- collection ------------------------------------------------------

    def add_source(self, spec: SourceSpec, now: datetime | None = None) -> SourceHandle:
        """Register a source, resuming its claim chain and cursor from disk."""
        heads = self.store.entries(source=spec.source_id, origin=LOCAL)
        cursor = self._saved_cursors().get(spec.source_id)
        return self.collector.register_source(
            spec, now or self.clock.now(), head=heads[-1].id if heads else None, cursor=cursor
        )

    def _saved_cursors(self) -> dict:
        path = self.home / "sources.state.json"
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, ValueError):
            return {}

    def run_cycle(self, now: datetime | None = None) -> list[Claim]:
        self._require_bootstrap()
        claims = self.collector.run_cycle(now or self.clock.now())
        if claims:
            self.collector.save_cursors(self.home / "sources.state.json")
        return claims

    def ingest(self, source_id: str, event: Any, now: datetime | None = None):
        self._require_bootstrap()
        return self.collector.ingest(source_id, event, now or self.clock.now())

    def admit(self, source_id: str, manifest: Any, now: datetime | None = None):
        self._require_bootstrap()
        return self.collector.admit(source_id, manifest, now or self.clock.now())

    # -- policies --------------------------------------------------------

    def policy_keys(self) -> dict[str, bytes]:
        """Keys allowed to sign policies: the deployment key and every publisher."""
        keys = dict(self.registry.public_keys())
        if self.key is not None:
            keys[self.key.key_id] = self.key.public_key
        return keys

    def install_policy(self, path: str | os.PathLike[str]) -> Policy:
        """Verify a policy's detached signature, then copy both files into the home."""
        path = Path(path)
        policy = load_signed_policy(path, self.policy_keys())
        self.policy_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(path, self.policy_dir / path.name)
        shutil.copyfile(path.with_name(path.name + ".sig"), self.policy_dir / (path.name + ".sig"))
        return policy

    def installed_policies(self) -> list[Policy]:
        policies = []
        for path in sorted(self.policy_dir.glob("*.apl")):
            try:
                policies.append(load_signed_policy(path, self.policy_keys()))
            except (PolicyRejected, AdvocateError, OSError) as exc:
                log.warning("skipping policy %s: %s", path.name, exc)
        return policies

    def aggregate(self, policy: Policy, window_end: datetime | None = None) -> Claim:
        """Evaluate a verified policy over the local claims and store the result."""
        key, sid = self._require_bootstrap()
        if not verify_policy(policy.source, policy.signature, self.policy_keys()):
            raise PolicyRejected(f"policy {policy.name} is not signed by a known key")
        window_end = window_end or self.clock.now()
        snapshot = [c for c in self._local_claims() if c.kind != SELF_CLAIM]
        result = evaluate(policy, snapshot, window_end)
        claim = emit_aggregate_claim(result, policy, key, sid, clock=self.clock)
        with self._write_lock:
            self.store.store_claim(claim, anchor=self.should_anchor(claim.kind))
        return claim

    def _local_claims(self) -> list[Claim]:
        out = []
        for entry in self.store.entries(origin=LOCAL):
            try:
                out.append(self.store.load_claim(entry.id))
            except (AdvocateError, MalformedClaim) as exc:
                log.warning("skipping unreadable claim %s: %s", entry.id, exc)
        return out
