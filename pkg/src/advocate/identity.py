"""Instance identity: the self-claim and the publishing-key registry."""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Mapping

from .anchor import Ledger, flush_batch
from .cas import ContentHash
from .claims import KEY_REGISTRATION, SELF_CLAIM, Claim, make_claim, verify_signature
from .claimstore import LOCAL, ClaimStore
from .clock import Clock, SystemClock
from .errors import (
    AlreadyBootstrapped,
    DuplicateKey,
    IntegrityViolation,
    InvalidConfig,
    MalformedClaim,
    NotBootstrapped,
    NotFound,
)
from .keys import KeyPair, b64, derive_key_id, unb64

_SEMVER = re.compile(r"^\d+\.\d+\.\d+(?:-[0-9A-Za-z.-]+)?(?:\+[0-9A-Za-z.-]+)?$")


@dataclass(frozen=True)
class InstanceConfig:
    instance_name: str
    advocate_version: str
    operator: str
    environment: Mapping[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.instance_name, str) or not self.instance_name.strip():
            raise InvalidConfig("instance_name must be a nonempty string")
        if not isinstance(self.operator, str) or not self.operator.strip():
            raise InvalidConfig("operator must be a nonempty string")
        if not isinstance(self.advocate_version, str) or not _SEMVER.match(self.advocate_version):
            raise InvalidConfig(f"advocate_version {self.advocate_version!r} is not semver")
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in self.environment.items()):
            raise InvalidConfig("environment must map strings to strings")

    def to_json(self) -> dict:
        return {
            "instance_name": self.instance_name,
            "advocate_version": self.advocate_version,
            "operator": self.operator,
            "environment": dict(self.environment),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> InstanceConfig:
        try:
            return cls(
                instance_name=data["instance_name"],
                advocate_version=data["advocate_version"],
                operator=data["operator"],
                environment=dict(data.get("environment", {})),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"instance config: missing {exc}") from None


@dataclass(frozen=True)
class KeyRecord:
    key_id: str
    owner: str
    public_key: bytes
    registered_at: str
    registration_claim_id: ContentHash


def find_self_claim(store: ClaimStore, origin: str = LOCAL) -> Claim | None:
    entries = store.entries(kind=SELF_CLAIM, origin=origin)
    if not entries:
        return None
    try:
        return store.load_claim(entries[0].id)
    except (NotFound, IntegrityViolation, MalformedClaim):
        return None


def self_claim_id(store: ClaimStore, origin: str = LOCAL) -> ContentHash | None:
    entries = store.entries(kind=SELF_CLAIM, origin=origin)
    return entries[0].id if entries else None


def create_self_claim(
    config: InstanceConfig,
    key: KeyPair,
    *,
    store: ClaimStore,
    ledger: Ledger,
    clock: Clock | None = None,
) -> Claim:
    """Issue, store and immediately anchor the instance's self-claim."""
    config.validate()
    if self_claim_id(store) is not None:
        raise AlreadyBootstrapped("this store already holds a self-claim")
    clock = clock or SystemClock()
    payload = {**config.to_json(), "key_id": key.key_id, "public_key_b64": b64(key.public_key)}
    claim = make_claim(SELF_CLAIM, config.instance_name, payload, None, None, key, clock=clock)
    store.store_claim(claim, anchor=True)
    flush_batch([claim.id], key.key_id, ledger=ledger, sink=store, when=clock.now())
    return claim


def self_claim_key(claim: Claim) -> KeyPair | None:
    """The public deployment key embedded in a self-claim, if consistent."""
    payload = claim.payload
    if not isinstance(payload, dict):
        return None
    try:
        public = unb64(payload["public_key_b64"])
    except (KeyError, ValueError, TypeError):
        return None
    if len(public) != 32 or derive_key_id(public) != payload.get("key_id") or claim.issuer_key_id != payload.get("key_id"):
        return None
    if not verify_signature(claim, public):
        return None
    return KeyPair(derive_key_id(public), public)


class Registry:
    """Publishing keys registered by one instance.

    Records are derived from key-registration claims in the store and only
    count when the claim is signed by the instance's deployment key.
    """

    def __init__(self, store: ClaimStore, deployment: KeyPair | None, origin: str = LOCAL) -> None:
        self.store = store
        self.deployment = deployment
        self.origin = origin
        self._lock = threading.Lock()
        self._seen = -1
        self._records: dict[str, KeyRecord] = {}

    def _rebuild(self) -> dict[str, KeyRecord]:
        size = len(self.store)
        if size == self._seen:
            return self._records
        records: dict[str, KeyRecord] = {}
        for entry in self.store.entries(kind=KEY_REGISTRATION, origin=self.origin):
            try:
                claim = self.store.load_claim(entry.id)
            except (NotFound, IntegrityViolation, MalformedClaim):
                continue
            record = self._record_from(claim)
            if record is not None and record.key_id not in records:
                records[record.key_id] = record
        self._records, self._seen = records, size
        return records

    def _record_from(self, claim: Claim) -> KeyRecord | None:
        if self.deployment is None or claim.issuer_key_id != self.deployment.key_id:
            return None
        if not verify_signature(claim, self.deployment.public_key):
            return None
        payload = claim.payload
        try:
            public = unb64(payload["public_key_b64"])
            owner = payload["owner"]
        except (KeyError, ValueError, TypeError):
            return None
        if len(public) != 32 or derive_key_id(public) != payload.get("key_id") or not isinstance(owner, str):
            return None
        return KeyRecord(payload["key_id"], owner, public, claim.issued_at, claim.id)

    def lookup_publisher(self, key_id: str) -> KeyRecord | None:
        with self._lock:
            return self._rebuild().get(key_id)

    def publishers(self) -> dict[str, KeyRecord]:
        with self._lock:
            return dict(self._rebuild())

    def public_keys(self) -> dict[str, bytes]:
        return {k: r.public_key for k, r in self.publishers().items()}

    def register_publishing_key(
        self,
        owner: str,
        public_key: bytes,
        deployment_key: KeyPair,
        *,
        clock: Clock | None = None,
        anchor: bool = True,
    ) -> KeyRecord:
        self_id = self_claim_id(self.store, self.origin)
        if self_id is None:
            raise NotBootstrapped("create the self-claim before registering publishers")
        if not isinstance(owner, str) or not owner.strip():
            raise InvalidConfig("owner must be a nonempty string")
        if len(public_key) != 32:
            raise ValueError("public key must be 32 bytes")
        key_id = derive_key_id(public_key)
        with self._lock:
            if key_id == deployment_key.key_id:
                raise DuplicateKey("the deployment key cannot be a publishing key")
            if key_id in self._rebuild():
                raise DuplicateKey(f"key {key_id} is already registered")
            payload = {"owner": owner, "key_id": key_id, "public_key_b64": b64(public_key)}
            claim = make_claim(KEY_REGISTRATION, key_id, payload, self_id, None, deployment_key, clock=clock)
            self.store.store_claim(claim, anchor=anchor)
            self._seen = -1
        return KeyRecord(key_id, owner, public_key, claim.issued_at, claim.id)
