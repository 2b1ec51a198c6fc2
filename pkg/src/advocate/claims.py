"""Claim envelope: canonical JSON, content ids and Ed25519 proofs.

A claim's ``id`` is the SHA-256 of the canonical bytes of its body, where
the body is every field except ``id`` and ``proof``. The proof signs the
same bytes, so a verifier needs nothing but the claim and a public key.
"""

from __future__ import annotations

import binascii
import json
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Mapping

from .cas import ContentHash
from .clock import Clock, SystemClock, format_ts, parse_ts
from .errors import MalformedClaim, MissingSelfRef, NonCanonicalNumber, NonCanonicalValue
from .keys import KeyPair, b64, unb64, verify

JSONValue = Any

SELF_CLAIM = "self-claim"
KEY_REGISTRATION = "key-registration"
EVIDENCE = "evidence"
AGGREGATE = "aggregate"
DEPLOYMENT = "deployment"
COLLECTOR_ERROR = "collector-error"

SCHEME = "ed25519"

_CLAIM_FIELDS = {"id", "kind", "issuer_key_id", "subject", "issued_at", "payload", "proof"}
_OPTIONAL_FIELDS = {"self_ref", "prev_ref"}
_PROOF_FIELDS = {"scheme", "created", "verification_key_id", "value_b64"}


def _check(value: JSONValue, path: str) -> None:
    if value is None or isinstance(value, (bool, int, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError:
                raise NonCanonicalValue(f"{path}: string is not valid unicode") from None
        return
    if isinstance(value, float):
        raise NonCanonicalNumber(f"{path}: float {value!r}; carry decimals as strings")
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    if isinstance(value, Mapping):
        for key, item in value.items():
            if not isinstance(key, str):
                raise NonCanonicalValue(f"{path}: object key {key!r} is not a string")
            _check(key, path)
            _check(item, f"{path}.{key}")
        return
    raise NonCanonicalValue(f"{path}: {type(value).__name__} is not a JSON value")


def canonical_bytes(value: JSONValue) -> bytes:
    """Deterministic UTF-8 JSON: sorted keys, no whitespace, no floats."""
    _check(value, "$")
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


@dataclass(frozen=True)
class Signature:
    scheme: str
    created: str
    verification_key_id: str
    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != 64:
            raise ValueError("signature value must be 64 bytes")

    def to_json(self) -> dict[str, str]:
        return {
            "scheme": self.scheme,
            "created": self.created,
            "verification_key_id": self.verification_key_id,
            "value_b64": b64(self.value),
        }

    @classmethod
    def from_json(cls, data: Any) -> Signature:
        if not isinstance(data, dict) or set(data) != _PROOF_FIELDS:
            raise MalformedClaim("proof must have exactly scheme, created, verification_key_id, value_b64")
        if not all(isinstance(v, str) for v in data.values()):
            raise MalformedClaim("proof fields must be strings")
        try:
            return cls(data["scheme"], data["created"], data["verification_key_id"], unb64(data["value_b64"]))
        except (ValueError, binascii.Error) as exc:
            raise MalformedClaim(f"bad proof value: {exc}") from None


@dataclass(frozen=True)
class Claim:
    id: ContentHash
    kind: str
    issuer_key_id: str
    subject: str
    issued_at: str
    payload: JSONValue
    proof: Signature
    self_ref: ContentHash | None = None
    prev_ref: ContentHash | None = None

    def body(self) -> dict[str, JSONValue]:
        body: dict[str, JSONValue] = {
            "kind": self.kind,
            "issuer_key_id": self.issuer_key_id,
            "subject": self.subject,
            "issued_at": self.issued_at,
            "payload": self.payload,
        }
        if self.self_ref is not None:
            body["self_ref"] = str(self.self_ref)
        if self.prev_ref is not None:
            body["prev_ref"] = str(self.prev_ref)
        return body

    def body_bytes(self) -> bytes:
        return canonical_bytes(self.body())

    def computed_id(self) -> ContentHash:
        return ContentHash.of(self.body_bytes())

    def to_json(self) -> dict[str, JSONValue]:
        data = self.body()
        data["id"] = str(self.id)
        data["proof"] = self.proof.to_json()
        return data

    def to_bytes(self) -> bytes:
        return canonical_bytes(self.to_json())

    @property
    def issued(self) -> datetime:
        return parse_ts(self.issued_at)

    @classmethod
    def from_json(cls, data: Any) -> Claim:
        if not isinstance(data, dict):
            raise MalformedClaim("claim must be a JSON object")
        keys = set(data)
        if not _CLAIM_FIELDS <= keys or keys - _CLAIM_FIELDS - _OPTIONAL_FIELDS:
            raise MalformedClaim(f"unexpected claim fields {sorted(keys ^ _CLAIM_FIELDS)}")
        for name in ("kind", "issuer_key_id", "subject", "issued_at"):
            if not isinstance(data[name], str):
                raise MalformedClaim(f"{name} must be a string")
        try:
            parse_ts(data["issued_at"])
            refs = {name: ContentHash.parse(data[name]) for name in _OPTIONAL_FIELDS if name in data}
            claim_id = ContentHash.parse(data["id"])
            _check(data["payload"], "$.payload")
        except (ValueError, TypeError) as exc:
            raise MalformedClaim(str(exc)) from None
        return cls(
            id=claim_id,
            kind=data["kind"],
            issuer_key_id=data["issuer_key_id"],
            subject=data["subject"],
            issued_at=data["issued_at"],
            payload=data["payload"],
            proof=Signature.from_json(data["proof"]),
            **refs,
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> Claim:
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedClaim(f"claim is not JSON: {exc}") from None
        return cls.from_json(data)


def make_claim(
    kind: str,
    subject: str,
    payload: JSONValue,
    self_ref: ContentHash | None,
    prev_ref: ContentHash | None,
    key: KeyPair,
    *,
    clock: Clock | None = None,
    issued_at: datetime | str | None = None,
    issuer_key_id: str | None = None,
) -> Claim:
    """Build and sign a claim; nothing is persisted.

    ``issuer_key_id`` defaults to the signing key. It differs only for
    claims countersigned by the instance on behalf of a publisher.
    """
    if kind == SELF_CLAIM:
        if self_ref is not None:
            raise MalformedClaim("a self-claim cannot reference another self-claim")
    elif self_ref is None:
        raise MissingSelfRef(f"{kind!r} claims must reference the self-claim")
    if issued_at is None:
        issued_at = (clock or SystemClock()).now()
    stamp = issued_at if isinstance(issued_at, str) else format_ts(issued_at)
    unsigned = Claim(
        id=ContentHash.of(b""),
        kind=kind,
        issuer_key_id=issuer_key_id or key.key_id,
        subject=subject,
        issued_at=stamp,
        payload=payload,
        proof=Signature(SCHEME, stamp, key.key_id, bytes(64)),
        self_ref=self_ref,
        prev_ref=prev_ref,
    )
    message = unsigned.body_bytes()
    proof = Signature(SCHEME, stamp, key.key_id, key.sign(message))
    return Claim(
        id=ContentHash.of(message),
        kind=kind,
        issuer_key_id=unsigned.issuer_key_id,
        subject=subject,
        issued_at=stamp,
        payload=payload,
        proof=proof,
        self_ref=self_ref,
        prev_ref=prev_ref,
    )


def verify_signature(claim: Claim, public_key: bytes) -> bool:
    """True iff the proof is a valid Ed25519 signature over the claim body."""
    if claim.proof.scheme != SCHEME or len(claim.proof.value) != 64:
        return False
    try:
        message = claim.body_bytes()
    except (NonCanonicalNumber, NonCanonicalValue):
        return False
    return verify(public_key, message, claim.proof.value)


def submission_bytes(kind: str, subject: str, payload: JSONValue) -> bytes:
    """Bytes a publisher signs when submitting a claim through the API."""
    return canonical_bytes({"kind": kind, "subject": subject, "payload": payload})
