"""Ed25519 key material, key ids and on-disk key files."""

from __future__ import annotations

import base64
import hashlib
import json
import os
import secrets
from dataclasses import dataclass
from pathlib import Path

import base58
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import InvalidSeed

_RAW = serialization.Encoding.Raw


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def derive_key_id(public_key: bytes) -> str:
    """``"z"`` + base58btc(SHA-256(public_key))."""
    return "z" + base58.b58encode(hashlib.sha256(public_key).digest()).decode("ascii")


@dataclass(frozen=True, slots=True)
class KeyPair:
    key_id: str
    public_key: bytes
    secret_key: bytes = b""

    def __repr__(self) -> str:
        return f"KeyPair(key_id={self.key_id!r})"

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key).sign(message)

    def public(self) -> KeyPair:
        return KeyPair(self.key_id, self.public_key)

    def to_json(self) -> dict[str, str]:
        return {
            "key_id": self.key_id,
            "public_key_b64": b64(self.public_key),
            "secret_key_b64": b64(self.secret_key),
        }

    @classmethod
    def from_json(cls, data: dict[str, str]) -> KeyPair:
        pair = generate_keypair(unb64(data["secret_key_b64"]))
        if pair.key_id != data["key_id"] or pair.public_key != unb64(data["public_key_b64"]):
            raise ValueError("key file is inconsistent with its secret key")
        return pair


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Build an Ed25519 pair from a 32-byte seed, or a random one."""
    if seed is None:
        seed = secrets.token_bytes(32)
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise InvalidSeed("seed must be exactly 32 bytes")
    private = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    public = private.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    return KeyPair(derive_key_id(public), public, bytes(seed))


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def save_keypair(pair: KeyPair, path: str | os.PathLike[str]) -> None:
    """Write a key file readable by its owner only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(pair.to_json(), fh, sort_keys=True)
        fh.write("\n")


def load_keypair(path: str | os.PathLike[str]) -> KeyPair:
    return KeyPair.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
