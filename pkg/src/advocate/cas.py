"""Local content-addressable blob store.

Blobs are addressed by the SHA-256 of their exact bytes and laid out as
``<root>/<first-2-hex>/<full-hex>``. Reads re-hash the content, so on-disk
tampering surfaces as :class:`IntegrityViolation` instead of bad data.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import IntegrityViolation, NotFound, StoreUnavailable

ALGORITHM = "sha2-256"
_HEX = frozenset("0123456789abcdef")


@dataclass(frozen=True, slots=True)
class ContentHash:
    algorithm: str
    digest: bytes

    def __post_init__(self) -> None:
        if self.algorithm != ALGORITHM:
            raise ValueError(f"unsupported algorithm {self.algorithm!r}")
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise ValueError("digest must be exactly 32 bytes")

    @classmethod
    def of(cls, content: bytes) -> ContentHash:
        return cls(ALGORITHM, hashlib.sha256(content).digest())

    @classmethod
    def parse(cls, text: str) -> ContentHash:
        """Parse ``sha2-256:<64 lowercase hex>``; anything else is rejected."""
        if not isinstance(text, str):
            raise ValueError("content hash must be a string")
        algorithm, sep, hexdigest = text.partition(":")
        if not sep or len(hexdigest) != 64 or not _HEX.issuperset(hexdigest):
            raise ValueError(f"malformed content hash {text!r}")
        return cls(algorithm, bytes.fromhex(hexdigest))

    @classmethod
    def from_hex(cls, hexdigest: str) -> ContentHash:
        return cls.parse(f"{ALGORITHM}:{hexdigest}")

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.digest.hex()}"


def is_hex32(text: object) -> bool:
    return isinstance(text, str) and len(text) == 64 and _HEX.issuperset(text)


class ContentStore:
    """Append-only blob store rooted at a directory."""

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)

    def _path(self, address: ContentHash) -> Path:
        h = address.hex
        return self.root / h[:2] / h

    def put(self, content: bytes) -> ContentHash:
        address = ContentHash.of(content)
        path = self._path(address)
        if path.exists():
            return address
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(content)
                    fh.flush()
                    os.fsync(fh.fileno())
                # identical content converges: whichever rename lands last writes the same bytes
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise StoreUnavailable(f"cannot write blob {address}: {exc}") from exc
        return address

    def get(self, address: ContentHash) -> bytes:
        path = self._path(address)
        try:
            content = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no blob {address}") from None
        except OSError as exc:
            raise StoreUnavailable(f"cannot read blob {address}: {exc}") from exc
        if hashlib.sha256(content).digest() != address.digest:
            raise IntegrityViolation(f"blob {address} does not match its address")
        return content

    def has(self, address: ContentHash) -> bool:
        return self._path(address).is_file()

    def addresses(self) -> Iterator[ContentHash]:
        if not self.root.is_dir():
            return
        for shard in sorted(self.root.iterdir()):
            if not shard.is_dir():
                continue
            for blob in sorted(shard.iterdir()):
                if is_hex32(blob.name):
                    yield ContentHash.from_hex(blob.name)

    def __len__(self) -> int:
        return sum(1 for _ in self.addresses())
