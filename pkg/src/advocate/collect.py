"""Evidence sources and the collection scheduler.

Pull sources are polled on their interval by :meth:`Collector.run_cycle`;
push sources receive events through :meth:`Collector.ingest`. New source
kinds are added with :func:`register_kind`.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Callable, ClassVar, Literal, Protocol

from .cas import ContentHash
from .claims import COLLECTOR_ERROR, DEPLOYMENT, EVIDENCE, Claim, canonical_bytes
from .clock import format_ts
from .errors import (
    AdvocateError,
    DuplicateSource,
    InvalidSpec,
    MalformedManifest,
    ModeMismatch,
    NonCanonicalNumber,
    NonCanonicalValue,
    SourceUnavailable,
    UnknownSource,
    UnsupportedKind,
)

log = logging.getLogger(__name__)

Mode = Literal["pull", "push"]

INSTANCE_ANNOTATION = "advocate/instance"
OBSERVED_ANNOTATION = "advocate/observed"


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    mode: Mode
    kind: str
    target: str
    interval_s: int | None = None
    anchor: bool = True

    def validate(self) -> None:
        if not isinstance(self.source_id, str) or not self.source_id:
            raise InvalidSpec("source_id must be a nonempty string")
        if self.mode not in ("pull", "push"):
            raise InvalidSpec(f"mode must be pull or push, not {self.mode!r}")
        if self.mode == "pull":
            if type(self.interval_s) is not int or self.interval_s <= 0:
                raise InvalidSpec("pull sources need a positive integer interval_s")
        if not isinstance(self.target, str):
            raise InvalidSpec("target must be a string")

    def to_json(self) -> dict:
        data = {
            "source_id": self.source_id,
            "mode": self.mode,
            "kind": self.kind,
            "target": self.target,
            "anchor": self.anchor,
        }
        if self.interval_s is not None:
            data["interval_s"] = self.interval_s
        return data

    @classmethod
    def from_json(cls, data: dict) -> SourceSpec:
        try:
            return cls(
                source_id=data["source_id"],
                mode=data["mode"],
                kind=data["kind"],
                target=data.get("target", ""),
                interval_s=data.get("interval_s"),
                anchor=bool(data.get("anchor", True)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"source spec missing {exc}") from None


@dataclass(frozen=True)
class EvidenceRecord:
    source_id: str
    collected_at: str
    content: Any
    content_digest: ContentHash

    @classmethod
    def wrap(cls, source_id: str, content: Any, now: datetime) -> EvidenceRecord:
        content = jsonable(content)
        return cls(source_id, format_ts(now), content, ContentHash.of(canonical_bytes(content)))

    def payload(self) -> dict:
        return {
            "source_id": self.source_id,
            "collected_at": self.collected_at,
            "content": self.content,
            "content_digest": str(self.content_digest),
        }


def jsonable(value: Any) -> Any:
    """Make observed data canonicalizable: floats become decimal strings."""
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return str(value)
        return repr(value)
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def _parse_observation(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


# --------------------------------------------------------------------------
# source kinds


@dataclass
class Fetched:
    observations: list[Any]
    cursor: dict
    notices: list[str] = field(default_factory=list)


class Source(Protocol):
    mode: ClassVar[str]

    def fetch(self, spec: SourceSpec, cursor: dict, now: datetime) -> Fetched: ...


SOURCE_KINDS: dict[str, type] = {}


def register_kind(name: str) -> Callable[[type], type]:
    """Class decorator adding a source kind under ``name``."""

    def wrap(cls: type) -> type:
        SOURCE_KINDS[name] = cls
        return cls

    return wrap


@register_kind("http-poll")
class HttpPoll:
    """GET the target; a JSON body is one observation, passed through opaquely."""

    mode = "pull"
    timeout_s = 5.0

    def fetch(self, spec: SourceSpec, cursor: dict, now: datetime) -> Fetched:
        try:
            with urllib.request.urlopen(spec.target, timeout=self.timeout_s) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise SourceUnavailable(f"{spec.target}: {exc}") from None
        text = body.decode("utf-8", errors="replace")
        return Fetched([_parse_observation(text)], dict(cursor, polls=cursor.get("polls", 0) + 1))


@register_kind("file-tail")
class FileTail:
    """New complete lines since the last byte offset, one observation each."""

    mode = "pull"

    def fetch(self, spec: SourceSpec, cursor: dict, now: datetime) -> Fetched:
        offset = int(cursor.get("offset", 0))
        notices = []
        try:
            with open(spec.target, "rb") as fh:
                size = fh.seek(0, 2)
                if size < offset:
                    notices.append(f"{spec.target} shrank from {offset} to {size} bytes; reading from start")
                    offset = 0
                fh.seek(offset)
                chunk = fh.read()
        except OSError as exc:
            raise SourceUnavailable(f"{spec.target}: {exc}") from None
        end = chunk.rfind(b"\n")
        if end < 0:
            return Fetched([], {"offset": offset}, notices)
        lines = chunk[: end + 1].decode("utf-8", errors="replace").splitlines()
        observations = [_parse_observation(line) for line in lines if line.strip()]
        return Fetched(observations, {"offset": offset + end + 1}, notices)


@register_kind("event")
class PushEvents:
    mode = "push"


@register_kind("deployment")
class DeploymentInterceptor:
    mode = "push"


# --------------------------------------------------------------------------
# deployment interception


def manifest_name(manifest: Any) -> str:
    if not isinstance(manifest, dict):
        raise MalformedManifest("manifest must be a JSON object")
    name = manifest.get("name")
    if name is None and isinstance(manifest.get("metadata"), dict):
        name = manifest["metadata"].get("name")
    if not isinstance(name, str) or not name:
        raise MalformedManifest("manifest has no name")
    return name


def intercept_deployment(
    manifest: Any,
    instance_key_id: str,
    *,
    now: datetime,
    source_id: str = "deployment",
) -> tuple[dict, EvidenceRecord]:
    """Annotate a deployment manifest and describe the change as evidence.

    The input is not modified. Annotating an already annotated manifest
    yields the same manifest again.
    """
    name = manifest_name(manifest)
    try:
        original_digest = ContentHash.of(canonical_bytes(manifest))
    except (NonCanonicalNumber, NonCanonicalValue) as exc:
        raise MalformedManifest(str(exc)) from None
    annotated = copy.deepcopy(manifest)
    metadata = annotated.setdefault("metadata", {})
    if not isinstance(metadata, dict):
        raise MalformedManifest("metadata must be an object")
    annotations = metadata.setdefault("annotations", {})
    if not isinstance(annotations, dict):
        raise MalformedManifest("metadata.annotations must be an object")
    annotations[INSTANCE_ANNOTATION] = instance_key_id
    annotations[OBSERVED_ANNOTATION] = "true"
    content = {
        "manifest_name": name,
        "original_digest": str(original_digest),
        "annotated_digest": str(ContentHash.of(canonical_bytes(annotated))),
    }
    return annotated, EvidenceRecord.wrap(source_id, content, now)


# --------------------------------------------------------------------------
# scheduling


@dataclass
class SourceHandle:
    spec: SourceSpec
    source: Any
    next_due: datetime | None
    cursor: dict = field(default_factory=dict)
    head: ContentHash | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def source_id(self) -> str:
        return self.spec.source_id


class ClaimEmitter(Protocol):
    def emit_claim(
        self,
        kind: str,
        subject: str,
        payload: Any,
        prev_ref: ContentHash | None,
        now: datetime,
        spec: SourceSpec | None,
    ) -> Claim: ...


def poll(handle: SourceHandle, now: datetime) -> tuple[list[EvidenceRecord], list[str]]:
    """Fetch new observations; the cursor only moves when the fetch succeeds.

    Returns the records and any notices (such as a truncated file) that the
    caller should log as collector errors.
    """
    if handle.spec.mode != "pull":
        raise ModeMismatch(f"source {handle.source_id} is not a pull source")
    with handle.lock:
        fetched = handle.source.fetch(handle.spec, dict(handle.cursor), now)
        handle.cursor = fetched.cursor
    records = [EvidenceRecord.wrap(handle.source_id, obs, now) for obs in fetched.observations]
    return records, fetched.notices


class Collector:
    def __init__(self, emitter: ClaimEmitter, *, max_workers: int = 8) -> None:
        self.emitter = emitter
        self.max_workers = max_workers
        self._handles: dict[str, SourceHandle] = {}
        self._emit_lock = threading.Lock()

    def register_source(
        self,
        spec: SourceSpec,
        now: datetime,
        *,
        head: ContentHash | None = None,
        cursor: dict | None = None,
    ) -> SourceHandle:
        spec.validate()
        kind = SOURCE_KINDS.get(spec.kind)
        if kind is None:
            raise UnsupportedKind(f"no source kind {spec.kind!r}")
        if kind.mode != spec.mode:
            raise InvalidSpec(f"{spec.kind} sources are {kind.mode}-based")
        if spec.source_id in self._handles:
            raise DuplicateSource(f"source {spec.source_id!r} is already registered")
        next_due = now + timedelta(seconds=spec.interval_s) if spec.mode == "pull" else None
        handle = SourceHandle(spec, kind(), next_due, dict(cursor or {}), head)
        self._handles[spec.source_id] = handle
        return handle

    def handle(self, source_id: str) -> SourceHandle:
        try:
            return self._handles[source_id]
        except KeyError:
            raise UnknownSource(f"no source {source_id!r}") from None

    @property
    def handles(self) -> list[SourceHandle]:
        return list(self._handles.values())

    def _emit(self, handle: SourceHandle, kind: str, subject: str, payload: Any, now: datetime) -> Claim:
        with self._emit_lock:
            claim = self.emitter.emit_claim(kind, subject, payload, handle.head, now, handle.spec)
            handle.head = claim.id
        return claim

    def _emit_error(self, handle: SourceHandle, code: str, message: str, now: datetime) -> Claim:
        payload = {"source_id": handle.source_id, "error": code, "message": message}
        return self._emit(handle, COLLECTOR_ERROR, handle.spec.target, payload, now)

    def ingest(self, source_id: str, event: Any, now: datetime) -> EvidenceRecord:
        handle = self.handle(source_id)
        if handle.spec.mode != "push":
            raise ModeMismatch(f"source {source_id} is pull-based")
        if handle.spec.kind == "deployment":
            return self.admit(source_id, event, now)[1]
        record = EvidenceRecord.wrap(source_id, event, now)
        self._emit(handle, EVIDENCE, handle.spec.target, record.payload(), now)
        return record

    def admit(self, source_id: str, manifest: Any, now: datetime) -> tuple[dict, EvidenceRecord]:
        """Run a manifest through the interceptor and record a deployment claim."""
        handle = self.handle(source_id)
        if handle.spec.kind != "deployment":
            raise ModeMismatch(f"source {source_id} is not a deployment interceptor")
        instance_key_id = getattr(self.emitter, "instance_key_id", "")
        annotated, record = intercept_deployment(manifest, instance_key_id, now=now, source_id=source_id)
        self._emit(handle, DEPLOYMENT, record.content["manifest_name"], record.payload(), now)
        return annotated, record

    def run_cycle(self, now: datetime) -> list[Claim]:
        """Poll every due pull source and turn what they return into claims.

        Fetches run concurrently; claims are emitted afterwards in source id
        order so that a scripted clock always yields the same sequence.
        """
        due = sorted(
            (h for h in self._handles.values() if h.spec.mode == "pull" and h.next_due is not None and h.next_due <= now),
            key=lambda h: h.source_id,
        )
        if not due:
            return []

        def attempt(handle: SourceHandle):
            try:
                return poll(handle, now), None
            except AdvocateError as exc:
                return None, exc
            except Exception as exc:  # a broken plugin must not stop the other sources
                log.exception("source %s failed", handle.source_id)
                return None, exc

        if len(due) == 1:
            outcomes = [attempt(due[0])]
        else:
            with ThreadPoolExecutor(max_workers=min(self.max_workers, len(due))) as pool:
                outcomes = list(pool.map(attempt, due))

        claims: list[Claim] = []
        for handle, (result, error) in zip(due, outcomes):
            handle.next_due = now + timedelta(seconds=handle.spec.interval_s)
            if error is not None:
                code = error.code if isinstance(error, AdvocateError) else type(error).__name__
                claims.append(self._emit_error(handle, code, str(error), now))
                continue
            records, notices = result
            for notice in notices:
                claims.append(self._emit_error(handle, "SourceTruncated", notice, now))
            for record in records:
                claims.append(self._emit(handle, EVIDENCE, handle.spec.target, record.payload(), now))
        return claims

    def cursors(self) -> dict[str, dict]:
        return {sid: dict(h.cursor) for sid, h in self._handles.items() if h.cursor}

    def save_cursors(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.cursors(), sort_keys=True), encoding="utf-8")
