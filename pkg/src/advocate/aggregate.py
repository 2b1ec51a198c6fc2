"""Signed aggregation policies over claim windows.

Policies are written in a small closed language::

    policy cpu-by-service window 3600s
      select kind == "evidence" and payload.content.cpu_ms >= 10
      aggregate sum(payload.content.cpu_ms)
      group by subject
      publish confidential

``and`` binds tighter than ``or``; parentheses group. Comparisons are
``== != < <= > >= contains`` between a dotted claim path and an integer or
string literal. A comparison against an absent path is false, whatever the
operator. Arithmetic is integer-only and ``avg`` rounds toward zero.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

from .anchor import leaf_hash, merkle_root
from .cas import ContentHash
from .claims import AGGREGATE, Claim, Signature, make_claim
from .clock import Clock, format_ts, parse_ts
from .errors import PolicyRejected, PolicySyntaxError
from .keys import KeyPair, b64, unb64, verify

FUNCTIONS = ("count", "sum", "min", "max", "avg")
OPERATORS = ("==", "!=", "<=", ">=", "<", ">", "contains")
KEYWORDS = {
    "policy", "window", "select", "aggregate", "group", "by", "publish",
    "and", "or", "contains", "public", "confidential",
}
ABSENT_GROUP = "«absent»"
IMPLICIT_GROUP = "*"
EMPTY_WINDOW_ROOT = leaf_hash(b"empty-window")

_ABSENT = object()


# --------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Compare:
    path: tuple[str, ...]
    op: str
    value: int | str


@dataclass(frozen=True)
class And:
    terms: tuple[Predicate, ...]


@dataclass(frozen=True)
class Or:
    terms: tuple[Predicate, ...]


Predicate = Union[Compare, And, Or]


@dataclass(frozen=True)
class Policy:
    policy_id: ContentHash
    name: str
    window_s: int
    filter: Predicate
    function: str
    field: tuple[str, ...] | None
    group_by: tuple[str, ...] | None
    mode: str
    source: str
    signer_key_id: str | None = None
    signature: Signature | None = None

    def signed(self, signature: Signature) -> Policy:
        return replace(self, signer_key_id=signature.verification_key_id, signature=signature)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<duration>\d+s(?![\w.-]))
  | (?P<int>-?\d+(?![\w]))
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<punct>[()])
  | (?P<word>[A-Za-z_][\w-]*(?:\.[A-Za-z0-9_][\w-]*)*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[_Tok]:
    tokens, pos, line, line_start = [], 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        col = pos - line_start + 1
        if m is None:
            raise PolicySyntaxError(f"unexpected character {source[pos]!r}", line, col)
        kind, text = m.lastgroup, m.group()
        if kind == "ws":
            line += text.count("\n")
            if "\n" in text:
                line_start = pos + text.rindex("\n") + 1
        else:
            if kind == "word" and text in KEYWORDS:
                kind = "kw"
            tokens.append(_Tok(kind, text, line, col))
        pos = m.end()
    tokens.append(_Tok("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, source: str) -> None:
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.tokens[self.i]

    def fail(self, message: str, tok: _Tok | None = None):
        tok = tok or self.tok
        raise PolicySyntaxError(message, tok.line, tok.col)

    def take(self, kind: str, text: str | None = None) -> _Tok:
        tok = self.tok
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text else kind
            self.fail(f"expected {want}, found {tok.text or 'end of input'!r}")
        self.i += 1
        return tok

    def peek(self, kind: str, text: str | None = None) -> bool:
        return self.tok.kind == kind and (text is None or self.tok.text == text)

    def path(self) -> tuple[str, ...]:
        return tuple(self.take("word").text.split("."))

    def literal(self) -> int | str:
        if self.peek("int"):
            return int(self.take("int").text)
        if self.peek("string"):
            tok = self.take("string")
            try:
                return json.loads(tok.text)
            except ValueError:
                self.fail("bad string escape", tok)
        self.fail(f"expected an integer or string literal, found {self.tok.text or 'end of input'!r}")

    def predicate(self) -> Predicate:
        terms = [self.conjunction()]
        while self.peek("kw", "or"):
            self.i += 1
            terms.append(self.conjunction())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def conjunction(self) -> Predicate:
        terms = [self.atom()]
        while self.peek("kw", "and"):
            self.i += 1
            terms.append(self.atom())
        return terms[0] if len(terms) == 1 else And(tuple(terms))

    def atom(self) -> Predicate:
        if self.peek("punct", "("):
            self.i += 1
            inner = self.predicate()
            self.take("punct", ")")
            return inner
        path = self.path()
        if self.peek("op"):
            op = self.take("op").text
        elif self.peek("kw", "contains"):
            op = self.take("kw").text
        else:
            self.fail(f"expected a comparison operator, found {self.tok.text or 'end of input'!r}")
        return Compare(path, op, self.literal())

    def policy(self, source: str) -> Policy:
        self.take("kw", "policy")
        name = self.take("word").text
        self.take("kw", "window")
        window_tok = self.take("duration")
        window_s = int(window_tok.text[:-1])
        if window_s <= 0:
            self.fail("window must be positive", window_tok)
        self.take("kw", "select")
        predicate = self.predicate()
        self.take("kw", "aggregate")
        fn_tok = self.take("word")
        if fn_tok.text not in FUNCTIONS:
            self.fail(f"unknown function {fn_tok.text!r}", fn_tok)
        self.take("punct", "(")
        field_path = None if self.peek("punct", ")") else self.path()
        close = self.take("punct", ")")
        if field_path is None and fn_tok.text != "count":
            self.fail(f"{fn_tok.text}() needs a field path", close)
        group_by = None
        if self.peek("kw", "group"):
            self.i += 1
            self.take("kw", "by")
            group_by = self.path()
        self.take("kw", "publish")
        mode_tok = self.take("kw")
        if mode_tok.text not in ("public", "confidential"):
            self.fail("publish mode must be public or confidential", mode_tok)
        self.take("eof")
        return Policy(
            policy_id=ContentHash.of(source.encode("utf-8")),
            name=name,
            window_s=window_s,
            filter=predicate,
            function=fn_tok.text,
            field=field_path,
            group_by=group_by,
            mode=mode_tok.text,
            source=source,
        )


def parse_policy(source: str) -> Policy:
    """Parse policy text into an unsigned :class:`Policy`."""
    return _Parser(source).policy(source)


# --------------------------------------------------------------------------
# signatures


def sign_policy(source: str | bytes, key: KeyPair) -> Signature:
    data = source.encode("utf-8") if isinstance(source, str) else source
    return Signature("ed25519", "", key.key_id, key.sign(data))


def verify_policy(source: str | bytes, signature: Signature | None, keys: Mapping[str, bytes]) -> bool:
    """True iff ``signature`` is valid over the exact source bytes under a known key."""
    if signature is None or signature.scheme != "ed25519":
        return False
    public = keys.get(signature.verification_key_id)
    if public is None:
        return False
    data = source.encode("utf-8") if isinstance(source, str) else source
    return verify(public, data, signature.value)


def format_signature_file(signature: Signature) -> str:
    return f"{b64(signature.value)}\n{signature.verification_key_id}\n"


def parse_signature_file(text: str) -> Signature:
    lines = [line.strip() for line in text.strip().splitlines()]
    if len(lines) != 2:
        raise PolicyRejected("signature file must hold a base64 signature and a key id")
    try:
        value = unb64(lines[0])
        return Signature("ed25519", "", lines[1], value)
    except ValueError as exc:
        raise PolicyRejected(f"bad signature file: {exc}") from None


def load_signed_policy(path: str | Path, keys: Mapping[str, bytes]) -> Policy:
    """Read ``<name>.apl`` and ``<name>.apl.sig``; reject unless the signature verifies."""
    path = Path(path)
    raw = path.read_bytes()
    sig_path = path.with_name(path.name + ".sig")
    if not sig_path.exists():
        raise PolicyRejected(f"{path.name} is not signed")
    signature = parse_signature_file(sig_path.read_text(encoding="ascii"))
    if not verify_policy(raw, signature, keys):
        raise PolicyRejected(f"{path.name}: signature does not verify under a registered key")
    return parse_policy(raw.decode("utf-8")).signed(signature)


# --------------------------------------------------------------------------
# evaluation


def resolve(document: Any, path: Sequence[str]) -> Any:
    node = document
    for part in path:
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        else:
            return _ABSENT
    return node


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _same(a: Any, b: Any) -> bool:
    if _is_int(a) and _is_int(b):
        return a == b
    return isinstance(a, str) and isinstance(b, str) and a == b


def _compare(value: Any, op: str, literal: int | str) -> bool:
    if value is _ABSENT:
        return False
    if op == "==":
        return _same(value, literal)
    if op == "!=":
        return not _same(value, literal)
    if op == "contains":
        if isinstance(value, str) and isinstance(literal, str):
            return literal in value
        if isinstance(value, list):
            return any(_same(item, literal) for item in value)
        if isinstance(value, dict) and isinstance(literal, str):
            return literal in value
        return False
    comparable = (_is_int(value) and _is_int(literal)) or (isinstance(value, str) and isinstance(literal, str))
    if not comparable:
        return False
    if op == "<":
        return value < literal
    if op == "<=":
        return value <= literal
    if op == ">":
        return value > literal
    return value >= literal


def matches(predicate: Predicate, document: Any) -> bool:
    if isinstance(predicate, Compare):
        return _compare(resolve(document, predicate.path), predicate.op, predicate.value)
    if isinstance(predicate, And):
        return all(matches(t, document) for t in predicate.terms)
    return any(matches(t, document) for t in predicate.terms)


def group_key(value: Any) -> str:
    if value is _ABSENT:
        return ABSENT_GROUP
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, int):
        return str(value)
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _quotient(total: int, n: int) -> int:
    q = abs(total) // n
    return q if total >= 0 else -q


@dataclass(frozen=True)
class AggregateResult:
    policy_id: ContentHash
    window: tuple[str, str]
    groups: dict[str, int]
    input_ids: list[ContentHash]
    input_root: bytes
    diagnostics: list[str] = field(default_factory=list)


def input_root(ids: Sequence[ContentHash]) -> bytes:
    if not ids:
        return EMPTY_WINDOW_ROOT
    return merkle_root([cid.digest for cid in sorted(ids, key=str)])


def evaluate(policy: Policy, claims: Iterable[Claim], window_end: datetime) -> AggregateResult:
    """Filter claims issued in ``[end - window, end)`` and fold them per group."""
    if policy.signature is None:
        raise PolicyRejected(f"policy {policy.name} is unsigned")
    start = window_end - timedelta(seconds=policy.window_s)
    groups: dict[str, list[Claim]] = {}
    documents: dict[ContentHash, dict] = {}
    for claim in claims:
        issued = parse_ts(claim.issued_at)
        if not (start <= issued < window_end):
            continue
        document = claim.to_json()
        if not matches(policy.filter, document):
            continue
        documents[claim.id] = document
        key = IMPLICIT_GROUP if policy.group_by is None else group_key(resolve(document, policy.group_by))
        groups.setdefault(key, []).append(claim)

    if policy.group_by is None and not groups and policy.function in ("count", "sum"):
        groups[IMPLICIT_GROUP] = []

    values: dict[str, int] = {}
    diagnostics: list[str] = []
    for key in sorted(groups):
        members = groups[key]
        if policy.function == "count":
            # a missing field never excludes a claim from count
            values[key] = len(members)
            continue
        numbers = [v for c in members if _is_int(v := resolve(documents[c.id], policy.field))]
        if policy.function == "sum":
            values[key] = sum(numbers)
        elif not numbers:
            diagnostics.append(f"EmptyAggregate: {policy.function} over no values in group {key!r}")
        elif policy.function == "min":
            values[key] = min(numbers)
        elif policy.function == "max":
            values[key] = max(numbers)
        else:
            values[key] = _quotient(sum(numbers), len(numbers))

    ids = sorted(documents, key=str)
    return AggregateResult(
        policy_id=policy.policy_id,
        window=(format_ts(start), format_ts(window_end)),
        groups=values,
        input_ids=ids,
        input_root=input_root(ids),
        diagnostics=diagnostics,
    )


def aggregate_payload(result: AggregateResult, policy: Policy) -> dict:
    payload = {
        "policy_id": str(result.policy_id),
        "policy_name": policy.name,
        "policy_signer_key_id": policy.signer_key_id,
        "function": policy.function,
        "mode": policy.mode,
        "window": {"start": result.window[0], "end": result.window[1]},
        "groups": dict(result.groups),
        "input_root": result.input_root.hex(),
        "diagnostics": list(result.diagnostics),
    }
    if policy.mode == "public":
        payload["input_ids"] = [str(cid) for cid in result.input_ids]
    return payload


def emit_aggregate_claim(
    result: AggregateResult,
    policy: Policy,
    key: KeyPair,
    self_ref: ContentHash,
    *,
    clock: Clock | None = None,
) -> Claim:
    """Wrap a result as an ``aggregate`` claim; confidential mode drops input ids."""
    if result.policy_id != policy.policy_id:
        raise PolicyRejected("result was not produced by this policy")
    return make_claim(AGGREGATE, policy.name, aggregate_payload(result, policy), self_ref, None, key, clock=clock)
