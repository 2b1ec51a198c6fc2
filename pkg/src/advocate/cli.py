"""Operator command line.

Exit codes: 0 success (or verified), 1 verification failed, 2 usage error,
3 I/O or remote failure. Errors are printed to stderr as a single line
``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
import urllib.error
import urllib.request
from datetime import timedelta
from pathlib import Path
from typing import Sequence

from .aggregate import format_signature_file, sign_policy
from .cas import ContentHash
from .claims import submission_bytes
from .config import Config, load_config, parse_listen
from .engine import Advocate, PublishRejected, is_initialized
from .errors import (
    AdvocateError,
    InvalidConfig,
    InvalidSeed,
    MalformedClaim,
    NonCanonicalNumber,
    NonCanonicalValue,
    NotBootstrapped,
    NotFound,
    PolicyRejected,
)
from .gateway import KEY_HEADER, Gateway
from .keys import b64, generate_keypair, load_keypair, save_keypair

log = logging.getLogger("advocate")

OK, FAILED, USAGE, IO = 0, 1, 2, 3


class UsageError(AdvocateError):
    pass


class RemoteFailure(AdvocateError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, InvalidConfig, InvalidSeed, NonCanonicalNumber, NonCanonicalValue)):
        return USAGE
    if isinstance(exc, (NotFound, PolicyRejected)):
        return FAILED
    if isinstance(exc, PublishRejected):
        return FAILED if exc.status == 403 else USAGE
    return IO


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advocate", description="Collect, anchor and verify evidence claims.")
    parser.add_argument("--config", help="config file (default: $ADVOCATE_CONFIG or <home>/config.json)")
    parser.add_argument("--home", help="state directory (default: $ADVOCATE_HOME or the config's home)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="generate the deployment key and anchor the self-claim")
    p.add_argument("--seed-hex", help="32-byte key seed as hex (testing only)")

    p = sub.add_parser("run", help="start collectors, the anchor flusher and the API")
    p.add_argument("--max-seconds", type=float, help="stop after this long")
    p.add_argument("--tick", type=float, default=1.0, help="scheduler resolution in seconds")

    p = sub.add_parser("verify", help="verify a claim's full trail")
    p.add_argument("claim_id")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("inspect", help="print a stored claim")
    p.add_argument("claim_id")

    p = sub.add_parser("publish", help="submit a claim signed with a publishing key")
    p.add_argument("--key-file", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--payload-file", required=True)
    p.add_argument("--api", help="gateway URL; default publishes into the local home")
    p.add_argument("--json", action="store_true")

    policy = sub.add_parser("policy", help="manage aggregation policies").add_subparsers(
        dest="policy_command", required=True, parser_class=_Parser
    )
    p = policy.add_parser("add", help="verify a signed policy and install it")
    p.add_argument("file")
    p = policy.add_parser("sign", help="write <file>.sig with the given key")
    p.add_argument("file")
    p.add_argument("--key-file", help="signing key (default: the deployment key)")
    p = policy.add_parser("run", help="evaluate installed policies now and emit aggregate claims")
    p.add_argument("--json", action="store_true")

    peer = sub.add_parser("peer", help="federate with other instances").add_subparsers(
        dest="peer_command", required=True, parser_class=_Parser
    )
    p = peer.add_parser("add", help="pin a peer by its self-claim")
    p.add_argument("url")
    p = peer.add_parser("sync", help="import a peer's anchor receipts")
    p.add_argument("peer_id")
    peer.add_parser("list")

    anchor = sub.add_parser("anchor", help="anchoring").add_subparsers(
        dest="anchor_command", required=True, parser_class=_Parser
    )
    p = anchor.add_parser("flush", help="anchor all pending claims now")
    p.add_argument("--json", action="store_true")
    p = anchor.add_parser("revoke", help="revoke a batch root (hex) or a claim id")
    p.add_argument("target")

    key = sub.add_parser("key", help="publishing keys").add_subparsers(
        dest="key_command", required=True, parser_class=_Parser
    )
    p = key.add_parser("new", help="generate a key file")
    p.add_argument("--out", required=True)
    p = key.add_parser("register", help="register a publishing key for an owner")
    p.add_argument("--owner", required=True)
    p.add_argument("--key-file", required=True)
    return parser


def _resolve(args: argparse.Namespace) -> tuple[Path, Config | None]:
    home = args.home or os.environ.get("ADVOCATE_HOME")
    config_path = args.config or os.environ.get("ADVOCATE_CONFIG")
    if config_path is None and home is not None:
        candidate = Path(home) / "config.json"
        config_path = str(candidate) if candidate.exists() else None
    config = load_config(config_path, home=home) if config_path else None
    if home is None:
        if config is None:
            raise UsageError("no home: pass --home, set ADVOCATE_HOME, or give a config file")
        home = config.home
    return Path(home), config


def _open(home: Path, config: Config | None) -> Advocate:
    if not is_initialized(home):
        raise NotBootstrapped(f"{home} is not initialised; run 'advocate init'")
    kwargs = {}
    if config is not None:
        kwargs = {"anchor_granularity": config.anchor_granularity, "anchor_kinds": config.anchor_kinds}
    return Advocate(home, **kwargs)


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _claim_id(text: str) -> ContentHash:
    try:
        return ContentHash.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_init(args, home: Path, config: Config | None) -> int:
    if config is None:
        raise InvalidConfig("init needs a config file with an 'instance' section")
    seed = None
    if args.seed_hex:
        try:
            seed = bytes.fromhex(args.seed_hex)
        except ValueError:
            raise InvalidSeed("seed must be hex") from None
    adv = Advocate(home, anchor_granularity=config.anchor_granularity, anchor_kinds=config.anchor_kinds)
    claim = adv.bootstrap(config.instance, seed=seed)
    print(str(claim.id))
    return OK


def cmd_verify(args, home: Path, config: Config | None) -> int:
    adv = _open(home, config)
    report = adv.verify(_claim_id(args.claim_id))
    if args.json:
        _print_json(report.to_json())
    else:
        for name, value in report.to_json().items():
            print(f"{name:16} {value}")
    return OK if report.overall else FAILED


def cmd_inspect(args, home: Path, config: Config | None) -> int:
    adv = _open(home, config)
    _print_json(adv.store.load_claim(_claim_id(args.claim_id)).to_json())
    return OK


def cmd_publish(args, home: Path | None, config: Config | None) -> int:
    key = load_keypair(args.key_file)
    try:
        payload = json.loads(Path(args.payload_file).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise UsageError(f"{args.payload_file}: {exc}") from None
    body = {
        "kind": args.kind,
        "subject": args.subject,
        "payload": payload,
        "signature_b64": b64(key.sign(submission_bytes(args.kind, args.subject, payload))),
    }
    if args.api:
        request = urllib.request.Request(
            args.api.rstrip("/") + "/v1/claims",
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json", KEY_HEADER: key.key_id},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=10) as resp:
                claim_id = json.loads(resp.read())["id"]
        except urllib.error.HTTPError as exc:
            detail = json.loads(exc.read() or b"{}")
            raise PublishRejected(detail.get("message", f"HTTP {exc.code}"), exc.code) from None
        except (urllib.error.URLError, OSError) as exc:
            raise RemoteFailure(f"{args.api}: {exc}") from None
    else:
        claim_id = str(_open(home, config).publish(key.key_id, body).id)
    if args.json:
        _print_json({"id": claim_id})
    else:
        print(claim_id)
    return OK


def cmd_policy(args, home: Path, config: Config | None) -> int:
    if args.policy_command == "sign":
        key = load_keypair(args.key_file) if args.key_file else load_keypair(home / "keys" / "deployment.json")
        path = Path(args.file)
        signature = sign_policy(path.read_bytes(), key)
        path.with_name(path.name + ".sig").write_text(format_signature_file(signature), encoding="ascii")
        return OK
    adv = _open(home, config)
    if args.policy_command == "add":
        policy = adv.install_policy(args.file)
        print(str(policy.policy_id))
        return OK
    claims = [adv.aggregate(policy) for policy in adv.installed_policies()]
    if args.json:
        _print_json([c.to_json() for c in claims])
    else:
        for claim in claims:
            print(str(claim.id))
    return OK


def cmd_peer(args, home: Path, config: Config | None) -> int:
    adv = _open(home, config)
    if args.peer_command == "add":
        _print_json(adv.peers.add(args.url).summary())
    elif args.peer_command == "sync":
        _print_json(adv.peers.sync(args.peer_id).to_json())
    else:
        _print_json([p.summary() for p in adv.peers])
    return OK


def cmd_anchor(args, home: Path, config: Config | None) -> int:
    adv = _open(home, config)
    if args.anchor_command == "revoke":
        target = args.target
        digest = _claim_id(target).digest if ":" in target else bytes.fromhex(target) if len(target) == 64 else None
        if digest is None:
            raise UsageError("target must be a claim id or a 64-hex root")
        adv.revoke(digest)
        return OK
    receipt = adv.flush_if_pending()
    if receipt is None:
        print("nothing pending", file=sys.stderr)
        return OK
    if args.json:
        _print_json(receipt.to_json())
    else:
        print(f"{receipt.root.hex()} height={receipt.height} leaves={receipt.leaf_count}")
    return OK


def cmd_key(args, home: Path | None, config: Config | None) -> int:
    if args.key_command == "new":
        pair = generate_keypair()
        save_keypair(pair, args.out)
        print(pair.key_id)
        return OK
    adv = _open(home, config)
    record = adv.register_publisher(args.owner, load_keypair(args.key_file).public_key)
    print(record.key_id)
    return OK


def cmd_run(args, home: Path, config: Config | None) -> int:
    adv = _open(home, config)
    if config is None:
        raise InvalidConfig("run needs a config file")
    host, port = parse_listen(config.api_listen)
    for spec in config.sources:
        adv.add_source(spec)
    for url in config.peers:
        try:
            adv.peers.add(url)
        except AdvocateError as exc:
            log.warning("peer %s: %s", url, exc)
    stop = threading.Event()
    for signum in (signal.SIGINT, signal.SIGTERM):
        signal.signal(signum, lambda *_: stop.set())
    gateway = Gateway(adv, host, port).start()
    print(f"listening on {gateway.url}", file=sys.stderr)
    started = time.monotonic()
    flush_every = timedelta(seconds=config.anchor_flush_interval_s)
    last_flush = adv.clock.now()
    last_policy_run: dict[ContentHash, object] = {}
    try:
        while not stop.wait(args.tick):
            now = adv.clock.now()
            adv.run_cycle(now)
            for policy in adv.installed_policies():
                due = last_policy_run.get(policy.policy_id)
                if due is None or now - due >= timedelta(seconds=policy.window_s):
                    adv.aggregate(policy, now)
                    last_policy_run[policy.policy_id] = now
            if now - last_flush >= flush_every:
                adv.flush_if_pending(now)
                for peer in adv.peers:
                    try:
                        adv.peers.sync(peer.peer_key_id)
                    except AdvocateError as exc:
                        log.warning("sync with %s failed: %s", peer.peer_url, exc)
                last_flush = now
            if args.max_seconds is not None and time.monotonic() - started >= args.max_seconds:
                break
    finally:
        adv.flush_if_pending()
        gateway.stop()
    return OK


COMMANDS = {
    "init": cmd_init,
    "run": cmd_run,
    "verify": cmd_verify,
    "inspect": cmd_inspect,
    "publish": cmd_publish,
    "policy": cmd_policy,
    "peer": cmd_peer,
    "anchor": cmd_anchor,
    "key": cmd_key,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
        needs_home = not (
            (args.command == "publish" and args.api)
            or (args.command == "key" and args.key_command == "new")
            or (args.command == "policy" and args.policy_command == "sign" and args.key_file)
        )
        home, config = _resolve(args) if needs_home else (None, None)
        return COMMANDS[args.command](args, home, config)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (AdvocateError, OSError, MalformedClaim) as exc:
        code = exc.code if isinstance(exc, AdvocateError) else type(exc).__name__
        message = " ".join(str(exc).split())
        print(f"error: {code}: {message}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
