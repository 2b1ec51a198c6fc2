"""Two instances federate over HTTP: pin, sync, then verify the peer's claims locally."""

from __future__ import annotations

import tempfile
from pathlib import Path

from advocate import Advocate, Gateway, InstanceConfig, SourceSpec


def instance(home: Path, name: str) -> Advocate:
    adv = Advocate(home)
    adv.bootstrap(InstanceConfig(name, "1.0.0", f"ops@{name}.example.org", {}))
    return adv


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        a = instance(tmp / "a", "alpha")
        b = instance(tmp / "b", "beta")
        a.add_source(SourceSpec("events", "push", "event", "alpha-svc"))
        for i in range(3):
            a.ingest("events", {"n": i})
        a.flush()
        ids = [e.id for e in a.store.entries(kind="evidence")]

        with Gateway(a) as gw:
            peer = b.peers.add(gw.url)
            print(f"beta pinned alpha as {peer.peer_key_id}")
            report = b.peers.sync(peer.peer_key_id)
            print(f"sync: {report.to_json()}")
            again = b.peers.sync(peer.peer_key_id)
            print(f"second sync imported {again.receipts_imported}")

        # verification needs only alpha's public key and the synced receipts
        for cid in ids:
            print(f"beta verifies {str(cid)[:24]}...: {b.verify(cid).overall}")


if __name__ == "__main__":
    main()
