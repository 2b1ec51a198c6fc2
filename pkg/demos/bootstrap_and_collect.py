"""Bootstrap an instance, collect evidence from three kinds of source, verify it.

    python3 demos/bootstrap_and_collect.py
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from advocate import Advocate, InstanceConfig, ManualClock, SourceSpec


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        clock = ManualClock("2026-05-01T12:00:00Z")
        adv = Advocate(tmp / "home", clock=clock)
        self_claim = adv.bootstrap(InstanceConfig("demo", "1.0.0", "ops@example.org", {"region": "eu-west"}))
        print(f"instance key  {adv.instance_key_id}")
        print(f"self-claim    {self_claim.id}")

        log = tmp / "app.log"
        log.write_text("")
        adv.add_source(SourceSpec("events", "push", "event", "checkout-svc"))
        adv.add_source(SourceSpec("log", "pull", "file-tail", str(log), 5))

        for i in range(6):
            now = clock.advance(5)
            adv.ingest("events", {"order": i, "status": 200}, now)
            with open(log, "a") as fh:
                fh.write(json.dumps({"line": i, "level": "info"}) + "\n")
            adv.run_cycle(now)

        receipt = adv.flush()
        print(f"anchored      {receipt.leaf_count} claims at height {receipt.height}")

        for entry in adv.store.entries(kind="evidence")[:3]:
            report = adv.verify(entry.id)
            print(f"{entry.source:8} {str(entry.id)[:24]}...  overall={report.overall}")


if __name__ == "__main__":
    main()
