"""Sign a policy, evaluate it over evidence, and compare public and confidential output."""

from __future__ import annotations

import tempfile
from pathlib import Path

from advocate import Advocate, InstanceConfig, ManualClock, SourceSpec
from advocate.aggregate import format_signature_file, sign_policy

PUBLIC = (
    'policy latency window 3600s select kind == "evidence" '
    "aggregate avg(payload.content.latency_ms) group by payload.content.route publish public"
)
CONFIDENTIAL = (
    'policy errors window 3600s select payload.content.status >= 500 '
    "aggregate count() publish confidential"
)


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        clock = ManualClock("2026-05-01T12:00:00Z")
        adv = Advocate(tmp / "home", clock=clock)
        adv.bootstrap(InstanceConfig("demo", "1.0.0", "ops@example.org", {}))
        adv.add_source(SourceSpec("events", "push", "event", "api"))
        for i in range(12):
            event = {"route": "/pay" if i % 3 else "/cart", "latency_ms": 20 + i, "status": 503 if i % 5 == 0 else 200}
            adv.ingest("events", event, clock.advance(60))

        for name, text in (("latency.apl", PUBLIC), ("errors.apl", CONFIDENTIAL)):
            path = tmp / name
            path.write_text(text)
            path.with_name(name + ".sig").write_text(format_signature_file(sign_policy(text, adv.key)))
            adv.install_policy(path)

        clock.advance(1)
        for policy in adv.installed_policies():
            claim = adv.aggregate(policy)
            print(f"{policy.name} ({policy.mode})")
            shown = {k: v for k, v in claim.payload.items() if k != "input_ids"}
            for key, value in sorted(shown.items()):
                print(f"  {key}: {value}")
            if "input_ids" in claim.payload:
                print(f"  input_ids: {len(claim.payload['input_ids'])} claim ids")


if __name__ == "__main__":
    main()
