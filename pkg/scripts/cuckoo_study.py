#!/usr/bin/env python3
"""Quote-relay (cuckoo) study: every TPM-channel routing, both variants.

A tampered machine tries to look healthy by relaying its TPM traffic to
another host.  The grid crosses the channel route used during agent
initialization with the route used at runtime, for the plain protocol and
the obfuscating one, and then asks the symbolic checker the same question.

Run:  python scripts/cuckoo_study.py [--seed N] [--json]
"""

import argparse
import json
import sys

from attestsim.agent import TpmUnreachable
from attestsim.machine import (
    DirectTpmChannel,
    RelayTpmChannel,
    RemoteTpmSurface,
    boot,
)
from attestsim.modelcheck import CheckConfig, check
from attestsim.scenario import build_fleet

ROUTES = ("direct", "relay-golden", "relay-tampered")

BASE_DOC = {
    "name": "cuckoo-study",
    "images": {"kernel-rootkit": "kernel-5.15-rootkit"},
    "machines": [
        {"id": "victim", "agent": {}},
        {"id": "golden-host"},
        {"id": "tampered-host"},
    ],
}


def run_cell(variant: str, init_route: str, runtime_route: str, seed: int) -> str:
    doc = json.loads(json.dumps(BASE_DOC))  # deep copy
    doc["machines"][0]["agent"]["obfuscate"] = variant == "obfuscated"
    fleet = build_fleet(doc, seed)

    images = fleet.images
    golden_host = fleet.machines["golden-host"]
    tampered_host = fleet.machines["tampered-host"]
    boot(golden_host, images["uefi"], images["tboot"],
         images["kernel"], images["initramfs"])
    boot(tampered_host, images["uefi"], images["tboot"],
         images["kernel-rootkit"], images["initramfs"])

    surfaces = {
        "relay-golden": RemoteTpmSurface(golden_host),
        "relay-tampered": RemoteTpmSurface(tampered_host),
    }
    relay_rng = fleet.rng.child("relay")

    def factory(route):
        if route == "direct":
            return DirectTpmChannel
        return lambda m, s=surfaces[route]: RelayTpmChannel(m, s, relay_rng)

    agent = fleet.agents["victim"]
    agent.channel_factory = factory(init_route)
    outcome = boot(fleet.machines["victim"], images["uefi"], images["tboot"],
                   images["kernel-rootkit"], images["initramfs"],
                   agent.initialization_hook)
    if outcome.halted:
        return "halted-at-init"
    agent.channel_factory = factory(runtime_route)
    try:
        report = agent.enter_runtime()
    except TpmUnreachable:
        return "tpm-unreachable"
    return "TRUSTED" if report.trusted else report.failed_condition


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    grid = {}
    for variant in ("plain", "obfuscated"):
        for init_route in ROUTES:
            for runtime_route in ROUTES:
                grid[(variant, init_route, runtime_route)] = run_cell(
                    variant, init_route, runtime_route, args.seed
                )

    symbolic = {
        variant: check(
            CheckConfig(machines=2, tpms=2, derivation_depth=5,
                        obfuscate=variant == "obfuscated")
        )
        for variant in ("plain", "obfuscated")
    }

    if args.json:
        print(json.dumps({
            "concrete": {
                f"{v}/{i}/{r}": out for (v, i, r), out in sorted(grid.items())
            },
            "symbolic": {v: s.to_dict() for v, s in symbolic.items()},
        }, indent=2, sort_keys=True))
        return 0

    width = max(len(r) for r in ROUTES) + 2
    for variant in ("plain", "obfuscated"):
        print(f"\n=== tampered victim, {variant} protocol "
              f"(rows: init route, cols: runtime route)")
        print(" " * width + "".join(f"{r:>22}" for r in ROUTES))
        for init_route in ROUTES:
            cells = "".join(
                f"{grid[(variant, init_route, r)]:>22}" for r in ROUTES
            )
            print(f"{init_route:<{width}}{cells}")

    print("\n=== symbolic (2 machines, 2 tpms, depth 5)")
    for variant, verdict in symbolic.items():
        state = "holds" if verdict.property_holds else "VIOLATED"
        print(f"{variant:<12} trusted-implies-attached-tpm: {state} "
              f"({verdict.states_explored} states)")
        if verdict.counterexample:
            for step in verdict.counterexample["steps"]:
                print(f"    {step}")

    breach = grid[("plain", "relay-golden", "relay-golden")]
    caught = grid[("obfuscated", "relay-golden", "relay-golden")]
    print(f"\nplain bridged relay: {breach}; obfuscated bridged relay: {caught}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
