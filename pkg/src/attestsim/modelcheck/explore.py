"""Layer-synchronous breadth-first exploration and verdict reporting.

The frontier is expanded one layer at a time.  Within a layer the work is
partitioned round-robin over ``workers`` executors, but every layer ends
with a deterministic merge: successor triples are processed in frontier
order, duplicates dropped against the global visited set, and the next
frontier sorted canonically.  The verdict is therefore byte-identical for
any worker count.

A violation ends the search at its layer; among all violating states of
that first layer the reported counterexample is the one whose event trace
is lexicographically smallest, which keeps the output stable under
unrelated model changes.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .world import (
    DPCR_G,
    SPCR_G,
    Event,
    World,
    build_world,
    successors,
    violations,
)


class StateBudgetExceeded(RuntimeError):
    """The reachable graph outgrew ``max_states`` before an answer."""


@dataclass(frozen=True)
class CheckConfig:
    machines: int = 2
    tpms: int = 2
    derivation_depth: int = 5
    obfuscate: bool = False
    workers: int = 1
    max_states: int = 200_000

    def __post_init__(self):
        if self.machines < 1:
            raise ValueError("machines must be >= 1")
        if self.tpms < self.machines:
            raise ValueError("tpms must cover every machine")
        if self.derivation_depth < 0:
            raise ValueError("derivation_depth must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def variant(self) -> str:
        return "obfuscated" if self.obfuscate else "plain"


@dataclass
class Verdict:
    property_holds: bool
    states_explored: int
    layers: int
    config: CheckConfig
    counterexample: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "property": "trusted-implies-attached-tpm",
            "variant": self.config.variant,
            "bounds": {
                "machines": self.config.machines,
                "tpms": self.config.tpms,
                "derivation_depth": self.config.derivation_depth,
            },
            "workers": self.config.workers,
            "property_holds": self.property_holds,
            "states_explored": self.states_explored,
            "layers": self.layers,
            "counterexample": self.counterexample,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def event_str(event: Event) -> str:
    kind = event[0]
    args = []
    for pos, arg in enumerate(event[1:]):
        if isinstance(arg, int):
            prefix = "t" if kind == "tpm-init" or (kind == "q0" and pos == 1) else "m"
            args.append(f"{prefix}{arg}")
        else:
            args.append(str(arg))
    return f"{kind}({', '.join(args)})"


def _world_summary(world: World, violation: Tuple[int, int, int]) -> dict:
    machine_id, x, y = violation
    quote_tpm = world.tpms[x]
    return {
        "machines": [
            {
                "id": m.machine_id,
                "phase": m.phase,
                "image": m.image,
                "bound_tpm": m.bound_tpm,
                "trusted": m.trusted,
            }
            for m in world.machines
        ],
        "tpms": [
            {
                "id": t.tpm_id,
                "spcr_is_golden": t.spcr == SPCR_G,
                "dpcr_is_golden": t.dpcr == DPCR_G,
            }
            for t in world.tpms
        ],
        "spcr_is_golden": quote_tpm.spcr == SPCR_G,
        "dpcr_is_golden": quote_tpm.dpcr == DPCR_G,
        "violation": {"machine": machine_id, "x": x, "y": y},
    }


def _expand(chunk: List[Tuple[int, World]], obfuscate: bool, depth: int):
    return [
        (idx, successors(world, obfuscate, depth)) for idx, world in chunk
    ]


def check(config: CheckConfig) -> Verdict:
    """Explore exhaustively; return the verdict with a minimal witness."""
    initial = build_world(config.machines, config.tpms)
    visited: Dict[str, int] = {initial.canonical_key(): 0}
    parents: Dict[str, Tuple[Optional[str], Optional[Event]]] = {
        initial.canonical_key(): (None, None)
    }
    frontier: List[World] = [initial]
    layers = 0
    witnesses: List[Tuple[Tuple[str, ...], World, Tuple[int, int, int]]] = []

    while frontier and not witnesses:
        layers += 1
        indexed = list(enumerate(frontier))
        chunks = [indexed[i :: config.workers] for i in range(config.workers)]
        chunks = [c for c in chunks if c]
        if len(chunks) <= 1:
            results = [_expand(c, config.obfuscate, config.derivation_depth) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(
                    pool.map(
                        lambda c: _expand(c, config.obfuscate, config.derivation_depth),
                        chunks,
                    )
                )

        merged: List[Tuple[int, List[Tuple[Event, World]]]] = []
        for chunk_result in results:
            merged.extend(chunk_result)
        merged.sort(key=lambda item: item[0])  # frontier order, not worker order

        next_frontier: List[World] = []
        for idx, succ in merged:
            parent_key = frontier[idx].canonical_key()
            for event, child in succ:
                child_key = child.canonical_key()
                if child_key in visited:
                    continue
                visited[child_key] = len(visited)
                if len(visited) > config.max_states:
                    raise StateBudgetExceeded(
                        f"more than {config.max_states} states at layer {layers}"
                    )
                parents[child_key] = (parent_key, event)
                next_frontier.append(child)
                found = violations(child)
                if found:
                    trace = _trace(parents, child_key)
                    witnesses.append((tuple(map(repr, trace)), child, found[0]))
        frontier = sorted(next_frontier, key=World.canonical_key)

    if not witnesses:
        return Verdict(
            property_holds=True,
            states_explored=len(visited),
            layers=layers,
            config=config,
        )

    witnesses.sort(key=lambda w: w[0])
    _, world, violation = witnesses[0]
    trace = _trace(parents, world.canonical_key())
    return Verdict(
        property_holds=False,
        states_explored=len(visited),
        layers=layers,
        config=config,
        counterexample={
            "steps": [event_str(e) for e in trace],
            "events": [list(e) for e in trace],
            "world": _world_summary(world, violation),
        },
    )


def _trace(parents, key: str) -> List[Event]:
    events: List[Event] = []
    while True:
        parent_key, event = parents[key]
        if parent_key is None:
            break
        events.append(event)
        key = parent_key
    events.reverse()
    return events


def replay(config: CheckConfig, events: List) -> World:
    """Re-execute a counterexample event list from the initial world.

    Accepts events as tuples or JSON-decoded lists; raises ``ValueError``
    if any step is not enabled where the trace claims it is.
    """
    world = build_world(config.machines, config.tpms)
    for raw in events:
        event = tuple(raw)
        for candidate, child in successors(
            world, config.obfuscate, config.derivation_depth
        ):
            if candidate == event:
                world = child
                break
        else:
            raise ValueError(f"event {event_str(event)} is not enabled at this state")
    return world


def check_property(config: CheckConfig) -> bool:
    return check(config).property_holds


def enumerate_reachable(config: CheckConfig):
    """Yield every reachable world once (serial, for invariant sweeps)."""
    initial = build_world(config.machines, config.tpms)
    seen = {initial.canonical_key()}
    stack = [initial]
    while stack:
        world = stack.pop()
        yield world
        for _, child in successors(world, config.obfuscate, config.derivation_depth):
            key = child.canonical_key()
            if key not in seen:
                seen.add(key)
                if len(seen) > config.max_states:
                    raise StateBudgetExceeded(f"more than {config.max_states} states")
                stack.append(child)
