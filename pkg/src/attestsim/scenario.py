"""YAML-scripted fleet runs: build machines, execute timed actions, poll.

A scenario file describes a small fleet and a script of timed actions on a
shared virtual clock, and optionally a polling block and a symbolic-check
block.  ``run_scenario`` executes it deterministically for a given seed and
returns a :class:`ScenarioResult` whose JSON form is byte-identical across
runs with the same (file, seed) pair.

Schema (all durations in virtual milliseconds)::

    name: honest-fleet
    images:                      # optional extra (unsigned) software images
      kernel-rootkit: "kernel-5.15-rootkit"
    machines:
      - id: m0
        dc: dc1                  # default dc1
        kernel: golden           # golden | an images key
        initramfs: golden
        agent:                   # omit for agentless machines
          obfuscate: true        # default true
          static_whitelist: [0]  # default [0]
    network:                     # optional; single-DC fleets can skip it
      links:
        - {between: [dc1, dc1], base_ms: 0.3, jitter_ms: 0.2}
      adversary: {added_delay_ms: 0, can_drop: false, can_modify: false,
                  relay_targets: []}
    beacons:
      - {endpoint: beacon-dc1, dc: dc1}
    policies:
      golden: builtin:golden     # generated from the fleet's golden values
      custom: |                  # or a literal policy document
        chain: ...
    script:
      - {at: 0, action: boot, machine: m0}          # hook: false skips init
      - {at: 50, action: establish, machine: m0}
      - {at: 60, action: deploy-policy, machine: m0, policy: golden}
      - {at: 70, action: verify, machine: m0, policy: golden}
      - {at: 80, action: load-file, machine: m0, path: /opt/tool,
         content: "...", signed: false}
      - {at: 90, action: reboot, machine: m0}
      - {at: 95, action: copy-disk, from: m0, to: m1}
      - {at: 99, action: relay, machine: m0, target: m1}
      - {at: 100, action: extend-pcr, machine: m0, pcr: 0, value: drift}
    poll: {period_ms: 1000, rounds: 5, miss_threshold: 3, targets: [m0]}
    modelcheck: {variant: plain, machines: 2, tpms: 2, depth: 5}

Actions and polls are merged on the timeline; equal timestamps run script
actions first, in file order.  Every random draw flows from one seeded
generator, which is what makes reports reproducible.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import yaml

from . import ima
from .agent import Agent, AgentApi, TpmUnreachable, TrustReport
from .controller import Alert, Controller
from .crypto import (
    ZERO_DIGEST,
    KeyPair,
    Rng,
    generate_keypair,
    issue_certificate,
    sha256,
    sign,
)
from .machine import (
    DirectTpmChannel,
    Machine,
    RelayTpmChannel,
    RemoteTpmSurface,
    SoftwareImage,
    boot,
    reboot_machine,
)
from .modelcheck import CheckConfig, check
from .netsim import (
    AdversaryModel,
    BeaconService,
    LatencyModel,
    NetworkModel,
    VirtualClock,
)
from .policy import pem_encode
from .tpm import TpmState, extend_digest

logger = logging.getLogger(__name__)

AGENT_BIN = SoftwareImage("attest-agent", b"attest-agent-bin-2.3")

GOLDEN_STACK = {
    "uefi": b"uefi-firmware-1.0",
    "tboot": b"drtm-loader-1.9",
    "kernel": b"kernel-5.15-golden",
    "initramfs": b"initramfs-agent-1.0",
}

_ACTIONS = frozenset(
    {"boot", "reboot", "establish", "deploy-policy", "verify", "load-file",
     "copy-disk", "relay", "extend-pcr"}
)


class ScenarioError(Exception):
    """The scenario file does not parse or references missing pieces."""


# --------------------------------------------------------------------------
# result type
# --------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    name: str
    seed: int
    timelines: Dict[str, List[dict]]
    alerts: List[Alert]
    verdicts: Dict[str, dict]
    explorer: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "timelines": self.timelines,
            "alerts": [a.to_dict() for a in self.alerts],
            "verdicts": self.verdicts,
            "explorer": self.explorer,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def all_compliant(self) -> bool:
        """No failed establishment, no machine left compromised, no alert."""
        if any(a.kind in ("violation", "unreachable") for a in self.alerts):
            return False
        for verdict in self.verdicts.values():
            if verdict.get("trusted") is False or verdict.get("compromised"):
                return False
        return True


# --------------------------------------------------------------------------
# fleet construction
# --------------------------------------------------------------------------


@dataclass
class _Fleet:
    rng: Rng
    clock: VirtualClock
    images: Dict[str, SoftwareImage]
    golden_statics: Dict[int, bytes]
    golden_dynamics: Dict[int, bytes]
    machines: Dict[str, Machine]
    agents: Dict[str, Agent]
    apis: Dict[str, AgentApi]
    tpm_ca_pub: bytes
    platform_ca: KeyPair
    net: Optional[NetworkModel] = None
    beacons: Dict[str, BeaconService] = field(default_factory=dict)
    policies: Dict[str, str] = field(default_factory=dict)
    deployed: Dict[tuple, str] = field(default_factory=dict)  # (machine, name) -> id

    def machine(self, machine_id) -> Machine:
        try:
            return self.machines[machine_id]
        except KeyError:
            raise ScenarioError(f"unknown machine {machine_id!r}")

    def agent(self, machine_id) -> Agent:
        try:
            return self.agents[machine_id]
        except KeyError:
            raise ScenarioError(f"machine {machine_id!r} has no agent")


def _golden_policy(fleet: _Fleet) -> str:
    entries = sorted({**fleet.golden_statics, **fleet.golden_dynamics}.items())
    doc = {
        "chain": pem_encode(fleet.tpm_ca_pub),
        "whitelist": {
            "pcrs": [{"id": i, "sha256": v.hex()} for i, v in entries]
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


def _build_network(spec: dict, machines: List[dict]) -> NetworkModel:
    links = {}
    for entry in spec.get("links", []):
        try:
            a, b = entry["between"]
        except (KeyError, ValueError, TypeError):
            raise ScenarioError(f"network link needs 'between: [dcA, dcB]': {entry!r}")
        links[(a, b)] = LatencyModel(
            base_ms=float(entry.get("base_ms", 1.0)),
            jitter_ms=float(entry.get("jitter_ms", 0.0)),
        )
    adv = None
    if "adversary" in spec:
        a = spec["adversary"] or {}
        adv = AdversaryModel(
            added_delay_ms=float(a.get("added_delay_ms", 0.0)),
            can_drop=bool(a.get("can_drop", False)),
            can_modify=bool(a.get("can_modify", False)),
            relay_targets=tuple(a.get("relay_targets", ())),
        )
    placement = {}
    net = NetworkModel(links, placement, adv)
    for m in machines:
        net.place(f"agent-{m['id']}", m.get("dc", "dc1"))
    net.place("controller", machines[0].get("dc", "dc1") if machines else "dc1")
    return net


def build_fleet(doc: dict, seed: int) -> _Fleet:
    rng = Rng(seed)
    clock = VirtualClock()
    platform_ca = generate_keypair(rng.child("platform-ca"))
    tpm_ca = generate_keypair(rng.child("tpm-ca"))

    images = {
        "uefi": SoftwareImage("uefi", GOLDEN_STACK["uefi"],
                              sign(GOLDEN_STACK["uefi"], platform_ca)),
        "tboot": SoftwareImage("tboot", GOLDEN_STACK["tboot"],
                               sign(GOLDEN_STACK["tboot"], platform_ca)),
        "kernel": SoftwareImage("kernel", GOLDEN_STACK["kernel"]),
        "initramfs": SoftwareImage("initramfs", GOLDEN_STACK["initramfs"]),
    }
    for name, content in (doc.get("images") or {}).items():
        if name in images:
            raise ScenarioError(f"image name {name!r} shadows a golden image")
        images[name] = SoftwareImage(name, str(content).encode())

    golden = {k: images[k].measurement for k in GOLDEN_STACK}
    golden_statics = {0: extend_digest(ZERO_DIGEST, images["uefi"].measurement)}
    golden_dynamics = {
        17: extend_digest(ZERO_DIGEST, images["tboot"].measurement),
        18: extend_digest(ZERO_DIGEST, images["kernel"].measurement),
        19: extend_digest(ZERO_DIGEST, images["initramfs"].measurement),
    }

    machine_specs = doc.get("machines") or []
    if not machine_specs:
        raise ScenarioError("scenario defines no machines")

    net = None
    if "network" in doc:
        net = _build_network(doc["network"] or {}, machine_specs)

    beacons: Dict[str, BeaconService] = {}
    for b in doc.get("beacons") or []:
        endpoint = b["endpoint"]
        pair = generate_keypair(rng.child(f"beacon-{endpoint}"))
        cert = issue_certificate(platform_ca, pair.public, "beacon")
        beacons[endpoint] = BeaconService(endpoint, pair, cert, VirtualClock())
        if net is not None:
            net.place(endpoint, b.get("dc", "dc1"))

    machines: Dict[str, Machine] = {}
    agents: Dict[str, Agent] = {}
    apis: Dict[str, AgentApi] = {}
    for spec in machine_specs:
        mid = spec["id"]
        if mid in machines:
            raise ScenarioError(f"duplicate machine id {mid!r}")
        mrng = rng.child(f"machine-{mid}")
        tpm = TpmState(f"tpm-{mid}", tpm_ca, mrng)
        machine = Machine(mid, tpm, platform_ca.public, mrng, dc=spec.get("dc", "dc1"))
        machine.set_golden(golden)
        machines[mid] = machine
        agent_spec = spec.get("agent")
        if agent_spec is not None:
            agent_spec = agent_spec or {}
            agent = Agent(
                machine,
                AGENT_BIN,
                rng.child(f"agent-{mid}"),
                golden_statics,
                golden_dynamics,
                static_whitelist=tuple(agent_spec.get("static_whitelist", (0,))),
                obfuscate=bool(agent_spec.get("obfuscate", True)),
                clock=clock,
            )
            if net is not None:
                agent.attach_network(net, beacons, f"agent-{mid}")
            agents[mid] = agent
            apis[mid] = AgentApi(agent)

    fleet = _Fleet(
        rng=rng,
        clock=clock,
        images=images,
        golden_statics=golden_statics,
        golden_dynamics=golden_dynamics,
        machines=machines,
        agents=agents,
        apis=apis,
        tpm_ca_pub=tpm_ca.public,
        platform_ca=platform_ca,
        net=net,
        beacons=beacons,
    )
    for name, body in (doc.get("policies") or {}).items():
        if body == "builtin:golden":
            fleet.policies[name] = _golden_policy(fleet)
        else:
            fleet.policies[name] = str(body)
    return fleet


# --------------------------------------------------------------------------
# script execution
# --------------------------------------------------------------------------


def _report_dict(report: TrustReport) -> dict:
    return {
        "trusted": report.trusted,
        "failed_condition": report.failed_condition,
        "detail": report.detail,
    }


class _Runner:
    def __init__(self, fleet: _Fleet):
        self.fleet = fleet
        self.timelines: Dict[str, List[dict]] = {m: [] for m in fleet.machines}
        self.verdicts: Dict[str, dict] = {}
        self.verify_rng = fleet.rng.child("verify-nonces")

    def note(self, machine_id: str, event: str, detail: dict) -> None:
        self.timelines[machine_id].append(
            {"t_ms": self.fleet.clock.now_ms, "event": event, **detail}
        )

    # each action handler returns nothing; effects land in the timelines

    def run(self, step: dict) -> None:
        action = step.get("action")
        if action not in _ACTIONS:
            raise ScenarioError(f"unknown action {action!r}")
        getattr(self, "act_" + action.replace("-", "_"))(step)

    def act_boot(self, step: dict) -> None:
        fleet = self.fleet
        machine = fleet.machine(step["machine"])
        hook = None
        if step.get("hook", True) and step["machine"] in fleet.agents:
            hook = fleet.agents[step["machine"]].initialization_hook
        kernel = fleet.images[step.get("kernel", "kernel")]
        initramfs = fleet.images[step.get("initramfs", "initramfs")]
        outcome = boot(machine, fleet.images["uefi"], fleet.images["tboot"],
                       kernel, initramfs, hook)
        self.note(step["machine"], "boot",
                  {"halted": outcome.halted, "reason": outcome.reason,
                   "hook": hook is not None})

    def act_reboot(self, step: dict) -> None:
        reboot_machine(self.fleet.machine(step["machine"]))
        self.note(step["machine"], "reboot", {})

    def act_establish(self, step: dict) -> None:
        mid = step["machine"]
        agent = self.fleet.agent(mid)
        if self.fleet.machine(mid).state != "runtime":
            verdict = {"trusted": False, "failed_condition": None,
                       "detail": "machine is not at os runtime"}
        else:
            try:
                report = agent.enter_runtime()
                verdict = _report_dict(report)
            except TpmUnreachable as exc:
                verdict = {"trusted": False, "failed_condition": None,
                           "detail": f"tpm unreachable: {exc}"}
        self.verdicts[mid] = verdict
        self.note(mid, "establish", verdict)

    def act_deploy_policy(self, step: dict) -> None:
        fleet = self.fleet
        mid, name = step["machine"], step["policy"]
        if name not in fleet.policies:
            raise ScenarioError(f"unknown policy {name!r}")
        resp = fleet.apis[mid].handle("POST", "/policy", fleet.policies[name])
        if resp.status == 200:
            fleet.deployed[(mid, name)] = resp.body["policy_id"]
        self.note(mid, "deploy-policy",
                  {"policy": name, "status": resp.status, **resp.body})

    def act_verify(self, step: dict) -> None:
        fleet = self.fleet
        mid, name = step["machine"], step["policy"]
        policy_id = fleet.deployed.get((mid, name))
        if policy_id is None:
            raise ScenarioError(f"policy {name!r} was never deployed to {mid}")
        nonce = self.verify_rng.bytes(32)
        resp = fleet.apis[mid].handle(
            "GET", f"/policy/{policy_id}?nonce={nonce.hex()}"
        )
        self.note(mid, "verify",
                  {"policy": name, "status": resp.status, "verdict": resp.body})

    def act_load_file(self, step: dict) -> None:
        fleet = self.fleet
        machine = fleet.machine(step["machine"])
        content = str(step.get("content", "")).encode()
        signature = None
        if step.get("signed", False):
            signature = sign(sha256(content), fleet.platform_ca)
        _event, loaded = machine.load_file(step["path"], content, signature)
        self.note(step["machine"], "load-file",
                  {"path": step["path"], "loaded": loaded})

    def act_copy_disk(self, step: dict) -> None:
        src = self.fleet.machine(step["from"])
        dst = self.fleet.machine(step["to"])
        dst.restore_disk(src.snapshot_disk())
        self.note(step["to"], "copy-disk", {"from": step["from"]})

    def act_relay(self, step: dict) -> None:
        """Hijack a machine's TPM driver: route its traffic to another host.

        ``target: null`` hands the driver back (direct channel again).
        """
        fleet = self.fleet
        agent = fleet.agent(step["machine"])
        target_id = step.get("target")
        if target_id is None:
            agent.channel_factory = DirectTpmChannel
            self.note(step["machine"], "relay", {"target": None})
            return
        target = fleet.machine(target_id)
        relay_rng = fleet.rng.child(f"relay-{step['machine']}-{target_id}")

        def factory(machine, _target=target, _rng=relay_rng):
            return RelayTpmChannel(machine, RemoteTpmSurface(_target), _rng)

        agent.channel_factory = factory
        self.note(step["machine"], "relay", {"target": target_id})

    def act_extend_pcr(self, step: dict) -> None:
        machine = self.fleet.machine(step["machine"])
        value = sha256(str(step.get("value", "")).encode())
        machine.tpm.pcr_extend(int(step["pcr"]), value, locality=0)
        self.note(step["machine"], "extend-pcr", {"pcr": int(step["pcr"])})


# --------------------------------------------------------------------------
# the runner
# --------------------------------------------------------------------------


def load_scenario(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}")
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario is not valid yaml: {exc}")
    if not isinstance(doc, dict):
        raise ScenarioError("scenario root must be a mapping")
    return doc


def run_scenario(path: str, seed: int = 0) -> ScenarioResult:
    """Execute one scenario file; deterministic for a given (file, seed)."""
    doc = load_scenario(path)
    return run_scenario_doc(doc, seed)


def run_scenario_doc(doc: dict, seed: int = 0) -> ScenarioResult:
    result, _fleet, _controller = execute_scenario(doc, seed)
    return result


def execute_scenario(doc: dict, seed: int = 0):
    """Like :func:`run_scenario_doc` but also returns the live fleet and
    controller, so callers can keep interacting after the script ends."""
    fleet = build_fleet(doc, seed)
    runner = _Runner(fleet)

    steps = []
    for index, step in enumerate(doc.get("script") or []):
        try:
            at = float(step["at"])
        except (KeyError, TypeError, ValueError):
            raise ScenarioError(f"script step {index} needs a numeric 'at'")
        steps.append((at, 0, index, step))

    poll_spec = doc.get("poll") or {}
    controller = None
    poll_rng = fleet.rng.child("poll-nonces")
    if poll_spec:
        controller = Controller(
            clock=fleet.clock,
            miss_threshold=int(poll_spec.get("miss_threshold", 3)),
            net=fleet.net,
        )
        targets = poll_spec.get("targets")
        if targets is None:
            targets = sorted(fleet.agents)
        for mid in targets:
            if mid not in fleet.apis:
                raise ScenarioError(f"poll target {mid!r} has no agent")
            endpoint = f"agent-{mid}" if fleet.net is not None else None
            controller.register(mid, fleet.apis[mid], endpoint)
        period = float(poll_spec.get("period_ms", 1000.0))
        rounds = int(poll_spec.get("rounds", 5))
        if period <= 0 or rounds < 0:
            raise ScenarioError("poll period must be positive, rounds >= 0")
        for k in range(1, rounds + 1):
            steps.append((period * k, 1, k, {"action": "_poll"}))

    steps.sort(key=lambda s: (s[0], s[1], s[2]))
    for at, _tier, _index, step in steps:
        if at > fleet.clock.now_ms:
            fleet.clock.advance(at - fleet.clock.now_ms)
        if step["action"] == "_poll":
            # a poll round picks up freshly deployed policies first
            for (mid, _name), policy_id in fleet.deployed.items():
                if mid in controller.targets():
                    controller.set_policy(mid, policy_id)
            controller.poll_round(poll_rng)
        else:
            runner.run(step)

    # machines whose agent latched a compromise after establishment
    for mid, agent in fleet.agents.items():
        verdict = runner.verdicts.setdefault(mid, {})
        verdict["compromised"] = agent.compromised

    explorer = None
    if "modelcheck" in doc:
        spec = doc["modelcheck"] or {}
        config = CheckConfig(
            machines=int(spec.get("machines", 2)),
            tpms=int(spec.get("tpms", 2)),
            derivation_depth=int(spec.get("depth", 5)),
            obfuscate=spec.get("variant", "plain") == "obfuscated",
        )
        explorer = check(config).to_dict()

    result = ScenarioResult(
        name=str(doc.get("name", "unnamed")),
        seed=seed,
        timelines=runner.timelines,
        alerts=list(controller.alerts) if controller else [],
        verdicts=runner.verdicts,
        explorer=explorer,
    )
    return result, fleet, controller


# --------------------------------------------------------------------------
# synthetic measurement logs
# --------------------------------------------------------------------------


def generate_ima_log(seed: int, events: int) -> tuple:
    """Seeded ASCII measurement log; returns (log bytes, aggregate digest)."""
    manifest = ima.generate_boot_manifest(seed, events)
    return ima.render_fixture_log(manifest)
