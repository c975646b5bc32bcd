"""Two-phase in-enclave attestation agent.

Phase 1 (``agent_init``) runs from the initramfs hook on first boot: it
mints an attestation key, proves key/EK co-residence via credential
activation, quotes the platform, obfuscates the whitelisted static PCRs by
extending each with a random value that is then discarded, re-quotes, and
seals the whole baseline to the enclave sealing key.  After the extend the
unobfuscated static values exist nowhere outside the sealed blob.

Phase 2 (``establish_trust``) runs when the runtime agent starts and
re-derives trust from four checks, reported in order of first failure:

* ``c1-unseal``            the sealed baseline opens on this hardware
* ``c2-dynamic-pcr``       sealed, golden and quoted dynamic PCRs agree
* ``c3-obfuscated-static-pcr``  the quote is signed by the initialized key
                           and reproduces the obfuscated static values
* ``c4-reboot-counter``    the TPM has not rebooted since initialization

A quote relayed from another machine fails c3 in the obfuscated variant:
the foreign TPM can show golden static values but not the obfuscated ones,
and replaying the extend is impossible because the random mask was never
stored.  With ``obfuscate=False`` the scheme degrades to comparing raw
static values, which a relay to a well-booted host satisfies — that
variant exists so the regression can be demonstrated end to end.

The :class:`Agent` wraps both phases plus the serving loop: periodic
refresh with compromise latching, policy deployment/evaluation, and a
small HTTP-shaped facade (:class:`AgentApi`).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import ima
from .crypto import Certificate, Rng, UnsealError, seal, unseal
from .machine import (
    DirectTpmChannel,
    EnclaveContext,
    InitHookFailure,
    Machine,
    SoftwareImage,
    run_enclave,
)
from .netsim import (
    BeaconError,
    BeaconService,
    NetworkModel,
    VirtualClock,
    measure_proximity,
)
from .policy import (
    PlatformView,
    Policy,
    PolicyRegistry,
    PolicyParseError,
    UnknownPolicyId,
    evaluate,
    parse_policy,
)
from .tpm import (
    DYNAMIC_PCRS,
    IMA_PCR,
    NONCE_LEN,
    ActivationError,
    Quote,
    TpmError,
    composite_digest,
    extend_digest,
    make_credential,
)

logger = logging.getLogger(__name__)

CONFIG_DISK_KEY = "agent/config.sealed"
DEFAULT_CACHE_PERIOD_MS = 500.0

CONDITION_UNSEAL = "c1-unseal"
CONDITION_DYNAMIC = "c2-dynamic-pcr"
CONDITION_STATIC = "c3-obfuscated-static-pcr"
CONDITION_REBOOT = "c4-reboot-counter"


class AgentError(Exception):
    pass


class InitFailure(AgentError):
    """Phase-1 abort; ``reason`` is activation-failed, quote-invalid or
    obfuscation-mismatch."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class TpmUnreachable(AgentError):
    pass


class UntrustedPlatform(AgentError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# --------------------------------------------------------------------------
# sealed baseline
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SealedConfig:
    """Everything phase 2 needs, sealed to (machine, agent binary)."""

    aik_pub: bytes
    ek_cert: Certificate
    clock: int
    reboot_counter: int
    originals: Dict[int, bytes]   # static pcr -> value before obfuscation
    obfuscated: Dict[int, bytes]  # static pcr -> value after obfuscation
    dynamics: Dict[int, bytes]    # dynamic pcr -> value at initialization

    def to_bytes(self) -> bytes:
        doc = {
            "aik_pub": self.aik_pub.hex(),
            "ek_cert": {
                "subject": self.ek_cert.subject.hex(),
                "issuer": self.ek_cert.issuer.hex(),
                "role": self.ek_cert.role,
                "signature": self.ek_cert.signature.hex(),
            },
            "clock": self.clock,
            "reboot_counter": self.reboot_counter,
            "originals": {str(k): v.hex() for k, v in self.originals.items()},
            "obfuscated": {str(k): v.hex() for k, v in self.obfuscated.items()},
            "dynamics": {str(k): v.hex() for k, v in self.dynamics.items()},
        }
        return json.dumps(doc, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedConfig":
        doc = json.loads(raw.decode())
        cert = doc["ek_cert"]
        return cls(
            aik_pub=bytes.fromhex(doc["aik_pub"]),
            ek_cert=Certificate(
                subject=bytes.fromhex(cert["subject"]),
                issuer=bytes.fromhex(cert["issuer"]),
                role=cert["role"],
                signature=bytes.fromhex(cert["signature"]),
            ),
            clock=int(doc["clock"]),
            reboot_counter=int(doc["reboot_counter"]),
            originals={int(k): bytes.fromhex(v) for k, v in doc["originals"].items()},
            obfuscated={int(k): bytes.fromhex(v) for k, v in doc["obfuscated"].items()},
            dynamics={int(k): bytes.fromhex(v) for k, v in doc["dynamics"].items()},
        )


def _checked_quote(channel, aik_pub: bytes, nonce: bytes, selection: Sequence[int]):
    """Quote plus PCR read-back, verified for internal consistency.

    The signature is checked under the key *inside* the quote; whether that
    key is the expected one is a trust-condition question, not a transport
    one, so a relayed quote passes here and fails c3 later.
    """
    quote = channel.quote(aik_pub, nonce, selection)
    values = {i: channel.read_pcr(i) for i in selection}
    consistent = (
        quote.nonce == nonce
        and quote.selection == tuple(selection)
        and quote.pcr_digest == composite_digest([values[i] for i in selection])
        and quote.verify_signature()
    )
    return quote, values, consistent


def _selection(static_indices, dynamic_indices) -> Tuple[int, ...]:
    """Canonical quote selection: whitelisted statics, the measurement-log
    register, then the dynamic bank."""
    statics = sorted(set(static_indices) | {IMA_PCR})
    return tuple(statics) + tuple(sorted(dynamic_indices))


# --------------------------------------------------------------------------
# phase 1: initialization
# --------------------------------------------------------------------------


def agent_init(
    ctx: EnclaveContext,
    channel,
    rng: Rng,
    static_whitelist: Sequence[int],
    obfuscate: bool = True,
) -> SealedConfig:
    """First-boot initialization inside the init enclave.

    Draws, in order: the attestation-key seed, the activation secret, the
    first quote nonce, the obfuscation mask, the second quote nonce.  The
    mask is zeroed before returning; only the sealed blob can tie the
    obfuscated register values back to the originals.
    """
    if ctx.phase != "init":
        raise ValueError("initialization must run in the init-phase enclave")
    whitelist = sorted(set(int(i) for i in static_whitelist))
    if IMA_PCR in whitelist:
        raise ValueError(
            f"pcr {IMA_PCR} aggregates the measurement log and cannot be"
            " obfuscated, or the log could never be re-verified"
        )
    for idx in whitelist:
        if not 0 <= idx <= 15:
            raise ValueError(f"obfuscation whitelist accepts static pcrs only, got {idx}")

    aik_pub = channel.create_aik(rng)
    secret = rng.bytes(32)
    ek_cert = channel.ek_certificate()
    challenge = make_credential(ek_cert, aik_pub, secret)
    try:
        recovered = channel.activate_credential(aik_pub, challenge)
    except ActivationError as exc:
        raise InitFailure("activation-failed", exc.reason) from exc
    if recovered != secret:
        raise InitFailure("activation-failed", "activation returned a different secret")

    selection = _selection(whitelist, DYNAMIC_PCRS)
    nonce0 = rng.bytes(NONCE_LEN)
    quote0, values0, ok = _checked_quote(channel, aik_pub, nonce0, selection)
    if not ok:
        raise InitFailure("quote-invalid", "baseline quote failed verification")

    originals = {i: values0[i] for i in whitelist}
    if obfuscate:
        mask = bytearray(rng.bytes(32))
        for idx in whitelist:
            channel.pcr_extend(idx, bytes(mask))
        nonce1 = rng.bytes(NONCE_LEN)
        quote1, values1, ok = _checked_quote(channel, aik_pub, nonce1, selection)
        if not ok:
            raise InitFailure("quote-invalid", "post-obfuscation quote failed verification")
        for idx in whitelist:
            expected = extend_digest(originals[idx], bytes(mask))
            if values1[idx] != expected:
                raise InitFailure(
                    "obfuscation-mismatch",
                    f"pcr {idx} did not take the obfuscation extend",
                )
        for idx in DYNAMIC_PCRS:
            if values1[idx] != values0[idx]:
                raise InitFailure(
                    "obfuscation-mismatch", f"dynamic pcr {idx} moved during obfuscation"
                )
        for i in range(len(mask)):  # discard the mask for good
            mask[i] = 0
        obfuscated = {i: values1[i] for i in whitelist}
        closing = quote1
    else:
        obfuscated = dict(originals)
        closing = quote0

    config = SealedConfig(
        aik_pub=aik_pub,
        ek_cert=ek_cert,
        clock=closing.clock,
        reboot_counter=closing.reboot_counter,
        originals=originals,
        obfuscated=obfuscated,
        dynamics={i: values0[i] for i in DYNAMIC_PCRS},
    )
    ctx.machine.disk[CONFIG_DISK_KEY] = seal(config.to_bytes(), ctx.seal_key())
    logger.info(
        "agent initialized on %s (%s statics obfuscated)",
        ctx.machine.machine_id,
        len(whitelist) if obfuscate else "no",
    )
    return config


# --------------------------------------------------------------------------
# phase 2: trust establishment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrustReport:
    trusted: bool
    failed_condition: Optional[str]
    detail: str = ""
    config: Optional[SealedConfig] = None
    quote: Optional[Quote] = None
    pcr_values: Dict[int, bytes] = field(default_factory=dict)


def establish_trust(
    ctx: EnclaveContext,
    channel,
    rng: Rng,
    golden_statics: Dict[int, bytes],
    golden_dynamics: Dict[int, bytes],
    obfuscate: bool = True,
) -> TrustReport:
    """Runtime trust establishment against the sealed baseline.

    Checks c1..c4 in order and names the first failure.  ``golden_statics``
    and ``golden_dynamics`` are the fleet launch-configuration values the
    platform is expected to have measured.
    """
    blob = ctx.machine.disk.get(CONFIG_DISK_KEY)
    if blob is None:
        return TrustReport(False, CONDITION_UNSEAL, "no sealed baseline on disk")
    try:
        config = SealedConfig.from_bytes(unseal(blob, ctx.seal_key()))
    except (UnsealError, ValueError, KeyError) as exc:
        return TrustReport(False, CONDITION_UNSEAL, f"sealed baseline rejected: {exc}")

    selection = _selection(config.originals, config.dynamics)
    nonce = rng.bytes(NONCE_LEN)
    try:
        quote, values, ok = _checked_quote(channel, config.aik_pub, nonce, selection)
    except TpmError as exc:
        raise TpmUnreachable(str(exc)) from exc
    if not ok:
        # an unverifiable quote cannot certify the dynamic bank
        return TrustReport(
            False, CONDITION_DYNAMIC, "quote failed verification", config
        )

    for idx in sorted(config.dynamics):
        sealed = config.dynamics[idx]
        if not (sealed == golden_dynamics.get(idx) == values.get(idx)):
            return TrustReport(
                False,
                CONDITION_DYNAMIC,
                f"dynamic pcr {idx} disagrees across sealed/golden/quoted values",
                config,
                quote,
                values,
            )

    if quote.aik_pub != config.aik_pub:
        return TrustReport(
            False,
            CONDITION_STATIC,
            "quote signed by a key other than the initialized one",
            config,
            quote,
            values,
        )
    for idx in sorted(config.originals):
        if config.originals[idx] != golden_statics.get(idx):
            return TrustReport(
                False,
                CONDITION_STATIC,
                f"sealed baseline for static pcr {idx} is not the golden value",
                config,
                quote,
                values,
            )
        expected = config.obfuscated[idx] if obfuscate else config.originals[idx]
        if values.get(idx) != expected:
            return TrustReport(
                False,
                CONDITION_STATIC,
                f"static pcr {idx} does not show the expected value",
                config,
                quote,
                values,
            )

    if quote.reboot_counter != config.reboot_counter:
        return TrustReport(
            False,
            CONDITION_REBOOT,
            f"tpm rebooted {quote.reboot_counter - config.reboot_counter} time(s)"
            " since initialization",
            config,
            quote,
            values,
        )

    return TrustReport(True, None, "", config, quote, values)


# --------------------------------------------------------------------------
# the serving agent
# --------------------------------------------------------------------------


@dataclass
class NetworkAttachment:
    net: NetworkModel
    beacons: Dict[str, BeaconService]
    endpoint: str


class Agent:
    """Initialization hook plus the runtime attestation service.

    One instance is bound to one machine and one agent binary.  The boot
    pipeline calls :meth:`initialization_hook`; once the OS is up,
    :meth:`enter_runtime` re-establishes trust and the controller drives
    :meth:`refresh` / the :class:`AgentApi` endpoints.
    """

    def __init__(
        self,
        machine: Machine,
        binary: SoftwareImage,
        rng: Rng,
        golden_statics: Dict[int, bytes],
        golden_dynamics: Dict[int, bytes],
        static_whitelist: Sequence[int] = (0,),
        obfuscate: bool = True,
        clock: Optional[VirtualClock] = None,
        cache_period_ms: float = DEFAULT_CACHE_PERIOD_MS,
        channel_factory=None,
    ):
        self.machine = machine
        self.binary = binary
        self.rng = rng
        self.golden_statics = dict(golden_statics)
        self.golden_dynamics = dict(golden_dynamics)
        self.static_whitelist = tuple(sorted(set(static_whitelist)))
        self.obfuscate = obfuscate
        self.clock = clock or VirtualClock()
        self.cache_period_ms = cache_period_ms
        self.channel_factory = channel_factory or DirectTpmChannel
        self.registry = PolicyRegistry()
        self.network: Optional[NetworkAttachment] = None

        self._ctx: Optional[EnclaveContext] = None
        self._channel = None
        self._config: Optional[SealedConfig] = None
        self._quote: Optional[Quote] = None
        self._pcr_values: Dict[int, bytes] = {}
        self._ima_cache = ima.ImaCacheState()
        self._events: List[Tuple[bytes, str, Optional[bytes]]] = []
        self._compromised: Optional[str] = None  # log-tampered | pcr-changed | rebooted
        self._stale = False
        self._last_refresh_ms: Optional[float] = None

    # -- lifecycle ---------------------------------------------------------

    def attach_network(self, net: NetworkModel, beacons: Dict[str, BeaconService],
                       endpoint: str) -> None:
        self.network = NetworkAttachment(net, dict(beacons), endpoint)

    def initialization_hook(self, machine: Machine) -> None:
        """Initramfs hook: run phase 1, abort the boot if it fails."""
        ctx = run_enclave(machine, self.binary, "init")
        channel = self.channel_factory(machine)
        try:
            agent_init(ctx, channel, self.rng, self.static_whitelist, self.obfuscate)
        except (InitFailure, TpmError) as exc:
            raise InitHookFailure(str(exc)) from exc

    def enter_runtime(self) -> TrustReport:
        """Phase 2: establish trust and arm the serving state."""
        ctx = run_enclave(self.machine, self.binary, "runtime")
        channel = self.channel_factory(self.machine)
        report = establish_trust(
            ctx,
            channel,
            self.rng,
            self.golden_statics,
            self.golden_dynamics,
            self.obfuscate,
        )
        if not report.trusted:
            logger.info(
                "trust establishment failed on %s: %s (%s)",
                self.machine.machine_id,
                report.failed_condition,
                report.detail,
            )
            return report
        self._ctx = ctx
        self._channel = channel
        self._config = report.config
        self._quote = report.quote
        self._pcr_values = dict(report.pcr_values)
        self._ima_cache = ima.ImaCacheState()
        self._events = []
        self._compromised = None
        self._stale = False
        self._last_refresh_ms = self.clock.now_ms
        self._fold_log(report.pcr_values[IMA_PCR])
        return report

    @property
    def serving(self) -> bool:
        return self._config is not None

    @property
    def compromised(self) -> Optional[str]:
        return self._compromised

    # -- refresh -----------------------------------------------------------

    def _fold_log(self, certified_pcr10: bytes) -> bool:
        """Differential log verification; latches log tampering."""
        log_data = self.machine.disk.get("ima/log", b"")
        try:
            fresh, self._ima_cache = ima.read_new_events(
                log_data, self._ima_cache, certified_pcr10
            )
        except ima.TamperDetected as exc:
            logger.warning("log verification failed on %s: %s", self.machine.machine_id, exc)
            self._compromised = "log-tampered"
            return False
        self._events.extend((e.file_hash, e.path, e.signature) for e in fresh)
        return True

    def refresh(self, nonce: Optional[bytes] = None, force: bool = False) -> None:
        """Re-quote and re-check the platform, latching any compromise.

        Without an explicit nonce the cached state is served until the
        cache period lapses.  A TPM failure leaves the last snapshot in
        place marked stale; the next evaluation reports stale-quote.
        """
        if not self.serving:
            raise UntrustedPlatform("agent is not serving")
        if self._compromised in ("pcr-changed", "rebooted"):
            raise UntrustedPlatform(self._compromised)
        now = self.clock.now_ms
        if (
            nonce is None
            and not force
            and self._last_refresh_ms is not None
            and now - self._last_refresh_ms < self.cache_period_ms
        ):
            return
        nonce = nonce if nonce is not None else self.rng.bytes(NONCE_LEN)
        config = self._config
        selection = _selection(config.originals, config.dynamics)
        try:
            quote, values, ok = _checked_quote(
                self._channel, config.aik_pub, nonce, selection
            )
        except TpmError as exc:
            logger.warning("tpm unreachable on %s: %s", self.machine.machine_id, exc)
            self._stale = True
            return
        if not ok:
            self._stale = True
            return
        self._stale = False
        self._quote = quote
        self._pcr_values = dict(values)
        self._last_refresh_ms = now

        if quote.reboot_counter != config.reboot_counter:
            self._compromised = "rebooted"
            raise UntrustedPlatform("rebooted")
        statics_ok = quote.aik_pub == config.aik_pub and all(
            values.get(i) == config.obfuscated[i] for i in config.obfuscated
        )
        dynamics_ok = all(
            values.get(i) == config.dynamics[i] for i in config.dynamics
        )
        if not (statics_ok and dynamics_ok):
            self._compromised = "pcr-changed"
            raise UntrustedPlatform("pcr-changed")

        if self._compromised != "log-tampered":
            self._fold_log(values[IMA_PCR])

    # -- policies ----------------------------------------------------------

    def deploy_policy(self, document: str) -> str:
        """Parse and store a policy; returns its id."""
        if not self.serving:
            raise UntrustedPlatform("agent is not serving")
        if self._compromised in ("pcr-changed", "rebooted"):
            raise UntrustedPlatform(self._compromised)
        policy = parse_policy(document)
        policy_id = self.registry.insert(policy, self.rng)
        logger.info("policy %s deployed to %s", policy_id, self.machine.machine_id)
        return policy_id

    def _measure_locations(self, policy: Policy) -> Dict[str, Optional[float]]:
        estimates: Dict[str, Optional[float]] = {}
        for rule in policy.location:
            estimates[rule.host] = None
            att = self.network
            if att is None or rule.host not in att.beacons:
                continue
            try:
                est = measure_proximity(
                    att.net,
                    self.rng,
                    att.endpoint,
                    att.beacons[rule.host],
                    beacon_chain=rule.beacon_chain,
                )
            except BeaconError:
                continue
            estimates[rule.host] = est.trimmed_mean_ms
        return estimates

    def verify_policy(self, policy_id: str, nonce: bytes) -> dict:
        """Evaluate a stored policy against the current platform state.

        Raises :class:`UntrustedPlatform` once the platform itself is gone
        (PCR drift or reboot); a tampered log keeps answering, carrying the
        violation in the verdict.
        """
        if not self.serving:
            raise UntrustedPlatform("agent is not serving")
        policy = self.registry.get(policy_id)
        if self._compromised in ("pcr-changed", "rebooted"):
            raise UntrustedPlatform(self._compromised)
        self.refresh(nonce=nonce)  # raises if this round uncovers pcr drift
        config = self._config
        view = PlatformView(
            quote=self._quote,
            pcr_values=dict(self._pcr_values),
            ek_cert=config.ek_cert,
            nonce=nonce,
            ima_events=tuple(self._events),
            static_original=dict(config.originals),
            static_obfuscated=dict(config.obfuscated),
            log_tampered=self._compromised == "log-tampered",
            location_estimates=self._measure_locations(policy),
        )
        verdict = evaluate(policy, view)
        return {"policy_id": policy_id, **verdict.to_dict()}

    def health(self) -> dict:
        status = "ok"
        if not self.serving:
            status = "not-serving"
        elif self._compromised is not None:
            status = "compromised"
        elif self._stale:
            status = "stale"
        return {
            "status": status,
            "machine": self.machine.machine_id,
            "compromised": self._compromised,
            "policies": len(self.registry),
        }


# --------------------------------------------------------------------------
# http-shaped facade
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ApiResponse:
    status: int
    body: dict


class AgentApi:
    """The agent's wire surface: three endpoints over a simulated transport.

    * ``POST /policy`` with a YAML body     -> 200 {policy_id} | 400 | 403
    * ``GET /policy/{id}?nonce=<hex>``      -> 200 verdict | 404 | 403
    * ``GET /health``                       -> 200 always
    """

    def __init__(self, agent: Agent):
        self.agent = agent

    def handle(self, method: str, path: str, body: str = "") -> ApiResponse:
        from urllib.parse import parse_qs, urlsplit

        parts = urlsplit(path)
        segments = [s for s in parts.path.split("/") if s]
        query = {k: v[-1] for k, v in parse_qs(parts.query).items()}

        if method == "POST" and segments == ["policy"]:
            return self.post_policy(body)
        if method == "GET" and len(segments) == 2 and segments[0] == "policy":
            return self.get_policy(segments[1], query.get("nonce", ""))
        if method == "GET" and segments == ["health"]:
            return self.get_health()
        return ApiResponse(404, {"error": f"no route for {method} {parts.path}"})

    def post_policy(self, body: str) -> ApiResponse:
        try:
            policy_id = self.agent.deploy_policy(body)
        except PolicyParseError as exc:
            return ApiResponse(400, {"error": str(exc)})
        except UntrustedPlatform as exc:
            return ApiResponse(403, {"error": exc.reason})
        return ApiResponse(200, {"policy_id": policy_id})

    def get_policy(self, policy_id: str, nonce_hex: str) -> ApiResponse:
        try:
            nonce = bytes.fromhex(nonce_hex)
        except ValueError:
            return ApiResponse(400, {"error": "nonce must be hex"})
        if len(nonce) != NONCE_LEN:
            return ApiResponse(400, {"error": f"nonce must be {NONCE_LEN} bytes"})
        try:
            verdict = self.agent.verify_policy(policy_id, nonce)
        except UnknownPolicyId:
            return ApiResponse(404, {"error": f"no policy {policy_id}"})
        except UntrustedPlatform as exc:
            return ApiResponse(403, {"error": exc.reason})
        return ApiResponse(200, verdict)

    def get_health(self) -> ApiResponse:
        return ApiResponse(200, self.agent.health())
