"""Machines, measured boot, enclaves and the TPM driver layer.

Boot pipeline (one call to :func:`boot`): the firmware measures itself into
static PCR 0, the UEFI and DRTM-loader signatures are checked against the
platform CA (chain of trust halts on failure), locality is raised to 4 for
the dynamic-root launch which resets the dynamic PCRs, then the loader,
kernel and initramfs measurements land in PCRs 17/18/19.  The initramfs
hook (agent initialization) runs at locality 2; the OS runtime afterwards
sits at locality 0.

Enclaves are modeled just deeply enough for sealing and local attestation:
a context carries the binary measurement and a per-machine sealing root, so
sealed data binds to (machine, enclave binary) and nothing else.

TPM channels model the driver between agent and chip.  A
:class:`DirectTpmChannel` talks to the attached TPM at the machine's
current locality.  A :class:`RelayTpmChannel` is a malicious driver that
forwards traffic to another machine's network surface; that surface serves
reads for anyone (quotes are public attestations) but accepts extends only
when its host is *not* running the integrity-enforced golden stack, because
the golden software simply offers no remote-extend service.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

from . import ima
from .crypto import Rng, sha256
from .tpm import DRTM_LOCALITY, Quote, TpmState

logger = logging.getLogger(__name__)

INITRAMFS_LOCALITY = 2
RUNTIME_LOCALITY = 0


class BootError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class InitHookFailure(Exception):
    """Raised by an initramfs hook to abort the boot."""


@dataclass(frozen=True)
class SoftwareImage:
    """An opaque bootable component; golden images carry a CA signature."""

    name: str
    content: bytes
    signature: Optional[bytes] = None

    @property
    def measurement(self) -> bytes:
        return sha256(self.content)


@dataclass
class BootOutcome:
    halted: bool
    reason: Optional[str]
    measurements: Dict[str, bytes] = field(default_factory=dict)


class Machine:
    """A host with one physically attached TPM and a disk."""

    def __init__(
        self,
        machine_id: str,
        tpm: TpmState,
        platform_ca_pub: bytes,
        rng: Rng,
        dc: str = "dc1",
        cpu_genuine: bool = True,
    ):
        self.machine_id = machine_id
        self.tpm = tpm
        self.platform_ca_pub = platform_ca_pub
        self.dc = dc
        self.cpu_genuine = cpu_genuine
        self._seal_root = rng.bytes(32)  # never leaves this module
        self.disk: Dict[str, bytes] = {}
        self.state = "off"  # off | initramfs | runtime
        self.current_locality = 0
        self.booted_measurements: Optional[Dict[str, bytes]] = None
        self.golden_measurements: Optional[Dict[str, bytes]] = None
        self.ima_log = ima.ImaLog()
        self.ima_enforcing = True
        self.ima_cert: Optional[bytes] = None

    # -- disk --------------------------------------------------------------

    def snapshot_disk(self) -> Dict[str, bytes]:
        return dict(self.disk)

    def restore_disk(self, snapshot: Dict[str, bytes]) -> None:
        self.disk = dict(snapshot)

    # -- integrity enforcement --------------------------------------------

    def set_golden(self, measurements: Dict[str, bytes]) -> None:
        """Record the expected golden boot measurements for this fleet."""
        self.golden_measurements = dict(measurements)

    def runs_golden_stack(self) -> bool:
        """True iff the machine booted exactly the golden image set."""
        if self.booted_measurements is None or self.golden_measurements is None:
            return False
        return self.booted_measurements == self.golden_measurements

    # -- runtime file loading (IMA hook) ----------------------------------

    def load_file(self, path: str, content: bytes, signature: Optional[bytes] = None):
        """OS loader: measure first (log + PCR), then appraise if enforcing.

        Returns (event, loaded).  A denied file is still measured, exactly
        like an appraisal-enforcing kernel logs the attempt before refusing.
        """
        if self.state != "runtime":
            raise RuntimeError("files load only at OS runtime")
        event = ima.measure_file(self.ima_log, self.tpm, path, content, signature)
        self.disk["ima/log"] = self.ima_log.to_bytes()
        loaded = True
        if self.ima_enforcing and self.ima_cert is not None:
            loaded = ima.appraise(path, content, signature, self.ima_cert)
        return event, loaded


def boot(
    machine: Machine,
    uefi: SoftwareImage,
    tboot: SoftwareImage,
    kernel: SoftwareImage,
    initramfs: SoftwareImage,
    init_hook: Optional[Callable[[Machine], None]] = None,
) -> BootOutcome:
    """Run the measured-boot pipeline and hand control to the initramfs hook.

    Returns a halted outcome (machine stays down) on a broken chain of
    trust or a failing hook; otherwise leaves the machine at OS runtime.
    """
    from .crypto import verify

    if machine.state != "off":
        raise BootError("machine is already powered")

    outcome = BootOutcome(halted=False, reason=None)
    tpm = machine.tpm

    # firmware measures itself before anything runs
    tpm.pcr_extend(0, uefi.measurement, locality=0)
    outcome.measurements["uefi"] = uefi.measurement

    for img in (uefi, tboot):
        ok = img.signature is not None and verify(
            img.signature, img.content, machine.platform_ca_pub
        )
        if not ok:
            outcome.halted = True
            outcome.reason = "uefi-signature-invalid"
            logger.info("boot halt on %s: bad signature for %s", machine.machine_id, img.name)
            return outcome

    # dynamic root of trust: locality 4 resets the dynamic bank
    machine.current_locality = DRTM_LOCALITY
    tpm.locality = DRTM_LOCALITY
    tpm.drtm_launch_reset()
    tpm.pcr_extend(17, tboot.measurement, locality=DRTM_LOCALITY)
    tpm.pcr_extend(18, kernel.measurement, locality=DRTM_LOCALITY)
    tpm.pcr_extend(19, initramfs.measurement, locality=DRTM_LOCALITY)
    outcome.measurements.update(
        tboot=tboot.measurement, kernel=kernel.measurement, initramfs=initramfs.measurement
    )

    machine.booted_measurements = dict(outcome.measurements)
    machine.ima_log = ima.ImaLog()
    machine.disk["ima/log"] = b""

    # initramfs phase
    machine.state = "initramfs"
    machine.current_locality = INITRAMFS_LOCALITY
    tpm.locality = INITRAMFS_LOCALITY
    if init_hook is not None:
        try:
            init_hook(machine)
        except InitHookFailure as exc:
            machine.state = "off"
            machine.current_locality = 0
            tpm.locality = 0
            machine.booted_measurements = None
            outcome.halted = True
            outcome.reason = f"init-hook: {exc}"
            return outcome

    # hand off to the OS
    machine.state = "runtime"
    machine.current_locality = RUNTIME_LOCALITY
    tpm.locality = RUNTIME_LOCALITY
    return outcome


def reboot_machine(machine: Machine) -> None:
    """Power cycle; the disk persists, PCRs and locality reset."""
    machine.tpm.reboot()
    machine.state = "off"
    machine.current_locality = 0
    machine.booted_measurements = None


# --------------------------------------------------------------------------
# enclaves and local attestation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EnclaveContext:
    """An enclave instance: binary measurement + host binding."""

    machine: Machine
    measurement: bytes
    phase: str  # init | runtime
    cpu_genuine: bool

    def seal_key(self) -> bytes:
        """Sealing key bound to (machine hardware, enclave binary)."""
        return sha256(self.machine._seal_root + self.measurement)


def run_enclave(machine: Machine, binary: SoftwareImage, phase: str) -> EnclaveContext:
    if phase not in ("init", "runtime"):
        raise ValueError("phase must be init or runtime")
    return EnclaveContext(
        machine=machine,
        measurement=binary.measurement,
        phase=phase,
        cpu_genuine=machine.cpu_genuine,
    )


@dataclass(frozen=True)
class AttestReport:
    measurement: bytes
    same_cpu: bool
    genuine: bool


def local_attest(verifier: EnclaveContext, target: EnclaveContext) -> AttestReport:
    """Local attestation between two enclaves."""
    return AttestReport(
        measurement=target.measurement,
        same_cpu=verifier.machine is target.machine,
        genuine=target.cpu_genuine,
    )


# --------------------------------------------------------------------------
# tpm channels (the driver between agent and chip)
# --------------------------------------------------------------------------


class DirectTpmChannel:
    """Honest driver: talks to the attached TPM at the machine's locality."""

    def __init__(self, machine: Machine):
        self.machine = machine

    def describe(self) -> str:
        return f"direct:{self.machine.tpm.tpm_id}"

    def create_aik(self, rng: Rng) -> bytes:
        return self.machine.tpm.create_aik(rng)

    def ek_certificate(self):
        return self.machine.tpm.ek_cert

    def activate_credential(self, aik_pub: bytes, challenge: bytes) -> bytes:
        return self.machine.tpm.activate_credential(aik_pub, challenge)

    def quote(self, aik_pub: bytes, nonce: bytes, selection) -> Quote:
        return self.machine.tpm.quote(aik_pub, nonce, selection)

    def read_pcr(self, index: int) -> bytes:
        return self.machine.tpm.read_pcr(index)

    def pcr_extend(self, index: int, value: bytes) -> None:
        self.machine.tpm.pcr_extend(index, value, self.machine.current_locality)


class RemoteTpmSurface:
    """What another host exposes over the network about its TPM.

    Reads, quotes and credential activation are served unconditionally
    (they are ordinary attestation traffic).  Extend requests are honored
    only when the host is *not* running the enforced golden stack: golden
    software has no remote-extend service, so the adversary can only obtain
    one by booting the host with tampered software, which in turn shows up
    in that host's dynamic PCRs.
    """

    def __init__(self, machine: Machine):
        self.machine = machine
        self._served_aik: Optional[bytes] = None

    @property
    def tpm(self) -> TpmState:
        return self.machine.tpm

    def resident_aik(self, rng: Rng) -> bytes:
        if self._served_aik is None:
            self._served_aik = self.tpm.create_aik(rng)
        return self._served_aik

    def accepts_extends(self) -> bool:
        return not self.machine.runs_golden_stack()

    def pcr_extend(self, index: int, value: bytes) -> bool:
        if not self.accepts_extends():
            return False
        # a cooperating daemon runs at OS runtime, i.e. locality 0
        self.tpm.pcr_extend(index, value, RUNTIME_LOCALITY)
        return True


class RelayTpmChannel:
    """Malicious driver relaying the agent's TPM traffic to a remote host.

    Reads and quotes come from the remote TPM.  A quote request names an
    AIK handle: if that key is resident on the remote TPM it signs (handles
    are just data to forward), otherwise the relay substitutes the remote
    TPM's own resident attestation key — the remote host signs with what it
    has.  Extend commands are forwarded when the remote surface accepts
    them and silently swallowed otherwise, which is the best a relay can do.
    """

    def __init__(self, local: Machine, surface: RemoteTpmSurface, rng: Rng):
        self.local = local
        self.surface = surface
        self._rng = rng

    def describe(self) -> str:
        return f"relay:{self.local.machine_id}->{self.surface.tpm.tpm_id}"

    def create_aik(self, rng: Rng) -> bytes:
        return self.surface.tpm.create_aik(rng)

    def ek_certificate(self):
        return self.surface.tpm.ek_cert

    def activate_credential(self, aik_pub: bytes, challenge: bytes) -> bytes:
        return self.surface.tpm.activate_credential(aik_pub, challenge)

    def quote(self, aik_pub: bytes, nonce: bytes, selection) -> Quote:
        if aik_pub in self.surface.tpm.aiks:
            serving = aik_pub
        else:
            serving = self.surface.resident_aik(self._rng)
        return self.surface.tpm.quote(serving, nonce, selection)

    def read_pcr(self, index: int) -> bytes:
        return self.surface.tpm.read_pcr(index)

    def pcr_extend(self, index: int, value: bytes) -> None:
        forwarded = self.surface.pcr_extend(index, value)
        if not forwarded:
            logger.debug("relay dropped extend of pcr %d", index)
