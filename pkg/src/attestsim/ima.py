"""Runtime integrity measurement log (IMA-style) and its verifier cache.

The log is ASCII, one event per line:

    <pcr> <hex template_hash> <template_name> <hex file_hash> <path> [<hex sig>]

with template_name either ``ima-ng`` (unsigned) or ``ima-sig`` (the file
hash additionally carries a distributor signature).  The template hash is
the digest of the canonical event encoding; extending PCR 10 with each
template hash in order yields the aggregate that a quote certifies.

Verification is differential: the verifier keeps (bytes_read, running
digest, seen event hashes) and on each round folds only the new suffix of
the log until the running digest equals the quoted PCR-10 value.  Reaching
the end of the log without hitting that value means log and register
diverged, which is treated as tampering and is terminal for the platform.
A trailing line without its newline is treated as not yet written (the
writer may be mid-append), never as tampering by itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Tuple

from .crypto import DIGEST_LEN, ZERO_DIGEST, KeyPair, Rng, sha256, sign, verify
from .tpm import IMA_PCR, TpmState, extend_digest

TEMPLATE_NG = "ima-ng"
TEMPLATE_SIG = "ima-sig"


class ImaFormatError(Exception):
    pass


class TamperDetected(Exception):
    """Log contents and the certified PCR-10 value diverged."""


@dataclass(frozen=True)
class ImaEvent:
    pcr_index: int
    template_hash: bytes
    template_name: str
    file_hash: bytes
    path: str
    signature: Optional[bytes] = None

    def encode_line(self) -> bytes:
        parts = [
            str(self.pcr_index),
            self.template_hash.hex(),
            self.template_name,
            self.file_hash.hex(),
            self.path,
        ]
        if self.template_name == TEMPLATE_SIG:
            parts.append((self.signature or b"").hex())
        return " ".join(parts).encode("ascii")


def template_hash(template_name: str, file_hash: bytes, path: str,
                  signature: Optional[bytes]) -> bytes:
    """Canonical event digest; what actually gets folded into PCR 10."""
    payload = template_name.encode() + b"\x00" + file_hash + b"\x00" + path.encode()
    if template_name == TEMPLATE_SIG:
        payload += b"\x00" + (signature or b"")
    return sha256(payload)


def _strict_hex(field: str) -> bytes:
    # canonical lowercase only: bytes.fromhex also accepts uppercase, which
    # would let two distinct byte streams decode to the same digest
    if not field or set(field) - set("0123456789abcdef"):
        raise ImaFormatError("hash fields must be lowercase hex")
    return bytes.fromhex(field)


def parse_line(raw: bytes) -> ImaEvent:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ImaFormatError("non-ascii bytes in event line") from exc
    fields = text.split(" ")
    if len(fields) not in (5, 6):
        raise ImaFormatError(f"expected 5 or 6 fields, got {len(fields)}")
    try:
        pcr_index = int(fields[0])
        t_hash = _strict_hex(fields[1])
        file_hash = _strict_hex(fields[3])
    except ValueError as exc:
        raise ImaFormatError("bad numeric or hex field") from exc
    name = fields[2]
    if name not in (TEMPLATE_NG, TEMPLATE_SIG):
        raise ImaFormatError(f"unknown template {name!r}")
    if name == TEMPLATE_SIG:
        if len(fields) != 6:
            raise ImaFormatError("ima-sig event without signature field")
        signature: Optional[bytes] = _strict_hex(fields[5])
    else:
        if len(fields) != 5:
            raise ImaFormatError("ima-ng event with trailing field")
        signature = None
    path = fields[4]
    if len(t_hash) != DIGEST_LEN or len(file_hash) != DIGEST_LEN:
        raise ImaFormatError("hash fields must be 32 bytes")
    if t_hash != template_hash(name, file_hash, path, signature):
        raise ImaFormatError("template hash does not match event fields")
    return ImaEvent(pcr_index, t_hash, name, file_hash, path, signature)


class ImaLog:
    """Append-only in-memory log plus its ASCII serialization."""

    def __init__(self):
        self.events: List[ImaEvent] = []

    def append(self, event: ImaEvent) -> None:
        self.events.append(event)

    def to_bytes(self) -> bytes:
        return b"".join(e.encode_line() + b"\n" for e in self.events)


def measure_file(log: ImaLog, tpm: TpmState, path: str, content: bytes,
                 signature: Optional[bytes] = None) -> ImaEvent:
    """Measure a file: extend PCR 10, then append the event (extend-first,
    so every complete log prefix matches some past register state)."""
    if " " in path or "\n" in path:
        raise ImaFormatError("paths with whitespace are not representable")
    file_hash = sha256(content)
    name = TEMPLATE_SIG if signature is not None else TEMPLATE_NG
    t_hash = template_hash(name, file_hash, path, signature)
    tpm.pcr_extend(IMA_PCR, t_hash, locality=0)
    event = ImaEvent(IMA_PCR, t_hash, name, file_hash, path, signature)
    log.append(event)
    return event


def appraise(path: str, content: bytes, signature: Optional[bytes],
             cert_pub: bytes) -> bool:
    """Allow iff the signature over the file hash verifies under the cert."""
    if signature is None:
        return False
    return verify(signature, sha256(content), cert_pub)


def aggregate(template_hashes, start: bytes = ZERO_DIGEST) -> bytes:
    acc = start
    for h in template_hashes:
        acc = extend_digest(acc, h)
    return acc


@dataclass(frozen=True)
class ImaCacheState:
    """Differential-verification cursor: B bytes consumed, running digest D."""

    bytes_read: int = 0
    running_digest: bytes = ZERO_DIGEST
    event_hashes: FrozenSet[bytes] = field(default_factory=frozenset)


def read_new_events(log_data: bytes, cache: ImaCacheState,
                    certified_pcr10: bytes) -> Tuple[List[ImaEvent], ImaCacheState]:
    """Consume new log lines until the running digest equals the certified
    PCR-10 value; raise :class:`TamperDetected` if that never happens.

    The caller supplies the PCR-10 value it extracted from (and checked
    against) a verified quote.  Idempotent when nothing changed.
    """
    if cache.running_digest == certified_pcr10:
        return [], cache

    pos = cache.bytes_read
    running = cache.running_digest
    hashes = set(cache.event_hashes)
    events: List[ImaEvent] = []

    while True:
        nl = log_data.find(b"\n", pos)
        if nl < 0:
            # any bytes past pos form an unfinished trailing line
            raise TamperDetected(
                "log ends before reaching the certified pcr-10 value"
            )
        line = log_data[pos:nl]
        try:
            event = parse_line(line)
        except ImaFormatError as exc:
            raise TamperDetected(f"unparseable event line: {exc}") from exc
        if event.pcr_index != IMA_PCR:
            # only events aimed at the aggregate register fold into the
            # chain; a rewritten index therefore surfaces as a digest
            # mismatch rather than silently hiding the event
            pos = nl + 1
            continue
        running = extend_digest(running, event.template_hash)
        hashes.add(event.template_hash)
        events.append(event)
        pos = nl + 1
        if running == certified_pcr10:
            return events, ImaCacheState(
                bytes_read=pos,
                running_digest=running,
                event_hashes=frozenset(hashes),
            )


# --------------------------------------------------------------------------
# fixture generation
# --------------------------------------------------------------------------

_PATH_STEMS = (
    "/usr/bin", "/usr/sbin", "/usr/lib64", "/lib/modules", "/etc/systemd",
    "/opt/stack", "/usr/libexec", "/var/lib/agents",
)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    content: bytes
    signature: Optional[bytes]


def generate_boot_manifest(seed: int, count: int, signed_fraction: float = 0.1,
                           signer: Optional[KeyPair] = None) -> List[ManifestEntry]:
    """Deterministic pseudo boot file set; roughly ``signed_fraction`` of the
    entries carry an ima-sig style distributor signature."""
    rng = Rng(seed)
    if signer is None:
        from .crypto import generate_keypair

        signer = generate_keypair(rng.child("fixture-signer"))
    entries = []
    for i in range(count):
        stem = _PATH_STEMS[rng.randint(0, len(_PATH_STEMS) - 1)]
        path = f"{stem}/f{i:05d}-{rng.bytes(4).hex()}"
        content = rng.bytes(rng.randint(24, 96))
        signed = rng.uniform(0.0, 1.0) < signed_fraction
        signature = sign(sha256(content), signer) if signed else None
        entries.append(ManifestEntry(path, content, signature))
    return entries


def render_fixture_log(manifest) -> Tuple[bytes, bytes]:
    """Materialize a manifest as (log bytes, final aggregate digest)."""
    running = ZERO_DIGEST
    lines = []
    for entry in manifest:
        file_hash = sha256(entry.content)
        name = TEMPLATE_SIG if entry.signature is not None else TEMPLATE_NG
        t_hash = template_hash(name, file_hash, entry.path, entry.signature)
        event = ImaEvent(IMA_PCR, t_hash, name, file_hash, entry.path, entry.signature)
        lines.append(event.encode_line() + b"\n")
        running = extend_digest(running, t_hash)
    return b"".join(lines), running
