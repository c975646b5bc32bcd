"""Software model of a TPM 2.0 style device.

State lives in :class:`TpmState`: static PCRs 0..15, dynamic PCRs 17..19
(reset only by a DRTM launch at locality 4, extended only at locality >= 2),
an endorsement key with a manufacturer certificate, attestation identity
keys, a monotonic reboot counter and a quote clock.  PCRs are extend-only:
``pcr[n] = hash(pcr[n] || value)``, never assignable.

Quotes are signatures over the selected-PCR composite digest plus a caller
nonce and the counters, in a fixed canonical byte layout so they round-trip
through files and JSON.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

from .crypto import (
    DIGEST_LEN,
    ONES_DIGEST,
    ZERO_DIGEST,
    Certificate,
    KeyPair,
    Rng,
    UnsealError,
    derive_key,
    generate_keypair,
    issue_certificate,
    seal,
    sha256,
    sign,
    unseal,
    verify,
)

STATIC_PCRS = tuple(range(0, 16))
DYNAMIC_PCRS = (17, 18, 19)
IMA_PCR = 10

DRTM_LOCALITY = 4
DYNAMIC_EXTEND_LOCALITY = 2
NONCE_LEN = 32


class TpmError(Exception):
    pass


class InvalidPcrIndex(TpmError):
    pass


class LocalityViolation(TpmError):
    pass


class UnknownAik(TpmError):
    pass


class ActivationError(TpmError):
    """Credential activation failed; ``reason`` is wrong-ek or unknown-aik."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class QuoteFormatError(TpmError):
    pass


def extend_digest(current: bytes, value: bytes) -> bytes:
    """One extend step: hash(current || value)."""
    return sha256(current + value)


class PcrBank:
    """The two PCR banks; dynamic registers hold an all-ones sentinel until
    the first DRTM launch of the current power cycle."""

    def __init__(self):
        self._static: Dict[int, bytes] = {i: ZERO_DIGEST for i in STATIC_PCRS}
        self._dynamic: Dict[int, bytes] = {i: ONES_DIGEST for i in DYNAMIC_PCRS}

    def read(self, index: int) -> bytes:
        if index in self._static:
            return self._static[index]
        if index in self._dynamic:
            return self._dynamic[index]
        raise InvalidPcrIndex(f"pcr {index} does not exist")

    def extend(self, index: int, value: bytes) -> bytes:
        if len(value) != DIGEST_LEN:
            raise TpmError("extend value must be a 32-byte digest")
        bank = self._static if index in self._static else self._dynamic
        if index not in bank:
            raise InvalidPcrIndex(f"pcr {index} does not exist")
        bank[index] = extend_digest(bank[index], value)
        return bank[index]

    def reset_dynamic(self) -> None:
        for i in DYNAMIC_PCRS:
            self._dynamic[i] = ZERO_DIGEST

    def power_cycle(self) -> None:
        for i in STATIC_PCRS:
            self._static[i] = ZERO_DIGEST
        for i in DYNAMIC_PCRS:
            self._dynamic[i] = ONES_DIGEST


@dataclass(frozen=True)
class Quote:
    """Signed attestation of selected PCRs.

    ``pcr_digest`` is the hash of the concatenated selected PCR values in
    selection order; the signature covers (pcr_digest || nonce ||
    reboot_counter || clock) with the counters as 8-byte big-endian ints.
    """

    selection: Tuple[int, ...]
    pcr_digest: bytes
    nonce: bytes
    reboot_counter: int
    clock: int
    signature: bytes
    aik_pub: bytes

    def signed_payload(self) -> bytes:
        return (
            self.pcr_digest
            + self.nonce
            + self.reboot_counter.to_bytes(8, "big")
            + self.clock.to_bytes(8, "big")
        )

    def verify_signature(self) -> bool:
        return verify(self.signature, self.signed_payload(), self.aik_pub)

    def to_bytes(self) -> bytes:
        sel = bytes([len(self.selection)]) + bytes(self.selection)
        return (
            sel
            + self.pcr_digest
            + self.nonce
            + self.reboot_counter.to_bytes(8, "big")
            + self.clock.to_bytes(8, "big")
            + self.signature
            + self.aik_pub
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Quote":
        if len(raw) < 1:
            raise QuoteFormatError("empty quote")
        n = raw[0]
        need = 1 + n + DIGEST_LEN + NONCE_LEN + 8 + 8 + 64 + 32
        if len(raw) != need:
            raise QuoteFormatError(f"quote is {len(raw)} bytes, expected {need}")
        pos = 1
        selection = tuple(raw[pos : pos + n])
        pos += n
        pcr_digest = raw[pos : pos + DIGEST_LEN]
        pos += DIGEST_LEN
        nonce = raw[pos : pos + NONCE_LEN]
        pos += NONCE_LEN
        reboot_counter = int.from_bytes(raw[pos : pos + 8], "big")
        pos += 8
        clock = int.from_bytes(raw[pos : pos + 8], "big")
        pos += 8
        signature = raw[pos : pos + 64]
        pos += 64
        aik_pub = raw[pos : pos + 32]
        return cls(selection, pcr_digest, nonce, reboot_counter, clock, signature, aik_pub)

    def to_json(self) -> str:
        return json.dumps(
            {
                "selection": list(self.selection),
                "pcr_digest": self.pcr_digest.hex(),
                "nonce": self.nonce.hex(),
                "reboot_counter": self.reboot_counter,
                "clock": self.clock,
                "signature": self.signature.hex(),
                "aik_pub": self.aik_pub.hex(),
            },
            sort_keys=True,
        )


def composite_digest(values: Sequence[bytes]) -> bytes:
    return sha256(b"".join(values))


class TpmState:
    """One simulated TPM chip."""

    def __init__(self, tpm_id: str, manufacturer: KeyPair, rng: Rng):
        self.tpm_id = tpm_id
        self.pcrs = PcrBank()
        self.ek = generate_keypair(rng)
        self.ek_cert: Certificate = issue_certificate(manufacturer, self.ek.public, "tpm-ek")
        self.aiks: Dict[bytes, KeyPair] = {}
        self.reboot_counter = 0
        self.clock = 0
        self.locality = 0

    # -- pcr operations ----------------------------------------------------

    def pcr_extend(self, index: int, value: bytes, locality: int) -> bytes:
        """Extend a PCR.  Static registers accept any locality; dynamic
        registers require locality >= 2 (the DRTM-launched environment)."""
        if index in DYNAMIC_PCRS and locality < DYNAMIC_EXTEND_LOCALITY:
            raise LocalityViolation(
                f"dynamic pcr {index} extend needs locality >= {DYNAMIC_EXTEND_LOCALITY}"
            )
        return self.pcrs.extend(index, value)

    def read_pcr(self, index: int) -> bytes:
        return self.pcrs.read(index)

    def drtm_launch_reset(self) -> None:
        """Reset dynamic PCRs to zero; only the DRTM instruction (modeled as
        the platform raising locality to 4) may do this."""
        if self.locality != DRTM_LOCALITY:
            raise LocalityViolation("dynamic reset requires locality 4")
        self.pcrs.reset_dynamic()

    # -- keys and quotes ---------------------------------------------------

    def create_aik(self, rng: Rng) -> bytes:
        """Mint a fresh attestation identity key; the public key doubles as
        its handle."""
        aik = generate_keypair(rng)
        self.aiks[aik.public] = aik
        return aik.public

    def activate_credential(self, aik_pub: bytes, challenge: bytes) -> bytes:
        """Recover a challenge secret sealed to this TPM's EK and a resident
        AIK; proves the AIK lives in the TPM holding the certified EK."""
        if aik_pub not in self.aiks:
            raise ActivationError("unknown-aik")
        key = derive_key(self.ek.public, aik_pub)
        try:
            return unseal(challenge, key)
        except UnsealError as exc:
            raise ActivationError("wrong-ek") from exc

    def quote(self, aik_pub: bytes, nonce: bytes, selection: Sequence[int]) -> Quote:
        if aik_pub not in self.aiks:
            raise UnknownAik("no such attestation key on this tpm")
        if len(nonce) != NONCE_LEN:
            raise TpmError("nonce must be 32 bytes")
        sel = tuple(int(i) for i in selection)
        values = [self.read_pcr(i) for i in sel]  # validates every index
        self.clock += 1
        digest = composite_digest(values)
        payload = (
            digest
            + nonce
            + self.reboot_counter.to_bytes(8, "big")
            + self.clock.to_bytes(8, "big")
        )
        signature = sign(payload, self.aiks[aik_pub])
        return Quote(
            selection=sel,
            pcr_digest=digest,
            nonce=nonce,
            reboot_counter=self.reboot_counter,
            clock=self.clock,
            signature=signature,
            aik_pub=aik_pub,
        )

    # -- power -------------------------------------------------------------

    def reboot(self) -> None:
        """Power cycle: statics to zero, dynamics to the sentinel, counter up."""
        self.reboot_counter += 1
        self.pcrs.power_cycle()
        self.locality = 0


def make_credential(ek_cert: Certificate, aik_pub: bytes, secret: bytes) -> bytes:
    """Build an activation challenge for (EK, AIK) from the EK certificate.

    The challenge is sealed under a key derived from the certified EK and
    the named AIK, so only the TPM holding that EK *and* that AIK can
    recover the secret.
    """
    return seal(secret, derive_key(ek_cert.subject, aik_pub))
