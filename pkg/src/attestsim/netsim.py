"""Virtual-time network, trusted beacons and proximity estimation.

One virtual clock drives everything; message legs advance it by a latency
draw from the link model (base + uniform jitter).  An adversary on the
path can add delay, drop, or modify traffic, but can never deliver faster
than the honest base latency, which is the physical floor the proximity
check leans on.

Proximity to a beacon is estimated from n_samples + 1 back-to-back signed
timestamp requests: each sample is the difference between consecutive
beacon timestamps, i.e. one full round trip, so a relay across a slower
link inflates every sample.  The estimate is the trimmed mean of the
samples.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .crypto import Certificate, KeyPair, Rng, certificate_valid, sign, verify

DEFAULT_SAMPLES = 20
DEFAULT_TRIM = 0.2


class BeaconError(Exception):
    pass


class BeaconUnreachable(BeaconError):
    pass


class BeaconCertInvalid(BeaconError):
    pass


class BeaconSignatureInvalid(BeaconError):
    pass


class VirtualClock:
    """Monotone simulated time in milliseconds."""

    def __init__(self, start_ms: float = 0.0):
        self.now_ms = float(start_ms)

    def advance(self, delta_ms: float) -> float:
        if delta_ms < 0:
            raise ValueError("time cannot run backwards")
        self.now_ms += delta_ms
        return self.now_ms


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float
    jitter_ms: float = 0.0

    def sample(self, rng: Rng) -> float:
        if self.jitter_ms <= 0:
            return self.base_ms
        return self.base_ms + rng.uniform(0.0, self.jitter_ms)


@dataclass
class AdversaryModel:
    """On-path adversary; applies to endpoints listed in relay_targets
    (or to everything when the tuple is empty but the model is installed)."""

    added_delay_ms: float = 0.0
    can_drop: bool = False
    can_modify: bool = False
    relay_targets: Tuple[str, ...] = ()

    def intercepts(self, src: str, dst: str) -> bool:
        if not self.relay_targets:
            return True
        return src in self.relay_targets or dst in self.relay_targets


class NetworkModel:
    """Endpoint placement plus per-DC-pair latency models."""

    def __init__(
        self,
        links: Dict[Tuple[str, str], LatencyModel],
        placement: Dict[str, str],
        adversary: Optional[AdversaryModel] = None,
    ):
        self._links = {tuple(sorted(k)): v for k, v in links.items()}
        self._placement = dict(placement)
        self.adversary = adversary

    def place(self, endpoint: str, dc: str) -> None:
        self._placement[endpoint] = dc

    def dc_of(self, endpoint: str) -> str:
        try:
            return self._placement[endpoint]
        except KeyError:
            raise BeaconUnreachable(f"endpoint {endpoint!r} is not on the network")

    def link(self, src: str, dst: str) -> LatencyModel:
        key = tuple(sorted((self.dc_of(src), self.dc_of(dst))))
        try:
            return self._links[key]
        except KeyError:
            raise BeaconUnreachable(f"no route between {key[0]} and {key[1]}")

    def one_way_ms(self, src: str, dst: str, rng: Rng) -> float:
        """Latency of one message leg; raises on an adversarial drop."""
        latency = self.link(src, dst).sample(rng)
        adv = self.adversary
        if adv is not None and adv.intercepts(src, dst):
            if adv.can_drop:
                raise BeaconUnreachable(f"message {src}->{dst} dropped in transit")
            latency += max(0.0, adv.added_delay_ms)
        return latency

    def tampered(self, src: str, dst: str) -> bool:
        adv = self.adversary
        return adv is not None and adv.can_modify and adv.intercepts(src, dst)


# --------------------------------------------------------------------------
# beacons
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BeaconResponse:
    timestamp_ms: float
    echo: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return struct.pack(">d", self.timestamp_ms) + self.echo


class BeaconService:
    """Trusted timestamp source pinned to a physical location."""

    def __init__(self, endpoint: str, keypair: KeyPair, certificate: Certificate,
                 clock: VirtualClock):
        self.endpoint = endpoint
        self.keypair = keypair
        self.certificate = certificate
        self.clock = clock

    def respond(self, echo: bytes) -> BeaconResponse:
        ts = self.clock.now_ms
        payload = struct.pack(">d", ts) + echo
        return BeaconResponse(ts, echo, sign(payload, self.keypair))


def trimmed_mean(samples: List[float], trim_fraction: float) -> float:
    """Mean after dropping floor(trim * n) samples from each tail."""
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim fraction must be in [0, 0.5)")
    if not samples:
        raise ValueError("no samples")
    cut = int(len(samples) * trim_fraction)
    kept = sorted(samples)[cut: len(samples) - cut]
    if not kept:
        raise ValueError("all samples trimmed away")
    return sum(kept) / len(kept)


@dataclass(frozen=True)
class ProximityEstimate:
    beacon: str
    samples_ms: Tuple[float, ...]
    trimmed_mean_ms: float
    trim_fraction: float


def measure_proximity(
    net: NetworkModel,
    rng: Rng,
    agent_endpoint: str,
    beacon: BeaconService,
    n_samples: int = DEFAULT_SAMPLES,
    trim_fraction: float = DEFAULT_TRIM,
    beacon_chain: Tuple[bytes, ...] = (),
) -> ProximityEstimate:
    """Estimate round-trip distance to a beacon from timestamp deltas.

    Issues ``n_samples + 1`` back-to-back requests; sample k is
    ``ts(k+1) - ts(k)`` which spans the return leg of request k plus the
    outbound leg of request k+1, one full round trip.  Aborts if the
    beacon certificate does not chain or any response signature fails.
    """
    if n_samples < 4:
        raise ValueError("need at least 4 samples")
    if not certificate_valid(beacon.certificate, beacon_chain):
        raise BeaconCertInvalid(f"beacon {beacon.endpoint} certificate rejected")

    clock = beacon.clock
    timestamps: List[float] = []
    for k in range(n_samples + 1):
        token = rng.bytes(16)
        clock.advance(net.one_way_ms(agent_endpoint, beacon.endpoint, rng))
        response = beacon.respond(token)
        clock.advance(net.one_way_ms(beacon.endpoint, agent_endpoint, rng))
        if net.tampered(agent_endpoint, beacon.endpoint):
            response = BeaconResponse(
                response.timestamp_ms, response.echo,
                bytes([response.signature[0] ^ 1]) + response.signature[1:],
            )
        if response.echo != token or not verify(
            response.signature, response.signed_payload(), beacon.keypair.public
        ):
            raise BeaconSignatureInvalid(f"beacon {beacon.endpoint} response rejected")
        timestamps.append(response.timestamp_ms)

    samples = [b - a for a, b in zip(timestamps, timestamps[1:])]
    return ProximityEstimate(
        beacon=beacon.endpoint,
        samples_ms=tuple(samples),
        trimmed_mean_ms=trimmed_mean(samples, trim_fraction),
        trim_fraction=trim_fraction,
    )
