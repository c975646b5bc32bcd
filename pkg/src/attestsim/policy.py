"""Integrity policy: schema, parsing, evaluation, registry.

A policy document is a small YAML dialect::

    chain: |            # trusted TPM manufacturer verification keys (PEM)
      -----BEGIN CERTIFICATE----- ...
    whitelist:
      pcrs:
        - id: 0
          sha256: <hex>
    runtime:
      certificate: |    # distributor key for signed runtime files (PEM)
        -----BEGIN CERTIFICATE----- ...
      software:
        - name: base-os
          whitelist:
            <hex file hash>: /path
    location:
      - host: beacon-1
        max_latency: 2          # milliseconds
        chain: |                # beacon authority keys (PEM)
          -----BEGIN CERTIFICATE----- ...

``include: [other.yaml, ...]`` at top level merges template documents,
last writer wins on scalar fields.  Unknown fields anywhere are rejected.

Evaluation is pure: it maps (policy, platform view) to a verdict whose
``violations`` list draws from {tpm-cert, pcr-mismatch, untrusted-file,
log-tampered, location, stale-quote}; compliant means the list is empty.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from .crypto import Certificate, certificate_valid, verify
from .tpm import DYNAMIC_PCRS, STATIC_PCRS, Quote

VALID_PCR_IDS = set(STATIC_PCRS) | set(DYNAMIC_PCRS)
POLICY_ID_LEN = 16


class PolicyParseError(Exception):
    """Schema violation; the message names the offending field."""


class UnknownPolicyId(KeyError):
    pass


# --------------------------------------------------------------------------
# PEM helpers (PEM-wrapped base64 of raw 32-byte verification keys)
# --------------------------------------------------------------------------

_PEM_HEADER = "-----BEGIN CERTIFICATE-----"
_PEM_FOOTER = "-----END CERTIFICATE-----"


def pem_encode(key: bytes) -> str:
    body = base64.b64encode(key).decode()
    return f"{_PEM_HEADER}\n{body}\n{_PEM_FOOTER}\n"


def pem_decode_all(text: str, where: str) -> List[bytes]:
    keys = []
    lines = [l.strip() for l in text.splitlines() if l.strip()]
    current: Optional[List[str]] = None
    for line in lines:
        if line == _PEM_HEADER:
            if current is not None:
                raise PolicyParseError(f"{where}: nested PEM header")
            current = []
        elif line == _PEM_FOOTER:
            if current is None:
                raise PolicyParseError(f"{where}: PEM footer without header")
            try:
                key = base64.b64decode("".join(current), validate=True)
            except Exception as exc:
                raise PolicyParseError(f"{where}: bad base64 in PEM block") from exc
            if len(key) != 32:
                raise PolicyParseError(f"{where}: key must be 32 bytes, got {len(key)}")
            keys.append(key)
            current = None
        else:
            if current is None:
                raise PolicyParseError(f"{where}: stray text outside PEM block")
            current.append(line)
    if current is not None:
        raise PolicyParseError(f"{where}: unterminated PEM block")
    if not keys:
        raise PolicyParseError(f"{where}: no PEM blocks found")
    return keys


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PcrEntry:
    index: int
    value: bytes


@dataclass(frozen=True)
class SoftwareList:
    name: str
    hashes: Tuple[Tuple[bytes, str], ...]  # (file hash, recorded path)

    def hash_set(self) -> set:
        return {h for h, _ in self.hashes}


@dataclass(frozen=True)
class LocationRule:
    host: str
    max_latency_ms: float
    beacon_chain: Tuple[bytes, ...]


@dataclass(frozen=True)
class Policy:
    tpm_ca_chain: Tuple[bytes, ...]
    pcr_whitelist: Tuple[PcrEntry, ...]
    runtime_cert: Optional[bytes]
    software: Tuple[SoftwareList, ...]
    location: Tuple[LocationRule, ...]

    def static_entries(self) -> Dict[int, bytes]:
        return {e.index: e.value for e in self.pcr_whitelist if e.index in STATIC_PCRS}

    def dynamic_entries(self) -> Dict[int, bytes]:
        return {e.index: e.value for e in self.pcr_whitelist if e.index in DYNAMIC_PCRS}

    def whitelisted_hashes(self) -> set:
        acc = set()
        for lst in self.software:
            acc |= lst.hash_set()
        return acc


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


@dataclass(frozen=True)
class PolicyVerdict:
    compliant: bool
    violations: Tuple[Violation, ...]

    def to_dict(self) -> dict:
        return {
            "compliant": self.compliant,
            "violations": [
                {"kind": v.kind, "detail": v.detail} for v in self.violations
            ],
        }


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _require_mapping(node, where):
    if not isinstance(node, dict):
        raise PolicyParseError(f"{where}: expected a mapping")
    return node


def _check_keys(node: dict, allowed, where):
    unknown = set(node) - set(allowed)
    if unknown:
        raise PolicyParseError(f"{where}: unknown field(s) {sorted(unknown)}")


def _merge(base, overlay):
    """Template merge: recurse into mappings, last writer wins elsewhere."""
    if isinstance(base, dict) and isinstance(overlay, dict):
        merged = dict(base)
        for k, v in overlay.items():
            merged[k] = _merge(base[k], v) if k in base else v
        return merged
    return overlay


def load_policy(path: str | Path) -> Policy:
    """Parse a policy file, resolving ``include`` templates relative to it."""
    return parse_policy(_load_document(Path(path), seen=()))


def _load_document(path: Path, seen: Tuple[str, ...]) -> dict:
    key = str(path.resolve())
    if key in seen:
        raise PolicyParseError(f"include cycle through {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise PolicyParseError(f"{path}: {exc}") from exc
    doc = _require_mapping(raw, str(path))
    includes = doc.pop("include", [])
    if not isinstance(includes, list):
        raise PolicyParseError(f"{path}: include must be a list")
    merged: dict = {}
    for inc in includes:
        merged = _merge(merged, _load_document(path.parent / inc, seen + (key,)))
    return _merge(merged, doc)


def parse_policy(doc_or_text) -> Policy:
    """Parse a policy from YAML text or an already-loaded mapping."""
    if isinstance(doc_or_text, (str, bytes)):
        try:
            doc = yaml.safe_load(doc_or_text)
        except yaml.YAMLError as exc:
            raise PolicyParseError(str(exc)) from exc
    else:
        doc = doc_or_text
    doc = _require_mapping(doc, "policy")
    _check_keys(doc, {"chain", "whitelist", "runtime", "location"}, "policy")

    if "chain" not in doc:
        raise PolicyParseError("policy: missing required field chain")
    chain = tuple(pem_decode_all(str(doc["chain"]), "chain"))

    wl = _require_mapping(doc.get("whitelist"), "whitelist")
    _check_keys(wl, {"pcrs"}, "whitelist")
    pcr_nodes = wl.get("pcrs")
    if not isinstance(pcr_nodes, list) or not pcr_nodes:
        raise PolicyParseError("whitelist.pcrs: need at least one PCR entry")
    entries = []
    seen_ids = set()
    for i, node in enumerate(pcr_nodes):
        where = f"whitelist.pcrs[{i}]"
        node = _require_mapping(node, where)
        _check_keys(node, {"id", "sha256"}, where)
        try:
            idx = int(node["id"])
        except (KeyError, TypeError, ValueError):
            raise PolicyParseError(f"{where}: id must be an integer")
        if idx not in VALID_PCR_IDS:
            raise PolicyParseError(f"{where}: pcr {idx} outside 0..15 and 17..19")
        if idx in seen_ids:
            raise PolicyParseError(f"{where}: duplicate pcr id {idx}")
        seen_ids.add(idx)
        try:
            value = bytes.fromhex(str(node["sha256"]))
        except (KeyError, ValueError):
            raise PolicyParseError(f"{where}: sha256 must be hex")
        if len(value) != 32:
            raise PolicyParseError(f"{where}: sha256 must encode 32 bytes")
        entries.append(PcrEntry(idx, value))

    runtime_cert = None
    software: List[SoftwareList] = []
    if "runtime" in doc:
        rt = _require_mapping(doc["runtime"], "runtime")
        _check_keys(rt, {"certificate", "software"}, "runtime")
        if "certificate" in rt:
            certs = pem_decode_all(str(rt["certificate"]), "runtime.certificate")
            if len(certs) != 1:
                raise PolicyParseError("runtime.certificate: exactly one key expected")
            runtime_cert = certs[0]
        for i, node in enumerate(rt.get("software", []) or []):
            where = f"runtime.software[{i}]"
            node = _require_mapping(node, where)
            _check_keys(node, {"name", "whitelist"}, where)
            name = str(node.get("name", f"list-{i}"))
            pairs = []
            for h, p in _require_mapping(node.get("whitelist", {}), f"{where}.whitelist").items():
                try:
                    digest = bytes.fromhex(str(h))
                except ValueError:
                    raise PolicyParseError(f"{where}.whitelist: key {h!r} is not hex")
                if len(digest) != 32:
                    raise PolicyParseError(f"{where}.whitelist: hash must be 32 bytes")
                pairs.append((digest, str(p)))
            software.append(SoftwareList(name, tuple(pairs)))

    location: List[LocationRule] = []
    if "location" in doc:
        nodes = doc["location"]
        if not isinstance(nodes, list):
            raise PolicyParseError("location: expected a list")
        for i, node in enumerate(nodes):
            where = f"location[{i}]"
            node = _require_mapping(node, where)
            _check_keys(node, {"host", "max_latency", "chain"}, where)
            if "host" not in node:
                raise PolicyParseError(f"{where}: missing host")
            try:
                max_latency = float(node["max_latency"])
            except (KeyError, TypeError, ValueError):
                raise PolicyParseError(f"{where}: max_latency must be a number")
            if max_latency <= 0:
                raise PolicyParseError(f"{where}: max_latency must be positive")
            chain_keys = tuple(pem_decode_all(str(node.get("chain", "")), f"{where}.chain"))
            location.append(LocationRule(str(node["host"]), max_latency, chain_keys))

    return Policy(
        tpm_ca_chain=chain,
        pcr_whitelist=tuple(entries),
        runtime_cert=runtime_cert,
        software=tuple(software),
        location=tuple(location),
    )


def render_policy(policy: Policy) -> str:
    """Emit a policy as YAML in the canonical field order."""
    doc: dict = {"chain": "".join(pem_encode(k) for k in policy.tpm_ca_chain)}
    doc["whitelist"] = {
        "pcrs": [{"id": e.index, "sha256": e.value.hex()} for e in policy.pcr_whitelist]
    }
    if policy.runtime_cert is not None or policy.software:
        rt: dict = {}
        if policy.runtime_cert is not None:
            rt["certificate"] = pem_encode(policy.runtime_cert)
        if policy.software:
            rt["software"] = [
                {"name": s.name, "whitelist": {h.hex(): p for h, p in s.hashes}}
                for s in policy.software
            ]
        doc["runtime"] = rt
    if policy.location:
        doc["location"] = [
            {
                "host": rule.host,
                "max_latency": rule.max_latency_ms,
                "chain": "".join(pem_encode(k) for k in rule.beacon_chain),
            }
            for rule in policy.location
        ]
    return yaml.safe_dump(doc, sort_keys=False)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlatformView:
    """Everything the evaluator may look at, frozen for one round.

    Static whitelist values are matched through the obfuscation split: the
    policy's golden value must equal the value the agent sealed at
    initialization, and the current quote value must equal the sealed
    obfuscated value.  Dynamic whitelist values are matched directly
    against the quote.
    """

    quote: Quote
    pcr_values: Dict[int, bytes]
    ek_cert: Certificate
    nonce: bytes
    ima_events: Tuple[Tuple[bytes, str, Optional[bytes]], ...]
    static_original: Dict[int, bytes] = field(default_factory=dict)
    static_obfuscated: Dict[int, bytes] = field(default_factory=dict)
    log_tampered: bool = False
    location_estimates: Dict[str, Optional[float]] = field(default_factory=dict)


def evaluate(policy: Policy, view: PlatformView) -> PolicyVerdict:
    violations: List[Violation] = []

    if view.quote.nonce != view.nonce or not view.quote.verify_signature():
        violations.append(Violation("stale-quote", "quote does not bind the round nonce"))

    if not certificate_valid(view.ek_cert, policy.tpm_ca_chain):
        violations.append(Violation("tpm-cert", "ek certificate does not chain to a trusted ca"))

    for index, golden in sorted(policy.dynamic_entries().items()):
        got = view.pcr_values.get(index)
        if got != golden:
            violations.append(
                Violation("pcr-mismatch", f"dynamic pcr {index} differs from whitelist")
            )
    for index, golden in sorted(policy.static_entries().items()):
        sealed = view.static_original.get(index)
        obfuscated = view.static_obfuscated.get(index)
        got = view.pcr_values.get(index)
        if sealed != golden:
            violations.append(
                Violation("pcr-mismatch", f"static pcr {index} baseline differs from whitelist")
            )
        elif got is None or got != obfuscated:
            violations.append(
                Violation("pcr-mismatch", f"static pcr {index} lost its obfuscated value")
            )

    if view.log_tampered:
        violations.append(Violation("log-tampered", "measurement log diverged from pcr-10"))

    if policy.runtime_cert is not None or policy.software:
        whitelisted = policy.whitelisted_hashes()
        for file_hash, path, signature in view.ima_events:
            if file_hash in whitelisted:
                continue
            if (
                policy.runtime_cert is not None
                and signature is not None
                and verify(signature, file_hash, policy.runtime_cert)
            ):
                continue
            violations.append(
                Violation("untrusted-file", f"{path} is neither whitelisted nor signed")
            )

    if policy.location:
        close_enough = False
        details = []
        for rule in policy.location:
            estimate = view.location_estimates.get(rule.host)
            if estimate is None:
                details.append(f"{rule.host}: unreachable")
            elif estimate <= rule.max_latency_ms:
                close_enough = True
            else:
                details.append(f"{rule.host}: {estimate:.3f} ms > {rule.max_latency_ms} ms")
        if not close_enough:
            violations.append(Violation("location", "; ".join(details) or "no beacon in reach"))

    return PolicyVerdict(compliant=not violations, violations=tuple(violations))


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------


class PolicyRegistry:
    """In-memory policy store keyed by random 128-bit ids (hex strings)."""

    def __init__(self):
        self._policies: Dict[str, Policy] = {}

    def insert(self, policy: Policy, rng) -> str:
        policy_id = rng.bytes(POLICY_ID_LEN).hex()
        self._policies[policy_id] = policy
        return policy_id

    def get(self, policy_id: str) -> Policy:
        try:
            return self._policies[policy_id]
        except KeyError:
            raise UnknownPolicyId(policy_id)

    def __len__(self) -> int:
        return len(self._policies)

    def ids(self):
        return tuple(self._policies)
