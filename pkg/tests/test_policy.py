"""Policy schema, template merge, evaluation and registry."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attestsim.crypto import Rng, generate_keypair, issue_certificate, sha256, sign
from attestsim.policy import (
    PlatformView,
    Policy,
    PolicyParseError,
    PolicyRegistry,
    SoftwareList,
    UnknownPolicyId,
    evaluate,
    load_policy,
    parse_policy,
    pem_encode,
    render_policy,
)
from attestsim.tpm import Quote, TpmState


RNG = Rng(2024)
TPM_CA = generate_keypair(RNG.child("tpm-ca"))
BEACON_CA = generate_keypair(RNG.child("beacon-ca"))
IMA_SIGNER = generate_keypair(RNG.child("ima"))

GOLDEN = {
    0: sha256(b"golden-pcr0"),
    3: sha256(b"golden-pcr3"),
    18: sha256(b"golden-pcr18"),
    19: sha256(b"golden-pcr19"),
}


def fixture_policy_text(max_latency=2, location=True):
    """A policy shaped like the deployment example: four PCR entries
    (two static, two dynamic), a runtime section, one location rule."""
    lines = ["chain: |", *_indent(pem_encode(TPM_CA.public)), "whitelist:", "  pcrs:"]
    for idx in (0, 3, 18, 19):
        lines += [f"    - id: {idx}", f"      sha256: {GOLDEN[idx].hex()}"]
    lines += [
        "runtime:",
        "  certificate: |",
        *_indent(pem_encode(IMA_SIGNER.public), 4),
        "  software:",
        "    - name: base-os",
        "      whitelist:",
        f"        {sha256(b'approved-tool').hex()}: /usr/bin/approved",
    ]
    if location:
        lines += [
            "location:",
            "  - host: beacon-1",
            f"    max_latency: {max_latency}",
            "    chain: |",
            *_indent(pem_encode(BEACON_CA.public), 6),
        ]
    return "\n".join(lines) + "\n"


def _indent(pem, n=2):
    pad = " " * n
    return [pad + l for l in pem.strip().splitlines()]


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def test_fixture_parses_with_expected_shape():
    p = parse_policy(fixture_policy_text())
    assert [e.index for e in p.pcr_whitelist] == [0, 3, 18, 19]
    assert p.static_entries().keys() == {0, 3}
    assert p.dynamic_entries().keys() == {18, 19}
    assert p.tpm_ca_chain == (TPM_CA.public,)
    assert p.runtime_cert == IMA_SIGNER.public
    assert p.location[0].host == "beacon-1"
    assert p.location[0].max_latency_ms == 2.0


def test_unknown_fields_rejected():
    bad = fixture_policy_text() + "surprise: 1\n"
    with pytest.raises(PolicyParseError, match="surprise"):
        parse_policy(bad)


@pytest.mark.parametrize("mutator,needle", [
    (lambda d: d["whitelist"]["pcrs"].clear(), "at least one"),
    (lambda d: d["whitelist"]["pcrs"].append({"id": 16, "sha256": "00" * 32}), "outside"),
    (lambda d: d["whitelist"]["pcrs"].append({"id": 22, "sha256": "00" * 32}), "outside"),
    (lambda d: d["location"].__setitem__(0, {**d["location"][0], "max_latency": 0}), "positive"),
    (lambda d: d["location"].__setitem__(0, {**d["location"][0], "max_latency": -3}), "positive"),
    (lambda d: d["whitelist"]["pcrs"].__setitem__(0, {"id": 0, "sha256": "xyz"}), "hex"),
    (lambda d: d.pop("chain"), "chain"),
])
def test_invariant_violations_are_named(mutator, needle):
    import yaml

    doc = yaml.safe_load(fixture_policy_text())
    mutator(doc)
    with pytest.raises(PolicyParseError, match=needle):
        parse_policy(doc)


def test_bad_pem_is_rejected():
    with pytest.raises(PolicyParseError, match="PEM"):
        parse_policy("chain: not-a-pem\nwhitelist:\n  pcrs:\n    - id: 0\n"
                     f"      sha256: {'00' * 32}\n")


def test_duplicate_pcr_ids_rejected():
    text = fixture_policy_text()
    import yaml

    doc = yaml.safe_load(text)
    doc["whitelist"]["pcrs"].append({"id": 0, "sha256": "11" * 32})
    with pytest.raises(PolicyParseError, match="duplicate"):
        parse_policy(doc)


def test_render_parse_roundtrip():
    p = parse_policy(fixture_policy_text())
    assert parse_policy(render_policy(p)) == p


def test_include_merge_last_writer_wins(tmp_path):
    base = tmp_path / "base.yaml"
    base.write_text(fixture_policy_text(max_latency=9))
    child = tmp_path / "child.yaml"
    child.write_text(
        "include: [base.yaml]\n"
        "location:\n"
        "  - host: beacon-1\n"
        "    max_latency: 2\n"
        "    chain: |\n" + "\n".join(_indent(pem_encode(BEACON_CA.public), 6)) + "\n"
    )
    merged = load_policy(child)
    assert merged.location[0].max_latency_ms == 2.0
    assert merged.pcr_whitelist == parse_policy(fixture_policy_text()).pcr_whitelist


def test_include_cycle_detected(tmp_path):
    a = tmp_path / "a.yaml"
    b = tmp_path / "b.yaml"
    a.write_text("include: [b.yaml]\n")
    b.write_text("include: [a.yaml]\n")
    with pytest.raises(PolicyParseError, match="cycle"):
        load_policy(a)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def make_view(**overrides):
    """A fully compliant view for the fixture policy."""
    tpm = TpmState("view-tpm", TPM_CA, RNG.child("view-tpm"))
    aik = tpm.create_aik(RNG.child("view-aik"))
    rnd = sha256(b"round-rnd")
    obfuscated = {i: sha256(GOLDEN[i] + rnd) for i in (0, 3)}
    values = {0: obfuscated[0], 3: obfuscated[3], 18: GOLDEN[18], 19: GOLDEN[19]}
    nonce = sha256(b"verifier-nonce")
    quote = _quote_for(tpm, aik, values, nonce)
    defaults = dict(
        quote=quote,
        pcr_values=values,
        ek_cert=tpm.ek_cert,
        nonce=nonce,
        ima_events=((sha256(b"approved-tool"), "/usr/bin/approved", None),),
        static_original={0: GOLDEN[0], 3: GOLDEN[3]},
        static_obfuscated=obfuscated,
        log_tampered=False,
        location_estimates={"beacon-1": 0.8},
    )
    defaults.update(overrides)
    return PlatformView(**defaults)


def _quote_for(tpm, aik, values, nonce):
    # fabricate a quote certifying exactly `values`
    from attestsim.crypto import sign as _sign
    from attestsim.tpm import composite_digest

    sel = tuple(sorted(values))
    digest = composite_digest([values[i] for i in sel])
    tpm.clock += 1
    payload = digest + nonce + tpm.reboot_counter.to_bytes(8, "big") + tpm.clock.to_bytes(8, "big")
    return Quote(sel, digest, nonce, tpm.reboot_counter, tpm.clock,
                 _sign(payload, tpm.aiks[aik]), aik)


POLICY = parse_policy(fixture_policy_text())


def test_compliant_view_passes():
    verdict = evaluate(POLICY, make_view())
    assert verdict.compliant and verdict.violations == ()


def test_each_violation_kind_fires():
    rogue_ca = generate_keypair(Rng(555))
    rogue_tpm = TpmState("rogue", rogue_ca, Rng(556))

    v = evaluate(POLICY, make_view(ek_cert=rogue_tpm.ek_cert))
    assert [x.kind for x in v.violations] == ["tpm-cert"]

    view = make_view()
    bad_values = {**view.pcr_values, 18: sha256(b"evil")}
    v = evaluate(POLICY, make_view(pcr_values=bad_values))
    assert "pcr-mismatch" in [x.kind for x in v.violations]

    v = evaluate(POLICY, make_view(
        ima_events=((sha256(b"malware"), "/tmp/dropper", None),)))
    assert [x.kind for x in v.violations] == ["untrusted-file"]

    v = evaluate(POLICY, make_view(log_tampered=True))
    assert [x.kind for x in v.violations] == ["log-tampered"]

    v = evaluate(POLICY, make_view(location_estimates={"beacon-1": 5.0}))
    assert [x.kind for x in v.violations] == ["location"]

    view = make_view()
    v = evaluate(POLICY, make_view(nonce=sha256(b"other-nonce")))
    assert "stale-quote" in [x.kind for x in v.violations]


def test_latency_exactly_at_bound_passes():
    assert evaluate(POLICY, make_view(location_estimates={"beacon-1": 2.0})).compliant
    assert not evaluate(POLICY, make_view(location_estimates={"beacon-1": 2.001})).compliant


def test_unreachable_beacon_is_location_violation():
    v = evaluate(POLICY, make_view(location_estimates={}))
    assert [x.kind for x in v.violations] == ["location"]
    assert "unreachable" in v.violations[0].detail


def test_signed_file_passes_without_whitelist():
    content_hash = sha256(b"vendor-tool")
    sig = sign(content_hash, IMA_SIGNER)
    v = evaluate(POLICY, make_view(ima_events=((content_hash, "/usr/bin/vendor", sig),)))
    assert v.compliant


def test_unsigned_static_pcr_drift_detected():
    # static PCR extended mid-run: quote no longer matches sealed obfuscated
    view = make_view()
    drifted = {**view.pcr_values, 0: sha256(view.pcr_values[0] + sha256(b"junk"))}
    v = evaluate(POLICY, make_view(pcr_values=drifted))
    assert "pcr-mismatch" in [x.kind for x in v.violations]


def test_evaluation_is_pure():
    view = make_view()
    assert evaluate(POLICY, view) == evaluate(POLICY, view)


@settings(max_examples=30)
@given(extra=st.lists(st.binary(min_size=32, max_size=32), max_size=5))
def test_whitelist_growth_is_monotone(extra):
    # adding software whitelist entries never breaks a compliant view
    view = make_view()
    assert evaluate(POLICY, view).compliant
    bigger = Policy(
        tpm_ca_chain=POLICY.tpm_ca_chain,
        pcr_whitelist=POLICY.pcr_whitelist,
        runtime_cert=POLICY.runtime_cert,
        software=POLICY.software + (
            SoftwareList("extra", tuple((h, f"/x/{i}") for i, h in enumerate(extra))),
        ),
        location=POLICY.location,
    )
    assert evaluate(bigger, view).compliant


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

def test_registry_ids_are_fresh_16_byte_hex():
    reg = PolicyRegistry()
    rng = Rng(77)
    a = reg.insert(POLICY, rng)
    b = reg.insert(POLICY, rng)
    assert a != b and len(bytes.fromhex(a)) == 16
    assert reg.get(a) is POLICY
    with pytest.raises(UnknownPolicyId):
        reg.get("00" * 16)
