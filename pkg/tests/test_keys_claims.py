import json
import os
import random
import stat

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advocate.cas import ContentHash
from advocate.claims import Claim, canonical_bytes, make_claim, submission_bytes, verify_signature
from advocate.clock import ManualClock
from advocate.errors import InvalidSeed, MissingSelfRef, NonCanonicalNumber, NonCanonicalValue
from advocate.keys import KeyPair, derive_key_id, generate_keypair, load_keypair, save_keypair, verify
from oracles import base58, ed25519_public, ed25519_sign, ed25519_verify, sha256

# RFC 8032 section 7.1, test 1
RFC_SEED = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
RFC_PUBLIC = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
RFC_SIG = bytes.fromhex(
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b"
)

JSON = st.recursive(
    st.none() | st.booleans() | st.integers(min_value=-(2**63), max_value=2**63) | st.text(max_size=12),
    lambda children: st.lists(children, max_size=5) | st.dictionaries(st.text(max_size=8), children, max_size=5),
    max_leaves=25,
)


def test_seeded_key_matches_rfc_vector():
    pair = generate_keypair(RFC_SEED)
    assert pair.public_key == RFC_PUBLIC == ed25519_public(RFC_SEED)
    assert pair.sign(b"") == RFC_SIG
    assert verify(RFC_PUBLIC, b"", RFC_SIG)


def test_key_id_is_base58_of_public_key_digest():
    pair = generate_keypair(RFC_SEED)
    assert pair.key_id == "z" + base58(sha256(RFC_PUBLIC))
    assert derive_key_id(RFC_PUBLIC) == pair.key_id


@settings(max_examples=25, deadline=None)
@given(st.binary(min_size=32, max_size=32), st.binary(max_size=64))
def test_signatures_agree_with_reference_implementation(seed, message):
    pair = generate_keypair(seed)
    sig = pair.sign(message)
    assert pair.public_key == ed25519_public(seed)
    assert sig == ed25519_sign(seed, message)
    assert ed25519_verify(pair.public_key, message, sig)


def test_generated_keys_differ():
    assert generate_keypair().key_id != generate_keypair().key_id


@pytest.mark.parametrize("seed", [b"", bytes(31), bytes(33)])
def test_bad_seed_length(seed):
    with pytest.raises(InvalidSeed):
        generate_keypair(seed)


def test_verify_rejects_garbage():
    pair = generate_keypair(RFC_SEED)
    assert not verify(pair.public_key, b"m", b"short")
    assert not verify(b"not a key", b"m", bytes(64))
    assert not verify(pair.public_key, b"other", RFC_SIG)


def test_key_file_round_trip_and_permissions(tmp_path):
    pair = generate_keypair(RFC_SEED)
    path = tmp_path / "k" / "key.json"
    save_keypair(pair, path)
    assert stat.S_IMODE(os.stat(path).st_mode) == 0o600
    assert load_keypair(path) == pair
    with pytest.raises(FileExistsError):
        save_keypair(pair, path)


def test_public_copy_drops_secret():
    pair = generate_keypair(RFC_SEED)
    public = pair.public()
    assert public.secret_key == b""
    assert pair.secret_key.hex() not in repr(pair)
    assert KeyPair.from_json(pair.to_json()) == pair


# -- canonical JSON -------------------------------------------------------


def test_canonical_form_is_sorted_and_compact():
    assert canonical_bytes({"b": 1, "a": [True, None, "é"]}) == '{"a":[true,null,"é"],"b":1}'.encode()


@pytest.mark.parametrize("value", [1.0, {"x": [0.5]}, float("nan")])
def test_floats_are_rejected(value):
    with pytest.raises(NonCanonicalNumber):
        canonical_bytes(value)


@pytest.mark.parametrize("value", [{1: "x"}, {"s": {1, 2}}, b"bytes"])
def test_non_json_values_are_rejected(value):
    with pytest.raises(NonCanonicalValue):
        canonical_bytes(value)


def _shuffled(value, rng):
    if isinstance(value, dict):
        items = list(value.items())
        rng.shuffle(items)
        return {k: _shuffled(v, rng) for k, v in items}
    if isinstance(value, list):
        return [_shuffled(v, rng) for v in value]
    return value


@given(JSON, st.integers())
def test_canonicalization_ignores_insertion_order(value, seed):
    once = canonical_bytes(value)
    assert canonical_bytes(_shuffled(value, random.Random(seed))) == once
    assert canonical_bytes(json.loads(once)) == once


# -- claims -----------------------------------------------------------------

KEY = generate_keypair(RFC_SEED)
SELF = ContentHash.of(b"self")


def _claim(**kw):
    args = dict(kind="evidence", subject="svc", payload={"n": 1}, self_ref=SELF, prev_ref=None, key=KEY)
    args.update(kw)
    return make_claim(**args, clock=ManualClock())


def test_claim_id_is_digest_of_body_without_id_and_proof():
    claim = _claim()
    body = {k: v for k, v in claim.to_json().items() if k not in ("id", "proof")}
    assert claim.id.digest == sha256(canonical_bytes(body))
    assert verify_signature(claim, KEY.public_key)
    assert ed25519_verify(KEY.public_key, canonical_bytes(body), claim.proof.value)


def test_claim_bytes_round_trip():
    claim = _claim(prev_ref=ContentHash.of(b"prev"))
    assert Claim.from_bytes(claim.to_bytes()) == claim


def test_self_ref_required_except_for_self_claim():
    with pytest.raises(MissingSelfRef):
        _claim(self_ref=None)
    assert _claim(kind="self-claim", self_ref=None).self_ref is None


def test_float_payload_rejected():
    with pytest.raises(NonCanonicalNumber):
        _claim(payload={"ratio": 0.5})


def test_altered_payload_breaks_signature():
    claim = _claim()
    data = claim.to_json()
    data["payload"] = {"n": 2}
    forged = Claim.from_json(data)
    assert forged.computed_id() != forged.id
    assert not verify_signature(forged, KEY.public_key)


def test_other_key_does_not_verify():
    assert not verify_signature(_claim(), generate_keypair(bytes(32)).public_key)


def test_submission_bytes_are_canonical():
    assert submission_bytes("k", "s", {"b": 1, "a": 2}) == b'{"kind":"k","payload":{"a":2,"b":1},"subject":"s"}'
