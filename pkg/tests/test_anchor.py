import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advocate.anchor import (
    Ledger,
    MerkleProof,
    flush_batch,
    leaf_hash,
    merkle_proof,
    merkle_proofs,
    merkle_root,
    node_hash,
    receipt_problem,
    recover,
    verify_inclusion,
)
from advocate.cas import ContentHash
from advocate.errors import AlreadyIssued, EmptyBatch, IndexOutOfRange
from oracles import naive_root, sha256

LEAVES = st.lists(st.binary(min_size=32, max_size=32), min_size=1, max_size=40)
WHEN = "2026-01-01T00:00:00Z"

# Frozen from the pure-Python reference tree
ONE_LEAF_ROOT = sha256(b"\x00" + bytes(32))
THREE_LEAF_ROOT = naive_root([bytes([i]) * 32 for i in range(3)])


def test_hash_prefixes_match_reference():
    assert leaf_hash(b"abc") == sha256(b"\x00abc")
    assert node_hash(b"l", b"r") == sha256(b"\x01lr")


def test_small_trees():
    assert merkle_root([bytes(32)]) == ONE_LEAF_ROOT
    leaves = [bytes([i]) * 32 for i in range(3)]
    # unbalanced: the left subtree takes the largest power of two below n
    expected = node_hash(node_hash(leaf_hash(leaves[0]), leaf_hash(leaves[1])), leaf_hash(leaves[2]))
    assert merkle_root(leaves) == expected == THREE_LEAF_ROOT


@settings(deadline=None)
@given(LEAVES)
def test_root_matches_naive_oracle(leaves):
    assert merkle_root(leaves) == naive_root(leaves)


@settings(deadline=None)
@given(LEAVES, st.data())
def test_every_proof_verifies_and_a_flipped_bit_fails(leaves, data):
    proofs = merkle_proofs(leaves)
    for i, proof in enumerate(proofs):
        assert proof.root == merkle_root(leaves)
        assert proof == merkle_proof(leaves, i)
        assert verify_inclusion(leaves[i], proof)
    i = data.draw(st.integers(0, len(leaves) - 1))
    proof = proofs[i]
    if proof.path:
        step = data.draw(st.integers(0, len(proof.path) - 1))
        bit = data.draw(st.integers(0, 255))
        side, h = proof.path[step]
        flipped = bytearray(h)
        flipped[bit // 8] ^= 1 << (bit % 8)
        path = list(proof.path)
        path[step] = (side, bytes(flipped))
        assert not verify_inclusion(leaves[i], MerkleProof(i, tuple(path), proof.root))


def test_proof_for_wrong_leaf_fails():
    leaves = [bytes([i]) * 32 for i in range(5)]
    assert not verify_inclusion(leaves[1], merkle_proof(leaves, 0))


@pytest.mark.parametrize("index", [-1, 3])
def test_proof_index_out_of_range(index):
    with pytest.raises(IndexOutOfRange):
        merkle_proof([bytes(32)] * 3, index)


def test_proof_json_round_trip():
    proof = merkle_proof([bytes([i]) * 32 for i in range(6)], 4)
    assert MerkleProof.from_json(json.loads(json.dumps(proof.to_json()))) == proof


# -- ledger -------------------------------------------------------------


def _leaves(n, tag=0):
    return [sha256(bytes([tag, i])) for i in range(n)]


def test_issue_assigns_consecutive_heights(tmp_path):
    ledger = Ledger(tmp_path / "l.jsonl")
    a = ledger.issue(merkle_root(_leaves(2)), "o", _leaves(2), WHEN)
    b = ledger.issue(merkle_root(_leaves(3, 1)), "o", _leaves(3, 1), WHEN)
    assert (a.height, b.height) == (1, 2)
    assert ledger.receipts(1) == [b]
    reopened = Ledger(tmp_path / "l.jsonl")
    assert reopened.receipts() == [a, b]
    assert reopened.batch_of(_leaves(3, 1)[2]) == b


def test_reissue_is_refused(tmp_path):
    ledger = Ledger(tmp_path / "l.jsonl")
    root = merkle_root(_leaves(2))
    ledger.issue(root, "o", _leaves(2), WHEN)
    with pytest.raises(AlreadyIssued):
        ledger.issue(root, "o", _leaves(2), WHEN)


def test_two_handles_see_each_others_appends(tmp_path):
    first, second = Ledger(tmp_path / "l.jsonl"), Ledger(tmp_path / "l.jsonl")
    first.issue(merkle_root(_leaves(1)), "o", _leaves(1), WHEN)
    r = second.issue(merkle_root(_leaves(1, 9)), "o", _leaves(1, 9), WHEN)
    assert r.height == 2
    assert first.receipts()[-1] == r
    assert first.height == 2


def test_revocation_status(tmp_path):
    ledger = Ledger(tmp_path / "l.jsonl")
    leaves = _leaves(3)
    root = merkle_root(leaves)
    ledger.issue(root, "o", leaves, WHEN)
    assert ledger.status(leaves[0], root).revoked is False
    ledger.revoke(leaves[0], WHEN)
    ledger.revoke(leaves[0], "2026-02-01T00:00:00Z")
    assert ledger.status(leaves[0], root).revoked
    assert not ledger.status(leaves[1], root).revoked
    assert [r.revoked_at for r in ledger.revocations()] == [WHEN]
    ledger.revoke(root, WHEN)
    assert all(ledger.status(leaf, root).revoked for leaf in leaves)
    assert len((tmp_path / "l.jsonl").read_bytes().splitlines()) == 3


def test_damaged_lines_are_skipped_and_counted(tmp_path):
    path = tmp_path / "l.jsonl"
    ledger = Ledger(path)
    ledger.issue(merkle_root(_leaves(2)), "o", _leaves(2), WHEN)
    with open(path, "ab") as fh:
        fh.write(b'{"op":"issue","nonsense":1}\n')
    fresh = Ledger(path)
    assert fresh.damaged == [2]
    assert fresh.height == 1


def test_receipt_well_formedness():
    leaves = _leaves(2)
    good = {
        "root_hex": merkle_root(leaves).hex(),
        "height": 1,
        "anchored_at": WHEN,
        "leaf_count": 2,
        "origin": "o",
        "leaves_hex": [x.hex() for x in leaves],
    }
    assert receipt_problem(good) is None
    assert receipt_problem({**good, "leaf_count": 0, "leaves_hex": []})
    assert receipt_problem({**good, "root_hex": "ab" * 31})
    assert receipt_problem({**good, "root_hex": "00" * 32})
    assert receipt_problem({**good, "origin": "x"}, origin="o")
    assert receipt_problem({**good, "height": 0})


# -- batching and recovery ------------------------------------------------


class Sink:
    def __init__(self):
        self.proofs = {}

    def record_proofs(self, receipt, proofs, receipt_digest):
        for cid, proof in proofs:
            self.proofs[cid] = proof


def test_flush_records_a_proof_per_claim(tmp_path):
    ledger, sink = Ledger(tmp_path / "l.jsonl"), Sink()
    ids = [ContentHash.of(bytes([i])) for i in range(7)]
    receipt = flush_batch(ids, "o", ledger=ledger, sink=sink, when=WHEN, journal=tmp_path / "j")
    assert receipt.leaf_count == 7
    assert receipt.root == naive_root([cid.digest for cid in ids])
    assert all(verify_inclusion(cid.digest, sink.proofs[cid]) for cid in ids)
    assert not (tmp_path / "j").exists()
    with pytest.raises(EmptyBatch):
        flush_batch([], "o", ledger=ledger, sink=sink, when=WHEN)


def test_interrupted_flush_is_recovered(tmp_path):
    class Crash(Exception):
        pass

    def fault(stage):
        if stage == "after-issue":
            raise Crash

    ledger, sink = Ledger(tmp_path / "l.jsonl"), Sink()
    ids = [ContentHash.of(bytes([i])) for i in range(5)]
    with pytest.raises(Crash):
        flush_batch(ids, "o", ledger=ledger, sink=sink, when=WHEN, journal=tmp_path / "j", fault=fault)
    assert sink.proofs == {} and (tmp_path / "j").exists()
    receipt = recover(ledger=Ledger(tmp_path / "l.jsonl"), sink=sink, journal=tmp_path / "j", has_proof=sink.proofs.__contains__)
    assert receipt is not None and receipt.leaf_count == 5
    assert set(sink.proofs) == set(ids)
    assert not os.path.exists(tmp_path / "j")
    assert recover(ledger=ledger, sink=sink, journal=tmp_path / "j", has_proof=sink.proofs.__contains__) is None
