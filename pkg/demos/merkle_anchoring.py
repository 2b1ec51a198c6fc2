"""Merkle batching by hand: roots, inclusion proofs and what a flipped bit does."""

from __future__ import annotations

import hashlib

from advocate import merkle_proof, merkle_root, verify_inclusion


def main() -> None:
    leaves = [hashlib.sha256(f"claim-{i}".encode()).digest() for i in range(7)]
    root = merkle_root(leaves)
    print(f"7 leaves -> root {root.hex()}")

    proof = merkle_proof(leaves, 4)
    print(f"proof for leaf 4 has {len(proof.path)} siblings")
    # the proof carries the root it claims; a verifier compares it with the anchored one
    print("proof root matches anchored root:", proof.root == root)
    print("valid proof verifies:", verify_inclusion(leaves[4], proof))

    tampered = bytearray(leaves[4])
    tampered[0] ^= 1
    print("tampered leaf verifies:", verify_inclusion(bytes(tampered), proof))

    extra = merkle_root(leaves + [hashlib.sha256(b"late").digest()])
    print("adding a leaf changes the root:", extra != root)


if __name__ == "__main__":
    main()
