"""Attested evidence trails: collect, sign, anchor, aggregate and verify claims."""

from .aggregate import AggregateResult, Policy, evaluate, parse_policy, sign_policy, verify_policy
from .anchor import AnchorReceipt, Ledger, MerkleProof, leaf_hash, merkle_proof, merkle_root, node_hash, verify_inclusion
from .cas import ContentHash, ContentStore
from .claims import Claim, Signature, canonical_bytes, make_claim, verify_signature
from .claimstore import ClaimStore, VerificationReport, verify_trail
from .clock import ManualClock, SystemClock
from .collect import Collector, EvidenceRecord, SourceSpec, intercept_deployment
from .engine import Advocate
from .gateway import Gateway
from .identity import InstanceConfig, KeyRecord
from .keys import KeyPair, generate_keypair

__version__ = "0.1.0"

__all__ = [
    "Advocate",
    "AggregateResult",
    "AnchorReceipt",
    "Claim",
    "ClaimStore",
    "Collector",
    "ContentHash",
    "ContentStore",
    "EvidenceRecord",
    "Gateway",
    "InstanceConfig",
    "KeyPair",
    "KeyRecord",
    "Ledger",
    "ManualClock",
    "MerkleProof",
    "Policy",
    "Signature",
    "SourceSpec",
    "SystemClock",
    "VerificationReport",
    "canonical_bytes",
    "evaluate",
    "generate_keypair",
    "intercept_deployment",
    "leaf_hash",
    "make_claim",
    "merkle_proof",
    "merkle_root",
    "node_hash",
    "parse_policy",
    "sign_policy",
    "verify_inclusion",
    "verify_policy",
    "verify_signature",
    "verify_trail",
]
