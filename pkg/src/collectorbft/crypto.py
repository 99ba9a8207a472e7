"""Threshold signature contract, a deterministic mock scheme, and the protocol hash.

The mock keeps the k-of-n semantics of a robust threshold scheme: each
signer holds a secret, shares are keyed tags over (scheme, signer, digest),
and a combined signature is the canonical sorted list of k (signer, tag)
pairs. It is not succinct, so metrics charge every combined signature at
BLS_SIZE bytes instead of its real length.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable

BLS_SIZE = 33
DIGEST_SIZE = 32
TAG_SIZE = 16

SIGMA = "sigma"
TAU = "tau"
PI = "pi"
NODE = "node"
CLIENT = "client"

SCHEME_CODES = {SIGMA: 1, TAU: 2, PI: 3, NODE: 4, CLIENT: 5}
SCHEME_NAMES = {v: k for k, v in SCHEME_CODES.items()}


class CryptoError(ValueError):
    pass


class InsufficientShares(CryptoError):
    pass


class MixedDigests(CryptoError):
    pass


@dataclass(frozen=True, slots=True)
class SchemeDescriptor:
    scheme_tag: str
    threshold: int
    total: int

    def __post_init__(self):
        if not 1 <= self.threshold <= self.total:
            raise ValueError(f"bad threshold {self.threshold} of {self.total}")


@dataclass(frozen=True, slots=True)
class SigShare:
    scheme_tag: str
    signer: int
    digest: bytes
    tag: bytes


@dataclass(frozen=True, slots=True)
class CombinedSig:
    scheme_tag: str
    digest: bytes
    evidence: bytes

    @property
    def accounted_size(self) -> int:
        return BLS_SIZE

    def signers(self) -> tuple[int, ...]:
        parsed = _parse_evidence(self.evidence)
        return tuple(s for s, _ in parsed) if parsed else ()


@dataclass(frozen=True, slots=True)
class SigningKey:
    scheme_tag: str
    signer: int
    secret: bytes


def protocol_hash(seq: int, view: int, payload: bytes) -> bytes:
    """h = H(s || v || r) over the canonical little-endian encoding."""
    return hashlib.sha256(struct.pack("<QQI", seq, view, len(payload)) + payload).digest()


def encode_combined(sig: CombinedSig) -> bytes:
    return (
        struct.pack("<B", SCHEME_CODES[sig.scheme_tag])
        + sig.digest
        + struct.pack("<I", len(sig.evidence))
        + sig.evidence
    )


def nested_digest(sig: CombinedSig) -> bytes:
    """Digest signed when signing over a combined signature, as in tau_i(tau(h))."""
    return hashlib.sha256(b"nested|" + encode_combined(sig)).digest()


def _tag(secret: bytes, scheme_tag: str, signer: int, digest: bytes) -> bytes:
    msg = struct.pack("<BI", SCHEME_CODES[scheme_tag], signer) + digest
    return hashlib.blake2b(msg, key=secret, digest_size=TAG_SIZE).digest()


def _parse_evidence(evidence: bytes):
    if len(evidence) < 4:
        return None
    (count,) = struct.unpack_from("<I", evidence)
    if len(evidence) != 4 + count * (4 + TAG_SIZE):
        return None
    out = []
    off = 4
    for _ in range(count):
        (signer,) = struct.unpack_from("<I", evidence, off)
        out.append((signer, evidence[off + 4 : off + 4 + TAG_SIZE]))
        off += 4 + TAG_SIZE
    return out


def _build_evidence(pairs: list[tuple[int, bytes]]) -> bytes:
    return struct.pack("<I", len(pairs)) + b"".join(
        struct.pack("<I", s) + t for s, t in pairs
    )


class KeyRing:
    """Dealer-generated key material for one cluster and its clients.

    Holds every signer's secret, so it plays both roles of the mock: the
    signing keys handed to replicas and the public verification material.
    Verification results of combined signatures are memoized; they are a
    pure function of the inputs.
    """

    def __init__(self, n: int, thresholds: dict[str, int], n_clients: int = 0,
                 seed: bytes = b"collectorbft"):
        self.n = n
        self.n_clients = n_clients
        self.seed = seed
        self.schemes = {
            tag: SchemeDescriptor(tag, k, n) for tag, k in thresholds.items()
        }
        self.schemes[NODE] = SchemeDescriptor(NODE, 1, n)
        self.schemes[CLIENT] = SchemeDescriptor(CLIENT, 1, max(1, n_clients))
        self._secrets: dict[tuple[str, int], bytes] = {}
        self._verified: dict[tuple, bool] = {}
        self._share_verdicts: dict[tuple, bool] = {}
        # request -> client-auth verdict, filled by message validation
        self.request_cache: dict = {}
        # id(message) -> (message, params key, verdict) for view-change traffic
        self.message_cache: dict = {}

    @classmethod
    def for_cluster(cls, params, n_clients: int = 0, seed: bytes = b"collectorbft"):
        return cls(
            params.n,
            {SIGMA: params.sigma_threshold, TAU: params.tau_threshold, PI: params.pi_threshold},
            n_clients=n_clients,
            seed=seed,
        )

    def _secret(self, scheme_tag: str, signer: int) -> bytes:
        key = (scheme_tag, signer)
        s = self._secrets.get(key)
        if s is None:
            s = hashlib.sha256(
                b"secret|" + self.seed + b"|" + scheme_tag.encode() + struct.pack("<I", signer)
            ).digest()
            self._secrets[key] = s
        return s

    def signing_key(self, scheme_tag: str, signer: int) -> SigningKey:
        if not self._in_range(scheme_tag, signer):
            raise ValueError(f"signer {signer} outside scheme {scheme_tag}")
        return SigningKey(scheme_tag, signer, self._secret(scheme_tag, signer))

    def _in_range(self, scheme_tag: str, signer: int) -> bool:
        desc = self.schemes.get(scheme_tag)
        return desc is not None and 1 <= signer <= desc.total

    def sign(self, scheme_tag: str, signer: int, digest: bytes) -> SigShare:
        return sign_share(self.signing_key(scheme_tag, signer), self.schemes[scheme_tag], digest)

    def verify_share(self, share: SigShare) -> bool:
        try:
            key = (share.scheme_tag, share.signer, share.digest, share.tag)
            hit = self._share_verdicts.get(key)
        except TypeError:
            return False
        if hit is None:
            hit = self._check_share(share)
            if len(self._share_verdicts) > 200_000:  # bound memory on long runs
                self._share_verdicts.clear()
            self._share_verdicts[key] = hit
        return hit

    def _check_share(self, share: SigShare) -> bool:
        try:
            if not self._in_range(share.scheme_tag, share.signer):
                return False
            if len(share.digest) != DIGEST_SIZE or len(share.tag) != TAG_SIZE:
                return False
            expect = _tag(self._secret(share.scheme_tag, share.signer),
                          share.scheme_tag, share.signer, share.digest)
            return expect == share.tag
        except (TypeError, KeyError, AttributeError):
            return False

    def combine(self, scheme_tag: str, shares: Iterable[SigShare]) -> CombinedSig:
        return combine(self.schemes[scheme_tag], shares, self)

    def verify_combined(self, sig: CombinedSig) -> bool:
        try:
            key = (sig.scheme_tag, sig.digest, sig.evidence)
            hit = self._verified.get(key)
        except (TypeError, AttributeError):
            return False
        if hit is None:
            hit = self._check_combined(sig)
            if len(self._verified) > 500_000:
                self._verified.clear()
            self._verified[key] = hit
        return hit

    def _check_combined(self, sig: CombinedSig) -> bool:
        desc = self.schemes.get(sig.scheme_tag)
        if desc is None or not isinstance(sig.digest, bytes) or len(sig.digest) != DIGEST_SIZE:
            return False
        if not isinstance(sig.evidence, bytes):
            return False
        pairs = _parse_evidence(sig.evidence)
        if pairs is None or len(pairs) < desc.threshold:
            return False
        last = 0
        for signer, tag in pairs:
            if signer <= last or signer > desc.total:
                return False
            last = signer
            if _tag(self._secret(sig.scheme_tag, signer), sig.scheme_tag, signer, sig.digest) != tag:
                return False
        return True


def sign_share(key: SigningKey, scheme: SchemeDescriptor, digest: bytes) -> SigShare:
    if key.scheme_tag != scheme.scheme_tag:
        raise ValueError("key does not belong to scheme")
    return SigShare(scheme.scheme_tag, key.signer, digest,
                    _tag(key.secret, scheme.scheme_tag, key.signer, digest))


def verify_share(material: KeyRing, share: SigShare) -> bool:
    return material.verify_share(share)


def verify_combined(material: KeyRing, sig: CombinedSig) -> bool:
    return material.verify_combined(sig)


def combine(scheme: SchemeDescriptor, shares: Iterable[SigShare],
            material: KeyRing) -> CombinedSig:
    """Combine k valid shares on one digest; invalid shares are dropped first.

    Shares that verify but disagree on the digest raise MixedDigests.

    The lowest k signer ids are used so the output does not depend on the
    order shares were received or verified in.
    """
    valid: dict[int, bytes] = {}
    digests = set()
    for s in shares:
        if s.scheme_tag == scheme.scheme_tag and material.verify_share(s):
            valid.setdefault(s.signer, s.tag)
            digests.add(s.digest)
    if len(digests) > 1:
        raise MixedDigests(f"{len(digests)} distinct digests among valid shares")
    digest = next(iter(digests), None)
    if len(valid) < scheme.threshold:
        raise InsufficientShares(f"{len(valid)} valid shares, need {scheme.threshold}")
    chosen = sorted(valid.items())[: scheme.threshold]
    return CombinedSig(scheme.scheme_tag, digest, _build_evidence(chosen))
