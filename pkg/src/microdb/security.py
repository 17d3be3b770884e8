"""Security domain: tokens, roles and grants, sharing policies, crypto.

Authorization is default-deny. A request is allowed iff some grant of some
role bound to the subject covers the interface, matches the store, and its
key range contains the whole requested range. The policy set is an
immutable snapshot swapped atomically on every admin change, so
``authorize`` never observes a half-applied edit.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Protocol, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.keywrap import InvalidUnwrap, aes_key_unwrap, aes_key_wrap

from . import codec
from .errors import (
    AuthFailure,
    BadSignature,
    DecodeError,
    Expired,
    InvalidGrant,
    Malformed,
    NoKey,
    UnknownRole,
)
from .records import KeyRange, Record

logger = logging.getLogger(__name__)

TIER_KINDS = ("device", "local", "regional", "global")
MAC_LEN = 32


def tiers_adjacent(a: str, b: str) -> bool:
    return abs(TIER_KINDS.index(a) - TIER_KINDS.index(b)) == 1


class Interface(str, Enum):
    EXCHANGE_CREATE = "exchange-create"
    EXCHANGE_READ = "exchange-read"
    EXCHANGE_UPDATE = "exchange-update"
    EXCHANGE_DELETE = "exchange-delete"
    SUBSCRIBE = "subscribe"
    ADMIN = "admin"
    SYNC = "sync"


@dataclass(frozen=True)
class Principal:
    subject: str
    issuer: str = "local"
    expiry_ns: int = 2**63 - 1


@dataclass(frozen=True)
class Grant:
    interface: Interface
    store: str = "*"
    range: Optional[KeyRange] = None
    policy_ref: Optional[str] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "interface", Interface(self.interface))
        except ValueError:
            raise InvalidGrant(f"unknown interface {self.interface!r}") from None
        if not self.store:
            raise InvalidGrant("grant store pattern must be a name or '*'")

    def to_json(self) -> dict:
        return {
            "interface": self.interface.value,
            "store": self.store,
            "range": self.range.to_json() if self.range is not None else None,
            "policy": self.policy_ref,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Grant":
        try:
            rng = KeyRange.from_json(data.get("range"))
        except (ValueError, TypeError) as exc:
            raise InvalidGrant(f"bad grant range: {exc}") from None
        return cls(data["interface"], data.get("store", "*"), rng, data.get("policy"))


@dataclass(frozen=True)
class Role:
    name: str
    grants: tuple[Grant, ...]

    def __post_init__(self):
        object.__setattr__(self, "grants", tuple(self.grants))
        if not self.grants:
            raise InvalidGrant(f"role {self.name!r} has no grants")

    def to_json(self) -> dict:
        return {"name": self.name, "grants": [g.to_json() for g in self.grants]}

    @classmethod
    def from_json(cls, data: dict) -> "Role":
        return cls(data["name"], tuple(Grant.from_json(g) for g in data.get("grants", [])))


@dataclass(frozen=True)
class SharingPolicy:
    name: str
    eula_digest: bytes
    allow_synchronization: bool = True
    allowed_tier_kinds: frozenset = frozenset(TIER_KINDS)

    def __post_init__(self):
        object.__setattr__(self, "allowed_tier_kinds", frozenset(self.allowed_tier_kinds))
        if len(self.eula_digest) != 32:
            raise InvalidGrant(f"policy {self.name!r}: EULA digest must be 32 bytes")
        bad = self.allowed_tier_kinds - set(TIER_KINDS)
        if bad:
            raise InvalidGrant(f"policy {self.name!r}: unknown tier kinds {sorted(bad)}")

    def allows(self, tier_kind: str) -> bool:
        return self.allow_synchronization and tier_kind in self.allowed_tier_kinds

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "eula_digest": self.eula_digest.hex(),
            "allow_synchronization": self.allow_synchronization,
            "allowed_tier_kinds": sorted(self.allowed_tier_kinds, key=TIER_KINDS.index),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SharingPolicy":
        if "eula_digest" in data:
            digest = bytes.fromhex(data["eula_digest"])
        else:
            digest = hashlib.sha256(data.get("eula_text", "").encode()).digest()
        return cls(
            data["name"],
            digest,
            bool(data.get("allow_synchronization", True)),
            frozenset(data.get("allowed_tier_kinds", TIER_KINDS)),
        )


@dataclass(frozen=True)
class PolicySet:
    """Immutable snapshot of roles, subject bindings and sharing policies."""

    roles: Mapping[str, Role] = field(default_factory=dict)
    bindings: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    policies: Mapping[str, SharingPolicy] = field(default_factory=dict)
    seq: int = 0

    def __post_init__(self):
        object.__setattr__(self, "roles", MappingProxyType(dict(self.roles)))
        object.__setattr__(self, "bindings", MappingProxyType(dict(self.bindings)))
        object.__setattr__(self, "policies", MappingProxyType(dict(self.policies)))

    def evolve(self, **changes) -> "PolicySet":
        data = {"roles": self.roles, "bindings": self.bindings, "policies": self.policies, "seq": self.seq + 1}
        data.update(changes)
        return PolicySet(**data)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "roles": [self.roles[n].to_json() for n in sorted(self.roles)],
            "bindings": {s: list(self.bindings[s]) for s in sorted(self.bindings)},
            "policies": [self.policies[n].to_json() for n in sorted(self.policies)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PolicySet":
        roles = {r["name"]: Role.from_json(r) for r in data.get("roles", [])}
        policies = {p["name"]: SharingPolicy.from_json(p) for p in data.get("policies", [])}
        bindings = {s: tuple(r) for s, r in data.get("bindings", {}).items()}
        return cls(roles, bindings, policies, int(data.get("seq", 0)))

    def canonical(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    def version(self) -> tuple[int, bytes]:
        """Ordering key between bundles: higher seq wins, digest breaks ties."""
        return (self.seq, self.digest())


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allowed


ALLOW = Decision(True, "allowed")


def grant_matches(grant: Grant, interface: Interface, store: str, request: Optional[KeyRange],
                  policies: Mapping[str, SharingPolicy], ignore_range: bool = False) -> bool:
    if grant.interface is not interface:
        return False
    if grant.store != "*" and grant.store != store:
        return False
    if grant.range is not None and not ignore_range:
        if request is None or not grant.range.covers(request):
            return False
    if grant.policy_ref is not None:
        policy = policies.get(grant.policy_ref)
        if policy is None:
            return False
        if interface is Interface.SYNC and not policy.allow_synchronization:
            return False
    return True


def evaluate(policy_set: PolicySet, implicit: Mapping[str, tuple[Grant, ...]], subject: str,
             interface: Interface, store: str, request: Optional[KeyRange],
             ignore_range: bool = False) -> Decision:
    interface = Interface(interface)
    role_names = policy_set.bindings.get(subject, ())
    extra = implicit.get(subject, ())
    if not role_names and not extra:
        return Decision(False, f"no roles bound to {subject!r}")
    for name in role_names:
        role = policy_set.roles.get(name)
        if role is None:
            continue
        for grant in role.grants:
            if grant_matches(grant, interface, store, request, policy_set.policies, ignore_range):
                return ALLOW
    for grant in extra:
        if grant_matches(grant, interface, store, request, policy_set.policies, ignore_range):
            return ALLOW
    rng = str(request) if request is not None else "[-inf, +inf)"
    return Decision(False, f"no grant covers {interface.value} on {store!r} {rng}")


class SecurityDomain:
    def __init__(self, trusted_keys: Optional[Mapping[str, bytes]] = None,
                 clock: Callable[[], int] = None, on_change: Callable[[], None] = None):
        self._lock = threading.Lock()
        self._policy = PolicySet()
        self._implicit: dict[str, tuple[Grant, ...]] = {}
        self.trusted_keys: dict[str, bytes] = dict(trusted_keys or {})
        self.clock = clock
        self.on_change = on_change

    @property
    def policy(self) -> PolicySet:
        return self._policy

    def _swap(self, new: PolicySet) -> None:
        self._policy = new
        if self.on_change is not None:
            self.on_change()

    def define_role(self, role: Role) -> None:
        for g in role.grants:
            if g.range is not None and g.range.lo is not None and g.range.hi is not None \
                    and not g.range.lo < g.range.hi:
                raise InvalidGrant(f"empty range in role {role.name!r}")
        with self._lock:
            roles = dict(self._policy.roles)
            roles[role.name] = role
            self._swap(self._policy.evolve(roles=roles))

    def drop_role(self, name: str) -> None:
        with self._lock:
            if name not in self._policy.roles:
                raise UnknownRole(f"no role {name!r}")
            roles = dict(self._policy.roles)
            del roles[name]
            self._swap(self._policy.evolve(roles=roles))

    def provision(self, subject: str, roles: Union[str, Iterable[str]], extend: bool = False) -> None:
        """Bind ``subject`` to ``roles``, replacing its previous binding unless ``extend``."""
        names = (roles,) if isinstance(roles, str) else tuple(roles)
        with self._lock:
            for n in names:
                if n not in self._policy.roles:
                    raise UnknownRole(f"no role {n!r}")
            bindings = dict(self._policy.bindings)
            if extend:
                names = tuple(dict.fromkeys(bindings.get(subject, ()) + names))
            bindings[subject] = names
            self._swap(self._policy.evolve(bindings=bindings))

    def define_policy(self, policy: SharingPolicy) -> None:
        with self._lock:
            policies = dict(self._policy.policies)
            policies[policy.name] = policy
            self._swap(self._policy.evolve(policies=policies))

    def adopt(self, bundle: PolicySet) -> bool:
        """Replace the policy set with ``bundle`` if it is the newer version."""
        with self._lock:
            if bundle.version() <= self._policy.version():
                return False
            self._swap(bundle)
            return True

    def roles_of(self, subject: str) -> tuple[str, ...]:
        return self._policy.bindings.get(subject, ())

    def set_implicit(self, subject: str, grants: Iterable[Grant]) -> None:
        with self._lock:
            self._implicit[subject] = tuple(grants)

    def clear_implicit(self, subject: str) -> None:
        with self._lock:
            self._implicit.pop(subject, None)

    def authorize(self, principal: Union[Principal, str], interface: Interface, store: str,
                  request: Optional[KeyRange] = None, ignore_range: bool = False) -> Decision:
        subject = principal.subject if isinstance(principal, Principal) else principal
        decision = evaluate(self._policy, self._implicit, subject, interface, store, request, ignore_range)
        logger.debug("authorize %s %s %s %s -> %s", subject, Interface(interface).value, store,
                     request, decision.reason)
        return decision

    def authenticate(self, token: Union[bytes, str]) -> Principal:
        now = self.clock() if self.clock is not None else None
        return verify_token(token, self.trusted_keys, now)


# -- tokens -------------------------------------------------------------------


def _token_payload(subject: str, issuer: str, expiry_ns: int) -> bytes:
    return codec.Writer().str(subject).str(issuer).i64(expiry_ns).getvalue()


def issue_token(subject: str, issuer: str, expiry_ns: int, key: bytes) -> bytes:
    payload = _token_payload(subject, issuer, expiry_ns)
    mac = hmac.new(key, payload, hashlib.sha256).digest()
    return base64.b64encode(payload + mac)


def verify_token(token: Union[bytes, str], trusted_keys: Mapping[str, bytes], now_ns: Optional[int]) -> Principal:
    if isinstance(token, str):
        token = token.strip().encode()
    try:
        raw = base64.b64decode(token, validate=True)
    except (binascii.Error, ValueError):
        raise Malformed("token is not valid base64") from None
    if len(raw) <= MAC_LEN:
        raise Malformed("token too short")
    payload, mac = raw[:-MAC_LEN], raw[-MAC_LEN:]
    # MAC is checked before parsing so any tampering reads as a bad signature
    signer = None
    for issuer, key in trusted_keys.items():
        if hmac.compare_digest(hmac.new(key, payload, hashlib.sha256).digest(), mac):
            signer = issuer
            break
    if signer is None:
        raise BadSignature("token signature does not verify under any trusted key")
    try:
        r = codec.Reader(payload)
        subject, issuer, expiry = r.str(), r.str(), r.i64()
        r.expect_end()
    except DecodeError as exc:
        raise Malformed(f"token payload: {exc}") from None
    if issuer != signer:
        raise BadSignature(f"token claims issuer {issuer!r} but was signed by {signer!r}")
    if now_ns is None:
        now_ns = time.time_ns()
    if expiry <= now_ns:
        raise Expired(f"token for {subject!r} expired")
    return Principal(subject, issuer, expiry)


# -- crypto -------------------------------------------------------------------


class CryptoProvider(Protocol):
    name: str

    def seal(self, key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes: ...

    def open(self, key: bytes, frame: bytes, aad: bytes = b"") -> bytes: ...


class AesGcmProvider:
    """AES-256-GCM with a random 96-bit nonce prepended to the ciphertext."""

    name = "aes-256-gcm"
    NONCE_LEN = 12

    def seal(self, key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
        if not key:
            raise NoKey("no key material")
        nonce = os.urandom(self.NONCE_LEN)
        return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)

    def open(self, key: bytes, frame: bytes, aad: bytes = b"") -> bytes:
        if not key:
            raise NoKey("no key material")
        if len(frame) < self.NONCE_LEN + 16:
            raise AuthFailure("sealed frame too short")
        try:
            return AESGCM(key).decrypt(frame[: self.NONCE_LEN], frame[self.NONCE_LEN:], aad)
        except InvalidTag:
            raise AuthFailure("authentication failed (tampered frame or wrong key)") from None


class XorMacProvider:
    """Deterministic SHA-256 keystream + HMAC tag. Test fixtures only; not a real cipher."""

    name = "xor-mac-test"
    NONCE_LEN = 16
    TAG_LEN = 16

    @staticmethod
    def _stream(key: bytes, nonce: bytes, n: int) -> bytes:
        out = bytearray()
        ctr = 0
        while len(out) < n:
            out += hashlib.sha256(key + nonce + ctr.to_bytes(8, "big")).digest()
            ctr += 1
        return bytes(out[:n])

    def seal(self, key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
        if not key:
            raise NoKey("no key material")
        nonce = hmac.new(key, aad + plaintext, hashlib.sha256).digest()[: self.NONCE_LEN]
        ct = bytes(a ^ b for a, b in zip(plaintext, self._stream(key, nonce, len(plaintext))))
        tag = hmac.new(key, nonce + aad + ct, hashlib.sha256).digest()[: self.TAG_LEN]
        return nonce + ct + tag

    def open(self, key: bytes, frame: bytes, aad: bytes = b"") -> bytes:
        if not key:
            raise NoKey("no key material")
        if len(frame) < self.NONCE_LEN + self.TAG_LEN:
            raise AuthFailure("sealed frame too short")
        nonce, ct, tag = frame[: self.NONCE_LEN], frame[self.NONCE_LEN:-self.TAG_LEN], frame[-self.TAG_LEN:]
        expect = hmac.new(key, nonce + aad + ct, hashlib.sha256).digest()[: self.TAG_LEN]
        if not hmac.compare_digest(expect, tag):
            raise AuthFailure("authentication failed (tampered frame or wrong key)")
        return bytes(a ^ b for a, b in zip(ct, self._stream(key, nonce, len(ct))))


PROVIDERS = {"aes-256-gcm": AesGcmProvider, "xor-mac-test": XorMacProvider}

RECORD_AAD = b"microdb-record-v1"


def seal_record(record: Record, key: Optional[bytes], provider: CryptoProvider) -> bytes:
    if not key:
        raise NoKey("no data key for sealing")
    return provider.seal(key, codec.encode_record(record), RECORD_AAD)


def open_record(frame: bytes, key: Optional[bytes], provider: CryptoProvider) -> Record:
    if not key:
        raise NoKey("no data key for opening")
    return codec.decode_record(provider.open(key, frame, RECORD_AAD))


def derive_key(root: bytes, label: str) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=label.encode()).derive(root)


def wrap_key(owner_key: bytes, data_key: bytes) -> bytes:
    return aes_key_wrap(owner_key, data_key)


def unwrap_key(owner_key: bytes, wrapped: bytes) -> bytes:
    try:
        return aes_key_unwrap(owner_key, wrapped)
    except InvalidUnwrap:
        raise AuthFailure("cannot unwrap store data key with this owner key") from None
