"""Application-layer cryptography for the testbed.

Real primitives, deterministic consumption: every operation that needs
randomness draws it from an injected seeded source (anything with a
``randbytes(n)`` method, e.g. random.Random), never from ambient entropy,
so identical seeds reproduce identical keys, blobs, and tokens.

The asymmetric slot is filled by a combined keypair: an Ed25519 half for
detached signatures and an X25519 half for key wrapping (ephemeral ECDH +
HKDF + AES-GCM). Credential envelopes use AES-256-CBC under a fresh random
key wrapped to the recipient certificate, armored PEM-style. Media
protection mirrors the sRTP layout: AES-256 in counter mode plus a keyed
hash tag truncated to 80 bits, with a 64-entry replay window.
"""

from __future__ import annotations

import base64
import hmac as hmac_mod
import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM


class CryptoError(Exception):
    """Failed cryptographic operation; no partial plaintext escapes."""


class Rng(Protocol):
    def randbytes(self, n: int) -> bytes: ...


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except Exception as exc:
        raise CryptoError(f"bad base64: {exc}") from exc


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# ---------------------------------------------------------------------------
# Keypairs and certificates

@dataclass(frozen=True)
class PublicKey:
    """Public half of a combined signing + wrapping keypair."""

    sign_pub: bytes  # Ed25519, 32 raw bytes
    wrap_pub: bytes  # X25519, 32 raw bytes
    key_id: str

    def to_dict(self) -> dict:
        return {"sign_pub": _b64(self.sign_pub), "wrap_pub": _b64(self.wrap_pub),
                "key_id": self.key_id}

    @classmethod
    def from_dict(cls, obj: dict) -> "PublicKey":
        return cls(sign_pub=_unb64(obj["sign_pub"]), wrap_pub=_unb64(obj["wrap_pub"]),
                   key_id=obj["key_id"])


@dataclass(frozen=True)
class AsymKeypair:
    sign_priv: bytes
    sign_pub: bytes
    wrap_priv: bytes
    wrap_pub: bytes
    key_id: str

    @property
    def public(self) -> PublicKey:
        return PublicKey(sign_pub=self.sign_pub, wrap_pub=self.wrap_pub,
                         key_id=self.key_id)

    def to_dict(self) -> dict:
        return {"sign_priv": _b64(self.sign_priv), "wrap_priv": _b64(self.wrap_priv),
                "sign_pub": _b64(self.sign_pub), "wrap_pub": _b64(self.wrap_pub),
                "key_id": self.key_id}

    @classmethod
    def from_dict(cls, obj: dict) -> "AsymKeypair":
        return cls(sign_priv=_unb64(obj["sign_priv"]), sign_pub=_unb64(obj["sign_pub"]),
                   wrap_priv=_unb64(obj["wrap_priv"]), wrap_pub=_unb64(obj["wrap_pub"]),
                   key_id=obj["key_id"])


def keygen(rng: Rng) -> AsymKeypair:
    """Deterministically derive a fresh keypair from the seeded source."""
    sign_priv = rng.randbytes(32)
    wrap_priv = rng.randbytes(32)
    sign_pub = Ed25519PrivateKey.from_private_bytes(sign_priv).public_key().public_bytes_raw()
    wrap_pub = X25519PrivateKey.from_private_bytes(wrap_priv).public_key().public_bytes_raw()
    key_id = hashlib.sha256(sign_pub + wrap_pub).hexdigest()[:16]
    return AsymKeypair(sign_priv=sign_priv, sign_pub=sign_pub,
                       wrap_priv=wrap_priv, wrap_pub=wrap_pub, key_id=key_id)


def sign_detached(keypair: AsymKeypair, data: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(keypair.sign_priv).sign(data)


def verify_detached(public: PublicKey, data: bytes, signature: bytes) -> bool:
    """True iff signature covers data under this key. Never raises."""
    try:
        Ed25519PublicKey.from_public_bytes(public.sign_pub).verify(signature, data)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


@dataclass(frozen=True)
class DeviceCertificate:
    """Self-signed binding of a device serial to its pairing public key."""

    subject: str
    public: PublicKey
    signature: bytes

    def signed_bytes(self) -> bytes:
        return _canonical_json({"subject": self.subject, **self.public.to_dict()})

    def to_dict(self) -> dict:
        return {"subject": self.subject, "public": self.public.to_dict(),
                "signature": _b64(self.signature)}

    @classmethod
    def from_dict(cls, obj: dict) -> "DeviceCertificate":
        return cls(subject=obj["subject"], public=PublicKey.from_dict(obj["public"]),
                   signature=_unb64(obj["signature"]))


def self_sign(keypair: AsymKeypair, serial: str) -> DeviceCertificate:
    cert = DeviceCertificate(subject=serial, public=keypair.public, signature=b"")
    return DeviceCertificate(subject=serial, public=keypair.public,
                             signature=sign_detached(keypair, cert.signed_bytes()))


def verify_certificate(cert: DeviceCertificate) -> bool:
    return verify_detached(cert.public, cert.signed_bytes(), cert.signature)


# ---------------------------------------------------------------------------
# AES-256-CBC core and key wrapping

AES_BLOCK = 16


def aes256_cbc_encrypt(key: bytes, iv: bytes, plaintext: bytes) -> bytes:
    """Raw CBC core; plaintext must already be block-aligned."""
    if len(key) != 32 or len(iv) != AES_BLOCK:
        raise CryptoError("AES-256-CBC needs a 32-byte key and 16-byte IV")
    if len(plaintext) % AES_BLOCK:
        raise CryptoError("plaintext not block-aligned")
    enc = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    return enc.update(plaintext) + enc.finalize()


def aes256_cbc_decrypt(key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    if len(key) != 32 or len(iv) != AES_BLOCK:
        raise CryptoError("AES-256-CBC needs a 32-byte key and 16-byte IV")
    if not ciphertext or len(ciphertext) % AES_BLOCK:
        raise CryptoError("ciphertext not block-aligned")
    dec = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    return dec.update(ciphertext) + dec.finalize()


def _pkcs7_pad(data: bytes) -> bytes:
    n = AES_BLOCK - len(data) % AES_BLOCK
    return data + bytes([n]) * n


def _pkcs7_unpad(data: bytes) -> bytes:
    if not data:
        raise CryptoError("bad padding")
    n = data[-1]
    if not 1 <= n <= AES_BLOCK or data[-n:] != bytes([n]) * n:
        raise CryptoError("bad padding")
    return data[:-n]


_WRAP_INFO = b"echo-testbed key wrap v1"


def _hkdf_sha256(secret: bytes, info: bytes, length: int = 32) -> bytes:
    prk = hmac_mod.new(b"\x00" * 32, secret, hashlib.sha256).digest()
    okm = b""
    block = b""
    counter = 1
    while len(okm) < length:
        block = hmac_mod.new(prk, block + info + bytes([counter]), hashlib.sha256).digest()
        okm += block
        counter += 1
    return okm[:length]


def wrap_key(recipient: PublicKey, key: bytes, rng: Rng) -> bytes:
    """Wrap a symmetric key to a recipient: ephemeral ECDH + HKDF + GCM.

    Layout: ephemeral public (32) ‖ nonce (12) ‖ GCM ciphertext+tag.
    """
    eph_priv = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    eph_pub = eph_priv.public_key().public_bytes_raw()
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(recipient.wrap_pub))
    kek = _hkdf_sha256(shared, _WRAP_INFO)
    nonce = rng.randbytes(12)
    ct = AESGCM(kek).encrypt(nonce, key, eph_pub)
    return eph_pub + nonce + ct


def unwrap_key(keypair: AsymKeypair, wrapped: bytes) -> bytes:
    if len(wrapped) < 32 + 12 + AES_BLOCK:
        raise CryptoError("unwrap failed: wrapped key too short")
    eph_pub, nonce, ct = wrapped[:32], wrapped[32:44], wrapped[44:]
    try:
        priv = X25519PrivateKey.from_private_bytes(keypair.wrap_priv)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        kek = _hkdf_sha256(shared, _WRAP_INFO)
        return AESGCM(kek).decrypt(nonce, ct, eph_pub)
    except (InvalidTag, ValueError) as exc:
        raise CryptoError("unwrap failed") from exc


# ---------------------------------------------------------------------------
# Credential envelope

_ARMOR_HEAD = "-----BEGIN ENCRYPTED CREDENTIAL-----"
_ARMOR_TAIL = "-----END ENCRYPTED CREDENTIAL-----"


@dataclass(frozen=True)
class EncryptedCredentialBlob:
    """Wrapped key + IV + CBC ciphertext, carried as ASCII armor."""

    wrapped_key: bytes
    iv: bytes
    ciphertext: bytes

    def __post_init__(self):
        if len(self.iv) != AES_BLOCK:
            raise CryptoError("IV must be 16 bytes")
        if not self.ciphertext or len(self.ciphertext) % AES_BLOCK:
            raise CryptoError("ciphertext must be a positive multiple of 16 bytes")

    def to_armor(self) -> str:
        inner = (struct.pack(">H", len(self.wrapped_key)) + self.wrapped_key
                 + self.iv + self.ciphertext)
        b64 = base64.b64encode(inner).decode("ascii")
        lines = [b64[i:i + 64] for i in range(0, len(b64), 64)]
        return "\n".join([_ARMOR_HEAD, *lines, _ARMOR_TAIL]) + "\n"

    @classmethod
    def from_armor(cls, text: str) -> "EncryptedCredentialBlob":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        if len(lines) < 3 or lines[0] != _ARMOR_HEAD or lines[-1] != _ARMOR_TAIL:
            raise CryptoError("bad armor markers")
        try:
            inner = base64.b64decode("".join(lines[1:-1]), validate=True)
        except Exception as exc:
            raise CryptoError("armor body is not base64") from exc
        if len(inner) < 2:
            raise CryptoError("armor body truncated")
        (wrapped_len,) = struct.unpack(">H", inner[:2])
        wrapped = inner[2:2 + wrapped_len]
        if len(wrapped) != wrapped_len:
            raise CryptoError("armor body truncated")
        rest = inner[2 + wrapped_len:]
        if len(rest) < AES_BLOCK + AES_BLOCK:
            raise CryptoError("armor body truncated")
        return cls(wrapped_key=wrapped, iv=rest[:AES_BLOCK], ciphertext=rest[AES_BLOCK:])


def encrypt_credential(credential, cert: DeviceCertificate, rng: Rng) -> EncryptedCredentialBlob:
    """Encrypt a Wi-Fi credential to a device certificate.

    Fresh 32-byte key and 16-byte IV per call; the key rides wrapped to the
    certificate's public key; the plaintext is the credential's canonical
    serialization, PKCS7-padded.
    """
    credential.validate()
    key = rng.randbytes(32)
    iv = rng.randbytes(16)
    ciphertext = aes256_cbc_encrypt(key, iv, _pkcs7_pad(credential.canonical_bytes()))
    return EncryptedCredentialBlob(wrapped_key=wrap_key(cert.public, key, rng),
                                   iv=iv, ciphertext=ciphertext)


def decrypt_credential(blob: EncryptedCredentialBlob, keypair: AsymKeypair):
    """Recover the credential, or fail without releasing partial plaintext."""
    from .client import WifiCredential

    key = unwrap_key(keypair, blob.wrapped_key)
    padded = aes256_cbc_decrypt(key, blob.iv, blob.ciphertext)
    plaintext = _pkcs7_unpad(padded)
    try:
        return WifiCredential.from_canonical_bytes(plaintext)
    except ValueError as exc:
        raise CryptoError(f"credential plaintext malformed: {exc}") from exc


# ---------------------------------------------------------------------------
# Cloud auth token

@dataclass(frozen=True)
class AuthToken:
    """Opaque to everyone but the cloud keypair holder.

    Internal layout (cloud-side only): nonce ‖ wrapped-key length ‖ wrapped
    key ‖ GCM ciphertext of {account id, device serial, issue time}. The
    real device token is only known to *appear* to carry encrypted data;
    this layout is normative for the testbed alone.
    """

    blob: bytes

    def b64(self) -> str:
        return _b64(self.blob)

    @classmethod
    def from_b64(cls, text: str) -> "AuthToken":
        return cls(blob=_unb64(text))


def mint_auth_token(cloud_keypair: AsymKeypair, account_id: str, serial: str,
                    now: int, rng: Rng) -> AuthToken:
    payload = _canonical_json({"account": account_id, "serial": serial, "issued": now})
    key = rng.randbytes(32)
    nonce = rng.randbytes(12)
    ct = AESGCM(key).encrypt(nonce, payload, b"auth-token")
    wrapped = wrap_key(cloud_keypair.public, key, rng)
    blob = nonce + struct.pack(">H", len(wrapped)) + wrapped + ct
    return AuthToken(blob=blob)


def open_auth_token(cloud_keypair: AsymKeypair, token: AuthToken) -> dict:
    """Decrypt and return {account, serial, issued}; any tamper fails."""
    blob = token.blob
    if len(blob) < 14:
        raise CryptoError("token truncated")
    nonce = blob[:12]
    (wrapped_len,) = struct.unpack(">H", blob[12:14])
    wrapped = blob[14:14 + wrapped_len]
    ct = blob[14 + wrapped_len:]
    if len(wrapped) != wrapped_len or not ct:
        raise CryptoError("token truncated")
    key = unwrap_key(cloud_keypair, wrapped)
    try:
        payload = AESGCM(key).decrypt(nonce, ct, b"auth-token")
    except InvalidTag as exc:
        raise CryptoError("token tampered") from exc
    obj = json.loads(payload)
    return {"account": obj["account"], "serial": obj["serial"], "issued": obj["issued"]}


# ---------------------------------------------------------------------------
# Call authorization token

@dataclass(frozen=True)
class CallAuthToken:
    """Single-use call grant, bound to both calling and called URIs."""

    caller: str
    callee: str
    call_type: str  # "regular" | "intercom"
    issued_at: int  # virtual-clock time; same unit as the verifier's now
    ttl: int
    nonce: bytes    # 16 bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return _canonical_json({
            "caller": self.caller, "callee": self.callee, "type": self.call_type,
            "issued_at": self.issued_at, "ttl": self.ttl, "nonce": _b64(self.nonce),
        })

    def encode(self) -> bytes:
        return _canonical_json({
            "caller": self.caller, "callee": self.callee, "type": self.call_type,
            "issued_at": self.issued_at, "ttl": self.ttl, "nonce": _b64(self.nonce),
            "signature": _b64(self.signature),
        })

    def b64(self) -> str:
        return _b64(self.encode())

    @classmethod
    def decode(cls, data: bytes) -> "CallAuthToken":
        try:
            obj = json.loads(data.decode("utf-8"))
            return cls(caller=obj["caller"], callee=obj["callee"], call_type=obj["type"],
                       issued_at=int(obj["issued_at"]), ttl=int(obj["ttl"]),
                       nonce=_unb64(obj["nonce"]), signature=_unb64(obj["signature"]))
        except CryptoError:
            raise
        except Exception as exc:
            raise CryptoError(f"bad call token encoding: {exc}") from exc

    @classmethod
    def from_b64(cls, text: str) -> "CallAuthToken":
        return cls.decode(_unb64(text))


def mint_call_token(signing_keypair: AsymKeypair, caller: str, callee: str,
                    call_type: str, ttl: int, now: int, rng: Rng) -> CallAuthToken:
    if ttl <= 0:
        raise CryptoError("ttl must be positive")
    token = CallAuthToken(caller=caller, callee=callee, call_type=call_type,
                          issued_at=now, ttl=ttl, nonce=rng.randbytes(16), signature=b"")
    return CallAuthToken(caller=token.caller, callee=token.callee,
                         call_type=token.call_type, issued_at=token.issued_at,
                         ttl=token.ttl, nonce=token.nonce,
                         signature=sign_detached(signing_keypair, token.signed_bytes()))


def verify_call_token(public: PublicKey, token: CallAuthToken, caller: str,
                      callee: str, now: int, nonce_cache: set) -> bool:
    """True iff the signature holds, URIs match exactly, the token is
    unexpired, and its nonce is unseen.

    An authentically signed token burns its nonce on any verification
    attempt, successful or not, so a verdict can never flip back to true.
    """
    if not verify_detached(public, token.signed_bytes(), token.signature):
        return False
    seen = token.nonce in nonce_cache
    nonce_cache.add(token.nonce)
    if seen:
        return False
    if token.caller != caller or token.callee != callee:
        return False
    if now >= token.issued_at + token.ttl:
        return False
    return True


# ---------------------------------------------------------------------------
# Media protection (sRTP-style)

SRTP_TAG_LEN = 10
SRTP_MAX_INDEX = 2 ** 48
REPLAY_WINDOW = 64

_RTP_HEADER = struct.Struct(">III")  # seq (low 32 bits of index), timestamp, ssrc


@dataclass
class SrtpContext:
    """Keys and anti-replay state for one media direction.

    Single-owner mutable state: one context per direction, never shared.
    """

    master_key: bytes
    master_salt: bytes
    cipher_key: bytes
    auth_key: bytes
    session_salt: bytes
    ssrc: int
    send_index: int = 0
    recv_roc: int = 0
    recv_highest: int = -1
    recv_window: int = 0  # bitmask of the last REPLAY_WINDOW indexes
    replay_drops: int = 0
    auth_failures: int = 0


def _kdf(master_key: bytes, master_salt: bytes, label: int, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hmac_mod.new(master_key, master_salt + bytes([label, counter]),
                            hashlib.sha256).digest()
        counter += 1
    return out[:length]


def srtp_derive(master_key: bytes, master_salt: bytes, ssrc: int | None = None) -> SrtpContext:
    """Derive session keys from the master secret; distinct labels keep the
    cipher and auth keys independent."""
    if len(master_key) != 32:
        raise CryptoError("master key must be 32 bytes")
    if len(master_salt) != 14:
        raise CryptoError("master salt must be 14 bytes")
    cipher_key = _kdf(master_key, master_salt, 0x00, 32)
    auth_key = _kdf(master_key, master_salt, 0x01, 32)
    session_salt = _kdf(master_key, master_salt, 0x02, 14)
    if ssrc is None:
        ssrc = struct.unpack(">I", _kdf(master_key, master_salt, 0x03, 4))[0]
    return SrtpContext(master_key=master_key, master_salt=master_salt,
                       cipher_key=cipher_key, auth_key=auth_key,
                       session_salt=session_salt, ssrc=ssrc)


def _ctr_iv(ctx: SrtpContext, index: int) -> bytes:
    salt = int.from_bytes(ctx.session_salt + b"\x00\x00", "big")
    iv = salt ^ (ctx.ssrc << 64) ^ (index << 16)
    return iv.to_bytes(16, "big")


def _ctr_crypt(ctx: SrtpContext, index: int, data: bytes) -> bytes:
    cipher = Cipher(algorithms.AES(ctx.cipher_key), modes.CTR(_ctr_iv(ctx, index)))
    enc = cipher.encryptor()
    return enc.update(data) + enc.finalize()


def srtp_protect(ctx: SrtpContext, payload: bytes) -> bytes:
    """Protect one frame: 12-byte header ‖ ciphertext ‖ 10-byte tag."""
    if not payload:
        raise CryptoError("empty payload")
    index = ctx.send_index
    if index >= SRTP_MAX_INDEX:
        raise CryptoError("sequence wrap at 2^48")
    header = _RTP_HEADER.pack(index & 0xFFFFFFFF, (index * 160) & 0xFFFFFFFF, ctx.ssrc)
    ciphertext = _ctr_crypt(ctx, index, payload)
    tag = hmac_mod.new(ctx.auth_key, header + ciphertext, hashlib.sha256).digest()[:SRTP_TAG_LEN]
    ctx.send_index = index + 1
    return header + ciphertext + tag


def _recover_index(ctx: SrtpContext, seq32: int) -> int:
    # 32-bit sequence plus a rollover count; flows are near-monotonic, so a
    # large backwards jump means the counter wrapped.
    if ctx.recv_highest >= 0:
        last32 = ctx.recv_highest & 0xFFFFFFFF
        if seq32 < last32 and last32 - seq32 > 0x80000000:
            return ((ctx.recv_roc + 1) << 32) | seq32
    return (ctx.recv_roc << 32) | seq32


def srtp_unprotect(ctx: SrtpContext, packet: bytes) -> bytes:
    """Verify the tag before any decryption, then enforce the replay window."""
    if len(packet) < _RTP_HEADER.size + 1 + SRTP_TAG_LEN:
        ctx.auth_failures += 1
        raise CryptoError("auth: packet too short")
    header = packet[:_RTP_HEADER.size]
    ciphertext = packet[_RTP_HEADER.size:-SRTP_TAG_LEN]
    tag = packet[-SRTP_TAG_LEN:]
    seq32, _, ssrc = _RTP_HEADER.unpack(header)
    if ssrc != ctx.ssrc:
        raise CryptoError(f"unknown ssrc {ssrc:#x}")
    expected = hmac_mod.new(ctx.auth_key, header + ciphertext,
                            hashlib.sha256).digest()[:SRTP_TAG_LEN]
    if not hmac_mod.compare_digest(tag, expected):
        ctx.auth_failures += 1
        raise CryptoError("auth: bad tag")
    index = _recover_index(ctx, seq32)
    delta = index - ctx.recv_highest
    if ctx.recv_highest >= 0:
        if delta <= 0:
            if -delta >= REPLAY_WINDOW or (ctx.recv_window >> -delta) & 1:
                ctx.replay_drops += 1
                raise CryptoError(f"replay: index {index}")
    payload = _ctr_crypt(ctx, index, ciphertext)
    if delta > 0 or ctx.recv_highest < 0:
        shift = delta if ctx.recv_highest >= 0 else 1
        ctx.recv_window = ((ctx.recv_window << shift) | 1) & (2 ** REPLAY_WINDOW - 1)
        ctx.recv_highest = index
        ctx.recv_roc = index >> 32
    else:
        ctx.recv_window |= 1 << -delta
    return payload
