"""Crypto tests.

The AES-256-CBC known answers below were produced with `openssl enc` ahead
of time and are frozen here; nothing in this file derives them from the
code under test.
"""

import random

import pytest
from hypothesis import given, settings, strategies as st

from echo_testbed import crypto
from echo_testbed.client import WifiCredential
from echo_testbed.crypto import (
    AsymKeypair,
    AuthToken,
    CallAuthToken,
    CryptoError,
    EncryptedCredentialBlob,
    aes256_cbc_decrypt,
    aes256_cbc_encrypt,
    decrypt_credential,
    encrypt_credential,
    keygen,
    mint_auth_token,
    mint_call_token,
    open_auth_token,
    self_sign,
    sign_detached,
    srtp_derive,
    srtp_protect,
    srtp_unprotect,
    unwrap_key,
    verify_call_token,
    verify_certificate,
    verify_detached,
    wrap_key,
)


def rng(seed=1234):
    return random.Random(seed)


# ---------------------------------------------------------------------------
# AES-256-CBC known answers (openssl enc -aes-256-cbc -nopad)

class TestAesKat:
    def test_all_zero_vector(self):
        key = bytes(32)
        iv = bytes(16)
        ct = aes256_cbc_encrypt(key, iv, bytes(16))
        assert ct.hex() == "dc95c078a2408989ad48a21492842087"
        assert aes256_cbc_decrypt(key, iv, ct) == bytes(16)

    def test_single_block_vector(self):
        key = bytes.fromhex("603deb1015ca71be2b73aef0857d7781"
                            "1f352c073b6108d72d9810a30914dff4")
        iv = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
        pt = bytes.fromhex("0102030405060708090a0b0c0d0e0f10")
        assert aes256_cbc_encrypt(key, iv, pt).hex() == "258816364f93d7b76b41e61b20f00beb"

    def test_two_block_chaining_vector(self):
        key = bytes.fromhex("603deb1015ca71be2b73aef0857d7781"
                            "1f352c073b6108d72d9810a30914dff4")
        iv = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
        pt = bytes.fromhex("0102030405060708090a0b0c0d0e0f10") * 2
        assert aes256_cbc_encrypt(key, iv, pt).hex() == (
            "258816364f93d7b76b41e61b20f00beb"
            "aae3800f39c18e378e69751342fe4cfc")

    def test_unaligned_plaintext_rejected(self):
        with pytest.raises(CryptoError):
            aes256_cbc_encrypt(bytes(32), bytes(16), b"short")

    def test_bad_key_size_rejected(self):
        with pytest.raises(CryptoError):
            aes256_cbc_encrypt(bytes(16), bytes(16), bytes(16))


# ---------------------------------------------------------------------------
# Keypairs, certificates, signatures

class TestKeys:
    def test_keygen_deterministic(self):
        a = keygen(rng(7))
        b = keygen(rng(7))
        assert a == b
        assert a != keygen(rng(8))

    def test_round_trip_dict(self):
        kp = keygen(rng())
        assert AsymKeypair.from_dict(kp.to_dict()) == kp

    def test_sign_verify(self):
        kp = keygen(rng())
        sig = sign_detached(kp, b"hello")
        assert verify_detached(kp.public, b"hello", sig)
        assert not verify_detached(kp.public, b"hellp", sig)
        assert not verify_detached(keygen(rng(2)).public, b"hello", sig)

    def test_verify_never_raises_on_garbage(self):
        kp = keygen(rng())
        assert not verify_detached(kp.public, b"data", b"")
        assert not verify_detached(kp.public, b"data", b"\x00" * 64)

    def test_certificate(self):
        kp = keygen(rng())
        cert = self_sign(kp, "G090LF09643605VS")
        assert cert.subject == "G090LF09643605VS"
        assert verify_certificate(cert)

    def test_tampered_certificate_fails(self):
        cert = self_sign(keygen(rng()), "G090LF09643605VS")
        forged = crypto.DeviceCertificate(subject="G090LF0964360EVL",
                                          public=cert.public, signature=cert.signature)
        assert not verify_certificate(forged)


# ---------------------------------------------------------------------------
# Key wrap

class TestWrap:
    def test_round_trip(self):
        kp = keygen(rng())
        key = rng(5).randbytes(32)
        wrapped = wrap_key(kp.public, key, rng(6))
        assert unwrap_key(kp, wrapped) == key

    def test_wrong_recipient_fails(self):
        kp, other = keygen(rng(1)), keygen(rng(2))
        wrapped = wrap_key(kp.public, bytes(32), rng(3))
        with pytest.raises(CryptoError):
            unwrap_key(other, wrapped)

    def test_any_byte_flip_fails(self):
        kp = keygen(rng())
        wrapped = bytearray(wrap_key(kp.public, bytes(range(32)), rng(9)))
        r = rng(10)
        for _ in range(20):
            i = r.randrange(len(wrapped))
            mutated = bytearray(wrapped)
            mutated[i] ^= 0x01 + r.randrange(255)
            with pytest.raises(CryptoError):
                unwrap_key(kp, bytes(mutated))

    def test_truncated_fails(self):
        kp = keygen(rng())
        with pytest.raises(CryptoError):
            unwrap_key(kp, b"\x00" * 16)


# ---------------------------------------------------------------------------
# Credential envelope

CRED = WifiCredential(ssid="HomeWifi", passphrase="hunter2-hunter2", security="wpa2")


class TestCredential:
    def test_round_trip(self):
        kp = keygen(rng())
        cert = self_sign(kp, "G090LF09643605VS")
        blob = encrypt_credential(CRED, cert, rng(42))
        assert decrypt_credential(blob, kp) == CRED

    def test_armor_round_trip(self):
        kp = keygen(rng())
        blob = encrypt_credential(CRED, self_sign(kp, "s"), rng(42))
        armored = blob.to_armor()
        assert armored.startswith("-----BEGIN ENCRYPTED CREDENTIAL-----")
        assert armored.rstrip().endswith("-----END ENCRYPTED CREDENTIAL-----")
        assert decrypt_credential(EncryptedCredentialBlob.from_armor(armored), kp) == CRED

    def test_passphrase_not_in_blob(self):
        kp = keygen(rng())
        blob = encrypt_credential(CRED, self_sign(kp, "s"), rng(42))
        assert b"hunter2" not in blob.ciphertext
        assert b"hunter2" not in blob.wrapped_key
        assert "hunter2" not in blob.to_armor()

    def test_wrong_device_key_fails(self):
        kp, other = keygen(rng(1)), keygen(rng(2))
        blob = encrypt_credential(CRED, self_sign(kp, "s"), rng(42))
        with pytest.raises(CryptoError):
            decrypt_credential(blob, other)

    def test_fresh_key_and_iv_per_encryption(self):
        kp = keygen(rng())
        cert = self_sign(kp, "s")
        r = rng(42)
        a = encrypt_credential(CRED, cert, r)
        b = encrypt_credential(CRED, cert, r)
        assert a.iv != b.iv
        assert a.ciphertext != b.ciphertext

    def test_ciphertext_corruption_detected(self):
        kp = keygen(rng())
        blob = encrypt_credential(CRED, self_sign(kp, "s"), rng(42))
        bad = EncryptedCredentialBlob(wrapped_key=blob.wrapped_key, iv=blob.iv,
                                      ciphertext=bytes(len(blob.ciphertext)))
        with pytest.raises(CryptoError):
            decrypt_credential(bad, kp)

    def test_bad_armor_rejected(self):
        with pytest.raises(CryptoError):
            EncryptedCredentialBlob.from_armor("not armor at all")

    @settings(max_examples=50, deadline=None)
    @given(ssid=st.text(min_size=1, max_size=32).filter(lambda s: s == s.strip() and s),
           passphrase=st.text(min_size=8, max_size=63))
    def test_round_trip_property(self, ssid, passphrase):
        kp = keygen(rng())
        cred = WifiCredential(ssid=ssid, passphrase=passphrase, security="wpa2")
        blob = encrypt_credential(cred, self_sign(kp, "s"), rng(42))
        assert decrypt_credential(blob, kp) == cred


# ---------------------------------------------------------------------------
# Cloud auth token

class TestAuthToken:
    def test_round_trip(self):
        cloud = keygen(rng(100))
        tok = mint_auth_token(cloud, "acct-1", "G090LF09643605VS", now=1000, rng=rng(5))
        claims = open_auth_token(cloud, tok)
        assert claims == {"account": "acct-1", "serial": "G090LF09643605VS", "issued": 1000}

    def test_opaque_to_other_keys(self):
        cloud, mallory = keygen(rng(100)), keygen(rng(101))
        tok = mint_auth_token(cloud, "acct-1", "serial", now=0, rng=rng(5))
        with pytest.raises(CryptoError):
            open_auth_token(mallory, tok)

    def test_every_byte_flip_rejected(self):
        cloud = keygen(rng(100))
        tok = mint_auth_token(cloud, "acct-1", "serial", now=0, rng=rng(5))
        for i in range(len(tok.blob)):
            mutated = bytearray(tok.blob)
            mutated[i] ^= 0x80
            with pytest.raises(CryptoError):
                open_auth_token(cloud, AuthToken(blob=bytes(mutated)))

    def test_b64_round_trip(self):
        cloud = keygen(rng(100))
        tok = mint_auth_token(cloud, "a", "s", now=0, rng=rng(5))
        assert AuthToken.from_b64(tok.b64()) == tok

    def test_plaintext_fields_absent_from_blob(self):
        cloud = keygen(rng(100))
        tok = mint_auth_token(cloud, "account-xyz", "SERIALNUM", now=0, rng=rng(5))
        assert b"account-xyz" not in tok.blob
        assert b"SERIALNUM" not in tok.blob


# ---------------------------------------------------------------------------
# Call authorization token

class TestCallToken:
    CALLER = "sip:id1@echo.example"
    CALLEE = "sip:id2@echo.example"

    def mint(self, kp, now=100, ttl=300, r=None):
        return mint_call_token(kp, self.CALLER, self.CALLEE, "regular",
                               ttl=ttl, now=now, rng=r or rng(3))

    def test_accepts_exact_match(self):
        kp = keygen(rng())
        tok = self.mint(kp)
        assert verify_call_token(kp.public, tok, self.CALLER, self.CALLEE,
                                 now=150, nonce_cache=set())

    def test_single_use(self):
        kp = keygen(rng())
        tok = self.mint(kp)
        cache = set()
        assert verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 150, cache)
        assert not verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 151, cache)

    def test_uri_mismatch_rejected(self):
        kp = keygen(rng())
        tok = self.mint(kp)
        assert not verify_call_token(kp.public, tok, self.CALLER,
                                     "sip:mallory@echo.example", 150, set())
        assert not verify_call_token(kp.public, tok, "sip:mallory@echo.example",
                                     self.CALLEE, 150, set())

    def test_expiry(self):
        kp = keygen(rng())
        tok = self.mint(kp, now=100, ttl=50)
        assert verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 149, set())
        assert not verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 150, set())

    def test_wrong_signer_rejected(self):
        kp, other = keygen(rng(1)), keygen(rng(2))
        tok = self.mint(kp)
        assert not verify_call_token(other.public, tok, self.CALLER, self.CALLEE, 150, set())

    def test_failed_match_still_burns_nonce(self):
        # a valid signature with a rejected URI must not leave the nonce fresh
        kp = keygen(rng())
        tok = self.mint(kp)
        cache = set()
        assert not verify_call_token(kp.public, tok, self.CALLER, "sip:x@y", 150, cache)
        assert not verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 150, cache)

    def test_forged_signature_does_not_burn_nonce(self):
        kp = keygen(rng())
        tok = self.mint(kp)
        forged = CallAuthToken(caller=tok.caller, callee=tok.callee,
                               call_type=tok.call_type, issued_at=tok.issued_at,
                               ttl=tok.ttl, nonce=tok.nonce, signature=b"\x00" * 64)
        cache = set()
        assert not verify_call_token(kp.public, forged, self.CALLER, self.CALLEE, 150, cache)
        assert verify_call_token(kp.public, tok, self.CALLER, self.CALLEE, 150, cache)

    def test_encode_round_trip(self):
        kp = keygen(rng())
        tok = self.mint(kp)
        assert CallAuthToken.from_b64(tok.b64()) == tok

    @settings(max_examples=200, deadline=None)
    @given(mutation=st.sampled_from(["caller", "callee"]),
           suffix=st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789.-", min_size=1,
                          max_size=8))
    def test_any_uri_perturbation_rejected(self, mutation, suffix):
        kp = keygen(rng())
        tok = self.mint(kp)
        caller, callee = self.CALLER, self.CALLEE
        if mutation == "caller":
            caller = caller + suffix
        else:
            callee = callee[:-1] + suffix
        if (caller, callee) != (self.CALLER, self.CALLEE):
            assert not verify_call_token(kp.public, tok, caller, callee, 150, set())


# ---------------------------------------------------------------------------
# Media protection

class TestSrtp:
    def contexts(self):
        key, salt = bytes(range(32)), bytes(range(14))
        return srtp_derive(key, salt), srtp_derive(key, salt)

    def test_round_trip(self):
        tx, rx = self.contexts()
        for i in range(10):
            payload = bytes([i]) * 160
            assert srtp_unprotect(rx, srtp_protect(tx, payload)) == payload

    def test_derivation_deterministic_and_labelled(self):
        ctx = srtp_derive(bytes(32), bytes(14))
        again = srtp_derive(bytes(32), bytes(14))
        assert (ctx.cipher_key, ctx.auth_key, ctx.session_salt) == (
            again.cipher_key, again.auth_key, again.session_salt)
        assert ctx.cipher_key != ctx.auth_key

    def test_payload_not_in_clear(self):
        tx, _ = self.contexts()
        payload = b"CANARY-" + bytes(153)
        assert b"CANARY" not in srtp_protect(tx, payload)

    def test_tag_flip_rejected_before_decrypt(self):
        tx, rx = self.contexts()
        pkt = bytearray(srtp_protect(tx, bytes(160)))
        pkt[-1] ^= 0x01
        with pytest.raises(CryptoError, match="auth"):
            srtp_unprotect(rx, bytes(pkt))
        assert rx.auth_failures == 1

    def test_ciphertext_flip_rejected(self):
        tx, rx = self.contexts()
        pkt = bytearray(srtp_protect(tx, bytes(160)))
        pkt[20] ^= 0x01
        with pytest.raises(CryptoError, match="auth"):
            srtp_unprotect(rx, bytes(pkt))

    def test_replay_dropped(self):
        tx, rx = self.contexts()
        pkt = srtp_protect(tx, bytes(160))
        srtp_unprotect(rx, pkt)
        with pytest.raises(CryptoError, match="replay"):
            srtp_unprotect(rx, pkt)
        assert rx.replay_drops == 1

    def test_reorder_within_window_accepted(self):
        tx, rx = self.contexts()
        pkts = [srtp_protect(tx, bytes([i]) * 160) for i in range(4)]
        srtp_unprotect(rx, pkts[0])
        srtp_unprotect(rx, pkts[3])
        assert srtp_unprotect(rx, pkts[1]) == bytes([1]) * 160
        with pytest.raises(CryptoError, match="replay"):
            srtp_unprotect(rx, pkts[1])

    def test_stale_beyond_window_dropped(self):
        tx, rx = self.contexts()
        first = srtp_protect(tx, bytes(160))
        for i in range(1, 70):
            srtp_unprotect(rx, srtp_protect(tx, bytes([i % 251]) * 160))
        with pytest.raises(CryptoError, match="replay"):
            srtp_unprotect(rx, first)

    def test_wrap_guard_at_2_48(self):
        tx, _ = self.contexts()
        tx.send_index = crypto.SRTP_MAX_INDEX
        with pytest.raises(CryptoError, match="wrap"):
            srtp_protect(tx, bytes(160))

    def test_distinct_ssrc_rejected(self):
        tx, _ = self.contexts()
        rx = srtp_derive(bytes(range(32)), bytes(range(14)), ssrc=0xDEAD)
        with pytest.raises(CryptoError, match="ssrc"):
            srtp_unprotect(rx, srtp_protect(tx, bytes(160)))

    @settings(max_examples=50, deadline=None)
    @given(payload=st.binary(min_size=1, max_size=400))
    def test_round_trip_property(self, payload):
        tx, rx = self.contexts()
        assert srtp_unprotect(rx, srtp_protect(tx, payload)) == payload
