"""Deterministic testbed for Echo device pairing, voice-service handshake,
and drop-in calling, running on an emulated network fabric."""

__version__ = "0.1.0"
