"""Deterministic architectural simulator of a PMP-enforced enclave TEE."""

__version__ = "0.1.0"
