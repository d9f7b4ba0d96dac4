"""Secure LSH image deduplication.

Clients hash image feature vectors with secure locality-sensitive
hashing, an untrusted server detects near-duplicates via multi-table
hash collisions, and encryption keys move between users through a
dual-session password-authenticated key exchange seeded by fresh
digests.
"""

__version__ = "0.1.0"
