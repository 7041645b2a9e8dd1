"""Stable 64-bit hashing primitives.

Used wherever the toolkit needs platform-independent pseudo-randomness or
file digests: fold tie-breaking and run manifests. Python's builtin ``hash``
is salted per process and must never be used for these purposes.
"""

MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a digest of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    """One splitmix64 step: maps a 64-bit value to a well-mixed 64-bit value."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return (x ^ (x >> 31)) & MASK64
