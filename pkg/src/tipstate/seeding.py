import hashlib


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts.

    Independent of call order and of ``PYTHONHASHSEED``, so parallel and
    serial schedules draw identical streams.
    """
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little") >> 1
