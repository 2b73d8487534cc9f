"""Sortable 26-character case identifiers.

Millisecond timestamp prefix (48 bits) plus 80 random bits, Crockford
base32. Within one process, ids generated in the same millisecond increment
monotonically so lexicographic order always follows submission order.
"""

from __future__ import annotations

import secrets
import threading
import time

_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
_lock = threading.Lock()
_last: list = [0, 0]  # [timestamp_ms, randomness]


def new_case_id(now_ms: int | None = None) -> str:
    with _lock:
        ts = int(time.time() * 1000) if now_ms is None else now_ms
        if ts <= _last[0]:
            ts = _last[0]
            rand = _last[1] + 1
            if rand >= 1 << 80:  # randomness overflow: bump into the next ms
                ts += 1
                rand = secrets.randbits(80)
        else:
            rand = secrets.randbits(80)
        _last[0], _last[1] = ts, rand
    value = (ts << 80) | rand
    chars = []
    for _ in range(26):
        chars.append(_ALPHABET[value & 0x1F])
        value >>= 5
    return "".join(reversed(chars))
