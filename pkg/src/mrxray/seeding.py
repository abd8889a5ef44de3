"""Named deterministic seed substreams.

Every random consumer (phantom i, weight init, training shuffle, ...)
derives its own integer seed by hashing a stream name against the root
seed, so adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib


def substream_seed(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{name}:{root_seed}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")
