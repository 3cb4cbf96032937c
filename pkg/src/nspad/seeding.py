"""Named random substreams derived from a single integer seed."""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for ``name`` under ``seed``.

    Substreams with different names never share state, so one stage can
    consume more or fewer draws without shifting any other stage.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key]))
