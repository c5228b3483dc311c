"""Counter-based random streams.

Every consumer of randomness asks for a stream keyed by the master seed plus
a tuple of labels (utterance id, tensor name, step number, ...). Streams are
Philox generators, so the same key yields the same numbers on every platform
and no stream depends on how many numbers another one has drawn.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> int:
    material = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))
