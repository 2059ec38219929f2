"""
Deterministic random-number substreams.

Every random draw in the toolkit comes from a numpy ``PCG64`` generator. A
substream is addressed by a base seed plus any number of key parts (cell,
task id, replicate index, ...), so a unit of work reproduces the same draws
no matter which order or which worker it runs in.
"""

import hashlib
from typing import List, Union

import numpy as np

KeyPart = Union[int, str]


def _key_words(parts: tuple) -> List[int]:
    """Hash key parts into four 32-bit words usable as a SeedSequence spawn key"""
    text = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]


def _check_seed(seed: int) -> int:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return int(seed)


def seeded_generator(seed: int) -> np.random.Generator:
    """
    Plain PCG64 generator seeded directly with ``seed``

    Args:
        seed: Non-negative integer seed

    Returns:
        numpy Generator backed by PCG64
    """
    return np.random.Generator(np.random.PCG64(_check_seed(seed)))


def substream(seed: int, *parts: KeyPart) -> np.random.Generator:
    """
    Independent generator for the unit of work named by ``parts``

    Args:
        seed: Non-negative base seed
        *parts: Key parts identifying the unit of work

    Returns:
        numpy Generator whose stream depends only on (seed, parts)
    """
    sequence = np.random.SeedSequence(entropy=_check_seed(seed), spawn_key=tuple(_key_words(parts)))
    return np.random.Generator(np.random.PCG64(sequence))
