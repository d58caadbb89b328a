"""Named random sub-streams derived from a single run seed."""

import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts, e.g. ``(0, "init")``."""
    key = "/".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def numpy_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g
