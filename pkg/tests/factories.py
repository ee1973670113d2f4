"""Random inputs shared by several test modules."""

from __future__ import annotations

import numpy as np

from bnnvpr.arch import NetworkSpec, parse_layers


def random_spec(rng: np.random.Generator) -> NetworkSpec:
    """Small chain of random depth, precision and padding."""
    bits = int(rng.choice([1, 2, 4, 8, 32]))
    parts = [f"C({rng.choice([1, 3])},1,{rng.integers(1, 6)})"]
    for _ in range(rng.integers(0, 3)):
        parts.append(f"C({rng.choice([1, 3])},1,{rng.integers(1, 6)})")
        if rng.random() < 0.5:
            parts.append("P(2,2)")
    if rng.random() < 0.3:
        parts.append(f"FC({rng.integers(1, 5)})")
    layers = parse_layers(" ".join(parts), weight_bits=bits, first_padding=str(rng.choice(["valid", "same"])))
    hw = int(rng.integers(6, 10))
    return NetworkSpec(f"r{bits}", (hw, hw, int(rng.integers(1, 4))), layers, layers[-1].name, None)
