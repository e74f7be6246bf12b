from typing import Any, Iterable, List, Sequence
from fractions import Fraction
import zlib

import numpy as np


def stable_label(label: Any) -> int:
    """Map a stream label (int or str) to a non-negative 32-bit integer"""
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"Stream labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; stable across runs"""
    return repr(float(value))


def harmonic_mean(sizes: Sequence[int]) -> float:
    """K / sum(1/n_k), evaluated exactly in rational arithmetic"""
    if len(sizes) == 0:
        raise ValueError("harmonic mean of an empty list")
    total = Fraction(0)
    for n in sizes:
        if n <= 0:
            raise ValueError(f"Sample sizes must be positive, got {n}")
        total += Fraction(1, int(n))
    return float(Fraction(len(sizes)) / total)


def weighted_mean(values: Sequence[float], weights: Sequence[float]) -> float:
    """sum(w*v) / sum(w)"""
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weights must have positive sum")
    return float(np.dot(w, v) / w.sum())


def label_entropy(labels: Iterable[int], num_classes: int) -> float:
    """Shannon entropy (nats) of the empirical label distribution"""
    counts = np.bincount(np.asarray(list(labels), dtype=np.int64), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def parse_seed_list(text: str) -> List[int]:
    """Parse '1,2,3' into [1, 2, 3]"""
    seeds = [int(part) for part in text.split(",") if part.strip()]
    if not seeds:
        raise ValueError("seed list is empty")
    return seeds
