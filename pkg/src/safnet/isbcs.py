"""Channel-swap augmentation between same-class samples.

Within each class group of a batch, samples are randomly paired and each
pair exchanges a Bernoulli-selected subset of channels, full time series,
both directions. Labels and the base sample's subject identity are kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Epoch
from .errors import ValidationError


@dataclass(frozen=True)
class SwapConfig:
    p: float = 0.5
    seed: int = 0
    keep_originals: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValidationError(f"swap probability must be in [0,1], got {self.p}")


@dataclass(frozen=True)
class SwapRecord:
    pair: tuple[int, int]
    swapped_channels: np.ndarray  # boolean, length C


def pair_by_class(labels, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random disjoint same-label pairs; odd leftovers stay unpaired."""
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(int(y), []).append(i)
    pairs = []
    for y in sorted(by_class):
        idx = by_class[y]
        shuffled = [idx[k] for k in rng.permutation(len(idx))]
        pairs.extend(zip(shuffled[::2], shuffled[1::2]))
    return pairs


def isbcs_augment_batch(batch: list[Epoch], cfg: SwapConfig,
                        rng: np.random.Generator) -> tuple[list[Epoch], list[SwapRecord]]:
    """Swap Bernoulli(p)-masked channels between randomly paired same-class
    epochs. Returns the augmented epochs (originals appended when
    cfg.keep_originals) and one SwapRecord per pair or leftover singleton.
    """
    if not batch:
        return [], []
    shapes = {(ep.channels, ep.samples) for ep in batch}
    if len(shapes) != 1:
        raise ValidationError(f"mixed epoch shapes in batch: {sorted(shapes)}")
    c = batch[0].channels

    xs = [ep.x.copy() for ep in batch]
    records: list[SwapRecord] = []
    paired: set[int] = set()
    for a, b in pair_by_class([ep.y for ep in batch], rng):
        mask = rng.random(c) < cfg.p
        xa = xs[a][mask].copy()
        xs[a][mask] = xs[b][mask]
        xs[b][mask] = xa
        records.append(SwapRecord(pair=(a, b), swapped_channels=mask))
        paired.update((a, b))
    for i in range(len(batch)):
        if i not in paired:
            records.append(SwapRecord(pair=(i, i),
                                      swapped_channels=np.zeros(c, dtype=bool)))

    augmented = [
        Epoch(x=xs[i], y=ep.y, s=ep.s, sample_rate_hz=ep.sample_rate_hz,
              subject_index=ep.subject_index)
        for i, ep in enumerate(batch)
    ]
    if cfg.keep_originals:
        augmented = augmented + list(batch)
    return augmented, records
