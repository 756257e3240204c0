"""Cross-identity pair sampling for synthesis training."""
from __future__ import annotations

import numpy as np

from ..core import PersonCrop, is_labeled


class InsufficientDiversityError(ValueError):
    """Fewer than two distinct labeled identities available."""


def sample_training_pairs(
    crops: list[PersonCrop], batch: int, seed: int
) -> list[list[tuple[PersonCrop, PersonCrop]]]:
    """One epoch of cross-identity pairs, grouped into batches.

    Every labeled crop appears exactly once as the appearance provider (first
    element); its partner is drawn uniformly from crops of a different
    identity. Deterministic given the seed. The final batch may be short.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    labeled = [c for c in crops if is_labeled(c.identity)]
    identities = {c.identity for c in labeled}
    if len(identities) < 2:
        raise InsufficientDiversityError(
            f"pair sampling needs >= 2 labeled identities, got {len(identities)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    by_other: dict[int, list[int]] = {}
    for ident in identities:
        by_other[ident] = [i for i, c in enumerate(labeled) if c.identity != ident]

    pairs: list[tuple[PersonCrop, PersonCrop]] = []
    for idx in order:
        provider = labeled[idx]
        partners = by_other[provider.identity]
        partner = labeled[partners[int(rng.integers(len(partners)))]]
        pairs.append((provider, partner))
    return [pairs[i : i + batch] for i in range(0, len(pairs), batch)]
