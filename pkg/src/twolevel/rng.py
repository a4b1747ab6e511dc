"""Deterministic per-entity random substreams.

Every entity owns independent streams for mobility, message generation and
gossip draws, derived from (global seed, entity id, stream tag).  Results are
therefore identical regardless of how entities are partitioned across workers
or migrated between them.
"""

from __future__ import annotations

import hashlib
import random

MOBILITY = "mobility"
GENERATION = "gen"
GOSSIP = "gossip"


def substream(seed: int, entity_id: int, tag: str) -> random.Random:
    """Independent stream for one (seed, entity, purpose) triple.

    The triple is mixed through SHA-256 rather than XOR so that distinct
    (entity, tag) pairs can never alias, and so the derivation is stable
    across platforms and Python versions.
    """
    digest = hashlib.sha256(f"{seed}:{entity_id}:{tag}".encode("ascii")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))
