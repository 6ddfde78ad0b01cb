"""Consensus filtering gate over per-view teacher logits.

All tie-breaks go to the lowest class index (or the lexicographically
smallest top-k signature) so that gating is fully deterministic.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import AlignmentError, DataError, ParameterError
from .scoring import LogitVector, as_logit_matrix


@dataclass
class GateResult:
    consensus: int
    top1_seq: List[int]
    accepted_indices: List[int]
    accepted_logits: List[LogitVector]
    raw_discarded: bool
    signature: Optional[Tuple[int, ...]] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return len(self.top1_seq)

    def to_record(self, image_key=None) -> dict:
        rec = {
            "image_key": image_key,
            "consensus": self.consensus,
            "top1_seq": list(self.top1_seq),
            "accepted_indices": list(self.accepted_indices),
            "raw_discarded": self.raw_discarded,
        }
        if self.diagnostics:
            rec["diagnostics"] = self.diagnostics
        return rec


def top1_sequence(logits) -> List[int]:
    m = as_logit_matrix(logits)
    if m.shape[0] == 0:
        raise DataError("no logit vectors given")
    # np.argmax returns the first maximal index, i.e. the lowest class.
    return [int(i) for i in np.argmax(m, axis=1)]


def consensus(top1: Sequence[int]) -> int:
    if len(top1) == 0:
        raise DataError("empty top-1 sequence")
    counts = Counter(int(t) for t in top1)
    best = max(counts.values())
    return min(k for k, n in counts.items() if n == best)


def _as_vectors(logits) -> List[LogitVector]:
    return [l if isinstance(l, LogitVector) else LogitVector(np.asarray(l), j) for j, l in enumerate(logits)]


def _check_alignment(vs, logits):
    if vs is not None and len(vs) != len(logits):
        raise AlignmentError(f"view set has {len(vs)} members but {len(logits)} logit vectors given")


def filter_views(vs, logits) -> GateResult:
    """Keep the members whose top-1 class matches the majority vote.

    ``vs`` may be ``None`` when only logits are available (e.g. ingested
    from a CSV); otherwise its member count must match ``logits``.
    """
    _check_alignment(vs, logits)
    vectors = _as_vectors(logits)
    seq = top1_sequence(vectors)
    theta = consensus(seq)
    accepted = [j for j, t in enumerate(seq) if t == theta]
    return GateResult(
        consensus=theta,
        top1_seq=seq,
        accepted_indices=accepted,
        accepted_logits=[vectors[j] for j in accepted],
        raw_discarded=0 not in accepted,
    )


def topk_signature(values: np.ndarray, k: int) -> Tuple[int, ...]:
    # Stable sort on the negated values ranks ties by ascending class index.
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    return tuple(int(i) for i in order[:k])


def filter_views_topk(vs, logits, k: int) -> GateResult:
    """Stricter gate: members must agree on their ordered top-k classes."""
    _check_alignment(vs, logits)
    vectors = _as_vectors(logits)
    m = as_logit_matrix(vectors)
    if m.shape[0] == 0:
        raise DataError("no logit vectors given")
    c = m.shape[1]
    if not 1 <= k <= c:
        raise ParameterError(f"k must lie in [1, {c}], got {k}")
    sigs = [topk_signature(row, k) for row in m]
    counts = Counter(sigs)
    best = max(counts.values())
    winner = min(s for s, n in counts.items() if n == best)
    accepted = [j for j, s in enumerate(sigs) if s == winner]
    seq = [s[0] for s in sigs]
    result = GateResult(
        consensus=winner[0],
        top1_seq=seq,
        accepted_indices=accepted,
        accepted_logits=[vectors[j] for j in accepted],
        raw_discarded=0 not in accepted,
        signature=winner,
    )
    if k > 1:
        top1_theta = consensus(seq)
        if top1_theta != winner[0]:
            result.diagnostics["top1_consensus"] = top1_theta
    return result


def pass_through(vs, logits) -> GateResult:
    """Accept every member; used when the gate is disabled."""
    _check_alignment(vs, logits)
    vectors = _as_vectors(logits)
    seq = top1_sequence(vectors)
    return GateResult(
        consensus=consensus(seq),
        top1_seq=seq,
        accepted_indices=list(range(len(vectors))),
        accepted_logits=vectors,
        raw_discarded=False,
    )
