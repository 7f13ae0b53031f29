"""Coverage and output-state feedback: what makes a branch interesting.

Coverage is an AFL-style 65,536-slot map of bucketed edge hit counts held
against a global virgin map. Program outputs are summarized into 64-bit
locality-sensitive signatures clustered by Hamming distance; consecutive
output states form transitions, and an unseen transition is as interesting
as an unseen coverage bucket.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._hash import mix64

MAP_SIZE = 65536
STATE_HAMMING_THRESHOLD = 8

# Hit counts collapse into 8 classes, one bit per class, so "new bucket in
# some slot" reduces to a bitwise check against the virgin map.
_BUCKET_BOUNDS = ((1, 1), (2, 2), (3, 3), (4, 7), (8, 15), (16, 31), (32, 127))


def bucket(count: int) -> int:
    if count <= 0:
        return 0
    if count < 128:
        return _BUCKET_BYTE[count]
    return 1 << 7


def _bucket_slow(count: int) -> int:
    for i, (lo, hi) in enumerate(_BUCKET_BOUNDS):
        if lo <= count <= hi:
            return 1 << i
    return 1 << 7


_BUCKET_BYTE = [0] + [_bucket_slow(n) for n in range(1, 128)]

_edge_slots: dict[tuple[int, int], int] = {}


def edge_slot(prev_block: int, cur_block: int) -> int:
    """Coverage-map slot for one control-flow edge."""
    key = (prev_block, cur_block)
    slot = _edge_slots.get(key)
    if slot is None:
        slot = mix64(((prev_block & 0xFFFFFFFF) << 32) | (cur_block & 0xFFFFFFFF)) % MAP_SIZE
        _edge_slots[key] = slot
    return slot


@dataclass
class CoverageMap:
    """Sparse view of the 65,536-slot bucketed hit-count map."""

    slots: dict[int, int] = field(default_factory=dict)

    def as_bytearray(self) -> bytearray:
        arr = bytearray(MAP_SIZE)
        for slot, b in self.slots.items():
            arr[slot] = b
        return arr


def fold_counts(edges: list[tuple[int, int]], into: dict[int, int] | None = None) -> dict[int, int]:
    """Raw hit counts per slot; `into` lets a caller extend prefix counts."""
    counts = into if into is not None else {}
    get = counts.get
    for prev, cur in edges:
        slot = edge_slot(prev, cur)
        counts[slot] = get(slot, 0) + 1
    return counts


def bucket_counts(counts: dict[int, int]) -> CoverageMap:
    return CoverageMap({slot: bucket(n) for slot, n in counts.items()})


def fold_edges(edges: list[tuple[int, int]]) -> CoverageMap:
    """Count edge hits per slot, then bucket each slot's raw count."""
    return bucket_counts(fold_counts(edges))


# --- output-state signatures ------------------------------------------------
#
# Each byte 2-gram deterministically lights two of 64 bits; the signature is
# the union over the payload's 2-grams. Hamming distance then grows roughly
# linearly with the number of edited bytes and stays small for single-byte
# edits, which is the clustering behaviour the state model needs. Long
# payloads (hundreds of bytes) saturate the 64 bits and blur together; the
# short request/response style outputs this targets stay well below that.

_gram_masks: dict[int, int] = {}
_sig_cache: dict[bytes, int] = {}


def _gram_mask(gram: int) -> int:
    mask = _gram_masks.get(gram)
    if mask is None:
        h = mix64(0x10000 + gram)
        mask = (1 << (h & 63)) | (1 << ((h >> 6) & 63))
        _gram_masks[gram] = mask
    return mask


def state_signature(output: bytes) -> int:
    """64-bit locality-sensitive signature of an output payload (empty -> 0)."""
    if len(output) < 2:
        return 0
    sig = _sig_cache.get(output)
    if sig is None:
        sig = 0
        prev = output[0]
        for b in memoryview(output)[1:]:
            sig |= _gram_mask((prev << 8) | b)
            prev = b
        if len(_sig_cache) > (1 << 16):
            _sig_cache.clear()
        _sig_cache[output] = sig
    return sig


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


class StateModel:
    """Signature clusters: representatives pairwise further than theta bits.

    A signature keeps its first assignment for the whole campaign; new
    signatures run an exact vectorized nearest-representative scan.
    """

    def __init__(self, theta: int = STATE_HAMMING_THRESHOLD):
        self.theta = theta
        self.representatives: list[int] = []
        self._assigned: dict[int, int] = {}
        self._reps_arr = np.zeros(256, dtype=np.uint64)

    def assign(self, sig: int) -> tuple[int, bool]:
        """Nearest representative within theta bits, else a new state id.

        Distance ties resolve to the lowest state id (argmin returns the
        first minimum).
        """
        cached = self._assigned.get(sig)
        if cached is not None:
            return cached, False
        n = len(self.representatives)
        if n:
            dists = np.bitwise_count(self._reps_arr[:n] ^ np.uint64(sig))
            best = int(dists.argmin())
            if int(dists[best]) <= self.theta:
                self._assigned[sig] = best
                return best, False
        if n == len(self._reps_arr):
            grown = np.zeros(2 * n, dtype=np.uint64)
            grown[:n] = self._reps_arr
            self._reps_arr = grown
        self._reps_arr[n] = sig
        self.representatives.append(sig)
        self._assigned[sig] = n
        return n, True


def assign_state(sig: int, model: StateModel) -> tuple[int, bool]:
    return model.assign(sig)


class FeedbackState:
    """Campaign-global novelty tracker (single writer: the engine).

    The virgin map and transition set always accumulate, so reports stay
    meaningful under every mode; when feedback is disabled the interesting
    verdict is pinned to False instead.
    """

    def __init__(self, enabled: bool = True, theta: int = STATE_HAMMING_THRESHOLD):
        self.enabled = enabled
        self.virgin = bytearray(MAP_SIZE)
        self.model = StateModel(theta=theta)
        self.transitions: set[tuple[int, int]] = set()

    def states_for(self, outputs: list[tuple[int, bytes]]) -> list[int]:
        """Assign a state id to each output payload, in order."""
        return [self.model.assign(state_signature(data))[0] for _, data in outputs]

    def observe(self, coverage: CoverageMap, states: list[int]) -> bool:
        """Commit an execution's coverage and transitions; True if anything
        was new. A second observation of the same outcome returns False."""
        virgin = self.virgin
        novel = False
        for slot, b in coverage.slots.items():
            if b & ~virgin[slot]:
                novel = True
                virgin[slot] |= b
        for pair in zip(states, states[1:]):
            if pair not in self.transitions:
                novel = True
                self.transitions.add(pair)
        return novel

    def is_interesting(self, coverage: CoverageMap, states: list[int]) -> bool:
        """Interesting = novel coverage bucket or novel state transition;
        always False when feedback guidance is disabled."""
        novel = self.observe(coverage, states)
        return novel and self.enabled

    def virgin_population(self) -> int:
        return sum(1 for b in self.virgin if b)
