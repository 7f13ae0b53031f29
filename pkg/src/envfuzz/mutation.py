"""Havoc-style payload mutation, deterministic RNG, and power scheduling."""

from __future__ import annotations

from ._hash import mix64
from .trace import SeedCorpus, SeedStats

_MASK64 = (1 << 64) - 1

INTERESTING_BYTES = (0x00, 0x01, 0x7F, 0x80, 0xFF)
ARITH_MAX = 35
MAX_PAYLOAD = 64 * 1024
GROWTH_FACTOR = 4
MIN_GROWTH_ROOM = 64

ENERGY_BASE = 8
ENERGY_MIN = 1
ENERGY_MAX = 64


class Rng:
    """splitmix64 counter generator: 64-bit state, fully reproducible.

    Same seed, same draw sequence; every campaign decision flows through an
    instance of this. Each state advance yields 64 bits served as two
    32-bit halves, so bounds passed to below() must stay under 2**32.
    """

    __slots__ = ("state", "_spare")

    def __init__(self, seed: int):
        self.state = seed & _MASK64
        self._spare = None

    def u64(self) -> int:
        self._spare = None
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        v = self._spare
        if v is None:
            self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
            z = self.state
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
            z ^= z >> 31
            self._spare = z & 0xFFFFFFFF
            return (z >> 32) % n
        self._spare = None
        return v % n

    def chance(self, one_in: int) -> bool:
        return self.below(one_in) == 0

    def rand_bytes(self, n: int) -> bytes:
        if not n:
            return b""
        chunks = (n + 7) // 8
        data = b"".join(self.u64().to_bytes(8, "little") for _ in range(chunks))
        return data[:n]

    def fork(self) -> "Rng":
        return Rng(mix64(self.u64()))


def seed_for(campaign_seed: int, record_index: int, pass_number: int) -> int:
    """Derive the per-record RNG seed for one scheduling point."""
    return mix64(mix64(mix64(campaign_seed) ^ record_index) ^ pass_number)


# --- havoc operators --------------------------------------------------------
#
# Each operator takes and returns a bytearray; `limit` caps growth at
# 4x the original length (with a small floor so empty payloads can grow),
# never above 64 KiB.


def _limit_for(original_len: int) -> int:
    return min(MAX_PAYLOAD, max(GROWTH_FACTOR * original_len, MIN_GROWTH_ROOM))


def _op_flip_bit(buf, corpus, rng, limit):
    if buf:
        r = rng.below(len(buf) * 8)
        buf[r >> 3] ^= 1 << (r & 7)
    return buf


def _op_interesting(buf, corpus, rng, limit):
    if buf:
        r = rng.below(len(buf) * 5)
        buf[r // 5] = INTERESTING_BYTES[r % 5]
    return buf


def _op_arith(buf, corpus, rng, limit):
    widths = [w for w in (1, 2, 4) if w <= len(buf)]
    if not widths:
        return buf
    w = widths[rng.below(len(widths))]
    i = rng.below(len(buf) - w + 1)
    r = rng.below(2 * ARITH_MAX)
    delta = 1 + (r % ARITH_MAX)
    if r >= ARITH_MAX:
        delta = -delta
    if w == 1:
        buf[i] = (buf[i] + delta) & 0xFF
        return buf
    val = int.from_bytes(buf[i : i + w], "little")
    val = (val + delta) % (1 << (8 * w))
    buf[i : i + w] = val.to_bytes(w, "little")
    return buf


def _op_random_byte(buf, corpus, rng, limit):
    if buf:
        r = rng.below(len(buf) << 8)
        buf[r >> 8] = r & 0xFF
    return buf


def _op_delete_block(buf, corpus, rng, limit):
    if buf:
        pos = rng.below(len(buf))
        length = 1 + rng.below(len(buf) - pos)
        del buf[pos : pos + length]
    return buf


def _op_duplicate_block(buf, corpus, rng, limit):
    if buf:
        pos = rng.below(len(buf))
        length = 1 + rng.below(len(buf) - pos)
        chunk = buf[pos : pos + length]
        at = rng.below(len(buf) + 1)
        buf[at:at] = chunk
    return buf


def _op_insert_random(buf, corpus, rng, limit):
    length = rng.below(17)
    at = rng.below(len(buf) + 1)
    buf[at:at] = rng.rand_bytes(length)
    return buf


def _op_splice(buf, corpus, rng, limit):
    seeds = corpus.seeds if corpus is not None and corpus.seeds else [bytes(buf)]
    other = seeds[rng.below(len(seeds))]
    cut_a = rng.below(len(buf) + 1)
    cut_b = rng.below(len(other) + 1)
    return bytearray(bytes(buf[:cut_a]) + other[cut_b:])


OPERATORS = (
    ("flip_bit", _op_flip_bit),
    ("interesting", _op_interesting),
    ("arith", _op_arith),
    ("random_byte", _op_random_byte),
    ("delete_block", _op_delete_block),
    ("duplicate_block", _op_duplicate_block),
    ("insert_random", _op_insert_random),
    ("splice", _op_splice),
)


def mutate(
    payload: bytes,
    corpus: SeedCorpus | None,
    rng: Rng,
    op_log: list[str] | None = None,
) -> bytes:
    """Apply a random stack of havoc operators to an input payload.

    Stack depth is 1..2**s with s drawn in 1..6. Callers must not pass
    payloads of immutable records here.
    """
    s = 1 + rng.below(6)
    n_ops = 1 + rng.below(1 << s)
    limit = _limit_for(len(payload))
    buf = bytearray(payload)
    for _ in range(n_ops):
        name, op = OPERATORS[rng.below(len(OPERATORS))]
        buf = op(buf, corpus, rng, limit)
        if len(buf) > limit:
            del buf[limit:]
        if op_log is not None:
            op_log.append(name)
    return bytes(buf)


def energy(stats: SeedStats) -> int:
    """Mutants to schedule for a seed: base 8, doubled after a novel run,
    halved per scheduling once 4 consecutive runs produced nothing new."""
    e = ENERGY_BASE
    if stats.last_was_novel:
        e *= 2
    if stats.no_novelty_streak >= 4:
        e >>= stats.no_novelty_streak - 3
    return max(ENERGY_MIN, min(ENERGY_MAX, e))
