#!/usr/bin/env python3
"""
Seeded byte corpora for benchmarking and similarity probing.
"""
import logging
from typing import List

from errors import ConfigError
from tensor_math import seeded_rng
from toy_transformer import encode_bytes

logger = logging.getLogger(__name__)

SOURCE_TEXT = (
    "The harbour master kept a ledger of every ship that entered the bay. "
    "On calm mornings the gulls followed the fishing boats out past the lighthouse, "
    "and by noon the market stalls were stacked with crates of mackerel and crab. "
    "Children ran along the sea wall, counting sails and arguing about the weather. "
    "In the workshop behind the chandlery an old carpenter planed oak for a new keel, "
    "humming the same three bars of a song nobody else remembered. "
    "When the wind turned east the tide came in fast and the moorings creaked. "
    "A train whistle carried across the marsh from the junction two miles inland; "
    "the evening service was always late, and the stationmaster always apologised. "
    "Numbers on the tide table: 04:12 low, 10:31 high, 16:47 low, 22:58 high. "
    "def schedule(tides):\n    return sorted(tides, key=lambda t: t.time)\n"
    "Letters arrived on Tuesdays and Fridays, tied in bundles with coarse string. "
    "The library opened at nine, closed at five, and smelled of paper and rain. "
)


def _source(min_bytes: int) -> bytes:
    text = SOURCE_TEXT.encode("utf-8")
    repeats = 1 + min_bytes // len(text)
    return text * (repeats + 1)


def build_prompts(n_prompts: int, prompt_bytes: int, seed: int = 0) -> List[bytes]:
    """Fixed-length byte slices at seeded offsets"""
    if n_prompts < 1 or prompt_bytes < 1:
        raise ConfigError("corpus needs at least one prompt of at least one byte")
    source = _source(prompt_bytes)
    rng = seeded_rng(seed)
    span = len(source) - prompt_bytes
    offsets = rng.integers(0, span, size=n_prompts)
    prompts = [source[int(o):int(o) + prompt_bytes] for o in offsets]
    logger.debug(f"BENCH CORPUS: Built {n_prompts} prompts of {prompt_bytes} bytes (seed={seed})")
    return prompts


def build_probe_corpus(total_bytes: int = 4096, sequence_bytes: int = 128, seed: int = 0) -> List[List[int]]:
    """Token sequences (BOS-prefixed) covering `total_bytes` of text"""
    if sequence_bytes < 2 or total_bytes < sequence_bytes:
        raise ConfigError("probe corpus needs total_bytes >= sequence_bytes >= 2")
    count = total_bytes // sequence_bytes
    return [encode_bytes(p) for p in build_prompts(count, sequence_bytes, seed)]
