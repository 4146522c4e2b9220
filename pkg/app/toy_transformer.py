#!/usr/bin/env python3
"""
Toy decoder-only transformer used as both base and draft model.
Pre-norm blocks: h' = h + Attn(norm(h)); h_next = h' + MLP(norm(h')).
Byte-level vocabulary: 256 bytes plus BOS and EOS.
"""
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, PositionOverflowError, ShapeError
from kv_cache import LayerCacheView
from tensor_math import FLOAT, apply_rope, matmul, rms_norm, seeded_rng, silu

logger = logging.getLogger(__name__)

BOS = 256
EOS = 257
VOCAB_SIZE = 258


def encode_bytes(data: bytes, add_bos: bool = True) -> List[int]:
    tokens = list(data)
    return [BOS] + tokens if add_bos else tokens


def decode_tokens(tokens: Sequence[int]) -> bytes:
    return bytes(t for t in tokens if 0 <= t < 256)


@dataclass
class ModelConfig:
    """Architecture hyperparameters"""
    vocab_size: int = VOCAB_SIZE
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    d_head: int = 8
    d_mlp: int = 64
    max_positions: int = 512
    norm_eps: float = 1e-5
    seed: int = 0
    # None means 0.02 / sqrt(n_layers)
    init_std: Optional[float] = None

    def validate(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.n_heads < 1 or self.d_head < 2:
            raise ConfigError("n_heads must be >= 1 and d_head >= 2")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})")
        if self.d_head % 2 != 0:
            raise ConfigError(f"d_head must be even for rotary encoding, got {self.d_head}")
        if self.d_mlp < 1 or self.max_positions < 1:
            raise ConfigError("d_mlp and max_positions must be positive")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        if not (0 <= self.seed < 2 ** 64):
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")

    @property
    def std(self) -> float:
        return self.init_std if self.init_std is not None else 0.02 / math.sqrt(self.n_layers)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray


LAYER_TENSORS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "mlp_norm")


@dataclass
class WeightStore:
    """Dense parameters; the LM head is tied to `embedding`"""
    config: ModelConfig
    embedding: np.ndarray
    final_norm: np.ndarray
    layers: List[LayerWeights] = field(default_factory=list)

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, tuple(arr.shape)) for name, arr in self.named_tensors()]

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "embedding", self.embedding
        yield "final_norm", self.final_norm
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)


def expected_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d, m = config.d_model, config.d_mlp
    shapes = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_gate": (d, m), "w_up": (d, m), "w_down": (m, d),
        "attn_norm": (d,), "mlp_norm": (d,),
    }
    out = [("embedding", (config.vocab_size, d)), ("final_norm", (d,))]
    for i in range(config.n_layers):
        out.extend((f"layers.{i}.{name}", shapes[name]) for name in LAYER_TENSORS)
    return out


def init_model(config: ModelConfig) -> WeightStore:
    """
    Seeded initialisation from seeded_rng (PCG64 standing in for xoshiro256**);
    tensors are drawn in manifest order, norm gains are ones.
    """
    config.validate()
    rng = seeded_rng(config.seed)
    std = config.std
    tensors = {}
    for name, shape in expected_shapes(config):
        if name.endswith("norm"):
            tensors[name] = np.ones(shape, dtype=FLOAT)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(FLOAT)
    store = weights_from_tensors(config, tensors)
    logger.info(f"TOY TRANSFORMER: Initialised {config.n_layers}-layer model "
                f"(d_model={config.d_model}, seed={config.seed})")
    return store


def weights_from_tensors(config: ModelConfig, tensors: Dict[str, np.ndarray]) -> WeightStore:
    for name, shape in expected_shapes(config):
        if name not in tensors:
            raise ShapeError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    layers = [
        LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_TENSORS})
        for i in range(config.n_layers)
    ]
    return WeightStore(config=config, embedding=tensors["embedding"],
                       final_norm=tensors["final_norm"], layers=layers)


def make_truncated_draft(base: WeightStore, keep_layers: int) -> WeightStore:
    """Draft sharing the base's embedding, final norm and first `keep_layers` blocks"""
    n = base.config.n_layers
    if not (2 <= keep_layers < n):
        raise ConfigError(f"keep_layers must satisfy 2 <= keep_layers < {n}, got {keep_layers}")
    config = replace(base.config, n_layers=keep_layers)
    logger.info(f"TOY TRANSFORMER: Derived {keep_layers}-layer draft from {n}-layer base")
    return WeightStore(config=config, embedding=base.embedding, final_norm=base.final_norm,
                       layers=list(base.layers[:keep_layers]))


@dataclass
class LayerIO:
    """Hidden states around one block: h_mid = h_in + attn_out, h_out = h_mid + MLP(h_mid)"""
    layer: int
    h_in: np.ndarray
    attn_out: np.ndarray
    h_mid: np.ndarray
    h_out: np.ndarray
    mlp_in: Optional[np.ndarray] = None


@dataclass
class AttentionParts:
    out: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


class ToyTransformer:
    """Forward kernels over an immutable WeightStore; safe to share across threads"""

    def __init__(self, weights: WeightStore):
        weights.config.validate()
        self.weights = weights
        self.config = weights.config

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(f"token id out of vocabulary range [0, {self.config.vocab_size})")
        return self.weights.embedding[ids].copy()

    def attn_input(self, layer: int, h: np.ndarray) -> np.ndarray:
        return rms_norm(h, self.weights.layers[layer].attn_norm, self.config.norm_eps)

    def mlp_input(self, layer: int, h_mid: np.ndarray) -> np.ndarray:
        return rms_norm(h_mid, self.weights.layers[layer].mlp_norm, self.config.norm_eps)

    def attention_parts(self, layer: int, h_norm: np.ndarray, view: LayerCacheView,
                        rows: Sequence[int], mask: np.ndarray) -> AttentionParts:
        """
        Attention for the new rows. Writes this layer's K/V for `rows` into the
        view, then attends over the first mask.shape[1] cache rows.
        """
        cfg = self.config
        w = self.weights.layers[layer]
        positions = view.positions(rows)
        if len(positions) and int(positions.max()) >= cfg.max_positions:
            raise PositionOverflowError(
                f"position {int(positions.max())} exceeds max_positions {cfg.max_positions}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[0] != len(rows):
            raise ShapeError(f"mask has {mask.shape[0]} query rows for {len(rows)} tokens")
        q = apply_rope(matmul(h_norm, w.wq), positions, cfg.d_head)
        k = apply_rope(matmul(h_norm, w.wk), positions, cfg.d_head)
        v = matmul(h_norm, w.wv)
        view.write(rows, k, v)
        n_keys = mask.shape[1]
        keys = view.keys(n_keys)
        values = view.values(n_keys)
        scale = 1.0 / math.sqrt(cfg.d_head)
        heads = []
        for head in range(cfg.n_heads):
            sl = slice(head * cfg.d_head, (head + 1) * cfg.d_head)
            scores = matmul(q[:, sl], keys[:, sl].T).astype(np.float64) * scale
            scores = np.where(mask, scores, -np.inf)
            scores -= np.max(scores, axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= np.sum(probs, axis=-1, keepdims=True)
            heads.append(matmul(probs.astype(FLOAT), values[:, sl]))
        out = matmul(np.concatenate(heads, axis=-1), w.wo)
        return AttentionParts(out=out, q=q, k=k, v=v)

    def attention_forward(self, layer: int, h_norm: np.ndarray, view: LayerCacheView,
                          rows: Sequence[int], mask: np.ndarray) -> np.ndarray:
        return self.attention_parts(layer, h_norm, view, rows, mask).out

    def mlp_forward(self, layer: int, x_norm: np.ndarray) -> np.ndarray:
        w = self.weights.layers[layer]
        if x_norm.shape[-1] != self.config.d_model:
            raise ShapeError(f"MLP input width {x_norm.shape[-1]} != d_model {self.config.d_model}")
        gated = silu(matmul(x_norm, w.w_gate)) * matmul(x_norm, w.w_up)
        return matmul(gated, w.w_down)

    def lm_logits(self, h_final: np.ndarray) -> np.ndarray:
        normed = rms_norm(h_final, self.weights.final_norm, self.config.norm_eps)
        return matmul(normed, self.weights.embedding.T)
