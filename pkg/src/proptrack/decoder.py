"""Transformer decoder over the concatenated query batch: self-attention
among queries, dense cross-attention into the frame feature grid, and the
score/box-offset heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core as nn
from .encoding import encode_scalar
from .geometry import BoundingBox
from .query_gen import QueryBatch


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    ffn_dim: int = 0  # 0 = 2 * dim
    num_classes: int = 1
    learnable_anchors: int = 10
    score_embed: str = "sincos"
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.dim
        if self.dim % 4 != 0:
            raise ValueError("model dim must be divisible by 4")
        if self.dim % self.heads != 0:
            raise ValueError("model dim must be divisible by the head count")


@dataclass
class FrameFeatures:
    """Flattened feature grid plus per-cell positional embeddings."""

    grid: np.ndarray          # (H*W, D)
    pos: np.ndarray           # (H*W, D)
    height: int
    width: int
    frame_index: int = 0


def grid_positions(height: int, width: int, dim: int) -> np.ndarray:
    """Cell positional embeddings: x and y scalar encodings, half the width each."""
    if dim % 4 != 0:
        raise ValueError("feature dim must be divisible by 4")
    half = dim // 2
    pos = np.zeros((height * width, dim))
    for i in range(height):
        for j in range(width):
            x = (j + 0.5) / width
            y = (i + 0.5) / height
            pos[i * width + j, :half] = encode_scalar(x, half)
            pos[i * width + j, half:] = encode_scalar(y, half)
    return pos


@dataclass
class DecoderOutput:
    scores: np.ndarray                    # (N,)
    boxes: list[BoundingBox]
    updated_content: nn.Node              # (N, D)
    self_attn: list[np.ndarray] = field(default_factory=list)  # per layer (heads, N, N)
    score_node: nn.Node | None = None     # (N, 1)
    box_node: nn.Node | None = None       # (N, 4)

    def self_attention_map(self, layer: int) -> np.ndarray:
        """Head-averaged self-attention weights for one layer."""
        if not (0 <= layer < len(self.self_attn)):
            raise ValueError(f"layer {layer} out of range ({len(self.self_attn)} recorded)")
        return self.self_attn[layer].mean(axis=0)


class TrackingDecoder:
    """The learned model: parameters plus the decode pass."""

    def __init__(self, config: ModelConfig, store: nn.ParamStore | None = None):
        self.config = config
        if store is not None:
            self.store = store
            return
        self.store = nn.ParamStore(seed=config.seed)
        s = self.store
        d, f = config.dim, config.ffn_dim
        s.normal("shared_query", config.num_classes, d)
        s.normal("score_proj", 1, d)
        s.add("learnable_anchor_logits", self._init_anchor_logits(config.learnable_anchors))
        for layer in range(config.layers):
            for blk in ("sa", "ca"):
                for w in ("wq", "wk", "wv", "wo"):
                    s.normal(f"l{layer}.{blk}.{w}", d, d)
                    s.zeros(f"l{layer}.{blk}.{w}b", 1, d)
            for ln in ("ln1", "ln2", "ln3"):
                s.ones(f"l{layer}.{ln}.g", 1, d)
                s.zeros(f"l{layer}.{ln}.b", 1, d)
            s.normal(f"l{layer}.ffn.w1", d, f)
            s.zeros(f"l{layer}.ffn.b1", 1, f)
            s.normal(f"l{layer}.ffn.w2", f, d)
            s.zeros(f"l{layer}.ffn.b2", 1, d)
        s.normal("box_head.w1", d, d)
        s.zeros("box_head.b1", 1, d)
        s.normal("box_head.w2", d, d)
        s.zeros("box_head.b2", 1, d)
        # zero-initialized final layer: the decoder starts out emitting its anchors
        s.zeros("box_head.w3", d, 4)
        s.zeros("box_head.b3", 1, 4)
        s.normal("score_head.w", d, 1)
        s.add("score_head.b", np.array([[math.log(0.01 / 0.99)]]))

    def _init_anchor_logits(self, k: int) -> np.ndarray:
        if k == 0:
            return np.zeros((0, 4))
        rng = np.random.default_rng(self.config.seed + 1)
        centers = rng.uniform(0.15, 0.85, size=(k, 2))
        sizes = np.full((k, 2), 0.1)
        boxes = np.concatenate([centers, sizes], axis=1)
        return np.log(boxes / (1.0 - boxes))

    @property
    def shared_query(self) -> nn.Parameter:
        return self.store["shared_query"]

    @property
    def score_proj(self) -> nn.Parameter:
        return self.store["score_proj"]

    @property
    def learnable_anchor_logits(self) -> nn.Parameter:
        return self.store["learnable_anchor_logits"]

    def _proj(self, x: nn.Node, name: str) -> nn.Node:
        return nn.add(nn.matmul(x, self.store[name]), self.store[name + "b"])

    def decode(self, batch: QueryBatch, feats: FrameFeatures,
               attn_mask: np.ndarray | None = None) -> DecoderOutput:
        """Run the full decoder stack over one frame's query batch."""
        cfg = self.config
        if len(batch) == 0:
            raise ValueError("decode needs a nonempty query batch")
        if batch.dim != cfg.dim:
            raise ValueError(f"batch width {batch.dim} != model width {cfg.dim}")
        if feats.grid.shape[1] != cfg.dim:
            raise ValueError(f"feature width {feats.grid.shape[1]} != model width {cfg.dim}")

        x = batch.content
        pos = nn.constant(batch.pos_embed)
        keys = nn.constant(feats.grid + feats.pos)
        vals = nn.constant(feats.grid)
        attn_maps = []
        for layer in range(cfg.layers):
            qk = nn.add(x, pos)
            sa_out, sa_w = nn.attention(
                self._proj(qk, f"l{layer}.sa.wq"),
                self._proj(qk, f"l{layer}.sa.wk"),
                self._proj(x, f"l{layer}.sa.wv"),
                cfg.heads, mask=attn_mask)
            attn_maps.append(sa_w)
            x = nn.layernorm_rows(nn.add(x, self._proj(sa_out, f"l{layer}.sa.wo")),
                                  self.store[f"l{layer}.ln1.g"], self.store[f"l{layer}.ln1.b"])
            ca_out, _ = nn.attention(
                self._proj(nn.add(x, pos), f"l{layer}.ca.wq"),
                self._proj(keys, f"l{layer}.ca.wk"),
                self._proj(vals, f"l{layer}.ca.wv"),
                cfg.heads)
            x = nn.layernorm_rows(nn.add(x, self._proj(ca_out, f"l{layer}.ca.wo")),
                                  self.store[f"l{layer}.ln2.g"], self.store[f"l{layer}.ln2.b"])
            h = nn.relu(nn.add(nn.matmul(x, self.store[f"l{layer}.ffn.w1"]),
                               self.store[f"l{layer}.ffn.b1"]))
            h = nn.add(nn.matmul(h, self.store[f"l{layer}.ffn.w2"]),
                       self.store[f"l{layer}.ffn.b2"])
            x = nn.layernorm_rows(nn.add(x, h),
                                  self.store[f"l{layer}.ln3.g"], self.store[f"l{layer}.ln3.b"])

        score_node = nn.sigmoid(nn.add(nn.matmul(x, self.store["score_head.w"]),
                                       self.store["score_head.b"]))
        h = nn.relu(nn.add(nn.matmul(x, self.store["box_head.w1"]), self.store["box_head.b1"]))
        h = nn.relu(nn.add(nn.matmul(h, self.store["box_head.w2"]), self.store["box_head.b2"]))
        deltas = nn.add(nn.matmul(h, self.store["box_head.w3"]), self.store["box_head.b3"])
        box_node = nn.sigmoid(nn.add(batch.anchor_logits, deltas))

        boxes = [BoundingBox(*map(float, row)) for row in box_node.value]
        return DecoderOutput(
            scores=score_node.value[:, 0].copy(),
            boxes=boxes,
            updated_content=x,
            self_attn=attn_maps,
            score_node=score_node,
            box_node=box_node,
        )

    def __call__(self, batch: QueryBatch, feats: FrameFeatures,
                 attn_mask: np.ndarray | None = None) -> DecoderOutput:
        return self.decode(batch, feats, attn_mask)

    def save(self, path: str):
        self.store.save(path, config=asdict(self.config))

    @classmethod
    def load(cls, path: str) -> "TrackingDecoder":
        store, config = nn.ParamStore.load(path)
        return cls(ModelConfig(**config), store=store)
