"""Building query batches: detector proposals become anchor-carrying
queries, tracked instances re-enter as track queries, and learnable
anchors recall whatever the detector missed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .encoding import encode_boxes, encode_score
from .geometry import BoundingBox, boxes_to_array, unsquash

SCORE_EMBED_MODES = ("none", "linear", "sincos")

TRACK = "track"
PROPOSAL = "proposal"
LEARNABLE = "learnable"
DENOISE = "denoise"


@dataclass(frozen=True)
class Proposal:
    """One detector output box."""

    box: BoundingBox
    score: float
    class_id: int = 0
    frame: int = 0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"proposal score out of range: {self.score}")
        if self.class_id < 0:
            raise ValueError(f"negative class id: {self.class_id}")


@dataclass(frozen=True)
class QueryOrigin:
    """Provenance tag of a query row; ref is a track id or denoise group."""

    kind: str
    ref: int | None = None

    @property
    def is_detect(self) -> bool:
        return self.kind in (PROPOSAL, LEARNABLE)


@dataclass
class QueryBatch:
    """Parallel rows of query content, anchors, origins, and pos embeddings.

    anchor_logits mirrors the anchors in logit space; for learnable-anchor
    rows it references the trainable parameter so box losses can move them.
    """

    content: nn.Node
    anchors: list[BoundingBox]
    origins: list[QueryOrigin]
    pos_embed: np.ndarray = field(init=False)
    anchor_logits: nn.Node | None = None

    def __post_init__(self):
        n, dim = self.content.shape
        if len(self.anchors) != n or len(self.origins) != n:
            raise ValueError("content/anchors/origins lengths disagree")
        self.pos_embed = encode_boxes(boxes_to_array(self.anchors), dim) if n else np.zeros((0, dim))
        if self.anchor_logits is None:
            self.anchor_logits = nn.constant(_logits_of(self.anchors, dim))
        elif self.anchor_logits.shape != (n, 4):
            raise ValueError("anchor_logits must be (N, 4)")

    def __len__(self) -> int:
        return self.content.rows

    @property
    def dim(self) -> int:
        return self.content.cols


def _logits_of(anchors: list[BoundingBox], dim: int) -> np.ndarray:
    if not anchors:
        return np.zeros((0, 4))
    return np.array([[unsquash(c) for c in (b.cx, b.cy, b.w, b.h)] for b in anchors])


def empty_batch(dim: int) -> QueryBatch:
    return QueryBatch(nn.constant(np.zeros((0, dim))), [], [])


def filter_proposals(raw: list[Proposal], keep_threshold: float = 0.05) -> list[Proposal]:
    """Keep proposals with score strictly above the threshold, order preserved."""
    return [p for p in raw if p.score > keep_threshold]


def make_proposal_queries(props: list[Proposal], shared: nn.Node,
                          score_mode: str = "sincos",
                          score_proj: nn.Node | None = None) -> QueryBatch:
    """Shared per-class query plus a score embedding; anchors are the proposal boxes.

    The batch size follows the proposal count — nothing here is fixed-size.
    """
    if score_mode not in SCORE_EMBED_MODES:
        raise ValueError(f"unknown score embedding mode {score_mode!r}")
    dim = shared.cols
    if not props:
        return empty_batch(dim)
    classes = [p.class_id for p in props]
    if max(classes) >= shared.rows:
        raise ValueError(f"class id {max(classes)} outside shared query table ({shared.rows} classes)")
    content = nn.gather_rows(shared, classes)
    if score_mode == "sincos":
        embeds = np.stack([encode_score(p.score, dim) for p in props])
        content = nn.add(content, nn.constant(embeds))
    elif score_mode == "linear":
        if score_proj is None:
            raise ValueError("linear score embedding needs the projection row")
        scores = nn.constant(np.array([[p.score] for p in props]))
        content = nn.add(content, nn.matmul(scores, score_proj))
    anchors = [p.box for p in props]
    origins = [QueryOrigin(PROPOSAL)] * len(props)
    return QueryBatch(content, anchors, origins)


def append_learnable_anchors(batch: QueryBatch, anchor_logits: nn.Node,
                             shared: nn.Node) -> QueryBatch:
    """Append K trainable anchors carrying the class-0 shared query content."""
    k = anchor_logits.rows
    if k == 0:
        return batch
    if anchor_logits.cols != 4:
        raise ValueError("learnable anchors must be (K, 4) logits")
    squashed = 1.0 / (1.0 + np.exp(-anchor_logits.value))
    anchors = [BoundingBox(*map(float, row)) for row in squashed]
    content = nn.gather_rows(shared, [0] * k)
    extra = QueryBatch(content, anchors, [QueryOrigin(LEARNABLE)] * k,
                       anchor_logits=anchor_logits)
    return concat_batches([batch, extra])


def make_track_queries(contents: list[nn.Node], anchors: list[BoundingBox],
                       track_ids: list[int], dim: int) -> QueryBatch:
    """Track queries: stored content rows with last-prediction anchors."""
    if not contents:
        return empty_batch(dim)
    content = nn.concat_rows(contents)
    origins = [QueryOrigin(TRACK, tid) for tid in track_ids]
    return QueryBatch(content, anchors, origins)


def concat_batches(batches: list[QueryBatch]) -> QueryBatch:
    batches = [b for b in batches if len(b) > 0]
    if not batches:
        raise ValueError("cannot concatenate all-empty batches")
    if len(batches) == 1:
        return batches[0]
    content = nn.concat_rows([b.content for b in batches])
    anchors = [a for b in batches for a in b.anchors]
    origins = [o for b in batches for o in b.origins]
    logits = nn.concat_rows([b.anchor_logits for b in batches])
    return QueryBatch(content, anchors, origins, anchor_logits=logits)
