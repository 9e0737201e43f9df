"""Per-sequence inference: propagate track queries, concatenate proposal
queries, decode, threshold, and manage track identities."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from . import nn_core as nn
from .align import AlignConfig, align_frame
from .decoder import DecoderOutput, FrameFeatures
from .geometry import BoundingBox
from .query_gen import (LEARNABLE, PROPOSAL, TRACK, Proposal, QueryBatch,
                        append_learnable_anchors, concat_batches,
                        filter_proposals, make_proposal_queries,
                        make_track_queries)


@dataclass
class TrackState:
    """Persistent per-instance record carried across frames."""

    track_id: int
    content: np.ndarray
    anchor: BoundingBox
    last_score: float
    class_id: int
    birth_frame: int
    miss_streak: int = 0


@dataclass(frozen=True)
class TrajectoryEntry:
    track_id: int
    box: BoundingBox
    score: float = 1.0
    class_id: int = 0


class TrajectorySet:
    """Per-frame lists of (id, box, score, class); ids unique within a frame."""

    def __init__(self):
        self._frames: dict[int, list[TrajectoryEntry]] = {}

    def add(self, frame: int, entry: TrajectoryEntry):
        bucket = self._frames.setdefault(frame, [])
        if any(e.track_id == entry.track_id for e in bucket):
            raise ValueError(f"duplicate track id {entry.track_id} in frame {frame}")
        bucket.append(entry)

    def frames(self) -> list[int]:
        return sorted(self._frames)

    def entries(self, frame: int) -> list[TrajectoryEntry]:
        return list(self._frames.get(frame, []))

    def items(self):
        for frame in self.frames():
            yield frame, self._frames[frame]

    def ids(self) -> set[int]:
        return {e.track_id for bucket in self._frames.values() for e in bucket}

    def classes(self) -> set[int]:
        return {e.class_id for bucket in self._frames.values() for e in bucket}

    def num_boxes(self) -> int:
        return sum(len(b) for b in self._frames.values())

    def remap_ids(self, mapping: dict[int, int]) -> "TrajectorySet":
        out = TrajectorySet()
        for frame, bucket in self.items():
            for e in bucket:
                out.add(frame, replace(e, track_id=mapping.get(e.track_id, e.track_id)))
        return out

    def filter_class(self, class_id: int) -> "TrajectorySet":
        out = TrajectorySet()
        for frame, bucket in self.items():
            for e in bucket:
                if e.class_id == class_id:
                    out.add(frame, e)
        return out

    def copy(self) -> "TrajectorySet":
        out = TrajectorySet()
        for frame, bucket in self.items():
            for e in bucket:
                out.add(frame, e)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectorySet):
            return NotImplemented
        return self._frames == other._frames

    def approx_equals(self, other: "TrajectorySet", tol: float = 1e-6) -> bool:
        if self.frames() != other.frames():
            return False
        for frame in self.frames():
            a = sorted(self.entries(frame), key=lambda e: e.track_id)
            b = sorted(other.entries(frame), key=lambda e: e.track_id)
            if len(a) != len(b):
                return False
            for ea, eb in zip(a, b):
                if ea.track_id != eb.track_id or ea.class_id != eb.class_id:
                    return False
                if abs(ea.score - eb.score) > tol:
                    return False
                if np.abs(ea.box.as_array() - eb.box.as_array()).max() > tol:
                    return False
        return True


@dataclass
class TrackerConfig:
    proposal_threshold: float = 0.05
    propagate_threshold: float = 0.5
    birth_threshold: float = 0.5
    output_threshold: float = 0.5
    patience: int = 0
    propagate: str = "box"  # "box" keeps the full anchor, "point" only its center
    point_wh: tuple[float, float] = (0.1, 0.1)
    align: AlignConfig | None = None

    def __post_init__(self):
        for name in ("proposal_threshold", "propagate_threshold",
                     "birth_threshold", "output_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.propagate not in ("box", "point"):
            raise ValueError(f"propagate must be 'box' or 'point', got {self.propagate!r}")


class Tracker:
    """Stateful per-sequence tracker around a decode function.

    `model` is either a TrackingDecoder or any scripted stand-in exposing
    `decode(batch, feats)` and `dim`. One Tracker serves one sequence at a
    time; run_sequence resets its state.
    """

    def __init__(self, model, config: TrackerConfig | None = None):
        self.model = model
        self.config = config or TrackerConfig()
        self.tracks: list[TrackState] = []
        self._next_id = 1
        self._zero_shared: nn.Node | None = None

    @property
    def dim(self) -> int:
        return self.model.config.dim if hasattr(self.model, "config") else self.model.dim

    def reset(self):
        self.tracks = []
        self._next_id = 1

    def _shared_query(self) -> nn.Node:
        if hasattr(self.model, "shared_query"):
            return self.model.shared_query
        if self._zero_shared is None:
            self._zero_shared = nn.constant(np.zeros((1, self.dim)))
        return self._zero_shared

    def _build_batch(self, proposals: list[Proposal]) -> QueryBatch | None:
        shared = self._shared_query()
        parts = []
        if self.tracks:
            parts.append(make_track_queries(
                [nn.constant(t.content.reshape(1, -1)) for t in self.tracks],
                [t.anchor for t in self.tracks],
                [t.track_id for t in self.tracks],
                self.dim))
        score_mode = getattr(getattr(self.model, "config", None), "score_embed", "sincos")
        score_proj = getattr(self.model, "score_proj", None)
        parts.append(make_proposal_queries(proposals, shared, score_mode, score_proj))
        if hasattr(self.model, "learnable_anchor_logits"):
            anchors = self.model.learnable_anchor_logits
            if anchors.rows:
                merged = concat_batches(parts) if any(len(p) for p in parts) else None
                if merged is None:
                    from .query_gen import empty_batch
                    merged = empty_batch(self.dim)
                return append_learnable_anchors(merged, anchors, shared)
        live = [p for p in parts if len(p)]
        return concat_batches(live) if live else None

    def step(self, proposals: list[Proposal],
             feats: FrameFeatures) -> tuple[list[TrajectoryEntry], list[TrackState]]:
        """One frame: decode, update track states, and emit frame outputs.

        Proposals are expected to be pre-filtered (score > proposal_threshold).
        """
        cfg = self.config
        frame = feats.frame_index
        with nn.no_grad():
            batch = self._build_batch(proposals)
            if batch is None or len(batch) == 0:
                self.tracks = []
                return [], self.tracks
            out = self.model.decode(batch, feats)
        track_by_id = {t.track_id: t for t in self.tracks}
        n_tracks = len(self.tracks)
        survivors: list[TrackState] = []
        births: list[TrackState] = []
        outputs: list[TrajectoryEntry] = []
        out_tracks: list[TrackState] = []

        for i, origin in enumerate(batch.origins):
            score = float(out.scores[i])
            box = out.boxes[i]
            if origin.kind == TRACK:
                t = track_by_id[origin.ref]
                if score > cfg.propagate_threshold:
                    t.anchor = box
                    t.content = out.updated_content.value[i].copy()
                    t.last_score = score
                    t.miss_streak = 0
                    survivors.append(t)
                    if score > cfg.output_threshold:
                        outputs.append(TrajectoryEntry(t.track_id, box, score, t.class_id))
                        out_tracks.append(t)
                else:
                    t.miss_streak += 1
                    if t.miss_streak <= cfg.patience:
                        t.anchor = box
                        t.content = out.updated_content.value[i].copy()
                        t.last_score = score
                        survivors.append(t)
            elif score > cfg.birth_threshold:
                class_id = proposals[i - n_tracks].class_id if origin.kind == PROPOSAL else 0
                t = TrackState(self._next_id, out.updated_content.value[i].copy(),
                               box, score, class_id, frame)
                self._next_id += 1
                births.append(t)
                if score > cfg.output_threshold:
                    outputs.append(TrajectoryEntry(t.track_id, box, score, class_id))
                    out_tracks.append(t)

        self.tracks = survivors + births
        if cfg.align is not None:
            outputs, _ = align_frame(outputs, out_tracks, proposals, cfg.align)
        if cfg.propagate == "point":
            w, h = cfg.point_wh
            for t in self.tracks:
                t.anchor = BoundingBox(t.anchor.cx, t.anchor.cy, w, h)
        return outputs, self.tracks

    def run_sequence(self, frames: Iterable[tuple[list[Proposal], FrameFeatures]]) -> TrajectorySet:
        """Fold step over an ordered frame stream; filters raw proposals."""
        self.reset()
        result = TrajectorySet()
        for proposals, feats in frames:
            kept = filter_proposals(proposals, self.config.proposal_threshold)
            outputs, _ = self.step(kept, feats)
            for entry in outputs:
                result.add(feats.frame_index, entry)
        return result
