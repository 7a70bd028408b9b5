"""Deterministic pretraining loop with hand-written backpropagation.

Per step, each of the three frames (and the sweep-aggregated dense cloud)
runs the point branch

    cloud -> encoder MLP -> point head -> per-point l2 norm
          -> region mean pool -> row l2 norm -> Q

and each frame runs the frozen-teacher image branch

    feature grid -> bilinear upsample -> image head -> per-pixel l2 norm
                 -> region mean pool -> row l2 norm -> K

The composite objective supplies dL/dQ and dL/dK, which are pushed back
through both chains analytically. Updates are plain gradient descent; the
whole trajectory is bit-reproducible given the seed and the batch.

The image backbone itself never trains: feature grids enter as data and
only the image-side projection head receives gradient.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .containers import load_tensor, save_tensor
from .embedding import (PointEncoder, ProjectionHead, bilinear_upsample,
                        l2_normalize_rows, l2_normalize_rows_backward)
from .geometry import PointCloud, aggregate_sweeps
from .losses import (PREV, CURR, NEXT, CompositeBatch, CompositeResult,
                     LossWeights, composite_objective)
from .superpoints import SuperpointIndex, build_superpoints, match_regions
from .synthetic import SyntheticScene


@dataclass(frozen=True)
class TrainConfig:
    embed_dim: int = 32      # shared space C
    point_dim: int = 64      # encoder output D
    hidden_dim: int = 64
    tau: float = 0.07
    learning_rate: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class TrainState:
    encoder: PointEncoder
    point_head: ProjectionHead
    image_head: ProjectionHead
    step: int
    seed: int
    config: TrainConfig

    @classmethod
    def init(cls, seed: int, point_in_dim: int, image_feature_dim: int,
             config: TrainConfig = TrainConfig()) -> "TrainState":
        rng = np.random.default_rng(seed)
        encoder = PointEncoder.init(point_in_dim, config.hidden_dim,
                                    config.point_dim, rng)
        point_head = ProjectionHead.init(config.point_dim, config.embed_dim, rng)
        image_head = ProjectionHead.init(image_feature_dim, config.embed_dim, rng)
        return cls(encoder, point_head, image_head, 0, seed, config)


@dataclass
class FrameBatch:
    """Frozen per-frame training inputs.

    x feeds the encoder; groups lists each region's member point rows;
    pixel_feats stacks the upsampled image features of every region pixel,
    region by region, with pixel_slices delimiting the rows of each region.
    """

    x: np.ndarray
    groups: list[np.ndarray]
    pixel_feats: np.ndarray
    pixel_slices: list[tuple[int, int]]

    @property
    def num_regions(self) -> int:
        return len(self.groups)


@dataclass
class TrainingBatch:
    frames: dict[str, FrameBatch]
    dense: FrameBatch
    match_prev: np.ndarray
    match_next: np.ndarray
    match_dense: np.ndarray


def _encoder_input(cloud: PointCloud, attr_width: int) -> np.ndarray:
    return np.hstack([cloud.coords, cloud.attrs[:, :attr_width]])


def _frame_batch(cloud: PointCloud, index: SuperpointIndex, grids, maps,
                 attr_width: int) -> FrameBatch:
    chunks = []
    slices = []
    start = 0
    for meta in index.region_meta:
        mask = maps[meta.camera_index].labels == np.uint32(meta.superpixel_id)
        rows = grids[meta.camera_index][mask]
        chunks.append(rows)
        slices.append((start, start + rows.shape[0]))
        start += rows.shape[0]
    feats = (np.concatenate(chunks, axis=0) if chunks
             else np.empty((0, grids[0].shape[2])))
    return FrameBatch(x=_encoder_input(cloud, attr_width),
                      groups=[np.asarray(g) for g in index.regions],
                      pixel_feats=feats, pixel_slices=slices)


def build_training_batch(scene: SyntheticScene, center: int | None = None,
                         sweep_count: int = 2) -> TrainingBatch:
    """Assemble the three-frame batch (plus dense cloud) around ``center``.

    The dense cloud aggregates the ``sweep_count`` nearest neighboring frames
    as sweeps, aligned through the ego poses, and is regrouped with the
    center frame's label maps. The sweep provenance column is stripped before
    encoding so all clouds share the encoder input width.
    """
    if center is None:
        center = len(scene.frames) // 2
    if not 1 <= center <= len(scene.frames) - 2:
        raise ValueError(f"center frame {center} needs neighbors on both sides")
    cameras = list(scene.cameras)
    attr_width = scene.frames[center].cloud.attr_width

    indices = {}
    batches = {}
    for name, fi in ((PREV, center - 1), (CURR, center), (NEXT, center + 1)):
        frame = scene.frames[fi]
        grids = [bilinear_upsample(fm.data, cam.height, cam.width)
                 for fm, cam in zip(frame.feature_maps, cameras)]
        index = build_superpoints(frame.cloud, cameras, list(frame.label_maps))
        indices[name] = index
        batches[name] = _frame_batch(frame.cloud, index, grids,
                                     list(frame.label_maps), attr_width)

    curr = scene.frames[center]
    offsets = []
    for step in range(1, len(scene.frames)):
        for cand in (center - step, center + step):
            if 0 <= cand < len(scene.frames) and cand != center:
                offsets.append(cand)
    if sweep_count > len(offsets):
        raise ValueError(
            f"{sweep_count} sweeps requested but only {len(offsets)} "
            f"neighbor frames exist")
    sweeps = [(scene.frames[fi].cloud, scene.relative_pose(fi, center))
              for fi in offsets[:sweep_count]]
    dense_cloud = aggregate_sweeps(curr.cloud, sweeps)
    dense_index = build_superpoints(dense_cloud, cameras, list(curr.label_maps))
    dense = FrameBatch(x=_encoder_input(dense_cloud, attr_width),
                       groups=[np.asarray(g) for g in dense_index.regions],
                       pixel_feats=np.empty((0, batches[CURR].pixel_feats.shape[1])),
                       pixel_slices=[])

    def pairs(a, b):
        return np.asarray(match_regions(a, b), dtype=np.int64).reshape(-1, 2)

    return TrainingBatch(
        frames=batches,
        dense=dense,
        match_prev=pairs(indices[CURR], indices[PREV]),
        match_next=pairs(indices[CURR], indices[NEXT]),
        match_dense=pairs(indices[CURR], dense_index),
    )


# ---------------------------------------------------------------------------
# Forward / backward over one branch
# ---------------------------------------------------------------------------


def _pool_groups(rows: np.ndarray, groups) -> np.ndarray:
    pooled = np.empty((len(groups), rows.shape[1]))
    for m, members in enumerate(groups):
        pooled[m] = rows[members].mean(axis=0)
    return pooled


def _pool_groups_backward(grad: np.ndarray, groups, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, grad.shape[1]))
    for m, members in enumerate(groups):
        out[members] += grad[m] / members.shape[0]
    return out


def _pool_slices(rows: np.ndarray, slices, dim: int) -> np.ndarray:
    pooled = np.empty((len(slices), dim))
    for m, (s, e) in enumerate(slices):
        pooled[m] = rows[s:e].mean(axis=0)
    return pooled


def _pool_slices_backward(grad: np.ndarray, slices, n_rows: int) -> np.ndarray:
    out = np.zeros((n_rows, grad.shape[1]))
    for m, (s, e) in enumerate(slices):
        out[s:e] += grad[m] / (e - s)
    return out


def _point_branch_forward(state: TrainState, frame: FrameBatch):
    feats, enc_cache = state.encoder.forward(frame.x)
    proj, head_cache = state.point_head.forward(feats)
    unit, norm1 = l2_normalize_rows(proj)
    pooled = _pool_groups(unit, frame.groups)
    q, norm2 = l2_normalize_rows(pooled)
    return q, (enc_cache, head_cache, norm1, norm2)


def _point_branch_backward(state: TrainState, frame: FrameBatch, grad_q, cache):
    enc_cache, head_cache, norm1, norm2 = cache
    d_pooled = l2_normalize_rows_backward(grad_q, norm2)
    d_unit = _pool_groups_backward(d_pooled, frame.groups, frame.x.shape[0])
    d_proj = l2_normalize_rows_backward(d_unit, norm1)
    head_grads, d_feats = state.point_head.backward(d_proj, head_cache)
    enc_grads = state.encoder.backward(d_feats, enc_cache)
    return enc_grads, head_grads


def _image_branch_forward(state: TrainState, frame: FrameBatch):
    proj, head_cache = state.image_head.forward(frame.pixel_feats)
    unit, norm1 = l2_normalize_rows(proj)
    pooled = _pool_slices(unit, frame.pixel_slices, proj.shape[1])
    k, norm2 = l2_normalize_rows(pooled)
    return k, (head_cache, norm1, norm2)


def _image_branch_backward(state: TrainState, frame: FrameBatch, grad_k, cache):
    head_cache, norm1, norm2 = cache
    d_pooled = l2_normalize_rows_backward(grad_k, norm2)
    d_unit = _pool_slices_backward(d_pooled, frame.pixel_slices,
                                   frame.pixel_feats.shape[0])
    d_proj = l2_normalize_rows_backward(d_unit, norm1)
    head_grads, _ = state.image_head.backward(d_proj, head_cache)
    return head_grads


def loss_and_grads(state: TrainState, batch: TrainingBatch):
    """Composite loss plus analytic gradients for every trainable parameter."""
    point_caches = {}
    image_caches = {}
    q = {}
    k = {}
    for name in (PREV, CURR, NEXT):
        q[name], point_caches[name] = _point_branch_forward(state, batch.frames[name])
        k[name], image_caches[name] = _image_branch_forward(state, batch.frames[name])
    q_dense, dense_cache = _point_branch_forward(state, batch.dense)

    comp = composite_objective(
        CompositeBatch(q=q, k=k, q_dense=q_dense, match_prev=batch.match_prev,
                       match_next=batch.match_next, match_dense=batch.match_dense),
        tau=state.config.tau, weights=state.config.weights)

    enc_grads = PointEncoder(np.zeros_like(state.encoder.w1),
                             np.zeros_like(state.encoder.b1),
                             np.zeros_like(state.encoder.w2),
                             np.zeros_like(state.encoder.b2))
    ph_grads = ProjectionHead(np.zeros_like(state.point_head.weight),
                              np.zeros_like(state.point_head.bias))
    ih_grads = ProjectionHead(np.zeros_like(state.image_head.weight),
                              np.zeros_like(state.image_head.bias))

    def accumulate_point(frame: FrameBatch, grad_q, cache):
        eg, hg = _point_branch_backward(state, frame, grad_q, cache)
        enc_grads.w1 += eg.w1
        enc_grads.b1 += eg.b1
        enc_grads.w2 += eg.w2
        enc_grads.b2 += eg.b2
        ph_grads.weight += hg.weight
        ph_grads.bias += hg.bias

    for name in (PREV, CURR, NEXT):
        accumulate_point(batch.frames[name], comp.grads[f"q_{name}"],
                         point_caches[name])
        ig = _image_branch_backward(state, batch.frames[name],
                                    comp.grads[f"k_{name}"], image_caches[name])
        ih_grads.weight += ig.weight
        ih_grads.bias += ig.bias
    accumulate_point(batch.dense, comp.grads["q_dense"], dense_cache)

    return comp, enc_grads, ph_grads, ih_grads


def train_step(state: TrainState, batch: TrainingBatch):
    """One gradient-descent update; returns (new state, loss breakdown)."""
    comp, enc_g, ph_g, ih_g = loss_and_grads(state, batch)
    lr = state.config.learning_rate
    new_state = TrainState(
        encoder=PointEncoder(state.encoder.w1 - lr * enc_g.w1,
                             state.encoder.b1 - lr * enc_g.b1,
                             state.encoder.w2 - lr * enc_g.w2,
                             state.encoder.b2 - lr * enc_g.b2),
        point_head=ProjectionHead(state.point_head.weight - lr * ph_g.weight,
                                  state.point_head.bias - lr * ph_g.bias),
        image_head=ProjectionHead(state.image_head.weight - lr * ih_g.weight,
                                  state.image_head.bias - lr * ih_g.bias),
        step=state.step + 1,
        seed=state.seed,
        config=state.config,
    )
    breakdown = dict(comp.terms)
    breakdown["missing"] = list(comp.missing)
    return new_state, breakdown


def alignment_stats(state: TrainState, batch: TrainingBatch):
    """(mean matched-pair cosine, mean mismatched cosine) on the center frame."""
    q, _ = _point_branch_forward(state, batch.frames[CURR])
    k, _ = _image_branch_forward(state, batch.frames[CURR])
    sims = q @ k.T
    m = sims.shape[0]
    matched = float(np.mean(np.diag(sims)))
    if m < 2:
        return matched, float("nan")
    off = (sims.sum() - np.trace(sims)) / (m * (m - 1))
    return matched, float(off)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_PARAM_FILES = {
    "encoder_w1": ("encoder", "w1"),
    "encoder_b1": ("encoder", "b1"),
    "encoder_w2": ("encoder", "w2"),
    "encoder_b2": ("encoder", "b2"),
    "point_head_weight": ("point_head", "weight"),
    "point_head_bias": ("point_head", "bias"),
    "image_head_weight": ("image_head", "weight"),
    "image_head_bias": ("image_head", "bias"),
}


def config_digest(config: TrainConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(directory, state: TrainState) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, (owner, attr) in _PARAM_FILES.items():
        filename = f"{name}.fpt"
        save_tensor(directory / filename, getattr(getattr(state, owner), attr))
        params[name] = filename
    manifest = {
        "step": state.step,
        "seed": state.seed,
        "config": asdict(state.config),
        "config_hash": config_digest(state.config),
        "params": params,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = dict(manifest["config"])
    cfg["weights"] = LossWeights(**cfg["weights"])
    config = TrainConfig(**cfg)
    tensors = {name: load_tensor(directory / filename)
               for name, filename in manifest["params"].items()}
    return TrainState(
        encoder=PointEncoder(tensors["encoder_w1"], tensors["encoder_b1"],
                             tensors["encoder_w2"], tensors["encoder_b2"]),
        point_head=ProjectionHead(tensors["point_head_weight"],
                                  tensors["point_head_bias"]),
        image_head=ProjectionHead(tensors["image_head_weight"],
                                  tensors["image_head_bias"]),
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
        config=config,
    )
