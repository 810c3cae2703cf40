"""Pseudo-label pretraining: cluster hidden-layer embeddings of the
untranscribed pool with k-means, turn cluster ids into frame targets, and
train a fresh model on them with masked frame cross-entropy."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import am
from .corpus import Manifest, load_utterance

KMEANS_MAGIC = b"WSKM0001"


@dataclass
class KmeansModel:
    k: int
    centroids: np.ndarray  # k x H
    distortion: float  # mean squared distance at convergence
    seed: int


def _distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # Squared Euclidean distances, N x k.
    p2 = np.sum(points**2, axis=1, keepdims=True)
    c2 = np.sum(centroids**2, axis=1)
    return np.maximum(p2 - 2.0 * points @ centroids.T + c2, 0.0)


def _plus_plus_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = _distances(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, _distances(points, centroids[j : j + 1]).ravel())
    return centroids


def kmeans_fit(points, k: int, max_iters: int = 50, seed: int = 0) -> KmeansModel:
    """k-means++ then Lloyd iterations until the assignment is a fixpoint.

    The mean squared distance is asserted non-increasing every iteration.
    An empty cluster is re-seeded to the point farthest from its assigned
    centroid (lowest index on ties).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be N x H")
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < k:
        raise ValueError(f"k={k} exceeds the {distinct} distinct points")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_init(points, k, rng)

    prev_assign = None
    prev_distortion = np.inf
    distortion = np.inf
    for it in range(max_iters + 1):
        d2 = _distances(points, centroids)
        assign_ids = np.argmin(d2, axis=1)  # ties -> lowest centroid id
        distortion = float(d2[np.arange(n), assign_ids].mean())
        if distortion > prev_distortion + 1e-9:
            raise AssertionError("k-means distortion increased")
        prev_distortion = distortion
        if it == max_iters or (prev_assign is not None and np.array_equal(assign_ids, prev_assign)):
            break
        prev_assign = assign_ids
        new_centroids = centroids.copy()
        point_dist = d2[np.arange(n), assign_ids]
        for j in range(k):
            members = assign_ids == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
            else:
                idx = int(np.argmax(point_dist))
                new_centroids[j] = points[idx]
                point_dist[idx] = -1.0  # a second empty cluster picks elsewhere
        centroids = new_centroids
    return KmeansModel(k=k, centroids=centroids, distortion=distortion, seed=seed)


def assign(model: KmeansModel, points) -> np.ndarray:
    """Nearest centroid by squared distance; ties go to the lowest id."""
    points = np.asarray(points, dtype=np.float64)
    return np.argmin(_distances(points, model.centroids), axis=1)


def save_centroids(model: KmeansModel, path) -> None:
    with open(path, "wb") as f:
        f.write(KMEANS_MAGIC)
        f.write(struct.pack("<II", model.k, model.centroids.shape[1]))
        f.write(model.centroids.astype("<f4").tobytes(order="C"))


def load_centroids(path) -> KmeansModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != KMEANS_MAGIC:
            raise ValueError(f"bad magic in {path}: {magic!r}")
        k, h = struct.unpack("<II", f.read(8))
        centroids = np.frombuffer(f.read(4 * k * h), dtype="<f4").reshape(k, h)
    return KmeansModel(k=k, centroids=centroids.astype(np.float64), distortion=np.nan, seed=-1)


def embed_manifest(model, manifest: Manifest):
    """Hidden-layer embeddings for every utterance; (dict id->T x H, order)."""
    out = {}
    for entry in manifest:
        utt = load_utterance(manifest, entry)
        out[entry.id] = model.embed(utt.features)
    return out


def generate_targets(model, manifest: Manifest, kmeans: KmeansModel) -> dict:
    """Per-utterance cluster id sequences aligned one-to-one with frames."""
    targets = {}
    for entry in manifest:
        utt = load_utterance(manifest, entry)
        emb = model.embed(utt.features)
        targets[entry.id] = assign(kmeans, emb)
    return targets


def save_targets(targets: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for uid in targets:
            f.write(json.dumps({"id": uid, "targets": [int(t) for t in targets[uid]]}) + "\n")


def load_targets(path) -> dict:
    targets = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                targets[rec["id"]] = np.asarray(rec["targets"], dtype=np.int64)
    return targets


@dataclass(frozen=True)
class ArchConfig:
    context: int = 2
    dim_hidden: int = 32
    seed: int = 0


def pretrain(
    arch: ArchConfig,
    targets: dict,
    manifest: Manifest,
    mask: am.InputMaskConfig | None,
    train: am.TrainConfig,
) -> am.RefModel:
    """Train a freshly initialized model to predict cluster targets from
    masked inputs; the loss covers every frame, masked or not."""
    dataset = []
    k = 0
    for entry in manifest:
        if entry.id not in targets:
            raise ValueError(f"no targets for utterance {entry.id!r}")
        utt = load_utterance(manifest, entry)
        t = targets[entry.id]
        if len(t) != utt.features.shape[0]:
            raise ValueError(f"target length mismatch for {entry.id!r}")
        k = max(k, int(np.max(t)) + 1)
        dataset.append((utt.features, np.asarray(t, dtype=np.int64)))
    if not dataset:
        raise ValueError("empty manifest")
    dim_in = dataset[0][0].shape[1]
    model = am.RefModel.create(arch.context, dim_in, arch.dim_hidden, k, arch.seed)
    cfg = am.TrainConfig(
        lr=train.lr,
        batch_size=train.batch_size,
        epochs=train.epochs,
        seed=train.seed,
        input_mask=mask,
        spec_mask=train.spec_mask,
    )
    am.train_frame_ce(model, dataset, cfg)
    return model


@dataclass
class UnsupIteration:
    model: am.RefModel
    kmeans: KmeansModel
    targets: dict


def unsup_iteration(
    prev: am.RefModel,
    manifest: Manifest,
    k: int,
    arch: ArchConfig,
    mask: am.InputMaskConfig | None,
    train: am.TrainConfig,
    kmeans_seed: int = 0,
    kmeans_iters: int = 50,
) -> UnsupIteration:
    """One pretraining round: embed with ``prev``, cluster, retarget, train
    a fresh model. The k-means model and targets are returned for
    inspection and persistence."""
    embeddings = embed_manifest(prev, manifest)
    points = np.concatenate([embeddings[e.id] for e in manifest], axis=0)
    km = kmeans_fit(points, k, max_iters=kmeans_iters, seed=kmeans_seed)
    targets = {e.id: assign(km, embeddings[e.id]) for e in manifest}
    model = pretrain(arch, targets, manifest, mask, train)
    return UnsupIteration(model=model, kmeans=km, targets=targets)


def cluster_cross_entropy(model: am.RefModel, manifest: Manifest, targets: dict) -> float:
    """Mean per-frame cross-entropy of the model against cluster targets."""
    total = 0.0
    frames = 0
    for entry in manifest:
        utt = load_utterance(manifest, entry)
        grid = model.posteriors(utt.features)
        t = np.asarray(targets[entry.id], dtype=np.int64)
        total += float(-np.sum(grid.logp[np.arange(len(t)), t]))
        frames += len(t)
    return total / max(1, frames)
