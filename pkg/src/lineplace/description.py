"""Cluster description: unit-norm embeddings for groups of lines.

A cluster (the lines sharing one predicted label in a frame) is embedded by
the same line-encoding recipe as the clustering network, a shorter attention
stack, and a two-stage global-attention readout: learned queries summarize
the lines, a second set of queries generated from that summary reads the
lines again, and a final linear layer with L2 normalization projects onto
the unit sphere.  Training minimizes a triplet hinge over mined
(anchor, positive, negative) cluster triplets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .clustering import (
    VisualEncoder,
    images_to_float,
    rotate_geom,
    rotation_matrix,
)
from .extraction import FrameFeatures
from .geometry import GEOM_DIM
from .nn import functional as F
from .retrieval import FrameClusters
from .views import VIRTUAL_HEIGHT, VIRTUAL_WIDTH

DISTANCE_EPS = 1e-12  # inside the sqrt, keeps d(a, a) differentiable


@dataclass(frozen=True)
class DescriptorConfig:
    d_geom: int = 384
    d_visual: int = 128
    d_h: int = 2048  # hidden width of the visual encoder head
    d_model: int = 512
    n_layers: int = 5
    h_dot: int = 4
    h_add: int = 4
    d_k: int = 64
    d_ff: int = 2048
    g_dot: int = 8  # global readout heads
    g_add: int = 8
    d_q: int = 64
    d_global: int = 1024
    d_fc: int = 4096
    d_descriptor: int = 128
    vis_channels: tuple = (8, 8, 16, 16)
    margin: float = 0.6
    lr: float = 1e-4
    lr_decay: float = 0.96
    epochs: int = 50
    batch_size: int = 32
    p_same_semantic: float = 0.5
    p_blackout: float = 0.2
    rot_pitch_roll_deg: float = 10.0
    augment: bool = True
    n_val_triplets: int = 128

    def __post_init__(self):
        if self.d_geom + self.d_visual != self.d_model:
            raise ValueError("d_geom + d_visual must equal d_model")
        if self.d_global != (self.g_dot + self.g_add) * self.d_q:
            raise ValueError("d_global must equal (g_dot + g_add) * d_q")


def desk_preset(**overrides) -> DescriptorConfig:
    """Compact configuration sized for CPU training on room-scale data.

    The visual-encoder dimensions match the clustering desk preset so its
    frozen weights can be transplanted.
    """
    base = dict(
        d_geom=104,
        d_visual=24,
        d_h=256,
        d_model=128,
        n_layers=2,
        h_dot=2,
        h_add=2,
        d_k=32,
        d_ff=256,
        g_dot=4,
        g_add=4,
        d_q=32,
        d_global=256,
        d_fc=512,
        vis_channels=(4, 4, 8, 8),
        lr=2e-4,
    )
    base.update(overrides)
    return DescriptorConfig(**base)


# -- clusters and triplets ---------------------------------------------------


@dataclass
class LineCluster:
    """The lines of one frame sharing a label, with training-time identity."""

    scene_id: str
    frame_id: str
    label: int
    geom: np.ndarray  # [M, 15] float32
    images: np.ndarray  # [M, 64, 96, 3] uint8
    instance_id: int = -1  # ground-truth identity; -1 when unknown
    semantic_id: int = -1

    def __post_init__(self):
        if len(self.geom) == 0:
            raise ValueError("a line cluster needs at least one line")

    @property
    def n_lines(self) -> int:
        return len(self.geom)


@dataclass
class Triplet:
    anchor: LineCluster
    positive: LineCluster
    negative: LineCluster


def clusters_from_ground_truth(feats: FrameFeatures) -> list[LineCluster]:
    """Instance clusters of a frame; background lines are not clusters here."""
    out = []
    for lab in np.unique(feats.labels):
        if lab == 0:
            continue
        idx = np.flatnonzero(feats.labels == lab)
        sems, counts = np.unique(feats.semantics[idx], return_counts=True)
        out.append(
            LineCluster(
                feats.scene_id,
                feats.frame_id,
                int(lab),
                feats.geom[idx],
                feats.images[idx],
                instance_id=int(lab),
                semantic_id=int(sems[np.argmax(counts)]),
            )
        )
    return out


def clusters_from_predictions(feats: FrameFeatures, labels) -> list[LineCluster]:
    """One cluster per predicted label, the background bin included."""
    labels = np.asarray(labels)
    out = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        out.append(
            LineCluster(feats.scene_id, feats.frame_id, int(lab), feats.geom[idx], feats.images[idx])
        )
    return out


# -- network -------------------------------------------------------------------


class DescriptorNet(nn.Module):
    """Line embedding, attention stack, two global readouts, unit-norm head."""

    def __init__(self, cfg: DescriptorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.alpha = 0.3
        self.visual = VisualEncoder(cfg, rng)
        self.geom_fc = nn.Linear(GEOM_DIM, cfg.d_geom, rng)
        self.layers = nn.ModuleList(
            [
                nn.EncoderLayer(cfg.d_model, cfg.h_dot, cfg.h_add, cfg.d_k, cfg.d_ff, rng, use_bn=False)
                for _ in range(cfg.n_layers)
            ]
        )
        self.pool1 = nn.GlobalAttentionPool(cfg.d_model, cfg.g_dot, cfg.g_add, cfg.d_q, rng)
        self.fc_global = nn.Linear(cfg.d_global, cfg.d_global, rng)
        self.ff1 = nn.FeedForward(cfg.d_global, cfg.d_fc, rng)
        self.query_gen = nn.Linear(cfg.d_global, cfg.d_global, rng)
        self.pool2 = nn.GlobalAttentionPool(cfg.d_model, cfg.g_dot, cfg.g_add, cfg.d_q, rng, learned_queries=False)
        self.ff2 = nn.FeedForward(cfg.d_global, cfg.d_fc, rng)
        self.fc_out = nn.Linear(cfg.d_global, cfg.d_descriptor, rng)

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Visual encodings without gradient tracking (for caching)."""
        return self.visual(images_to_float(images)).data

    def forward_encoded(self, geom, visual_enc, mask=None):
        """Embeddings from geometry plus visual encodings.

        geom: [N, 15] or [B, N, 15]; visual_enc matching [.., N, d_visual];
        mask: [.., N] bool, True on real lines.  Returns [d_descriptor] for a
        single cluster, [B, d_descriptor] for a batch.
        """
        geom = np.asarray(geom)
        enc = nn.as_tensor(visual_enc)
        single = geom.ndim == 2
        if single:
            geom = geom[None]
            enc = F.expand_dims(enc, 0)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool)[None]
        elif mask is not None:
            mask = np.asarray(mask, dtype=bool)
        g = F.leaky_relu(self.geom_fc(nn.as_tensor(geom)))
        x = nn.concat([g, enc], axis=-1)
        if mask is not None:
            x = x * mask[:, :, None].astype(x.data.dtype)
        for layer in self.layers:
            x = layer(x, mask=mask)
        cfg = self.cfg
        p1 = self.pool1(x, mask=mask)  # [B, d_global]
        h = F.leaky_relu(self.fc_global(p1))
        h = F.residual(h, self.ff1(h), self.alpha)
        q = self.query_gen(h)
        q = nn.reshape(q, (q.shape[0], cfg.g_dot + cfg.g_add, cfg.d_q))
        p2 = self.pool2(x, mask=mask, queries=q)
        h2 = F.residual(p2, self.ff2(p2), self.alpha)
        y = F.l2_normalize(self.fc_out(h2), axis=-1)
        if single:
            y = nn.reshape(y, (y.shape[-1],))
        return y

    def __call__(self, geom, images, mask=None):
        return self.forward_encoded(geom, self.visual(images_to_float(images)), mask)


def describe_cluster(net: DescriptorNet, cluster: LineCluster) -> np.ndarray:
    """Unit-norm embedding of one cluster."""
    return net(cluster.geom, cluster.images).data


def frame_cluster_embeddings(
    net: DescriptorNet,
    feats: FrameFeatures,
    labels,
    visual_enc: np.ndarray | None = None,
) -> FrameClusters:
    """Embed every labeled group of a frame (background treated like any other).

    Returns the per-frame record consumed by the scene map: one embedding row
    and one line count per distinct label.
    """
    labels = np.asarray(labels)
    if visual_enc is None and len(labels):
        visual_enc = net.encode_images(feats.images)
    embs, counts = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        embs.append(net.forward_encoded(feats.geom[idx], visual_enc[idx]).data)
        counts.append(idx.size)
    if not embs:
        return FrameClusters(
            feats.frame_id,
            feats.scene_id,
            np.zeros((0, net.cfg.d_descriptor), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
        )
    return FrameClusters(feats.frame_id, feats.scene_id, np.stack(embs), np.asarray(counts, dtype=np.int64))


# -- triplet loss ---------------------------------------------------------------


def embedding_distance(a, b):
    """Euclidean distance along the last axis, safe to differentiate at zero."""
    d = nn.as_tensor(a) - nn.as_tensor(b)
    return nn.sqrt(nn.tensor_sum(d * d, axis=-1) + DISTANCE_EPS)


def triplet_loss(y_a, y_p, y_n, margin: float = 0.6):
    """Mean hinge max(0, d(a, p) - d(a, n) + margin) over the batch."""
    hinge = F.relu(embedding_distance(y_a, y_p) - embedding_distance(y_a, y_n) + margin)
    return nn.tensor_mean(hinge)


def triplet_accuracy(y_a: np.ndarray, y_p: np.ndarray, y_n: np.ndarray) -> float:
    """Fraction of triplets ranked correctly: d(a, p) < d(a, n)."""
    d_ap = np.linalg.norm(y_a - y_p, axis=-1)
    d_an = np.linalg.norm(y_a - y_n, axis=-1)
    return float(np.mean(d_ap < d_an))


# -- triplet mining ---------------------------------------------------------------


@dataclass
class _ClusterIndex:
    anchor_scenes: list  # scene ids owning at least one multi-frame instance
    anchors: dict  # scene id -> list of occurrence lists (one per such instance)
    negatives: dict  # scene id -> every instance cluster of the scene
    by_class: dict  # scene id -> semantic id -> clusters
    scene_ids: list  # scenes holding at least one instance cluster


def _build_cluster_index(scenes) -> _ClusterIndex:
    anchors, negatives, by_class = {}, {}, {}
    for sid in sorted(scenes):
        per_inst: dict = {}
        for feats in scenes[sid]:
            for c in clusters_from_ground_truth(feats):
                per_inst.setdefault(c.instance_id, []).append(c)
        if not per_inst:
            continue
        all_clusters = [c for _, occ in sorted(per_inst.items()) for c in occ]
        negatives[sid] = all_clusters
        cls: dict = {}
        for c in all_clusters:
            cls.setdefault(c.semantic_id, []).append(c)
        by_class[sid] = cls
        multi = [occ for _, occ in sorted(per_inst.items()) if len(occ) >= 2]
        if multi:
            anchors[sid] = multi
    scene_ids = sorted(negatives)
    anchor_scenes = [s for s in scene_ids if s in anchors and len(scene_ids) > 1]
    if not anchor_scenes:
        raise ValueError(
            "triplet mining needs an instance visible in >= 2 frames and a second scene for negatives"
        )
    return _ClusterIndex(anchor_scenes, anchors, negatives, by_class, scene_ids)


def _draw_triplet(index: _ClusterIndex, rng: np.random.Generator, p_same_semantic: float) -> Triplet:
    scene = index.anchor_scenes[rng.integers(len(index.anchor_scenes))]
    occs = index.anchors[scene]
    occ = occs[rng.integers(len(occs))]
    i, j = rng.choice(len(occ), size=2, replace=False)
    anchor, positive = occ[i], occ[j]
    others = [s for s in index.scene_ids if s != scene]
    neg_scene = others[rng.integers(len(others))]
    # the complement branch avoids the anchor's class, so the same-class
    # fraction among feasible draws is exactly p_same_semantic
    if rng.uniform() < p_same_semantic:
        pool = index.by_class[neg_scene].get(anchor.semantic_id, [])
    else:
        pool = [c for c in index.negatives[neg_scene] if c.semantic_id != anchor.semantic_id]
    if not pool:
        pool = index.negatives[neg_scene]
    negative = pool[rng.integers(len(pool))]
    return Triplet(anchor, positive, negative)


def mine_triplets(scenes, seed: int = 0, p_same_semantic: float = 0.5, limit: int | None = None):
    """Deterministic stream of training triplets.

    scenes: mapping scene id -> [FrameFeatures].  Anchors are instances seen
    in at least two frames of a scene; the positive is the same instance in a
    different frame; the negative comes from another scene, constrained to
    the anchor's semantic class with probability p_same_semantic (different
    class otherwise, unconstrained only when the wanted pool is empty).
    """
    index = _build_cluster_index(scenes)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1)))
    n = 0
    while limit is None or n < limit:
        yield _draw_triplet(index, rng, p_same_semantic)
        n += 1


# -- training ------------------------------------------------------------------


def _cluster_key(c: LineCluster) -> tuple:
    return (c.scene_id, c.frame_id, c.instance_id, c.label)


def _batch_inputs(clusters, enc_rows, cfg: DescriptorConfig, rng, black_row):
    """Pad a cluster batch to a common line count; augment geometry per cluster."""
    n_max = max(c.n_lines for c in clusters)
    b = len(clusters)
    geom = np.zeros((b, n_max, GEOM_DIM), dtype=np.float32)
    enc = np.zeros((b, n_max, cfg.d_visual), dtype=np.float32)
    mask = np.zeros((b, n_max), dtype=bool)
    for k, c in enumerate(clusters):
        g = c.geom
        rows = enc_rows[k]
        if cfg.augment:
            g = rotate_geom(g, rotation_matrix(rng, cfg.rot_pitch_roll_deg))
            if rng.uniform() < cfg.p_blackout:
                rows = np.repeat(black_row, c.n_lines, axis=0)
        geom[k, : c.n_lines] = g
        enc[k, : c.n_lines] = rows
        mask[k, : c.n_lines] = True
    return geom, enc, mask


def _triplet_clusters(triplets) -> list:
    return [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]


def train_descriptor(
    train_scenes,
    cfg: DescriptorConfig = DescriptorConfig(),
    seed: int = 0,
    visual_weights: dict | None = None,
    val_scenes=None,
    checkpoint_path=None,
    log_path=None,
    resume: bool = False,
    steps_per_epoch: int | None = None,
):
    """Optimize the triplet objective over mined cluster triplets.

    visual_weights is mandatory: the visual encoder is transplanted from a
    trained clustering model and stays frozen, so its encodings are
    precomputed once per cluster.  One epoch draws roughly one batch per
    mineable anchor instance.  Returns (net, metrics); with checkpoint_path
    the state lands on disk every epoch and resume=True continues bit-exactly.
    """
    if visual_weights is None:
        raise ValueError(
            "descriptor training requires frozen visual weights from a trained clustering model"
        )
    index = _build_cluster_index(train_scenes)

    ss = np.random.SeedSequence(seed)
    init_ss, train_ss = ss.spawn(2)
    net = DescriptorNet(cfg, np.random.default_rng(init_ss))
    net.visual.load_state_dict(visual_weights)
    rng = np.random.default_rng(train_ss)

    params = {k: v for k, v in net.named_parameters().items() if not k.startswith("visual.")}
    opt = nn.Adam(params, cfg.lr)

    n_anchors = sum(len(v) for v in index.anchors.values())
    if steps_per_epoch is None:
        steps_per_epoch = max(1, math.ceil(n_anchors / cfg.batch_size))

    start_epoch = 0
    metrics: list = []
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state, meta = nn.load_checkpoint(checkpoint_path)
        net.load_state_dict({k[len("net.") :]: v for k, v in state.items() if k.startswith("net.")})
        opt.load_state_dict({k[len("opt.") :]: v for k, v in state.items() if k.startswith("opt.")})
        rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = int(meta["epoch"]) + 1
        metrics = list(meta.get("metrics", []))
        steps_per_epoch = int(meta.get("steps_per_epoch", steps_per_epoch))

    # frozen encoder: one encoding pass per cluster
    enc_map = {}
    for sid in index.scene_ids:
        for c in index.negatives[sid]:
            enc_map[_cluster_key(c)] = net.encode_images(c.images)
    black_row = net.encode_images(np.zeros((1, VIRTUAL_HEIGHT, VIRTUAL_WIDTH, 3), dtype=np.uint8))

    val_batch = None
    if val_scenes:
        val_trips = list(mine_triplets(val_scenes, seed=seed, limit=cfg.n_val_triplets))
        val_clusters = _triplet_clusters(val_trips)
        val_rows = [net.encode_images(c.images) for c in val_clusters]
        plain = replace(cfg, augment=False)
        geom, enc, mask = _batch_inputs(val_clusters, val_rows, plain, rng, black_row)
        val_batch = (geom, enc, mask, len(val_trips))

    bsz = cfg.batch_size
    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        tot = 0.0
        for _ in range(steps_per_epoch):
            trips = [_draw_triplet(index, rng, cfg.p_same_semantic) for _ in range(bsz)]
            clusters = _triplet_clusters(trips)
            rows = [enc_map[_cluster_key(c)] for c in clusters]
            geom, enc, mask = _batch_inputs(clusters, rows, cfg, rng, black_row)
            tape = nn.Tape()
            with tape:
                y = net.forward_encoded(geom, enc, mask)
                loss = triplet_loss(y[0:bsz], y[bsz : 2 * bsz], y[2 * bsz :], cfg.margin)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            tot += float(loss.data)
        record = {"epoch": epoch, "loss": tot / steps_per_epoch, "lr": opt.lr}
        if val_batch is not None:
            net.eval()
            geom, enc, mask, nv = val_batch
            y = net.forward_encoded(geom, enc, mask).data
            record["val_triplet_accuracy"] = triplet_accuracy(y[0:nv], y[nv : 2 * nv], y[2 * nv :])
            net.train()
        metrics.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            _save_training_state(checkpoint_path, net, opt, epoch, rng, metrics, steps_per_epoch)
    net.eval()
    return net, metrics


def _save_training_state(path, net, opt, epoch, rng, metrics, steps_per_epoch):
    state = {f"net.{k}": v for k, v in net.state_dict().items()}
    state.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
    meta = {
        "epoch": epoch,
        "rng_state": json.dumps(rng.bit_generator.state),
        "metrics": metrics,
        "steps_per_epoch": steps_per_epoch,
        "config": _config_meta(net.cfg),
    }
    nn.save_checkpoint(path, state, meta)


def _config_meta(cfg: DescriptorConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["vis_channels"] = list(d["vis_channels"])
    return d


def config_from_meta(meta: dict) -> DescriptorConfig:
    d = dict(meta["config"])
    d["vis_channels"] = tuple(d["vis_channels"])
    return DescriptorConfig(**d)


def save_descriptor(path, net: DescriptorNet):
    nn.save_checkpoint(path, net.state_dict(), {"config": _config_meta(net.cfg), "kind": "descriptor"})


def load_descriptor(path) -> DescriptorNet:
    state, meta = nn.load_checkpoint(path)
    if any(k.startswith("net.") for k in state):  # training checkpoint: strip the prefix
        state = {k[len("net.") :]: v for k, v in state.items() if k.startswith("net.")}
    cfg = config_from_meta(meta)
    net = DescriptorNet(cfg, np.random.default_rng(0))
    net.load_state_dict(state)
    net.eval()
    return net


def visual_weights_from_cluster_checkpoint(path) -> dict:
    """The frozen visual-encoder weights stored in a clustering checkpoint."""
    from .clustering import load_clusternet

    return load_clusternet(path).visual.state_dict()


# -- sklearn-style wrapper ----------------------------------------------------------


class ClusterDescriber(BaseEstimator):
    """Estimator facade: fit on {scene: [FrameFeatures]}, transform clusters."""

    def __init__(self, config: DescriptorConfig | None = None, seed: int = 0):
        self.config = config
        self.seed = seed

    def fit(self, X, y=None, visual_weights=None, val=None):
        cfg = self.config if self.config is not None else DescriptorConfig()
        self.net_, self.metrics_ = train_descriptor(
            X, cfg, seed=self.seed, visual_weights=visual_weights, val_scenes=val
        )
        return self

    def transform(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("ClusterDescriber must be fitted first")
        if isinstance(X, LineCluster):
            return describe_cluster(self.net_, X)
        return np.stack([describe_cluster(self.net_, c) for c in X])
