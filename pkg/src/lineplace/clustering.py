"""Frame-wise line clustering with a residual mixed-attention network.

Each detected line is embedded from its geometric vector and a small
convolutional encoding of its virtual-view image, run through a stack of
self-attention encoder layers over all lines of the frame, and classified
into one of 16 bins: bin 0 is the absolute background label, bins 1..15 are
relative instance labels.  Training pairs a binary background loss with a
pairwise symmetric-KL contrastive loss over non-background lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import nn
from .extraction import FrameFeatures, frame_rng, select_lines
from .geometry import GEOM_DIM
from .nn import functional as F
from .retrieval import nmi
from .views import VIRTUAL_HEIGHT, VIRTUAL_WIDTH

BACKGROUND_BIN = 0
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ClusterNetConfig:
    d_geom: int = 472
    d_visual: int = 128
    d_h: int = 2048  # hidden width of the visual encoder head
    d_model: int = 600
    n_layers: int = 7
    h_dot: int = 4
    h_add: int = 4
    d_k: int = 150
    d_ff: int = 2400
    d_label: int = 16
    vis_channels: tuple = (8, 8, 16, 16)
    n_l_max_train: int = 160
    n_l_max_eval: int = 220
    sigma: float = 2.0
    lr: float = 5e-5
    lr_decay: float = 0.96
    epochs: int = 40
    p_blackout: float = 0.2
    rot_pitch_roll_deg: float = 10.0
    augment: bool = True
    attention_enabled: bool = True
    detach_pair_reference: bool = True

    def __post_init__(self):
        if self.d_geom + self.d_visual != self.d_model:
            raise ValueError("d_geom + d_visual must equal d_model")
        if self.d_label < 2:
            raise ValueError("d_label must be >= 2")


def desk_preset(**overrides) -> ClusterNetConfig:
    """Compact configuration sized for CPU training on room-scale data."""
    base = dict(
        d_geom=104,
        d_visual=24,
        d_h=256,
        d_model=128,
        n_layers=3,
        h_dot=2,
        h_add=2,
        d_k=32,
        d_ff=256,
        vis_channels=(4, 4, 8, 8),
        epochs=40,
        lr=2e-4,
    )
    base.update(overrides)
    return ClusterNetConfig(**base)


# -- network -------------------------------------------------------------------


class VisualEncoder(nn.Module):
    """Four 3x3 convolutions with two 4x4 max-pool stages, then two linears."""

    def __init__(self, cfg: ClusterNetConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2, c3, c4 = cfg.vis_channels
        self.conv1 = nn.Conv2d(3, c1, rng)
        self.conv2 = nn.Conv2d(c1, c2, rng)
        self.conv3 = nn.Conv2d(c2, c3, rng)
        self.conv4 = nn.Conv2d(c3, c4, rng)
        flat = (VIRTUAL_HEIGHT // 16) * (VIRTUAL_WIDTH // 16) * c4
        self.fc_hidden = nn.Linear(flat, cfg.d_h, rng)
        self.fc_out = nn.Linear(cfg.d_h, cfg.d_visual, rng)
        self._flat = flat

    def __call__(self, images):
        x = nn.as_tensor(images)
        x = F.leaky_relu(self.conv1(x))
        x = F.leaky_relu(self.conv2(x))
        x = F.maxpool2d(x, 4)
        x = F.leaky_relu(self.conv3(x))
        x = F.leaky_relu(self.conv4(x))
        x = F.maxpool2d(x, 4)
        x = x.reshape((x.data.shape[0], self._flat))
        x = F.leaky_relu(self.fc_hidden(x))
        return self.fc_out(x)


def images_to_float(images: np.ndarray) -> np.ndarray:
    """uint8 [N, 64, 96, 3] to float32 in [0, 1]; float input passes through."""
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32)


class ClusterNet(nn.Module):
    """Line embedding, encoder-layer stack, and the 16-way label head."""

    def __init__(self, cfg: ClusterNetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.visual = VisualEncoder(cfg, rng)
        self.geom_fc = nn.Linear(GEOM_DIM, cfg.d_geom, rng)
        self.layers = nn.ModuleList(
            [
                nn.EncoderLayer(
                    cfg.d_model,
                    cfg.h_dot,
                    cfg.h_add,
                    cfg.d_k,
                    cfg.d_ff,
                    rng,
                    use_attention=cfg.attention_enabled,
                    use_bn=True,
                )
                for _ in range(cfg.n_layers)
            ]
        )
        self.head = nn.Linear(cfg.d_model, cfg.d_label, rng)

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Visual encodings without gradient tracking (for caching)."""
        return self.visual(images_to_float(images)).data

    def forward_encoded(self, geom, visual_enc, mask=None):
        """Label distributions from geometry plus precomputed visual encodings."""
        g = F.leaky_relu(self.geom_fc(nn.as_tensor(geom)))
        x = nn.concat([g, nn.as_tensor(visual_enc)], axis=1)
        if mask is not None:
            x = x * mask.reshape(-1, 1).astype(x.data.dtype)
        for layer in self.layers:
            x = layer(x, mask=mask)
        return F.softmax(self.head(x), axis=-1)

    def __call__(self, geom, images, mask=None):
        return self.forward_encoded(geom, self.visual(images_to_float(images)), mask)


def embed_lines(net: ClusterNet, geom, images, mask=None):
    """The d_model line embeddings (geometry branch + visual branch, concat)."""
    g = F.leaky_relu(net.geom_fc(nn.as_tensor(geom)))
    v = net.visual(images_to_float(images))
    x = nn.concat([g, v], axis=1)
    if mask is not None:
        x = x * mask.reshape(-1, 1).astype(x.data.dtype)
    return x


def predict_labels(distributions) -> np.ndarray:
    """argmax bin per line; bin 0 is background; ties go to the lowest bin."""
    probs = distributions.data if isinstance(distributions, nn.Tensor) else np.asarray(distributions)
    return np.argmax(probs, axis=-1)


# -- losses ----------------------------------------------------------------------


def loss_bg(distributions, bg_flags):
    """Binary cross-entropy between the background bin and the instance mass."""
    probs = nn.as_tensor(distributions)
    flags = np.asarray(bg_flags, dtype=probs.data.dtype).reshape(-1)
    if flags.shape[0] != probs.data.shape[0]:
        raise ValueError("one background flag per line required")
    t_bg = nn.clip(probs[:, BACKGROUND_BIN], PROB_CLAMP, 1.0)
    t_inst = nn.clip(nn.tensor_sum(probs[:, 1:], axis=1), PROB_CLAMP, 1.0)
    picked = nn.log(t_bg) * flags + nn.log(t_inst) * (1.0 - flags)
    return -nn.tensor_sum(picked)


def _instance_distributions(distributions, idx):
    """Instance-bin rows renormalized to proper distributions, clamped."""
    probs = nn.as_tensor(distributions)
    q = probs[idx][:, 1:]
    total = nn.clip(nn.tensor_sum(q, axis=1, keepdims=True), PROB_CLAMP, 1.0)
    return nn.clip(q / total, PROB_CLAMP, 1.0)


def loss_pair(distributions, gt_labels, sigma: float = 2.0, detach_reference: bool = True):
    """Pairwise symmetric-KL contrast over all non-background line pairs.

    Same-instance pairs pay the symmetric KL of their instance-bin
    distributions; different-instance pairs pay a hinge that activates when
    the KL falls below the margin sigma.  The reference side of each KL can
    be treated as a constant (no gradient), which stabilizes training.
    """
    labels = np.asarray(gt_labels).reshape(-1)
    idx = np.flatnonzero(labels != BACKGROUND_BIN)
    if idx.size < 2:
        return nn.as_tensor(np.zeros((), dtype=np.float64))
    q = _instance_distributions(distributions, idx)
    logq = nn.log(q)
    ref = nn.stop_gradient(q) if detach_reference else q
    ref_log = nn.stop_gradient(logq) if detach_reference else logq
    # D[i, j] = KL(q_i* || q_j) = sum_k q*_ik (log q*_ik - log q_jk)
    ent = nn.tensor_sum(ref * ref_log, axis=1, keepdims=True)
    cross = nn.matmul(ref, logq.transpose())
    kl = ent - cross
    lab = labels[idx]
    off_diag = ~np.eye(idx.size, dtype=bool)
    same = ((lab[:, None] == lab[None, :]) & off_diag).astype(kl.data.dtype)
    diff = (lab[:, None] != lab[None, :]).astype(kl.data.dtype)
    # ordered-pair sums equal the unordered-pair formulation: each unordered
    # pair contributes both KL directions
    pos = nn.tensor_sum(kl * same)
    neg = nn.tensor_sum(F.relu(sigma - kl) * diff)
    return pos + neg


def loss_clustering(distributions, gt_labels, sigma: float = 2.0, detach_reference: bool = True):
    """Background loss plus pairwise loss; gt label 0 means background."""
    labels = np.asarray(gt_labels).reshape(-1)
    bg = loss_bg(distributions, labels == BACKGROUND_BIN)
    pair = loss_pair(distributions, labels, sigma, detach_reference)
    return bg + pair


# -- training data handling --------------------------------------------------------


def rotation_matrix(rng: np.random.Generator, pitch_roll_deg: float) -> np.ndarray:
    """Random rigid rotation: uniform yaw, bounded pitch and roll."""
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    lim = np.deg2rad(pitch_roll_deg)
    pitch = rng.uniform(-lim, lim)
    roll = rng.uniform(-lim, lim)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def rotate_geom(geom: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Apply a rigid rotation to the point and normal blocks of geom vectors."""
    out = np.array(geom, dtype=np.float64)
    for lo in (0, 3, 6, 9):  # p_s, p_e, n_l, n_r
        out[:, lo : lo + 3] = out[:, lo : lo + 3] @ rot.T
    return out.astype(geom.dtype)


def normalize_labels(raw_labels: np.ndarray, n_bins: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Map raw instance ids to bins 1..n_bins-1 (0 stays background).

    Instances beyond the bin budget fold to background.  When an rng is
    given the bin assignment is a random permutation, so the network cannot
    latch onto incidental id ordering (instance labels are relative).
    """
    raw_labels = np.asarray(raw_labels)
    out = np.zeros_like(raw_labels)
    ids = np.unique(raw_labels[raw_labels != 0])
    slots = np.arange(1, n_bins)
    if rng is not None:
        slots = rng.permutation(slots)
    for i, raw in enumerate(ids[: n_bins - 1]):
        out[raw_labels == raw] = slots[i]
    return out


# -- training ------------------------------------------------------------------------


def _usable(frames) -> list:
    """Frames a per-frame training step can consume (batch norm needs 2 rows)."""
    return [f for f in frames if f.n_lines >= 2]


def _frame_step_inputs(feats: FrameFeatures, cfg: ClusterNetConfig, rng: np.random.Generator):
    """Sample the line cap, rotate geometry, pick the blackout coin."""
    keep = None
    if feats.n_lines > cfg.n_l_max_train:
        keep = np.sort(rng.choice(feats.n_lines, size=cfg.n_l_max_train, replace=False))
        feats = select_lines(feats, keep)
    if cfg.augment:
        rot = rotation_matrix(rng, cfg.rot_pitch_roll_deg)
        geom = rotate_geom(feats.geom, rot)
        blackout = bool(rng.uniform() < cfg.p_blackout)
    else:
        geom = feats.geom
        blackout = False
    labels = normalize_labels(feats.labels, cfg.d_label, rng)
    return feats, keep, geom, labels, blackout


def train_clustering(
    train_frames: list,
    cfg: ClusterNetConfig = ClusterNetConfig(),
    seed: int = 0,
    val_frames: list = (),
    checkpoint_path=None,
    log_path=None,
    visual_weights: dict | None = None,
    resume: bool = False,
):
    """Optimize the clustering objective; the visual encoder stays frozen.

    Visual encodings are precomputed once per frame (the frozen encoder makes
    them constants), so each step only runs the attention stack.  Returns
    (net, metrics), one metrics record per epoch.  With checkpoint_path the
    state lands on disk every epoch and resume=True continues a previous run
    bit-exactly (the generator state rides along in the checkpoint).
    """
    train_frames = _usable(train_frames)
    if not train_frames:
        raise ValueError("no usable training frames (need >= 2 lines each)")

    ss = np.random.SeedSequence(seed)
    init_ss, train_ss = ss.spawn(2)
    net = ClusterNet(cfg, np.random.default_rng(init_ss))
    if visual_weights is not None:
        net.visual.load_state_dict(visual_weights)
    rng = np.random.default_rng(train_ss)

    frozen_prefix = "visual."
    params = {k: v for k, v in net.named_parameters().items() if not k.startswith(frozen_prefix)}
    opt = nn.Adam(params, cfg.lr)

    start_epoch = 0
    metrics: list = []
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state, meta = nn.load_checkpoint(checkpoint_path)
        net.load_state_dict({k[len("net.") :]: v for k, v in state.items() if k.startswith("net.")})
        opt.load_state_dict({k[len("opt.") :]: v for k, v in state.items() if k.startswith("opt.")})
        rng.bit_generator.state = json.loads(meta["rng_state"])
        start_epoch = int(meta["epoch"]) + 1
        metrics = list(meta.get("metrics", []))

    # frozen encoder: one encoding pass per frame, plus one for blacked-out rows
    enc_cache = [net.encode_images(f.images) for f in train_frames]
    black_row = net.encode_images(np.zeros((1, VIRTUAL_HEIGHT, VIRTUAL_WIDTH, 3), dtype=np.uint8))
    val_cache = [net.encode_images(f.images) for f in val_frames]

    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        order = rng.permutation(len(train_frames))
        tot = tot_bg = tot_pair = 0.0
        for fi in order:
            feats, keep, geom, labels, blackout = _frame_step_inputs(train_frames[fi], cfg, rng)
            enc = enc_cache[fi] if keep is None else enc_cache[fi][keep]
            if blackout:
                enc = np.repeat(black_row, feats.n_lines, axis=0)
            tape = nn.Tape()
            with tape:
                probs = net.forward_encoded(geom, enc)
                lb = loss_bg(probs, labels == BACKGROUND_BIN)
                lp = loss_pair(probs, labels, cfg.sigma, cfg.detach_pair_reference)
                loss = lb + lp
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            tot += float(loss.data)
            tot_bg += float(lb.data)
            tot_pair += float(lp.data)
        record = {
            "epoch": epoch,
            "loss": tot / len(train_frames),
            "loss_bg": tot_bg / len(train_frames),
            "loss_pair": tot_pair / len(train_frames),
            "lr": opt.lr,
        }
        if len(val_frames):
            net.eval()
            record["val_nmi"] = mean_frame_nmi(net, val_frames, enc_list=val_cache)
            net.train()
        metrics.append(record)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            _save_training_state(checkpoint_path, net, opt, epoch, rng, metrics)
    net.eval()
    return net, metrics


def _save_training_state(path, net, opt, epoch, rng, metrics):
    state = {f"net.{k}": v for k, v in net.state_dict().items()}
    state.update({f"opt.{k}": v for k, v in opt.state_dict().items()})
    meta = {
        "epoch": epoch,
        "rng_state": json.dumps(rng.bit_generator.state),
        "metrics": metrics,
        "config": _config_meta(net.cfg),
    }
    nn.save_checkpoint(path, state, meta)


def _config_meta(cfg: ClusterNetConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["vis_channels"] = list(d["vis_channels"])
    return d


def config_from_meta(meta: dict) -> ClusterNetConfig:
    d = dict(meta["config"])
    d["vis_channels"] = tuple(d["vis_channels"])
    return ClusterNetConfig(**d)


def save_clusternet(path, net: ClusterNet):
    nn.save_checkpoint(path, net.state_dict(), {"config": _config_meta(net.cfg), "kind": "cluster"})


def load_clusternet(path) -> ClusterNet:
    state, meta = nn.load_checkpoint(path)
    if "net.geom_fc.w" in state:  # training checkpoint: strip the prefix
        state = {k[len("net.") :]: v for k, v in state.items() if k.startswith("net.")}
    cfg = config_from_meta(meta)
    net = ClusterNet(cfg, np.random.default_rng(0))
    net.load_state_dict(state)
    net.eval()
    return net


# -- inference and evaluation ---------------------------------------------------------


def predict_frame(
    net: ClusterNet,
    feats: FrameFeatures,
    seed: int = 0,
    visual_enc: np.ndarray | None = None,
):
    """Predicted label per line in eval mode; caps lines at n_l_max_eval.

    Returns (labels, kept_indices): when the cap bites, a uniform random
    subset is evaluated and kept_indices names the surviving rows.
    """
    cfg = net.cfg
    idx = np.arange(feats.n_lines)
    if feats.n_lines > cfg.n_l_max_eval:
        rng = frame_rng(seed, feats.frame_id)
        idx = np.sort(rng.choice(feats.n_lines, size=cfg.n_l_max_eval, replace=False))
        feats = select_lines(feats, idx)
        visual_enc = None if visual_enc is None else visual_enc[idx]
    if feats.n_lines == 0:
        return np.zeros(0, dtype=np.int64), idx
    if visual_enc is None:
        visual_enc = net.encode_images(feats.images)
    probs = net.forward_encoded(feats.geom, visual_enc)
    return predict_labels(probs), idx


def mean_frame_nmi(net: ClusterNet, frames: list, enc_list=None) -> float:
    """Average NMI of predicted vs ground-truth line labels over frames.

    Frames whose ground truth has a single cluster are skipped: NMI is
    degenerate there and would only dilute the average.
    """
    scores = []
    for i, feats in enumerate(frames):
        if feats.n_lines < 2 or np.unique(feats.labels).size < 2:
            continue
        enc = None if enc_list is None else enc_list[i]
        pred, idx = predict_frame(net, feats, visual_enc=enc)
        scores.append(nmi(pred, feats.labels[idx]))
    return float(np.mean(scores)) if scores else 0.0


# -- optional visual-only pretraining ----------------------------------------------------


def pretrain_visual(
    train_frames: list,
    cfg: ClusterNetConfig = ClusterNetConfig(),
    epochs: int = 5,
    seed: int = 0,
) -> dict:
    """Train the visual encoder on the clustering objective with geometry zeroed.

    The returned state dict plugs into train_clustering(visual_weights=...),
    which freezes it.  This substitutes for warm-starting from a pretrained
    backbone: the encoder learns instance-discriminative appearance cues from
    the virtual views alone.
    """
    train_frames = _usable(train_frames)
    if not train_frames:
        raise ValueError("no usable training frames")
    pre_cfg = replace(cfg, epochs=epochs)
    ss = np.random.SeedSequence((seed, 0x7E))
    init_ss, train_ss = ss.spawn(2)
    net = ClusterNet(pre_cfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(train_ss)
    opt = nn.Adam(dict(net.named_parameters()), pre_cfg.lr)
    net.train()
    for epoch in range(epochs):
        opt.lr = pre_cfg.lr * pre_cfg.lr_decay**epoch
        for fi in rng.permutation(len(train_frames)):
            feats, _, _, labels, _ = _frame_step_inputs(train_frames[fi], pre_cfg, rng)
            geom = np.zeros_like(feats.geom)
            tape = nn.Tape()
            with tape:
                probs = net(geom, feats.images)
                loss = loss_clustering(probs, labels, pre_cfg.sigma, pre_cfg.detach_pair_reference)
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
    net.eval()
    return net.visual.state_dict()


# -- sklearn-style wrapper ----------------------------------------------------------------


class LineClusterer(BaseEstimator):
    """Estimator facade: fit on [FrameFeatures], predict labels per frame."""

    def __init__(self, config: ClusterNetConfig | None = None, seed: int = 0):
        self.config = config
        self.seed = seed

    def fit(self, X, y=None, val=()):
        cfg = self.config if self.config is not None else ClusterNetConfig()
        self.net_, self.metrics_ = train_clustering(list(X), cfg, seed=self.seed, val_frames=list(val))
        return self

    def predict(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("LineClusterer must be fitted first")
        if isinstance(X, FrameFeatures):
            return predict_frame(self.net_, X)[0]
        return [predict_frame(self.net_, f)[0] for f in X]

    def score(self, X, y=None):
        if not hasattr(self, "net_"):
            raise NotFittedError("LineClusterer must be fitted first")
        return mean_frame_nmi(self.net_, list(X))
