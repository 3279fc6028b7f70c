"""Two-branch self-supervised pretraining over patch graphs.

The online branch sees a node-masked graph and learns by (a) rebuilding the
masked patch features through a decoder and (b) pulling its pooled
projection toward the target branch's projection of an edge-dropped,
image-augmented view. The target branch is a momentum copy: no gradient
ever reaches it, it trails the online weights through an EMA, and its
projections feed a FIFO queue that supplies contrastive negatives.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .graphs import (
    AugmentationSpec,
    PatchGraph,
    StemParams,
    apply_node_mask,
    batch_knn,
    choose_mask_indices,
    drop_edges,
    embed_nodes,
    image_augment,
    merge_graphs,
    patchify,
)
from .nets import (
    DecoderParams,
    EncoderParams,
    GcnLayerParams,
    ProjectionParams,
    decode,
    encode,
    init_decoder,
    init_encoder,
    init_projection,
    init_stem,
    project,
    readout,
)
from .optim import SGD, AdamW, lr_at, scaled_lr
from .tensor import Tensor, concat, cosine_similarity, softmax, stop_gradient

__all__ = [
    "HeadParams",
    "LossWeights",
    "MmclModel",
    "ModelConfig",
    "NegativeQueue",
    "StepReport",
    "TrainConfig",
    "contrastive_loss",
    "ema_update",
    "extract_embeddings",
    "finetune_step",
    "init_head",
    "init_model",
    "invariance_kl",
    "joint_loss",
    "pretrain_step",
    "run_finetune",
    "run_pretrain",
    "sce_loss",
]


@dataclass
class LossWeights:
    """Loss shape and mixing knobs plus the EMA momentum."""

    gamma: float = 2.0  # cosine-error sharpening exponent
    tau: float = 0.01  # temperature; pooled-graph similarity gaps are tiny
    alpha: float = 1.0  # contrastive term weight
    eta: float = 0.5  # invariance (KL) term weight
    mu: float = 0.5  # reconstruction share of the joint loss
    momentum: float = 0.999  # target-branch EMA coefficient

    def __post_init__(self):
        if self.gamma < 1.0:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0.0 or self.eta < 0.0:
            raise ConfigError("alpha and eta must be >= 0")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {self.momentum}")


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm target projections."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ConfigError("queue capacity and dim must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.fill = 0
        self._cursor = 0
        self._buf = np.zeros((self.capacity, self.dim))

    @property
    def full(self) -> bool:
        return self.fill >= self.capacity

    def push(self, vectors: np.ndarray) -> None:
        """Insert rows oldest-first; once full, each insert evicts the
        oldest stored vector."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim == 1:
            vectors = vectors[None, :]
        if vectors.shape[1] != self.dim:
            raise ShapeError(f"queue holds dim {self.dim}, got {vectors.shape[1]}")
        if vectors.shape[0] > self.capacity:
            raise ShapeError(
                f"cannot push {vectors.shape[0]} vectors into capacity {self.capacity}"
            )
        norms = np.linalg.norm(vectors, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise DomainError("queue entries must be unit-norm")
        b = vectors.shape[0]
        idx = (self._cursor + np.arange(b)) % self.capacity
        self._buf[idx] = vectors
        self._cursor = int((self._cursor + b) % self.capacity)
        self.fill = min(self.fill + b, self.capacity)

    def vectors(self) -> np.ndarray:
        return self._buf[: self.fill].copy()


# ----------------------------------------------------------------------
# losses


def sce_loss(x_orig, x_recon: Tensor, v_idx: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Sharpened cosine reconstruction error over the masked rows only:
    mean of (1 - cos(x_i, x_i'))^gamma for i in v_idx."""
    if gamma < 1.0:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    v = np.asarray(v_idx, dtype=np.int64)
    if v.size == 0:
        raise ShapeError("sce_loss needs at least one masked node")
    orig = x_orig if isinstance(x_orig, Tensor) else Tensor(x_orig)
    if orig.shape != x_recon.shape:
        raise ShapeError(f"shape mismatch: original {orig.shape} vs decoded {x_recon.shape}")
    cos = cosine_similarity(x_recon[v], orig[v])
    # rounding can push cos a hair past 1; clamp so fractional gamma stays
    # in-domain (the clamp's zero slope matches the exact-zero-error case)
    return (1.0 - cos).relu().pow(float(gamma)).mean()


def invariance_kl(p_online: Tensor, p_target: Tensor) -> Tensor:
    """KL(p_target || p_online) over the last axis, averaged across rows.

    Both inputs must be probability vectors (entries >= 0, rows summing
    to 1 within 1e-6). The target side sits behind a stop_gradient, so
    only the online distribution receives a gradient. Zero target entries
    contribute exactly zero; a 1e-300 additive guard keeps log finite.
    """
    if p_online.shape != p_target.shape:
        raise ShapeError(f"shape mismatch: {p_online.shape} vs {p_target.shape}")
    for name, p in (("p_online", p_online), ("p_target", p_target)):
        if np.any(p.data < -1e-12):
            raise DomainError(f"{name} has negative entries")
        sums = p.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise DomainError(f"{name} rows are not normalized (sum off by "
                              f"{np.abs(sums - 1.0).max():.2e})")
    tiny = 1e-300
    pt = stop_gradient(p_target)
    per_row = (pt * ((pt + tiny).log() - (p_online + tiny).log())).sum(axis=-1)
    return per_row.mean()


def contrastive_loss(
    z_online: Tensor,
    z_target: Tensor,
    queue: NegativeQueue,
    weights: LossWeights,
) -> Tensor:
    """Queue-negative InfoNCE plus the weighted invariance KL.

    Candidates for each row are its positive target projection followed
    by every stored negative; both distributions are softmaxes of the
    scaled similarities to that same candidate set.
    """
    if z_online.ndim != 2 or z_online.shape != z_target.shape:
        raise ShapeError(
            f"projection shapes must match as (B, M), got {z_online.shape} vs {z_target.shape}"
        )
    for name, z in (("z_online", z_online), ("z_target", z_target)):
        norms = np.linalg.norm(z.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise DomainError(f"{name} rows must be unit-norm")
    if queue.fill < 1:
        raise TrainingError(
            "negative queue is empty; run warm-fill steps before the contrastive loss"
        )
    zt = stop_gradient(z_target)
    negs = Tensor(queue.vectors())
    inv_tau = 1.0 / weights.tau

    pos = (z_online * zt).sum(axis=1).reshape(-1, 1)
    logits = concat([pos, z_online @ negs.T], axis=1) * inv_tau
    p_online = softmax(logits, axis=-1)
    loss = weights.alpha * -(p_online[:, 0:1].log().mean())
    if weights.eta != 0.0:
        t_pos = (zt * zt).sum(axis=1).reshape(-1, 1)
        t_logits = concat([t_pos, zt @ negs.T], axis=1) * inv_tau
        p_target = softmax(t_logits, axis=-1)
        loss = loss + weights.eta * invariance_kl(p_online, p_target)
    return loss


def joint_loss(l_rc: Tensor, l_cl: Tensor, mu: float) -> Tensor:
    """mu-weighted sum of the reconstruction and contrastive losses."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"mu must lie in [0, 1], got {mu}")
    return mu * l_rc + (1.0 - mu) * l_cl


# ----------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    image_size: int = 48
    channels: int = 3
    patch_size: int = 8
    knn_k: int = 9
    feature_dim: int = 64
    encoder_depth: int = 3
    decoder_depth: int = 2
    residual: bool = True
    remask: bool = True
    zero_mask: bool = False  # replace masked rows with zeros, not a token
    recompute_knn: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        n = (self.image_size // self.patch_size) ** 2
        if self.knn_k >= n:
            raise ConfigError(f"knn_k {self.knn_k} needs more than k+1={self.knn_k + 1} "
                              f"patches, image yields {n}")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("encoder and decoder depth must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def grid_cells(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def nodes_per_image(self) -> int:
        return self.grid_cells


@dataclass
class HeadParams:
    """Small MLP used for supervised fine-tuning on pooled features."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class MmclModel:
    config: ModelConfig
    stem: StemParams
    mask_token: Tensor | None
    encoder: EncoderParams
    decoder: DecoderParams
    projection: ProjectionParams
    target_encoder: EncoderParams
    target_projection: ProjectionParams

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "stem.weight": self.stem.weight,
            "stem.bias": self.stem.bias,
            "stem.pos": self.stem.pos,
        }
        if self.mask_token is not None:
            out["mask_token"] = self.mask_token
        for prefix, enc in (("encoder", self.encoder), ("target_encoder", self.target_encoder)):
            for i, layer in enumerate(enc.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                if layer.bias is not None:
                    out[f"{prefix}.{i}.bias"] = layer.bias
        for i, layer in enumerate(self.decoder.layers):
            out[f"decoder.{i}.weight"] = layer.weight
            if layer.bias is not None:
                out[f"decoder.{i}.bias"] = layer.bias
        if self.decoder.mask_token is not None:
            out["decoder.mask_token"] = self.decoder.mask_token
        for prefix, proj in (
            ("projection", self.projection),
            ("target_projection", self.target_projection),
        ):
            out[f"{prefix}.w1"] = proj.w1
            out[f"{prefix}.b1"] = proj.b1
            out[f"{prefix}.w2"] = proj.w2
            out[f"{prefix}.b2"] = proj.b2
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def ema_pairs(self) -> list[tuple[Tensor, Tensor]]:
        """(online, target) tensors for every parameter that exists twice."""
        pairs: list[tuple[Tensor, Tensor]] = []
        for on, tg in zip(self.encoder.layers, self.target_encoder.layers):
            pairs.append((on.weight, tg.weight))
            if on.bias is not None and tg.bias is not None:
                pairs.append((on.bias, tg.bias))
        p, t = self.projection, self.target_projection
        pairs.extend([(p.w1, t.w1), (p.b1, t.b1), (p.w2, t.w2), (p.b2, t.b2)])
        return pairs


def _frozen_encoder_copy(enc: EncoderParams) -> EncoderParams:
    layers = [
        GcnLayerParams(
            weight=Tensor(layer.weight.data.copy()),
            bias=Tensor(layer.bias.data.copy()) if layer.bias is not None else None,
            activation=layer.activation,
        )
        for layer in enc.layers
    ]
    return EncoderParams(layers=layers, residual=enc.residual, recompute_knn=enc.recompute_knn)


def _frozen_projection_copy(proj: ProjectionParams) -> ProjectionParams:
    return ProjectionParams(
        w1=Tensor(proj.w1.data.copy()),
        b1=Tensor(proj.b1.data.copy()),
        w2=Tensor(proj.w2.data.copy()),
        b2=Tensor(proj.b2.data.copy()),
    )


def init_model(config: ModelConfig, seed: int = 0) -> MmclModel:
    """Build online parameters from the seed; the target branch starts as
    an exact frozen copy of the online one."""
    rng = np.random.default_rng(seed)
    m = config.feature_dim
    stem = init_stem(config.patch_dim, m, config.grid_cells, rng)
    mask_token = (
        None if config.zero_mask else Tensor(0.02 * rng.normal(size=m), requires_grad=True)
    )
    encoder = init_encoder(
        m, config.encoder_depth, rng, residual=config.residual, recompute_knn=config.recompute_knn
    )
    decoder = init_decoder(
        m,
        config.patch_dim,
        config.decoder_depth,
        rng,
        remask=config.remask,
        with_token=not config.zero_mask,
    )
    projection = init_projection(m, rng)
    return MmclModel(
        config=config,
        stem=stem,
        mask_token=mask_token,
        encoder=encoder,
        decoder=decoder,
        projection=projection,
        target_encoder=_frozen_encoder_copy(encoder),
        target_projection=_frozen_projection_copy(projection),
    )


def init_head(feature_dim: int, rng: np.random.Generator) -> HeadParams:
    scale = np.sqrt(2.0 / (feature_dim + feature_dim))
    return HeadParams(
        w1=Tensor(rng.normal(0, scale, size=(feature_dim, feature_dim)), requires_grad=True),
        b1=Tensor(np.zeros(feature_dim), requires_grad=True),
        w2=Tensor(rng.normal(0, scale, size=(feature_dim, 1)), requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
    )


def head_forward(h: Tensor, head: HeadParams) -> Tensor:
    return (h @ head.w1 + head.b1).relu() @ head.w2 + head.b2


def ema_update(model: MmclModel, momentum: float) -> None:
    """Drift every target parameter toward its online twin:
    target = m * target + (1 - m) * online."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"momentum must lie in [0, 1], got {momentum}")
    for online, target in model.ema_pairs():
        if online.shape != target.shape:
            raise ShapeError(f"ema pair shape mismatch: {online.shape} vs {target.shape}")
        target.data = momentum * target.data + (1.0 - momentum) * online.data


def assert_target_isolated(model: MmclModel) -> None:
    """Structural invariant: target parameters can never receive gradient."""
    for name, p in model.named_parameters().items():
        if name.startswith("target_"):
            if p.requires_grad or p.grad is not None:
                raise TrainingError(f"target parameter {name!r} is wired for gradients")


# ----------------------------------------------------------------------
# steps


@dataclass
class StepReport:
    l_rc: float
    l_cl: float
    l_mc: float
    lr: float


def _build_batch(images: Sequence[np.ndarray], patch_size: int) -> PatchGraph:
    return merge_graphs([patchify(img, patch_size) for img in images])


def pretrain_step(
    images: Sequence[np.ndarray],
    model: MmclModel,
    queue: NegativeQueue,
    weights: LossWeights,
    optimizer,
    aug: AugmentationSpec,
    rng: np.random.Generator,
    lr: float,
    both_views: bool = False,
) -> StepReport:
    """One optimizer step over a batch of images.

    Online view: original image, kNN edges, masked node features.
    Target view: augmented image, kNN edges with random drops, intact
    features, processed entirely without gradients. While the queue is
    filling (and whenever mu == 1) the contrastive term is skipped and
    the joint loss collapses to the reconstruction loss. mask_ratio 0
    skips reconstruction instead, leaving a purely contrastive step.
    """
    if len(images) == 0:
        raise ShapeError("pretrain_step needs at least one image")
    if aug.mask_ratio <= 0.0 and weights.mu >= 1.0:
        raise ConfigError(
            "mask_ratio 0 with mu = 1 leaves no training signal: nothing to "
            "reconstruct and the contrastive term is switched off"
        )
    cfg = model.config

    online_imgs = [image_augment(img, aug, rng) for img in images] if both_views else list(images)
    target_imgs = [image_augment(img, aug, rng) for img in images]

    online = _build_batch(online_imgs, cfg.patch_size)
    target = _build_batch(target_imgs, cfg.patch_size)
    raw_online = np.asarray(online.x)

    x_on = embed_nodes(online, model.stem)
    # the stem is shared; the detach here is what keeps the whole target
    # branch out of the gradient graph
    x_tg = stop_gradient(embed_nodes(target, model.stem))

    online.k = target.k = cfg.knn_k
    online.edges = batch_knn(x_on.data, online.blocks, cfg.knn_k)
    target.edges = batch_knn(x_tg.data, target.blocks, cfg.knn_k)

    v_parts = []
    offset = 0
    for size in online.blocks:
        v_parts.append(choose_mask_indices(size, aug.mask_ratio, rng) + offset)
        offset += size
    v_idx = np.concatenate(v_parts)

    online_view = dataclasses.replace(
        online, x=apply_node_mask(x_on, v_idx, model.mask_token)
    )
    target_view = drop_edges(dataclasses.replace(target, x=x_tg), aug, rng)

    h_on = encode(online_view, model.encoder)
    l_rc = None
    if v_idx.size:
        x_rec = decode(h_on, online_view, v_idx, model.decoder)
        l_rc = sce_loss(raw_online, x_rec, v_idx, weights.gamma)

    nodes = cfg.nodes_per_image
    h_tg = encode(target_view, model.target_encoder)
    z_t = project(readout(h_tg, nodes), model.target_projection)

    warm_fill = not queue.full
    l_cl = None
    if weights.mu < 1.0 and not warm_fill:
        z_o = project(readout(h_on, nodes), model.projection)
        l_cl = contrastive_loss(z_o, z_t, queue, weights)

    if l_rc is not None and l_cl is not None:
        l_mc = joint_loss(l_rc, l_cl, weights.mu)
    elif l_rc is not None:
        l_mc = l_rc
    elif l_cl is not None:
        l_mc = joint_loss(Tensor(np.zeros(())), l_cl, weights.mu)
    else:
        l_mc = None  # mask 0 while the queue warms up: only enqueue

    l_rc_val = 0.0 if l_rc is None else l_rc.item()
    l_cl_val = 0.0 if l_cl is None else l_cl.item()
    l_mc_val = 0.0 if l_mc is None else l_mc.item()
    if not np.isfinite(l_mc_val):
        raise TrainingError(
            f"non-finite loss (L_rc={l_rc_val}, L_cl={l_cl_val}); check the learning rate"
        )

    if l_mc is not None:
        optimizer.zero_grad()
        l_mc.backward()
        optimizer.step(lr)
    ema_update(model, weights.momentum)
    queue.push(z_t.data)
    assert_target_isolated(model)
    return StepReport(l_rc=l_rc_val, l_cl=l_cl_val, l_mc=l_mc_val, lr=lr)


def finetune_step(
    images: Sequence[np.ndarray],
    ages: np.ndarray,
    model: MmclModel,
    head: HeadParams,
    optimizer,
    lr: float,
) -> float:
    """Supervised step: mean absolute error of the head's age prediction,
    with gradients flowing into the head, encoder, and stem."""
    if len(images) == 0:
        raise ShapeError("finetune_step needs at least one image")
    ages = np.asarray(ages, dtype=np.float64).reshape(-1, 1)
    if ages.shape[0] != len(images):
        raise ShapeError(f"{len(images)} images but {ages.shape[0]} ages")
    cfg = model.config
    graph = _build_batch(images, cfg.patch_size)
    x = embed_nodes(graph, model.stem)
    graph.k = cfg.knn_k
    graph.edges = batch_knn(x.data, graph.blocks, cfg.knn_k)
    graph = dataclasses.replace(graph, x=x)
    h = encode(graph, model.encoder)
    pred = head_forward(readout(h, cfg.nodes_per_image), head)
    diff = pred - Tensor(ages)
    loss = (diff.relu() + (-diff).relu()).mean()  # |x| built from relus
    if not np.isfinite(loss.item()):
        raise TrainingError("non-finite fine-tune loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    assert_target_isolated(model)
    return loss.item()


def extract_embeddings(
    images: Sequence[np.ndarray], model: MmclModel, batch_size: int = 64
) -> np.ndarray:
    """Frozen pooled features for every image (no masking, no dropping)."""
    cfg = model.config
    rows = []
    for start in range(0, len(images), batch_size):
        chunk = images[start : start + batch_size]
        graph = _build_batch(chunk, cfg.patch_size)
        x = stop_gradient(embed_nodes(graph, model.stem))
        graph.k = cfg.knn_k
        graph.edges = batch_knn(x.data, graph.blocks, cfg.knn_k)
        graph = dataclasses.replace(graph, x=x)
        h = encode(graph, model.encoder)
        rows.append(readout(h, cfg.nodes_per_image).data)
    return np.concatenate(rows, axis=0)


# ----------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 8e-3  # scaled by batch/256 before use
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    queue_capacity: int = 256
    seed: int = 0
    optimizer: str = "adamw"
    sgd_momentum: float = 0.9
    deterministic: bool = True
    both_views: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")


def _make_optimizer(model: MmclModel, cfg: TrainConfig, lr: float):
    params = model.trainable_parameters()
    if cfg.optimizer == "sgd":
        return SGD(params, lr=lr, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)
    return AdamW(params, lr=lr, weight_decay=cfg.weight_decay)


def _log_line(fh: IO[str] | None, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")


def run_pretrain(
    images: Sequence[np.ndarray],
    model: MmclModel,
    train_cfg: TrainConfig,
    aug: AugmentationSpec,
    weights: LossWeights,
    log_fh: IO[str] | None = None,
) -> tuple[NegativeQueue, list[StepReport]]:
    """Epoch loop around pretrain_step with the warmup-cosine schedule.

    One generator seeded from train_cfg.seed drives shuffling, masking,
    dropping, and image augmentation, so a fixed (config, seed) pair
    reproduces the run bit for bit. Step records go to log_fh as JSON
    lines; wall_ms is 0 in deterministic mode so logs stay comparable.
    """
    n = len(images)
    if n == 0:
        raise ShapeError("run_pretrain needs a non-empty image list")
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = int(train_cfg.warmup_fraction * total_steps)
    effective_lr = scaled_lr(train_cfg.base_lr, train_cfg.batch_size)
    optimizer = _make_optimizer(model, train_cfg, effective_lr)
    queue = NegativeQueue(train_cfg.queue_capacity, model.config.feature_dim)
    rng = np.random.default_rng(train_cfg.seed)

    reports: list[StepReport] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = [images[i] for i in order[start : start + train_cfg.batch_size]]
            lr = lr_at(step, total_steps, warmup_steps, effective_lr)
            t0 = time.perf_counter()
            report = pretrain_step(
                batch, model, queue, weights, optimizer, aug, rng, lr,
                both_views=train_cfg.both_views,
            )
            wall_ms = 0.0 if train_cfg.deterministic else (time.perf_counter() - t0) * 1e3
            _log_line(
                log_fh,
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": report.lr,
                    "L_rc": report.l_rc,
                    "L_cl": report.l_cl,
                    "L_MC": report.l_mc,
                    "wall_ms": wall_ms,
                },
            )
            reports.append(report)
            step += 1
    return queue, reports


def run_finetune(
    images: Sequence[np.ndarray],
    ages: np.ndarray,
    model: MmclModel,
    train_cfg: TrainConfig,
    log_fh: IO[str] | None = None,
) -> tuple[HeadParams, list[float]]:
    """Supervised fine-tuning loop; returns the trained head and losses."""
    n = len(images)
    if n == 0:
        raise ShapeError("run_finetune needs a non-empty image list")
    ages = np.asarray(ages, dtype=np.float64)
    rng = np.random.default_rng(train_cfg.seed)
    head = init_head(model.config.feature_dim, rng)
    params = dict(model.trainable_parameters())
    params.update({"head.w1": head.w1, "head.b1": head.b1,
                   "head.w2": head.w2, "head.b2": head.b2})
    effective_lr = scaled_lr(train_cfg.base_lr, train_cfg.batch_size)
    if train_cfg.optimizer == "sgd":
        optimizer = SGD(params, lr=effective_lr, momentum=train_cfg.sgd_momentum,
                        weight_decay=train_cfg.weight_decay)
    else:
        optimizer = AdamW(params, lr=effective_lr, weight_decay=train_cfg.weight_decay)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    warmup_steps = int(train_cfg.warmup_fraction * total_steps)

    losses: list[float] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            pick = order[start : start + train_cfg.batch_size]
            lr = lr_at(step, total_steps, warmup_steps, effective_lr)
            t0 = time.perf_counter()
            loss = finetune_step([images[i] for i in pick], ages[pick], model, head,
                                 optimizer, lr)
            wall_ms = 0.0 if train_cfg.deterministic else (time.perf_counter() - t0) * 1e3
            _log_line(log_fh, {"step": step, "epoch": epoch, "lr": lr,
                               "loss": loss, "wall_ms": wall_ms})
            losses.append(loss)
            step += 1
    return head, losses
