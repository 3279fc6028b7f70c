"""Binary checkpoint container.

Layout, all integers little-endian:
  magic "MMCL" | version u16 | metadata length u32 | metadata JSON utf-8
  then per parameter: name length u16 | name utf-8 | rank u8 |
  each dim u32 | payload float32.

Parameters are stored as 32-bit floats, so a round trip reproduces
values to float32 precision exactly.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .elm import (
    AgeEstimator,
    ElmLayer,
    MlIelmConfig,
    MlIelmModel,
)
from .errors import CheckpointError
from .graphs import StemParams
from .nets import (
    DecoderParams,
    EncoderParams,
    GcnLayerParams,
    ProjectionParams,
)
from .tensor import Tensor
from .training import MmclModel, ModelConfig

__all__ = [
    "load_blobs",
    "load_estimator",
    "load_model",
    "load_pipeline",
    "save_blobs",
    "save_estimator",
    "save_model",
]

MAGIC = b"MMCL"
VERSION = 1


def save_blobs(params: Mapping[str, np.ndarray], metadata: dict, path: str) -> None:
    """Write named arrays plus a JSON metadata block."""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for name, value in params.items():
            # asarray keeps rank 0; tobytes() is C-order for any layout
            arr = np.asarray(value, dtype=np.float32)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise CheckpointError(f"parameter {name!r} has rank {arr.ndim}")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {count} bytes for {what} "
                f"at offset {self.pos}, have {len(self.blob) - self.pos}"
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.blob)


def load_blobs(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (float64 arrays, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", r.take(4, "metadata length"))
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    params: dict[str, np.ndarray] = {}
    while not r.exhausted:
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1, "rank"))
        dims = [struct.unpack("<I", r.take(4, f"dim of {name}"))[0] for _ in range(rank)]
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * count, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        params[name] = arr.reshape(dims)
    return params, metadata


# ----------------------------------------------------------------------
# model-level wrappers


def save_model(
    model: MmclModel,
    path: str,
    extra: dict | None = None,
    extra_arrays: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Checkpoint every named parameter with the config echoed into
    metadata. extra_arrays ride along (a fine-tuned head, say) and are
    ignored by load_model."""
    metadata = {
        "kind": "mmcl",
        "config": vars(model.config).copy(),
    }
    if extra:
        metadata.update(extra)
    arrays = {name: p.data for name, p in model.named_parameters().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    save_blobs(arrays, metadata, path)


def _mmcl_from_params(
    params: dict[str, np.ndarray], config: ModelConfig, prefix: str = ""
) -> MmclModel:
    def grab(name: str, trainable: bool = True) -> Tensor:
        name = prefix + name
        if name not in params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        return Tensor(params[name], requires_grad=trainable)

    stem = StemParams(weight=grab("stem.weight"), bias=grab("stem.bias"),
                      pos=grab("stem.pos"))
    mask_token = None if config.zero_mask else grab("mask_token")

    def grab_encoder(branch: str, trainable: bool) -> EncoderParams:
        layers = [
            GcnLayerParams(
                weight=grab(f"{branch}.{i}.weight", trainable),
                bias=grab(f"{branch}.{i}.bias", trainable),
                activation="relu",
            )
            for i in range(config.encoder_depth)
        ]
        return EncoderParams(layers=layers, residual=config.residual,
                             recompute_knn=config.recompute_knn)

    decoder_layers = []
    for i in range(config.decoder_depth):
        last = i + 1 == config.decoder_depth
        decoder_layers.append(
            GcnLayerParams(
                weight=grab(f"decoder.{i}.weight"),
                bias=grab(f"decoder.{i}.bias"),
                activation="identity" if last else "relu",
            )
        )
    decoder = DecoderParams(
        layers=decoder_layers,
        mask_token=None if config.zero_mask else grab("decoder.mask_token"),
        remask=config.remask,
    )

    def grab_projection(branch: str, trainable: bool) -> ProjectionParams:
        return ProjectionParams(
            w1=grab(f"{branch}.w1", trainable), b1=grab(f"{branch}.b1", trainable),
            w2=grab(f"{branch}.w2", trainable), b2=grab(f"{branch}.b2", trainable),
        )

    return MmclModel(
        config=config,
        stem=stem,
        mask_token=mask_token,
        encoder=grab_encoder("encoder", True),
        decoder=decoder,
        projection=grab_projection("projection", True),
        target_encoder=grab_encoder("target_encoder", False),
        target_projection=grab_projection("target_projection", False),
    )


def _parse_model_config(metadata: dict, key: str = "config") -> ModelConfig:
    try:
        return ModelConfig(**metadata[key])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config does not parse: {exc}") from None


def load_model(path: str) -> tuple[MmclModel, dict]:
    """Rebuild an MmclModel from a checkpoint; target stays frozen."""
    params, metadata = load_blobs(path)
    _check_kind(metadata, "mmcl")
    return _mmcl_from_params(params, _parse_model_config(metadata)), metadata


def _model_blobs(prefix: str, model: MlIelmModel) -> dict[str, np.ndarray]:
    out = {
        f"{prefix}.w_in": model.w_in,
        f"{prefix}.w_hidden": model.w_hidden,
        f"{prefix}.c": model.c,
    }
    for i, layer in enumerate(model.layers):
        out[f"{prefix}.layer{i}.a"] = layer.a
        out[f"{prefix}.layer{i}.b"] = layer.b
        out[f"{prefix}.layer{i}.beta"] = layer.beta
    return out


def _model_from_blobs(prefix: str, params: dict[str, np.ndarray],
                      cfg: MlIelmConfig, in_dim: int, out_dim: int) -> MlIelmModel:
    layers = []
    for i in range(cfg.depth):
        try:
            layers.append(
                ElmLayer(
                    a=params[f"{prefix}.layer{i}.a"],
                    b=params[f"{prefix}.layer{i}.b"],
                    beta=params[f"{prefix}.layer{i}.beta"],
                )
            )
        except KeyError as exc:
            raise CheckpointError(f"estimator checkpoint missing {exc}") from None
    try:
        return MlIelmModel(
            layers=layers,
            w_in=params[f"{prefix}.w_in"],
            w_hidden=params[f"{prefix}.w_hidden"],
            c=params[f"{prefix}.c"],
            config=cfg,
            in_dim=in_dim,
            out_dim=out_dim,
        )
    except KeyError as exc:
        raise CheckpointError(f"estimator checkpoint missing {exc}") from None


def save_estimator(
    estimator: AgeEstimator,
    path: str,
    extra: dict | None = None,
    embedder: MmclModel | None = None,
) -> None:
    """Checkpoint the grouped estimator. Passing the embedder stores its
    parameters alongside, making the file a self-contained image-to-age
    pipeline for predict/evaluate."""
    first = estimator.classifier
    metadata = {
        "kind": "estimator",
        "cuts": list(estimator.cuts),
        "overlap": estimator.overlap,
        "age_min": estimator.age_min,
        "age_max": estimator.age_max,
        "lam": estimator.lam,
        "hidden": estimator.hidden,
        "depth": first.config.depth,
        "use_hidden": first.config.use_hidden,
        "seed": first.config.seed,
        "in_dim": first.in_dim,
        "shared": all(r is estimator.regressors[0] for r in estimator.regressors),
    }
    if extra:
        metadata.update(extra)
    arrays = _model_blobs("classifier", estimator.classifier)
    if metadata["shared"]:
        arrays.update(_model_blobs("regressor0", estimator.regressors[0]))
    else:
        for g, reg in enumerate(estimator.regressors):
            arrays.update(_model_blobs(f"regressor{g}", reg))
    if embedder is not None:
        metadata["embedder_config"] = vars(embedder.config).copy()
        for name, p in embedder.named_parameters().items():
            arrays[f"embedder.{name}"] = p.data
    save_blobs(arrays, metadata, path)


def _estimator_from_params(params: dict[str, np.ndarray], metadata: dict) -> AgeEstimator:
    cuts = np.asarray(metadata["cuts"], dtype=np.float64)
    groups = len(cuts)
    lam = float(metadata["lam"])
    hidden = int(metadata["hidden"])
    depth = int(metadata["depth"])
    use_hidden = bool(metadata["use_hidden"])
    seed = int(metadata["seed"])
    in_dim = int(metadata["in_dim"])

    def cfg(s: int) -> MlIelmConfig:
        return MlIelmConfig(hidden=hidden, depth=depth, lam=lam, seed=s,
                            use_hidden=use_hidden)

    classifier = _model_from_blobs("classifier", params, cfg(seed), in_dim, groups)
    if metadata.get("shared"):
        one = _model_from_blobs("regressor0", params, cfg(seed + 1), in_dim, 1)
        regressors = [one] * groups
    else:
        regressors = [
            _model_from_blobs(f"regressor{g}", params, cfg(seed + 1 + g), in_dim, 1)
            for g in range(groups)
        ]
    return AgeEstimator(
        cuts=cuts,
        classifier=classifier,
        regressors=regressors,
        overlap=float(metadata["overlap"]),
        age_min=float(metadata["age_min"]),
        age_max=float(metadata["age_max"]),
        lam=lam,
        hidden=hidden,
    )


def _check_kind(metadata: dict, want: str) -> None:
    if metadata.get("kind") != want:
        raise CheckpointError(
            f"expected an {want} checkpoint, got {metadata.get('kind')!r}"
        )


def load_estimator(path: str) -> tuple[AgeEstimator, dict]:
    params, metadata = load_blobs(path)
    _check_kind(metadata, "estimator")
    return _estimator_from_params(params, metadata), metadata


def load_pipeline(path: str) -> tuple[MmclModel, AgeEstimator, dict]:
    """Load a self-contained pipeline: the stored embedder plus the
    estimator fitted on its readouts."""
    params, metadata = load_blobs(path)
    _check_kind(metadata, "estimator")
    if "embedder_config" not in metadata:
        raise CheckpointError(
            f"{path} stores no embedder; refit with the model attached"
        )
    config = _parse_model_config(metadata, "embedder_config")
    model = _mmcl_from_params(params, config, prefix="embedder.")
    return model, _estimator_from_params(params, metadata), metadata
