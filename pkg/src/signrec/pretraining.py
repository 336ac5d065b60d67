"""Denoising pretraining: predict clean keypoint features from Gaussian-noised ones.

The model is an affine projection 443->d, a Conformer stack, and an affine head
d->443, trained with the per-sample squared-norm loss averaged over the batch.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine as ops
from .checkpoint import Checkpoint
from .conformer import ConformerBlockParams, ConformerConfig, encode, init_stack
from .data import DatasetManifest, load_record, stream_views
from .engine import DiffArray, GradTape, backward
from .errors import DataError, DimensionError, IncompatibleCheckpointError, NonFiniteLossError
from .keypoints import DEFAULT_SIGMA, FEATURE_DIM, add_gaussian_noise
from .optim import Adam, AdamConfig, grad_norm
from .params import collect_grads, derive_rng, flatten, uniform_init, with_arrays, zeros

CHECKPOINT_KIND = "pretrain"


@dataclass
class PretrainConfig:
    conformer: ConformerConfig = field(default_factory=lambda: ConformerConfig(dropout=0.0))
    sigma: float = DEFAULT_SIGMA
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-3
    max_grad_norm: float | None = 5.0
    seed: int = 0


@dataclass
class PretrainModel:
    proj_w: DiffArray
    proj_b: DiffArray
    encoder: list[ConformerBlockParams]
    head_w: DiffArray
    head_b: DiffArray


@dataclass
class PretrainBatch:
    clean: list[np.ndarray]
    noisy: list[np.ndarray]

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise DimensionError("clean and noisy batches differ in size")
        for c, n in zip(self.clean, self.noisy):
            if np.shape(c) != np.shape(n):
                raise DimensionError(f"clean {np.shape(c)} vs noisy {np.shape(n)}")

    @property
    def lengths(self) -> list[int]:
        return [len(c) for c in self.clean]


@dataclass(frozen=True)
class StepReport:
    loss: float
    per_component: float
    grad_norm: float


def init_model(cfg: ConformerConfig, seed: int) -> PretrainModel:
    d = cfg.model_dim
    return PretrainModel(
        proj_w=uniform_init(derive_rng(seed, "pretrain", "proj"), (FEATURE_DIM, d), FEATURE_DIM),
        proj_b=zeros(d),
        encoder=init_stack(seed, cfg, name="pretrain-encoder"),
        head_w=uniform_init(derive_rng(seed, "pretrain", "head"), (d, FEATURE_DIM), d),
        head_b=zeros(FEATURE_DIM),
    )


def mse_loss(predicted, clean) -> DiffArray:
    """Mean over samples of the squared norm of each sample's residual.

    Accepts stacked ``N x ...`` arrays or equal-length lists of per-sample arrays
    (which may differ in frame count).
    """
    if isinstance(predicted, (list, tuple)):
        if len(predicted) != len(clean) or not predicted:
            raise DimensionError(f"{len(predicted)} predictions vs {len(clean)} targets")
        total = None
        for p, c in zip(predicted, clean):
            term = _sq_norm(p, c)
            total = term if total is None else total + term
        return total / float(len(predicted))
    predicted = ops._lift(predicted)
    clean = ops._lift(clean)
    if predicted.shape != clean.shape or predicted.ndim == 0:
        raise DimensionError(f"predicted {predicted.shape} vs clean {clean.shape}")
    return ops.sum(ops.square(predicted - clean)) / float(predicted.shape[0])


def _sq_norm(p, c) -> DiffArray:
    p, c = ops._lift(p), ops._lift(c)
    if p.shape != c.shape:
        raise DimensionError(f"predicted {p.shape} vs clean {c.shape}")
    return ops.sum(ops.square(p - c))


def predict(model: PretrainModel, noisy: np.ndarray, cfg: ConformerConfig,
            rng: np.random.Generator | None = None, training: bool = False) -> DiffArray:
    x = ops.linear(DiffArray(noisy), model.proj_w, model.proj_b)
    h = encode(x, model.encoder, cfg, rng=rng, training=training)
    return ops.linear(h, model.head_w, model.head_b)


def pretrain_step(batch: PretrainBatch, model: PretrainModel, optimizer: Adam, cfg: ConformerConfig,
                  rng: np.random.Generator | None = None) -> tuple[PretrainModel, StepReport]:
    with GradTape() as tape:
        preds = [predict(model, n, cfg, rng, training=True) for n in batch.noisy]
        loss = mse_loss(preds, [DiffArray(c) for c in batch.clean])
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError("pretrain_mse", value)
    grads = collect_grads(model, backward(loss, tape))
    report = StepReport(value, value * len(batch.clean) / (sum(batch.lengths) * FEATURE_DIM), grad_norm(grads))
    return optimizer.update(model, grads), report


def evaluate_mse(model: PretrainModel, clean: Sequence[np.ndarray], cfg: ConformerConfig,
                 sigma: float, seed: int) -> float:
    """Per-component MSE of denoised predictions on freshly noised copies of ``clean``."""
    rng = derive_rng(seed, "pretrain-eval")
    sq, count = 0.0, 0
    for c in clean:
        pred = predict(model, add_gaussian_noise(c, sigma, rng), cfg).data
        sq += float(np.sum((pred - c) ** 2))
        count += c.size
    return sq / count


def load_features(manifest: DatasetManifest) -> list[np.ndarray]:
    if not manifest.records:
        raise DataError(f"manifest {manifest.split!r} is empty")
    return [stream_views(load_record(manifest, r))[1] for r in manifest.records]


# --- checkpoints ------------------------------------------------------------------

def to_checkpoint(model: PretrainModel, optimizer: Adam | None, cfg: PretrainConfig, epochs_done: int) -> Checkpoint:
    arrays = {f"model.{k}": v.data for k, v in flatten(model).items()}
    if optimizer is not None:
        arrays.update({f"optim.{k}": v for k, v in sorted(optimizer.state_arrays().items())})
    hyper = {"conformer": dataclasses.asdict(cfg.conformer),
             **{k: v for k, v in dataclasses.asdict(cfg).items() if k != "conformer"}}
    return Checkpoint(CHECKPOINT_KIND, arrays, hyper, optimizer.step if optimizer else 0, cfg.seed,
                      {"epochs_done": epochs_done})


def config_from_checkpoint(ckpt: Checkpoint) -> PretrainConfig:
    if ckpt.kind != CHECKPOINT_KIND:
        raise IncompatibleCheckpointError(f"expected a {CHECKPOINT_KIND!r} checkpoint, got {ckpt.kind!r}")
    hyper = dict(ckpt.hyper)
    conf = ConformerConfig(**hyper.pop("conformer"))
    return PretrainConfig(conformer=conf, **hyper)


def model_from_checkpoint(ckpt: Checkpoint) -> PretrainModel:
    cfg = config_from_checkpoint(ckpt)
    template = init_model(cfg.conformer, cfg.seed)
    arrays = {k[len("model."):]: v for k, v in ckpt.arrays.items() if k.startswith("model.")}
    if set(arrays) != set(flatten(template)):
        raise IncompatibleCheckpointError("checkpoint parameter names do not match the pretraining model")
    try:
        return with_arrays(template, arrays)
    except ValueError as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc


def encoder_arrays(ckpt: Checkpoint) -> tuple[ConformerConfig, dict[str, np.ndarray]]:
    """The Conformer stack of a pretraining checkpoint, keyed like ``flatten(stack)``."""
    cfg = config_from_checkpoint(ckpt)
    prefix = "model.encoder."
    return cfg.conformer, {k[len(prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}


# --- training loop ----------------------------------------------------------------

@dataclass
class PretrainResult:
    model: PretrainModel
    checkpoint: Checkpoint
    history: list[dict]


def _optimizer(cfg: PretrainConfig, n_samples: int) -> Adam:
    steps = cfg.epochs * max(1, math.ceil(n_samples / cfg.batch_size))
    return Adam(AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=steps,
                           max_grad_norm=cfg.max_grad_norm))


def run_pretraining(data: DatasetManifest | Sequence[np.ndarray], cfg: PretrainConfig = PretrainConfig(),
                    log_path: str | Path | None = None, resume: Checkpoint | None = None,
                    epochs: int | None = None, callback=None) -> PretrainResult:
    """Train for ``cfg.epochs`` (or until ``epochs`` total when given), optionally resuming.

    Noise is redrawn every epoch from a generator keyed on (seed, epoch), and the
    batch order likewise, so resuming at an epoch boundary replays exactly.
    """
    clean = load_features(data) if isinstance(data, DatasetManifest) else [np.asarray(c, float) for c in data]
    if not clean:
        raise DataError("no pretraining sequences")
    model = init_model(cfg.conformer, cfg.seed)
    optimizer = _optimizer(cfg, len(clean))
    start = 0
    if resume is not None:
        model = model_from_checkpoint(resume)
        optimizer.load_state_arrays({k[len("optim."):]: v for k, v in resume.arrays.items()
                                     if k.startswith("optim.")}, resume.step)
        start = int(resume.extra["epochs_done"])
    stop = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    history = []
    log = open(log_path, "a" if resume is not None else "w") if log_path else None
    try:
        for epoch in range(start, stop):
            order = derive_rng(cfg.seed, "pretrain-shuffle", str(epoch)).permutation(len(clean))
            noise_rng = derive_rng(cfg.seed, "pretrain-noise", str(epoch))
            noisy = [add_gaussian_noise(c, cfg.sigma, noise_rng) for c in clean]
            drop_rng = derive_rng(cfg.seed, "pretrain-dropout", str(epoch))
            sq, count = 0.0, 0
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                batch = PretrainBatch([clean[i] for i in idx], [noisy[i] for i in idx])
                model, rep = pretrain_step(batch, model, optimizer, cfg.conformer, drop_rng)
                sq += rep.loss * len(idx)
                count += sum(batch.lengths) * FEATURE_DIM
            record = {"epoch": epoch, "train_mse": sq / len(clean), "per_component": sq / count,
                      "step": optimizer.step}
            history.append(record)
            if log:
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if callback is not None and callback(record) is False:
                stop = epoch + 1
                break
    finally:
        if log:
            log.close()
    return PretrainResult(model, to_checkpoint(model, optimizer, cfg, stop if history else start), history)
