"""Three-pipeline recognition ensemble (rgb, heatmap, fusion) with pyramid auxiliary heads.

Each pipeline is stand-in extractor -> 832-wide embedding -> d -> Conformer -> CTC head.
The rgb and heatmap encoders run in lockstep and exchange queries through
cross-modal relative attention; the fusion encoder sees the sum of their
embeddings and keeps plain relative attention. Two pyramid heads (one per
unimodal extractor) add CTC terms during training only.
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
from .conformer import ConformerBlockParams, ConformerConfig, conformer_block, init_stack
from .ctc import DecodeConfig, GlossVocabulary, InfeasibleAlignment, ctc_loss, decode, required_frames
from .data import RGB_WIDTH, DatasetManifest, load_record, stream_views
from .engine import DiffArray, GradTape, backward
from .errors import ConfigError, DataError, DimensionError, IncompatibleCheckpointError, NonFiniteLossError
from .evaluation import ErrorBreakdown, corpus_wer
from .keypoints import FEATURE_DIM
from .optim import Adam, AdamConfig
from .params import collect_grads, derive_rng, flatten, ones, uniform_init, with_arrays, zeros
from .pretraining import encoder_arrays

EMBED_DIM = 832
LOSS_NAMES = ("rgb", "heatmap", "fusion", "apn_rgb", "apn_heatmap")
HEADS = ("rgb", "heatmap", "fusion")


# --- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class AblationFlags:
    pretrained_conformer: bool = True
    cross_modal_attention: bool = True
    pyramids: bool = True


ABLATIONS = {
    "baseline": AblationFlags(False, False, False),
    "a1": AblationFlags(True, False, False),
    "a2": AblationFlags(True, True, False),
    "a3": AblationFlags(True, True, True),
}


@dataclass
class ExtractorConfig:
    level_channels: tuple[int, ...] = (32, 64)
    strides: tuple[int, ...] = (1, 2)
    kernel_size: int = 3
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        self.level_channels, self.strides = tuple(self.level_channels), tuple(self.strides)
        if not self.level_channels or len(self.level_channels) != len(self.strides):
            raise ConfigError("need one stride per pyramid level and at least one level")
        if self.kernel_size % 2 == 0 or min(self.strides) < 1:
            raise ConfigError("extractor kernel must be odd and strides positive")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    def output_length(self, frames: int) -> int:
        for s in self.strides:
            frames = -(-frames // s)
        return frames


@dataclass
class EnsembleConfig:
    num_classes: int
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    rgb_width: int = RGB_WIDTH
    heatmap_width: int = FEATURE_DIM
    apn_kernel: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need blank plus at least one gloss")
        if self.apn_kernel % 2 == 0:
            raise ConfigError("apn temporal kernel must be odd")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        d = dict(d)
        return cls(conformer=ConformerConfig(**d.pop("conformer")), extractor=ExtractorConfig(**d.pop("extractor")),
                   **d)


# --- parameters -----------------------------------------------------------------------

@dataclass
class ExtractorParams:
    conv_w: list[DiffArray]
    conv_b: list[DiffArray]
    embed_w: DiffArray
    embed_b: DiffArray
    reduce_w: DiffArray
    reduce_b: DiffArray


@dataclass
class HeadParams:
    w: DiffArray
    b: DiffArray


@dataclass
class ApnParams:
    lateral_w: list[DiffArray]
    lateral_b: list[DiffArray]
    alpha: DiffArray
    beta: DiffArray
    norm_gain: DiffArray
    norm_bias: DiffArray
    tconv_w: DiffArray
    tconv_b: DiffArray
    head: HeadParams


@dataclass
class EnsembleParams:
    rgb_extractor: ExtractorParams
    heatmap_extractor: ExtractorParams
    rgb_encoder: list[ConformerBlockParams]
    heatmap_encoder: list[ConformerBlockParams]
    fusion_encoder: list[ConformerBlockParams]
    rgb_head: HeadParams
    heatmap_head: HeadParams
    fusion_head: HeadParams
    rgb_apn: ApnParams
    heatmap_apn: ApnParams


def init_extractor(rng: np.random.Generator, width: int, xc: ExtractorConfig, d: int) -> ExtractorParams:
    conv_w, conv_b, cin = [], [], width
    for c in xc.level_channels:
        conv_w.append(uniform_init(rng, (xc.kernel_size, cin, c), xc.kernel_size * cin))
        conv_b.append(zeros(c))
        cin = c
    total = sum(xc.level_channels)
    return ExtractorParams(conv_w, conv_b, uniform_init(rng, (total, xc.embed_dim), total), zeros(xc.embed_dim),
                           uniform_init(rng, (xc.embed_dim, d), xc.embed_dim), zeros(d))


def init_head(rng: np.random.Generator, d: int, classes: int) -> HeadParams:
    return HeadParams(uniform_init(rng, (d, classes), d), zeros(classes))


def init_apn(rng: np.random.Generator, cfg: EnsembleConfig) -> ApnParams:
    d, xc = cfg.conformer.model_dim, cfg.extractor
    return ApnParams([uniform_init(rng, (c, d), c) for c in xc.level_channels], [zeros(d) for _ in xc.level_channels],
                     zeros(len(xc.level_channels)), zeros(len(xc.level_channels)), ones(d), zeros(d),
                     uniform_init(rng, (cfg.apn_kernel, d, d), cfg.apn_kernel * d), zeros(d),
                     init_head(rng, d, cfg.num_classes))


def init_ensemble(cfg: EnsembleConfig, seed: int) -> EnsembleParams:
    d, xc = cfg.conformer.model_dim, cfg.extractor
    r = lambda *names: derive_rng(seed, "ensemble", *names)  # noqa: E731
    return EnsembleParams(
        rgb_extractor=init_extractor(r("rgb_extractor"), cfg.rgb_width, xc, d),
        heatmap_extractor=init_extractor(r("heatmap_extractor"), cfg.heatmap_width, xc, d),
        rgb_encoder=init_stack(seed, cfg.conformer, "rgb_encoder"),
        heatmap_encoder=init_stack(seed, cfg.conformer, "heatmap_encoder"),
        fusion_encoder=init_stack(seed, cfg.conformer, "fusion_encoder"),
        rgb_head=init_head(r("rgb_head"), d, cfg.num_classes),
        heatmap_head=init_head(r("heatmap_head"), d, cfg.num_classes),
        fusion_head=init_head(r("fusion_head"), d, cfg.num_classes),
        rgb_apn=init_apn(r("rgb_apn"), cfg),
        heatmap_apn=init_apn(r("heatmap_apn"), cfg),
    )


def parameter_groups(params: EnsembleParams) -> dict[str, list[str]]:
    """Top-level group name -> dotted leaf names."""
    groups: dict[str, list[str]] = {}
    for name in flatten(params):
        groups.setdefault(name.split(".")[0], []).append(name)
    return groups


def load_pretrained(params: EnsembleParams, ckpt: Checkpoint, cfg: EnsembleConfig,
                    slots: Sequence[str] = ("rgb_encoder", "heatmap_encoder")) -> EnsembleParams:
    """Copy a pretraining checkpoint's Conformer stack into the named encoder slots."""
    conf, arrays = encoder_arrays(ckpt)
    for key in ("model_dim", "num_heads", "num_layers", "ff_expansion", "kernel_size", "max_relative_distance"):
        if getattr(conf, key) != getattr(cfg.conformer, key):
            raise IncompatibleCheckpointError(
                f"pretrained {key}={getattr(conf, key)} but ensemble expects {getattr(cfg.conformer, key)}")
    for slot in slots:
        stack = getattr(params, slot)
        if set(arrays) != set(flatten(stack)):
            raise IncompatibleCheckpointError(f"pretrained encoder does not match slot {slot}")
        try:
            params = dataclasses.replace(params, **{slot: with_arrays(stack, arrays)})
        except ValueError as exc:
            raise IncompatibleCheckpointError(f"{slot}: {exc}") from exc
    return params


# --- forward pieces -----------------------------------------------------------------

@dataclass
class MultiScaleFeatures:
    levels: list[DiffArray]
    pooled: DiffArray          # positions of the coarsest level x 832


def extract_features(stream, p: ExtractorParams, xc: ExtractorConfig) -> MultiScaleFeatures:
    """Strided conv pyramid; every level is pooled to the coarsest rate and mapped to 832 wide."""
    x = stream if isinstance(stream, DiffArray) else DiffArray(np.asarray(stream, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != p.conv_w[0].shape[1]:
        raise DimensionError(f"stream {x.shape} does not match extractor width {p.conv_w[0].shape[1]}")
    if x.shape[0] < xc.kernel_size:
        raise DimensionError(f"stream of {x.shape[0]} frames is shorter than the extractor kernel {xc.kernel_size}")
    levels = []
    for w, b, s in zip(p.conv_w, p.conv_b, xc.strides):
        x = ops.swish(ops.conv1d(x, w, b, stride=s, padding="edge"))
        levels.append(x)
    pooled = [ops.avg_pool1d(lv, int(np.prod(xc.strides[i + 1:]))) for i, lv in enumerate(levels)]
    cat = pooled[0] if len(pooled) == 1 else ops.concat(pooled, axis=1)
    return MultiScaleFeatures(levels, ops.linear(cat, p.embed_w, p.embed_b))


def reduce_embedding(features: MultiScaleFeatures, p: ExtractorParams) -> DiffArray:
    return ops.linear(features.pooled, p.reduce_w, p.reduce_b)


def fuse_embeddings(rgb: DiffArray, heatmap: DiffArray) -> DiffArray:
    if rgb.shape != heatmap.shape:
        raise DimensionError(f"cannot fuse {rgb.shape} with {heatmap.shape}")
    return rgb + heatmap


def level_weights(p: ApnParams) -> tuple[np.ndarray, np.ndarray]:
    return (ops.softmax_lastdim(p.alpha).data, ops.softmax_lastdim(p.beta).data)


def apn_forward(features: MultiScaleFeatures, p: ApnParams, xc: ExtractorConfig) -> DiffArray:
    """Parallel top-down / bottom-up pyramid flow with softmax level weights.

    Each level is pooled to the coarsest rate and mapped to d (lateral transform);
    top-down accumulates from coarse to fine, bottom-up from fine to coarse; the
    weighted sum is layer-normalised, temporally convolved (swish) and classified.
    """
    n = len(features.levels)
    if n < 1 or n != len(p.lateral_w):
        raise DimensionError(f"{n} feature levels for an APN with {len(p.lateral_w)} lateral transforms")
    lat = [ops.linear(ops.avg_pool1d(lv, int(np.prod(xc.strides[i + 1:]))), p.lateral_w[i], p.lateral_b[i])
           for i, lv in enumerate(features.levels)]
    top_down = [None] * n
    top_down[n - 1] = lat[n - 1]
    for i in range(n - 2, -1, -1):
        top_down[i] = lat[i] + top_down[i + 1]
    bottom_up = [lat[0]]
    for i in range(1, n):
        bottom_up.append(lat[i] + bottom_up[i - 1])
    alpha = ops.softmax_lastdim(p.alpha)
    beta = ops.softmax_lastdim(p.beta)
    z = None
    for i in range(n):
        term = top_down[i] * ops.index(alpha, i) + bottom_up[i] * ops.index(beta, i)
        z = term if z is None else z + term
    z = ops.layer_norm(z, p.norm_gain, p.norm_bias)
    z = ops.swish(ops.conv1d(z, p.tconv_w, p.tconv_b, padding="edge"))
    return ops.linear(z, p.head.w, p.head.b)


def _encode_pair(a: DiffArray, b: DiffArray, stack_a, stack_b, cfg: ConformerConfig, cross: bool,
                 rng, training) -> tuple[DiffArray, DiffArray]:
    """Run two stacks layer by layer; with ``cross`` each block's foreign query is the other's current state."""
    for blk_a, blk_b in zip(stack_a, stack_b):
        if cross:
            a, b = (conformer_block(a, blk_a, cfg, cross_stream=b, rng=rng, training=training),
                    conformer_block(b, blk_b, cfg, cross_stream=a, rng=rng, training=training))
        else:
            a = conformer_block(a, blk_a, cfg, rng=rng, training=training)
            b = conformer_block(b, blk_b, cfg, rng=rng, training=training)
    return a, b


@dataclass
class EnsembleOutputs:
    rgb: DiffArray
    heatmap: DiffArray
    fusion: DiffArray
    apn_rgb: DiffArray | None = None
    apn_heatmap: DiffArray | None = None

    def named(self) -> dict[str, DiffArray]:
        return {k: getattr(self, k) for k in LOSS_NAMES if getattr(self, k) is not None}


def forward_all(rgb, heatmap, params: EnsembleParams, cfg: EnsembleConfig, flags: AblationFlags = AblationFlags(),
                rng: np.random.Generator | None = None, training: bool = False, with_apn: bool = True) -> EnsembleOutputs:
    feats_r = extract_features(rgb, params.rgb_extractor, cfg.extractor)
    feats_h = extract_features(heatmap, params.heatmap_extractor, cfg.extractor)
    e_r = reduce_embedding(feats_r, params.rgb_extractor)
    e_h = reduce_embedding(feats_h, params.heatmap_extractor)
    if e_r.shape != e_h.shape:
        raise DimensionError(f"rgb and heatmap streams disagree after extraction: {e_r.shape} vs {e_h.shape}")
    h_r, h_h = _encode_pair(e_r, e_h, params.rgb_encoder, params.heatmap_encoder, cfg.conformer,
                            flags.cross_modal_attention, rng, training)
    h_f = fuse_embeddings(e_r, e_h)
    for blk in params.fusion_encoder:
        h_f = conformer_block(h_f, blk, cfg.conformer, rng=rng, training=training)
    out = EnsembleOutputs(ops.linear(h_r, params.rgb_head.w, params.rgb_head.b),
                          ops.linear(h_h, params.heatmap_head.w, params.heatmap_head.b),
                          ops.linear(h_f, params.fusion_head.w, params.fusion_head.b))
    if with_apn and flags.pyramids:
        out.apn_rgb = apn_forward(feats_r, params.rgb_apn, cfg.extractor)
        out.apn_heatmap = apn_forward(feats_h, params.heatmap_apn, cfg.extractor)
    return out


def joint_loss(losses: dict[str, DiffArray | InfeasibleAlignment | float]) -> DiffArray:
    """Unweighted sum of the component CTC losses, in a fixed order."""
    total = None
    for name in [k for k in LOSS_NAMES if k in losses] + sorted(set(losses) - set(LOSS_NAMES)):
        term = losses[name]
        value = term.item() if hasattr(term, "item") else float(term)
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
        term = term if isinstance(term, DiffArray) else DiffArray(np.array(value))
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("joint_loss needs at least one component")
    return total


def sample_losses(outputs: EnsembleOutputs, target: Sequence[int]) -> dict[str, DiffArray | InfeasibleAlignment]:
    return {name: ctc_loss(logits, target) for name, logits in outputs.named().items()}


# --- inference --------------------------------------------------------------------------

def combine_log_probs(logits: Sequence[np.ndarray], strategy: str = "mean") -> np.ndarray:
    """Per-frame log-probabilities of the ensemble: arithmetic mean over heads (or fusion only)."""
    lps = [l - np.logaddexp.reduce(l, axis=-1, keepdims=True) for l in map(np.asarray, logits)]
    if strategy == "mean":
        return np.mean(lps, axis=0)
    if strategy == "fusion":
        return lps[-1]
    raise ConfigError(f"unknown combination strategy {strategy!r}")


def ensemble_log_probs(rgb, heatmap, params: EnsembleParams, cfg: EnsembleConfig,
                       flags: AblationFlags = AblationFlags(), strategy: str = "mean") -> np.ndarray:
    out = forward_all(rgb, heatmap, params, cfg, flags, with_apn=False)
    return combine_log_probs([out.rgb.data, out.heatmap.data, out.fusion.data], strategy)


def infer(rgb, heatmap, params: EnsembleParams, cfg: EnsembleConfig, decode_cfg: DecodeConfig = DecodeConfig(),
          flags: AblationFlags = AblationFlags(), strategy: str = "mean",
          vocab: GlossVocabulary | None = None):
    return decode(ensemble_log_probs(rgb, heatmap, params, cfg, flags, strategy), decode_cfg, vocab)


# --- data -----------------------------------------------------------------------------

@dataclass
class SignSample:
    id: str
    rgb: np.ndarray
    heatmap: np.ndarray
    target: tuple[int, ...]


def load_samples(manifest: DatasetManifest, vocab: GlossVocabulary, xc: ExtractorConfig | None = None) -> list[SignSample]:
    samples = []
    for r in manifest.records:
        rgb, hm = stream_views(load_record(manifest, r))
        try:
            target = vocab.encode(r.glosses)
        except DataError as exc:
            raise DataError(f"{r.id}: {exc}") from exc
        if xc is not None:
            if len(rgb) < xc.kernel_size:
                raise DataError(f"{r.id}: {len(rgb)} frames is shorter than the extractor kernel")
            have = xc.output_length(len(rgb))
            if have < required_frames(target):
                raise DataError(f"{r.id}: {have} positions after extraction cannot align {len(target)} glosses")
        samples.append(SignSample(r.id, rgb, hm, target))
    return samples


# --- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-3
    max_grad_norm: float | None = 5.0
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    task_adaptive_epochs: int = 0     # per-pipeline CTC warm-up before joint training
    track_train_wer: bool = False


@dataclass
class TrainResult:
    params: EnsembleParams
    history: list[dict]
    optimizer: Adam


def _adam(cfg: TrainConfig, steps: int) -> Adam:
    return Adam(AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, total_steps=max(steps, 1),
                           max_grad_norm=cfg.max_grad_norm))


def evaluate_samples(samples: Sequence[SignSample], params: EnsembleParams, cfg: EnsembleConfig,
                     flags: AblationFlags, decode_cfg: DecodeConfig = DecodeConfig(), strategy: str = "mean",
                     denominator: str = "reference") -> ErrorBreakdown:
    pairs = [(s.target, infer(s.rgb, s.heatmap, params, cfg, decode_cfg, flags, strategy)) for s in samples]
    return corpus_wer(pairs, denominator)


def batch_loss(batch: Sequence[SignSample], params: EnsembleParams, cfg: EnsembleConfig, flags: AblationFlags,
               rng: np.random.Generator | None = None, training: bool = True) -> tuple[DiffArray, dict]:
    """Mean joint loss over ``batch`` (record on a tape to differentiate) and per-component means."""
    parts: dict[str, float] = {}
    total = None
    for s in batch:
        out = forward_all(s.rgb, s.heatmap, params, cfg, flags, rng, training=training)
        losses = sample_losses(out, s.target)
        for k, v in losses.items():
            if isinstance(v, InfeasibleAlignment):
                raise NonFiniteLossError(f"{k} ({s.id}: {v.frames} positions < {v.required} needed)", math.inf)
            parts[k] = parts.get(k, 0.0) + v.item() / len(batch)
        try:
            j = joint_loss(losses)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"{exc.component} ({s.id})", exc.value) from exc
        total = j if total is None else total + j
    return total / float(len(batch)), parts


def train_step(batch: Sequence[SignSample], params: EnsembleParams, optimizer: Adam, cfg: EnsembleConfig,
               flags: AblationFlags, rng: np.random.Generator | None = None) -> tuple[EnsembleParams, float, dict]:
    """One optimizer step on the mean joint loss of ``batch``; returns (params, loss, per-component means)."""
    with GradTape() as tape:
        loss, parts = batch_loss(batch, params, cfg, flags, rng)
    grads = collect_grads(params, backward(loss, tape))
    return optimizer.update(params, grads), loss.item(), parts


def _pipeline_warmup(samples, params: EnsembleParams, cfg: EnsembleConfig, tc: TrainConfig) -> EnsembleParams:
    """Task-adaptive CTC training of the rgb and heatmap pipelines on their own."""
    for side in ("rgb", "heatmap"):
        names = (f"{side}_extractor", f"{side}_encoder", f"{side}_head")
        sub = [getattr(params, n) for n in names]
        steps = tc.task_adaptive_epochs * math.ceil(len(samples) / tc.batch_size)
        opt = _adam(tc, steps)
        for epoch in range(tc.task_adaptive_epochs):
            order = derive_rng(tc.seed, "warmup", side, str(epoch)).permutation(len(samples))
            rng = derive_rng(tc.seed, "warmup-dropout", side, str(epoch))
            for b in range(0, len(order), tc.batch_size):
                batch = [samples[i] for i in order[b:b + tc.batch_size]]
                with GradTape() as tape:
                    total = None
                    for s in batch:
                        feats = extract_features(getattr(s, side), sub[0], cfg.extractor)
                        h = reduce_embedding(feats, sub[0])
                        for blk in sub[1]:
                            h = conformer_block(h, blk, cfg.conformer, rng=rng, training=True)
                        term = joint_loss({side: ctc_loss(ops.linear(h, sub[2].w, sub[2].b), s.target)})
                        total = term if total is None else total + term
                    loss = total / float(len(batch))
                sub = opt.update(sub, collect_grads(sub, backward(loss, tape)))
        params = dataclasses.replace(params, **dict(zip(names, sub)))
    return params


def train_ensemble(train: Sequence[SignSample], cfg: EnsembleConfig, tc: TrainConfig = TrainConfig(),
                   dev: Sequence[SignSample] = (), pretrained: Checkpoint | None = None,
                   log_path: str | Path | None = None, params: EnsembleParams | None = None,
                   callback=None) -> TrainResult:
    """Optimise the joint loss; one metrics record per epoch (dev WER with greedy decoding)."""
    if not train:
        raise DataError("training set is empty")
    flags = tc.ablation
    if params is None:
        params = init_ensemble(cfg, tc.seed)
    if flags.pretrained_conformer:
        if pretrained is None:
            raise ConfigError("the pretrained-conformer flag needs a pretraining checkpoint")
        params = load_pretrained(params, pretrained, cfg)
        if tc.task_adaptive_epochs:
            params = _pipeline_warmup(train, params, cfg, tc)
    steps = tc.epochs * math.ceil(len(train) / tc.batch_size)
    optimizer = _adam(tc, steps)
    history = []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tc.epochs):
            order = derive_rng(tc.seed, "train-shuffle", str(epoch)).permutation(len(train))
            rng = derive_rng(tc.seed, "train-dropout", str(epoch))
            total, parts = 0.0, {}
            for b in range(0, len(order), tc.batch_size):
                batch = [train[i] for i in order[b:b + tc.batch_size]]
                params, loss, comp = train_step(batch, params, optimizer, cfg, flags, rng)
                total += loss * len(batch)
                for k, v in comp.items():
                    parts[k] = parts.get(k, 0.0) + v * len(batch)
            record = {"epoch": epoch, "train_loss": total / len(train),
                      "components": {k: v / len(train) for k, v in parts.items()}}
            if dev:
                record.update(_wer_fields("dev", evaluate_samples(dev, params, cfg, flags)))
            if tc.track_train_wer:
                record.update(_wer_fields("train", evaluate_samples(train, params, cfg, flags)))
            history.append(record)
            if log:
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            if callback is not None and callback(record) is False:
                break
    finally:
        if log:
            log.close()
    return TrainResult(params, history, optimizer)


def _wer_fields(prefix: str, b: ErrorBreakdown) -> dict:
    r = b.as_record()
    return {f"{prefix}_wer": r["wer"], f"{prefix}_sub": r["sub"], f"{prefix}_del": r["del"], f"{prefix}_ins": r["ins"],
            f"{prefix}_S": r["S"], f"{prefix}_D": r["D"], f"{prefix}_I": r["I"]}


# --- model checkpoints ----------------------------------------------------------------

MODEL_KIND = "ensemble"


def model_checkpoint(params: EnsembleParams, cfg: EnsembleConfig, tc: TrainConfig, vocab: GlossVocabulary,
                     step: int = 0) -> Checkpoint:
    arrays = {f"model.{k}": v.data for k, v in flatten(params).items()}
    return Checkpoint(MODEL_KIND, arrays, {"ensemble": cfg.to_dict(), "ablation": dataclasses.asdict(tc.ablation)},
                      step, tc.seed, {"vocab": list(vocab.symbols[1:])})


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[EnsembleParams, EnsembleConfig, AblationFlags, GlossVocabulary]:
    if ckpt.kind != MODEL_KIND:
        raise IncompatibleCheckpointError(f"expected an {MODEL_KIND!r} checkpoint, got {ckpt.kind!r}")
    cfg = EnsembleConfig.from_dict(ckpt.hyper["ensemble"])
    flags = AblationFlags(**ckpt.hyper["ablation"])
    template = init_ensemble(cfg, ckpt.seed)
    arrays = {k[len("model."):]: v for k, v in ckpt.arrays.items() if k.startswith("model.")}
    if set(arrays) != set(flatten(template)):
        raise IncompatibleCheckpointError("checkpoint parameters do not match the ensemble layout")
    try:
        params = with_arrays(template, arrays)
    except ValueError as exc:
        raise IncompatibleCheckpointError(str(exc)) from exc
    return params, cfg, flags, GlossVocabulary(ckpt.extra["vocab"])
