"""Manifests, the synthetic sign corpus, and stream loading.

Manifest line: ``id<TAB>relative/path.kp<TAB>GLOSS GLOSS ...``; paths are relative to
the manifest's directory. A generated corpus directory holds ``train.tsv``,
``dev.tsv``, ``test.tsv``, ``vocab.txt`` and ``streams/*.kp`` keypoint files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import GlossVocabulary
from .errors import ConfigError, DataError
from .keypoints import N_HAND, N_JOINTS, N_POSE, POSE_NAMES, read_keypoint_stream, sequence_features, \
    write_keypoint_stream
from .params import derive_rng

SPLITS = ("train", "dev", "test")
SPLIT_MAX_LEN = {"train": 28, "dev": 18, "test": 17}


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    glosses: tuple[str, ...]


@dataclass
class DatasetManifest:
    split: str
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def __len__(self) -> int:
        return len(self.records)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"{r.id}\t{r.path}\t{' '.join(r.glosses)}" for r in manifest.records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path: str | Path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        sid, rel, glosses = parts[0].strip(), parts[1].strip(), tuple(parts[2].split())
        if not sid or not rel:
            raise DataError(f"{path}:{lineno}: empty id or path")
        if not glosses:
            raise DataError(f"{path}:{lineno}: empty gloss sequence for {sid}")
        if sid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {sid}")
        seen.add(sid)
        records.append(ManifestRecord(sid, rel, glosses))
    return DatasetManifest(split or path.stem, records, path.parent)


# --- stream views --------------------------------------------------------------

RGB_WIDTH = N_JOINTS * 2


def stream_views(joints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(rgb, heatmap) model inputs from one keypoint sequence.

    The heatmap view is the 443-wide keypoint feature; the rgb stand-in is the
    image-plane projection (x, y) of every joint, so it sees less than the
    heatmap view and the two pipelines are genuinely different.
    """
    joints = np.asarray(joints, dtype=np.float64)
    rgb = joints[:, :, :2].reshape(len(joints), RGB_WIDTH)
    return rgb, sequence_features(joints)


def load_record(manifest: DatasetManifest, record: ManifestRecord) -> np.ndarray:
    try:
        return read_keypoint_stream(manifest.resolve(record))
    except DataError as exc:
        raise DataError(f"{record.id}: {exc}") from exc


def check_files(manifest: DatasetManifest) -> None:
    missing = [r.id for r in manifest.records if not manifest.resolve(r).is_file()]
    if missing:
        raise DataError(f"missing stream files for ids: {', '.join(missing)}")


# --- synthetic corpus ----------------------------------------------------------

@dataclass
class SyntheticConfig:
    vocab_size: int = 10
    train_size: int = 160
    dev_size: int = 20
    test_size: int = 20
    min_len: int = 1
    max_len: int | None = None      # further cap below the per-split caps
    motif_frames: int = 6
    duration_jitter: int = 1
    rest_frames: int = 2
    amplitude: float = 0.25
    shared_fraction: float = 0.5    # how much of each motif comes from a shared basis
    style: float = 0.15             # per-sequence amplitude/offset variation
    jitter: float = 0.01            # per-frame keypoint noise
    downsample: int = 2             # temporal reduction applied before CTC

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("synthetic vocabulary needs at least 2 glosses")
        if self.min_len < 1 or (self.max_len is not None and self.max_len < self.min_len):
            raise ConfigError("invalid gloss length bounds")
        if self.motif_frames - self.duration_jitter < 1 or self.rest_frames < 1:
            raise ConfigError("motifs and rests need at least one frame")
        if min(self.train_size, self.dev_size, self.test_size) < 0:
            raise ConfigError("split sizes must be non-negative")

    def split_size(self, split: str) -> int:
        return {"train": self.train_size, "dev": self.dev_size, "test": self.test_size}[split]

    def split_cap(self, split: str) -> int:
        cap = SPLIT_MAX_LEN[split]
        return cap if self.max_len is None else min(cap, self.max_len)


def gloss_names(n: int) -> list[str]:
    return [f"G{i:02d}" for i in range(n)]


def base_skeleton() -> np.ndarray:
    """A fixed neutral upper-body pose with open hands at the wrists."""
    j = np.zeros((N_JOINTS, 3))
    p = {n: i for i, n in enumerate(POSE_NAMES)}
    face = {"left_eye_inner": (0.03, 1.62), "left_eye": (0.05, 1.62), "left_eye_outer": (0.07, 1.62),
            "right_eye_inner": (-0.03, 1.62), "right_eye": (-0.05, 1.62), "right_eye_outer": (-0.07, 1.62),
            "left_ear": (0.1, 1.6), "right_ear": (-0.1, 1.6), "mouth_left": (0.03, 1.52),
            "mouth_right": (-0.03, 1.52)}
    for name, (x, y) in face.items():
        j[p[name]] = (x, y, 0.05)
    for sign, side in ((1, "left"), (-1, "right")):
        j[p[f"{side}_shoulder"]] = (sign * 0.2, 1.4, 0.0)
        j[p[f"{side}_elbow"]] = (sign * 0.28, 1.12, 0.05)
        wrist = np.array((sign * 0.22, 0.9, 0.15))
        j[p[f"{side}_wrist"]] = wrist
        j[p[f"{side}_pinky"]] = wrist + (sign * 0.02, -0.06, 0.0)
        j[p[f"{side}_index"]] = wrist + (sign * -0.01, -0.08, 0.0)
        j[p[f"{side}_thumb"]] = wrist + (sign * -0.04, -0.03, 0.0)
        start = N_POSE if side == "left" else N_POSE + N_HAND
        j[start] = wrist
        for f in range(5):
            spread = (f - 2) * 0.02 * sign
            for k in range(4):
                j[start + 1 + 4 * f + k] = wrist + (spread * (k + 1) * 0.6, -0.03 * (k + 1), 0.0)
    return j


def gloss_motifs(vocab_size: int, cfg: SyntheticConfig, seed: int) -> np.ndarray:
    """Per-gloss displacement coefficients, shape (V, 2, 64, 3) for sin(pi t) and sin(2 pi t)."""
    rng = derive_rng(seed, "motifs")
    shared = rng.normal(size=(3, 2, N_JOINTS, 3))
    mix = rng.normal(size=(vocab_size, 3))
    own = rng.normal(size=(vocab_size, 2, N_JOINTS, 3))
    face = slice(0, 10)
    coeff = cfg.shared_fraction * np.einsum("vk,kfjc->vfjc", mix, shared) / np.sqrt(3) + \
        (1 - cfg.shared_fraction) * own
    coeff[:, :, face] *= 0.1  # the head barely moves
    return cfg.amplitude * coeff


def render_motif(coeff: np.ndarray, frames: int) -> np.ndarray:
    t = (np.arange(frames) + 0.5) / frames
    basis = np.stack([np.sin(np.pi * t), np.sin(2 * np.pi * t)], axis=1)
    return np.einsum("tf,fjc->tjc", basis, coeff)


def render_sequence(ids, motifs: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Joints for one gloss sequence: rest, motif, rest, motif, ..., rest.

    With ``rng=None`` the rendering is exact (no duration, style or jitter noise).
    """
    base = base_skeleton()
    if rng is not None:
        scale = 1.0 + cfg.style * rng.normal()
        offset = cfg.style * 0.2 * rng.normal(size=3)
        base = base * scale + offset
    parts = [np.repeat(base[None], cfg.rest_frames, axis=0)]
    for g in ids:
        n = cfg.motif_frames
        gain = 1.0
        if rng is not None:
            n += int(rng.integers(-cfg.duration_jitter, cfg.duration_jitter + 1))
            gain += cfg.style * rng.normal()
        parts.append(base[None] + gain * render_motif(motifs[g], n))
        parts.append(np.repeat(base[None], cfg.rest_frames, axis=0))
    joints = np.concatenate(parts)
    if rng is not None and cfg.jitter > 0:
        joints = joints + rng.normal(0.0, cfg.jitter, size=joints.shape)
    return joints


def generate_synthetic_dataset(out_dir: str | Path, cfg: SyntheticConfig = SyntheticConfig(),
                               seed: int = 0) -> dict[str, DatasetManifest]:
    """Write a complete synthetic corpus under ``out_dir`` and return its manifests."""
    cfg.validate()
    out = Path(out_dir)
    (out / "streams").mkdir(parents=True, exist_ok=True)
    names = gloss_names(cfg.vocab_size)
    GlossVocabulary(names).save(out / "vocab.txt")
    motifs = gloss_motifs(cfg.vocab_size, cfg, seed)
    manifests = {}
    for split in SPLITS:
        rng = derive_rng(seed, "corpus", split)
        cap = cfg.split_cap(split)
        records = []
        for i in range(cfg.split_size(split)):
            length = int(rng.integers(cfg.min_len, max(cap, cfg.min_len) + 1))
            ids = rng.integers(0, cfg.vocab_size, size=length)
            joints = render_sequence(ids, motifs, cfg, rng)
            positions = -(-len(joints) // cfg.downsample)
            if positions < 2 * length + 1:
                raise ConfigError(f"rendered {positions} positions for {length} glosses; raise motif_frames")
            sid = f"{split}_{i:04d}"
            rel = f"streams/{sid}.kp"
            write_keypoint_stream(out / rel, joints)
            records.append(ManifestRecord(sid, rel, tuple(names[g] for g in ids)))
        manifests[split] = DatasetManifest(split, records, out)
        write_manifest(manifests[split], out / f"{split}.tsv")
    return manifests
