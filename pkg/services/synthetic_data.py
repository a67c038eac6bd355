"""
Synthetic weakly-labeled audio-visual event videos.

Every class owns one unit-norm prototype per modality. An event covers a contiguous run of snippets
in the audio stream, the visual stream or both; a snippet's feature is the sum of the prototypes of
the events active in it, scaled by the modality's signal amplitude, plus Gaussian noise. The
dominance knob raises the audio amplitude to (1 + dominance) and lowers the visual one to
(1 - dominance), which makes audio the modality that dominates training.

Dataset directory layout:
    manifest.json   counts, dims, generation settings and byte layout of features.bin
    features.bin    little-endian float32, video-major then snippet-major; each snippet stores
                    its audio vector followed by its visual vector
    labels.json     video labels and per-snippet audio/visual truth as nested arrays
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from config import Config
from models.avvp_model import VideoBatch
from utils.errors import GenerationError, ParseError, UsageError, ValidationError
from utils.logger import logger
from utils.validation import validation_manager

MANIFEST_FILE = "manifest.json"
FEATURES_FILE = "features.bin"
LABELS_FILE = "labels.json"
FORMAT_VERSION = 1

# (audio only, visual only, both)
VISIBILITY_PROBS = (0.25, 0.25, 0.5)
SATURATION_LIMIT = 0.9

PROTOTYPE_STREAM = 0
VIDEO_STREAM = 1
SPLIT_STREAM = 2


@dataclass
class SynthConfig:
    videos: int = Config.TRAIN_VIDEOS + Config.VAL_VIDEOS + Config.TEST_VIDEOS
    snippets: int = Config.SNIPPETS
    classes: int = Config.CLASSES
    audio_dim: int = Config.AUDIO_DIM
    visual_dim: int = Config.VISUAL_DIM
    dominance: float = Config.DOMINANCE
    noise_scale: float = Config.NOISE_SCALE
    density: float = Config.EVENT_DENSITY
    seed: int = 0

    def validate(self):
        checks = [
            validation_manager.validate_dominance(self.dominance),
            validation_manager.validate_positive("density", self.density),
            validation_manager.validate_non_negative("noise_scale", self.noise_scale),
        ]
        for name in ("videos", "snippets", "classes", "audio_dim", "visual_dim"):
            checks.append(validation_manager.validate_positive(name, getattr(self, name)))
        errors = [msg for ok, msg in checks if not ok]
        if errors:
            raise UsageError("; ".join(errors))

    @property
    def amplitudes(self) -> Tuple[float, float]:
        return 1.0 + self.dominance, 1.0 - self.dominance

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SynthConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass
class Dataset:
    """Features are float32-representable float64 arrays; labels and truth are int8"""

    config: SynthConfig
    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    audio_truth: np.ndarray
    visual_truth: np.ndarray
    video_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.video_ids is None:
            self.video_ids = np.arange(self.audio.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return int(self.audio.shape[0])

    @property
    def audiovisual_truth(self) -> np.ndarray:
        return (self.audio_truth & self.visual_truth).astype(np.int8)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            config=self.config,
            audio=self.audio[idx],
            visual=self.visual[idx],
            labels=self.labels[idx],
            audio_truth=self.audio_truth[idx],
            visual_truth=self.visual_truth[idx],
            video_ids=self.video_ids[idx],
        )

    def batch(self, indices: Optional[Sequence[int]] = None) -> VideoBatch:
        part = self if indices is None else self.subset(indices)
        return VideoBatch(
            audio=part.audio.astype(np.float64),
            visual=part.visual.astype(np.float64),
            labels=part.labels.astype(np.float64),
            audio_truth=part.audio_truth.astype(np.int8),
            visual_truth=part.visual_truth.astype(np.int8),
        )


def class_prototypes(cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Unit-norm prototypes, C x D_a and C x D_v"""
    rng = np.random.default_rng([cfg.seed, PROTOTYPE_STREAM])
    protos = []
    for dim in (cfg.audio_dim, cfg.visual_dim):
        raw = rng.normal(size=(cfg.classes, dim))
        protos.append(raw / np.linalg.norm(raw, axis=1, keepdims=True))
    return protos[0], protos[1]


def _draw_events(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, np.ndarray]:
    T, C = cfg.snippets, cfg.classes
    audio_truth = np.zeros((T, C), dtype=np.int8)
    visual_truth = np.zeros((T, C), dtype=np.int8)
    longest = max(2, T // 2)
    for _ in range(max(1, int(rng.poisson(cfg.density)))):
        c = int(rng.integers(C))
        length = min(T, int(rng.integers(2, longest + 1)))
        start = int(rng.integers(0, T - length + 1))
        visibility = int(rng.choice(3, p=VISIBILITY_PROBS))
        if visibility in (0, 2):
            audio_truth[start:start + length, c] = 1
        if visibility in (1, 2):
            visual_truth[start:start + length, c] = 1
    return audio_truth, visual_truth


def _video(index: int, cfg: SynthConfig, proto_a: np.ndarray, proto_v: np.ndarray):
    rng = np.random.default_rng([cfg.seed, VIDEO_STREAM, index])
    audio_truth, visual_truth = _draw_events(rng, cfg)
    amp_a, amp_v = cfg.amplitudes
    noise_a = rng.normal(size=(cfg.snippets, cfg.audio_dim))
    noise_v = rng.normal(size=(cfg.snippets, cfg.visual_dim))
    audio = amp_a * (audio_truth @ proto_a) + cfg.noise_scale * noise_a
    visual = amp_v * (visual_truth @ proto_v) + cfg.noise_scale * noise_v
    return audio, visual, audio_truth, visual_truth


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic given cfg.seed; each video draws from its own stream"""
    cfg.validate()
    proto_a, proto_v = class_prototypes(cfg)
    rows = [_video(i, cfg, proto_a, proto_v) for i in range(cfg.videos)]

    # float32 storage precision from the start so save/load is exact
    audio = np.stack([r[0] for r in rows]).astype(np.float32).astype(np.float64)
    visual = np.stack([r[1] for r in rows]).astype(np.float32).astype(np.float64)
    audio_truth = np.stack([r[2] for r in rows])
    visual_truth = np.stack([r[3] for r in rows])
    labels = np.logical_or(audio_truth.any(axis=1), visual_truth.any(axis=1)).astype(np.int8)

    positive_rate = float(labels.mean())
    if positive_rate > SATURATION_LIMIT:
        raise GenerationError(
            f"event density {cfg.density} saturates the labels ({positive_rate:.2%} positive); lower it"
        )

    logger.info(f"Generated {cfg.videos} videos (T={cfg.snippets}, C={cfg.classes}, "
                f"dominance={cfg.dominance}, positive rate {positive_rate:.3f})")
    return Dataset(cfg, audio, visual, labels, audio_truth, visual_truth)


def split_sizes(total: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    n_train = int(round(fractions[0] * total))
    n_val = int(round(fractions[1] * total))
    return n_train, n_val, total - n_train - n_val


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: Optional[int] = None) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/val/test partition from a seeded permutation"""
    ok, msg = validation_manager.validate_fractions(list(fractions))
    if not ok:
        raise UsageError(msg)
    sizes = split_sizes(len(dataset), fractions)
    if min(sizes) <= 0:
        raise UsageError(f"split sizes {sizes} leave an empty partition")
    seed = dataset.config.seed if seed is None else seed
    order = np.random.default_rng([seed, SPLIT_STREAM]).permutation(len(dataset))
    bounds = np.cumsum(sizes)[:-1]
    train_idx, val_idx, test_idx = np.split(order, bounds)
    return (dataset.subset(np.sort(train_idx)),
            dataset.subset(np.sort(val_idx)),
            dataset.subset(np.sort(test_idx)))


def _record_floats(cfg: SynthConfig) -> int:
    return cfg.snippets * (cfg.audio_dim + cfg.visual_dim)


def save(dataset: Dataset, path: str):
    """Write the three dataset files into directory `path`"""
    cfg = dataset.config
    os.makedirs(path, exist_ok=True)
    payload = np.concatenate([dataset.audio, dataset.visual], axis=2).astype("<f4")
    record_bytes = _record_floats(cfg) * 4

    manifest = {
        "format_version": FORMAT_VERSION,
        "videos": len(dataset),
        "snippets": cfg.snippets,
        "classes": cfg.classes,
        "audio_dim": cfg.audio_dim,
        "visual_dim": cfg.visual_dim,
        "seed": cfg.seed,
        "dominance": cfg.dominance,
        "noise_scale": cfg.noise_scale,
        "density": cfg.density,
        "generated_videos": cfg.videos,
        "video_ids": dataset.video_ids.tolist(),
        "layout": {
            "dtype": "<f4",
            "record_bytes": record_bytes,
            "snippet_bytes": (cfg.audio_dim + cfg.visual_dim) * 4,
            "audio_offset": 0,
            "visual_offset": cfg.audio_dim * 4,
            "total_bytes": record_bytes * len(dataset),
        },
    }
    labels = {
        "labels": dataset.labels.tolist(),
        "audio_truth": dataset.audio_truth.tolist(),
        "visual_truth": dataset.visual_truth.tolist(),
    }
    with open(os.path.join(path, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(path, FEATURES_FILE), "wb") as fh:
        fh.write(payload.tobytes())
    with open(os.path.join(path, LABELS_FILE), "w", encoding="utf-8") as fh:
        json.dump(labels, fh)
    logger.debug(f"Dataset with {len(dataset)} videos written to {path}")


@retry(retry=retry_if_exception_type((TimeoutError, BlockingIOError, InterruptedError)),
       stop=stop_after_attempt(3), wait=wait_exponential(multiplier=0.1, max=2), reraise=True)
def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _read_json(path: str) -> Dict[str, Any]:
    raw = _read_bytes(path)
    try:
        return json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError(f"{os.path.basename(path)} is not UTF-8", e.start)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed {os.path.basename(path)}: {e.msg}", len(e.doc[:e.pos].encode("utf-8")))


def _int_array(values, name: str, shape: Tuple[int, ...]) -> np.ndarray:
    try:
        array = np.asarray(values, dtype=np.int8)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} is not a rectangular integer array")
    if array.shape != shape:
        raise ValidationError(f"{name} has shape {array.shape}, manifest declares {shape}")
    return array


def load(path: str) -> Dataset:
    manifest = _read_json(os.path.join(path, MANIFEST_FILE))
    try:
        cfg = SynthConfig(
            videos=int(manifest.get("generated_videos", manifest["videos"])),
            snippets=int(manifest["snippets"]),
            classes=int(manifest["classes"]),
            audio_dim=int(manifest["audio_dim"]),
            visual_dim=int(manifest["visual_dim"]),
            dominance=float(manifest["dominance"]),
            noise_scale=float(manifest["noise_scale"]),
            density=float(manifest["density"]),
            seed=int(manifest["seed"]),
        )
        n = int(manifest["videos"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"manifest is missing or has a bad field: {e}")
    try:
        cfg.validate()
    except UsageError as e:
        raise ValidationError(f"manifest settings are invalid: {e}")
    if n < 0:
        raise ValidationError(f"manifest declares {n} videos")

    raw = _read_bytes(os.path.join(path, FEATURES_FILE))
    record_bytes = _record_floats(cfg) * 4
    if len(raw) % record_bytes:
        raise ParseError(f"{FEATURES_FILE} ends inside a video record", len(raw) - len(raw) % record_bytes)
    if len(raw) != n * record_bytes:
        raise ValidationError(
            f"{FEATURES_FILE} holds {len(raw) // record_bytes} videos, manifest declares {n}"
        )
    payload = np.frombuffer(raw, dtype="<f4").reshape(n, cfg.snippets, cfg.audio_dim + cfg.visual_dim)
    payload = payload.astype(np.float64)

    labels_doc = _read_json(os.path.join(path, LABELS_FILE))
    try:
        labels = _int_array(labels_doc["labels"], "labels", (n, cfg.classes))
        audio_truth = _int_array(labels_doc["audio_truth"], "audio_truth", (n, cfg.snippets, cfg.classes))
        visual_truth = _int_array(labels_doc["visual_truth"], "visual_truth", (n, cfg.snippets, cfg.classes))
    except KeyError as e:
        raise ValidationError(f"{LABELS_FILE} is missing {e}")

    video_ids = np.asarray(manifest.get("video_ids", list(range(n))), dtype=np.int64)
    return Dataset(
        config=cfg,
        audio=np.ascontiguousarray(payload[:, :, :cfg.audio_dim]),
        visual=np.ascontiguousarray(payload[:, :, cfg.audio_dim:]),
        labels=labels,
        audio_truth=audio_truth,
        visual_truth=visual_truth,
        video_ids=video_ids,
    )


def checksums(path: str) -> Dict[str, str]:
    """SHA-256 of every dataset file in `path`"""
    digests = {}
    for name in (MANIFEST_FILE, FEATURES_FILE, LABELS_FILE):
        digests[name] = hashlib.sha256(_read_bytes(os.path.join(path, name))).hexdigest()
    return digests


def linear_probe_accuracy(dataset: Dataset, modality: str, train_fraction: float = 0.5,
                          ridge: float = 1.0, threshold: float = 0.5) -> float:
    """
    Held-out snippet accuracy of a ridge-regression probe fitted on one modality's snippets.

    The first `train_fraction` of the videos fit the probe, the rest score it; a cell counts as
    correct when the thresholded probe output equals that modality's snippet truth.
    """
    if modality not in ("audio", "visual"):
        raise UsageError(f"unknown modality {modality!r}")
    features = dataset.audio if modality == "audio" else dataset.visual
    truth = dataset.audio_truth if modality == "audio" else dataset.visual_truth
    cut = int(round(train_fraction * len(dataset)))
    if cut <= 0 or cut >= len(dataset):
        raise UsageError(f"train fraction {train_fraction} leaves no videos on one side")

    def flat(x: np.ndarray) -> np.ndarray:
        return x.reshape(-1, x.shape[-1]).astype(np.float64)

    X_train = np.hstack([flat(features[:cut]), np.ones((cut * dataset.config.snippets, 1))])
    y_train = flat(truth[:cut])
    X_test = np.hstack([flat(features[cut:]), np.ones(((len(dataset) - cut) * dataset.config.snippets, 1))])
    y_test = flat(truth[cut:])

    gram = X_train.T @ X_train + ridge * np.eye(X_train.shape[1])
    W = np.linalg.solve(gram, X_train.T @ y_train)
    predictions = (X_test @ W) >= threshold
    return float(np.mean(predictions == y_test.astype(bool)))


def generate_splits(cfg: SynthConfig, sizes: Sequence[int], out_dir: str) -> Dict[str, Dataset]:
    """Generate sum(sizes) videos, partition them and save train/val/test subdirectories"""
    total = int(np.sum(sizes))
    if total != cfg.videos:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "videos": total})
    dataset = generate(cfg)
    fractions = [s / total for s in sizes]
    parts = dict(zip(("train", "val", "test"), split(dataset, fractions)))
    for name, part in parts.items():
        save(part, os.path.join(out_dir, name))
    return parts
