"""Synthetic parallel audio-visual corpus with ground-truth latent units.

Each unit owns one audio prototype and one video prototype; a frame is the
prototype of its unit plus Gaussian jitter, so the two streams are tied
together only through the shared unit sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container


class DegenerateUtteranceError(ValueError):
    """Raised when noise is requested for a zero-energy signal."""


@dataclass(frozen=True)
class SynthCorpusConfig:
    num_utterances: int = 200
    frames_per_utterance: int = 100
    num_units: int = 20
    audio_dim: int = 16
    video_dim: int = 16
    audio_noise_std: float = 0.03
    video_noise_std: float = 0.6
    unit_dwell: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_utterances", "frames_per_utterance", "num_units", "audio_dim", "video_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.unit_dwell < 1:
            raise ValueError("unit_dwell must be >= 1")
        if self.audio_noise_std < 0 or self.video_noise_std < 0:
            raise ValueError("noise std must be nonnegative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Utterance:
    id: str
    clean_audio: np.ndarray
    video: np.ndarray
    unit_labels: np.ndarray

    def __post_init__(self):
        if self.clean_audio.shape[0] != self.video.shape[0]:
            raise ValueError(f"{self.id}: audio has {self.clean_audio.shape[0]} frames, video {self.video.shape[0]}")
        if self.unit_labels is not None and len(self.unit_labels) != self.clean_audio.shape[0]:
            raise ValueError(f"{self.id}: label count does not match frame count")

    @property
    def num_frames(self):
        return self.clean_audio.shape[0]


def unit_prototypes(cfg: SynthCorpusConfig):
    rng = np.random.default_rng([cfg.seed, 0])
    audio = rng.standard_normal((cfg.num_units, cfg.audio_dim))
    video = rng.standard_normal((cfg.num_units, cfg.video_dim))
    return audio, video


def sample_unit_sequence(num_frames, num_units, dwell, rng):
    """Run-length unit process: geometric run lengths with mean ``dwell``.

    Consecutive runs always switch to a different unit (when there is more
    than one), so run boundaries are observable in the labels.
    """
    labels = np.empty(num_frames, dtype=np.int64)
    t = 0
    unit = int(rng.integers(num_units))
    while t < num_frames:
        run = int(rng.geometric(1.0 / dwell))
        labels[t:t + run] = unit
        t += run
        if num_units > 1:
            step = int(rng.integers(1, num_units))
            unit = (unit + step) % num_units
    return labels


def generate_utterance(cfg: SynthCorpusConfig, index, prototypes=None):
    audio_proto, video_proto = prototypes if prototypes is not None else unit_prototypes(cfg)
    rng = np.random.default_rng([cfg.seed, 1, index])
    T = cfg.frames_per_utterance
    labels = sample_unit_sequence(T, cfg.num_units, cfg.unit_dwell, rng)
    audio = audio_proto[labels] + cfg.audio_noise_std * rng.standard_normal((T, cfg.audio_dim))
    video = video_proto[labels] + cfg.video_noise_std * rng.standard_normal((T, cfg.video_dim))
    return Utterance(id=f"utt{index:05d}", clean_audio=audio, video=video, unit_labels=labels)


def generate_corpus(cfg: SynthCorpusConfig):
    protos = unit_prototypes(cfg)
    return [generate_utterance(cfg, i, protos) for i in range(cfg.num_utterances)]


def mix_noise(clean, snr_db, seed):
    """Add Gaussian noise scaled so the realized SNR equals ``snr_db`` exactly.

    ``snr_db = inf`` returns an unchanged copy.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return clean.copy()
    signal_power = float(np.mean(clean**2))
    if signal_power == 0.0:
        raise DegenerateUtteranceError("cannot mix noise into a zero-energy signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    noise_power = float(np.mean(noise**2))
    scale = math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    return clean + scale * noise


def realized_snr_db(clean, noisy):
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * math.log10(float(np.mean(np.asarray(clean) ** 2)) / float(np.mean(noise**2)))


# --- on-disk corpus -------------------------------------------------------

MANIFEST = "manifest.tsv"
LABELS = "labels.txt"
CONFIG = "corpus.json"


def save_corpus(utterances, out_dir, cfg: SynthCorpusConfig | None = None):
    """Write ``utts/<id>.avkd`` ([audio, video]), a manifest and a label file.

    With ``cfg`` the generating config is stored as ``corpus.json``.
    """
    out_dir = Path(out_dir)
    (out_dir / "utts").mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out_dir / CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest, labels = [], []
    for u in utterances:
        rel = f"utts/{u.id}.avkd"
        container.write_tensors(out_dir / rel, [u.clean_audio, u.video])
        manifest.append(f"{u.id}\t{rel}\t{u.num_frames}\n")
        labels.append(u.id + " " + " ".join(str(int(x)) for x in u.unit_labels) + "\n")
    (out_dir / MANIFEST).write_text("".join(manifest))
    (out_dir / LABELS).write_text("".join(labels))


def load_corpus_config(corpus_dir) -> SynthCorpusConfig | None:
    path = Path(corpus_dir) / CONFIG
    return SynthCorpusConfig(**json.loads(path.read_text())) if path.exists() else None


def load_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    labels = {}
    for line in (corpus_dir / LABELS).read_text().splitlines():
        if line.strip():
            uid, *units = line.split()
            labels[uid] = np.array([int(x) for x in units], dtype=np.int64)
    out = []
    for line in (corpus_dir / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        uid, rel, T = line.split("\t")
        audio, video = container.read_tensors(corpus_dir / rel)
        if audio.shape[0] != int(T):
            raise container.ShapeMismatchError(f"{uid}: manifest says {T} frames, file has {audio.shape[0]}")
        out.append(Utterance(id=uid, clean_audio=audio, video=video, unit_labels=labels[uid]))
    return out
