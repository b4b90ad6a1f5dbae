"""Oracle speech-teacher, multi-layer aggregation and frame alignment.

The oracle stands in for a frozen speech foundation model: a stack of fixed
random frame-local residual maps applied to clean audio. Deeper layers are
functions of shallower ones, so averaging the last ``k`` layers mixes
correlated but distinct views of the input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .numerics import instance_normalize


@dataclass(frozen=True)
class TeacherConfig:
    name: str = "teacher"
    num_layers: int = 4
    hidden_dim: int = 16
    last_k: int = 1
    frame_rate_ratio: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.last_k <= self.num_layers:
            raise ValueError(f"last_k must be in [1, {self.num_layers}], got {self.last_k}")
        if self.frame_rate_ratio < 1:
            raise ValueError("frame_rate_ratio must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")

    def to_dict(self):
        return asdict(self)


def _oracle_maps(cfg: TeacherConfig, in_dim, seed):
    rng = np.random.default_rng([seed, in_dim, cfg.hidden_dim, cfg.num_layers])
    maps = []
    d = in_dim
    for _ in range(cfg.num_layers):
        A = rng.standard_normal((d, cfg.hidden_dim)) * (1.5 / np.sqrt(d))
        b = 0.1 * rng.standard_normal(cfg.hidden_dim)
        maps.append((A, b))
        d = cfg.hidden_dim
    return maps


def oracle_forward(clean_audio, cfg: TeacherConfig, seed=None):
    """All ``L`` layer outputs for one utterance, each ``rT x D_h``.

    Frames are upsampled by duplication before the first map; every map acts
    on one frame at a time.
    """
    seed = cfg.seed if seed is None else seed
    x = np.asarray(clean_audio, dtype=np.float64)
    x = np.repeat(x, cfg.frame_rate_ratio, axis=0)
    layers = []
    h = None
    for i, (A, b) in enumerate(_oracle_maps(cfg, x.shape[1], seed)):
        if i == 0:
            h = np.tanh(x @ A + b)
        else:
            h = h + np.tanh(h @ A + b)
        layers.append(h)
    return layers


def aggregate_layers(layers):
    """Mean of the instance-normalized layers."""
    if len(layers) == 0:
        raise ValueError("aggregate_layers needs at least one layer")
    shape = np.shape(layers[0])
    if any(np.shape(l) != shape for l in layers):
        raise ValueError("all layers must share one shape")
    return sum(instance_normalize(l) for l in layers) / len(layers)


class FrameMismatchError(ValueError):
    pass


def align_frames(teacher, student_T, r):
    """Group ``r`` consecutive teacher frames per student frame.

    Returns ``student_T x (r * D_h)``; row ``t`` holds teacher frames
    ``r*t .. r*t + r - 1`` side by side. Trailing surplus frames are dropped.
    """
    teacher = np.asarray(teacher)
    need = r * student_T
    if teacher.shape[0] < need:
        raise FrameMismatchError(
            f"teacher has {teacher.shape[0]} frames, need {need} for {student_T} student frames at ratio {r}"
        )
    return teacher[:need].reshape(student_T, r * teacher.shape[1])


@dataclass
class TeacherBank:
    config: TeacherConfig
    reps: dict = field(default_factory=dict)
    layers: dict | None = None

    def targets(self, utt_id, student_T):
        return align_frames(self.reps[utt_id], student_T, self.config.frame_rate_ratio)

    def frames(self):
        """All stored teacher frames stacked, in utterance-id order."""
        return np.concatenate([self.reps[k] for k in sorted(self.reps)], axis=0)

    def with_last_k(self, k):
        """Re-aggregate from stored per-layer outputs with a different ``k``."""
        if self.layers is None:
            raise ValueError("bank was built without per-layer outputs (use store_layers)")
        cfg = TeacherConfig(**{**self.config.to_dict(), "last_k": k})
        reps = {uid: aggregate_layers(ls[-k:]) for uid, ls in self.layers.items()}
        return TeacherBank(cfg, reps, self.layers)


def build_bank(utterances, cfg: TeacherConfig, store_layers=False):
    reps, per_layer = {}, {} if store_layers else None
    for u in utterances:
        layers = oracle_forward(u.clean_audio, cfg)
        reps[u.id] = aggregate_layers(layers[-cfg.last_k:])
        if store_layers:
            per_layer[u.id] = layers
    return TeacherBank(cfg, reps, per_layer)


BANK_CONFIG = "teacher.json"


def save_bank(bank: TeacherBank, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"config": bank.config.to_dict(), "store_layers": bank.layers is not None, "ids": sorted(bank.reps)}
    (path / BANK_CONFIG).write_text(json.dumps(meta, indent=2) + "\n")
    for uid in sorted(bank.reps):
        tensors = [bank.reps[uid]]
        if bank.layers is not None:
            tensors += list(bank.layers[uid])
        container.write_tensors(path / f"{uid}.avkd", tensors)


def load_bank(path) -> TeacherBank:
    path = Path(path)
    meta = json.loads((path / BANK_CONFIG).read_text())
    cfg = TeacherConfig(**meta["config"])
    store_layers = meta["store_layers"]
    reps, layers = {}, {} if store_layers else None
    for uid in meta["ids"]:
        tensors = container.read_tensors(path / f"{uid}.avkd")
        expected = 1 + (cfg.num_layers if store_layers else 0)
        if len(tensors) != expected:
            raise container.ShapeMismatchError(f"{uid}: expected {expected} tensors, found {len(tensors)}")
        for t in tensors:
            if t.shape[1] != cfg.hidden_dim or t.shape[0] % cfg.frame_rate_ratio:
                raise container.ShapeMismatchError(
                    f"{uid}: tensor shape {t.shape} incompatible with D_h={cfg.hidden_dim}, r={cfg.frame_rate_ratio}"
                )
        reps[uid] = tensors[0]
        if store_layers:
            layers[uid] = tensors[1:]
    return TeacherBank(cfg, reps, layers)
