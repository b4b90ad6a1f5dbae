"""Representation probes: per-unit mean hidden states, unit distance
matrices, the audio/video gap, and embedding export for external plotting.

Layer ``0`` is the projected encoder input and layer ``i`` the output of
transformer block ``i``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .student import AUDIO_ONLY, MODES, VIDEO_ONLY, StudentModel, _drop


class UnknownLayerError(ValueError):
    pass


class MissingUnitsError(ValueError):
    """Some units have no frames in a table; ``missing`` lists them."""

    def __init__(self, missing, what="table"):
        self.missing = list(missing)
        super().__init__(f"{what} has no frames for units {self.missing}")


class EmptyExportError(ValueError):
    pass


def unit_name(u):
    return f"u{u:02d}"


@dataclass
class UnitRepresentationTable:
    """Per-unit sums and frame counts of hidden states, by layer."""

    mode: str
    num_units: int
    sums: dict = field(default_factory=dict)
    counts: np.ndarray = None

    @property
    def layers(self):
        return sorted(self.sums)

    @property
    def present(self):
        return self.counts > 0

    @property
    def absent_units(self):
        return [int(u) for u in np.flatnonzero(self.counts == 0)]

    def means(self, layer):
        """``U x D`` unit means; rows of absent units are NaN."""
        if layer not in self.sums:
            raise UnknownLayerError(f"layer {layer} not collected (have {self.layers})")
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.sums[layer] / self.counts[:, None]

    def is_empty(self):
        return not self.sums or not self.present.any()


def _check_layers(model, layers):
    n = model.config.num_blocks
    layers = sorted({int(l) for l in layers})
    bad = [l for l in layers if not 0 <= l <= n]
    if bad:
        raise UnknownLayerError(f"layers {bad} out of range; valid layers are 0..{n}")
    return layers


def _hidden_states(model: StudentModel, utt, mode):
    # frontend + encoder directly: no masking, no noise, and no backward cache
    F_a, F_v, _ = model.frontend_forward(utt.clean_audio, utt.video)
    F_a, F_v = _drop(F_a, F_v, mode)
    _, hidden, _ = model.encoder_forward(F_a, F_v)
    return hidden


def collect_unit_representations(model: StudentModel, corpus, mode, layers, num_units=None):
    """Average hidden states per ground-truth unit at each requested layer."""
    if mode not in MODES:
        raise ValueError(f"unknown modality mode {mode!r}")
    layers = _check_layers(model, layers)
    if num_units is None:
        num_units = 1 + max((int(u.unit_labels.max()) for u in corpus), default=-1)
    D = model.config.encoder_dim
    table = UnitRepresentationTable(mode, num_units, {l: np.zeros((num_units, D)) for l in layers},
                                    np.zeros(num_units, dtype=np.int64))
    for utt in corpus:
        hidden = _hidden_states(model, utt, mode)
        labels = np.asarray(utt.unit_labels, dtype=np.int64)
        for l in layers:
            np.add.at(table.sums[l], labels, hidden[l])
        table.counts += np.bincount(labels, minlength=num_units)
    return table


@dataclass
class FrameStates:
    """Raw per-frame hidden states with their provenance."""

    mode: str
    states: dict
    units: np.ndarray
    utt_ids: list
    frame_index: np.ndarray


def collect_frame_states(model: StudentModel, corpus, mode, layers):
    layers = _check_layers(model, layers)
    states = {l: [] for l in layers}
    units, ids, idx = [], [], []
    for utt in corpus:
        hidden = _hidden_states(model, utt, mode)
        for l in layers:
            states[l].append(hidden[l])
        units.append(np.asarray(utt.unit_labels))
        ids += [utt.id] * utt.num_frames
        idx.append(np.arange(utt.num_frames))
    D = model.config.encoder_dim
    return FrameStates(
        mode,
        {l: np.concatenate(v) if v else np.zeros((0, D)) for l, v in states.items()},
        np.concatenate(units) if units else np.zeros(0, dtype=np.int64),
        ids,
        np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64),
    )


def _pairwise(A, B):
    return np.sqrt(np.maximum(((A[:, None, :] - B[None]) ** 2).sum(-1), 0.0))


def distance_matrix(table: UnitRepresentationTable, layer):
    """Euclidean distances between unit means (``U x U``)."""
    means = table.means(layer)
    if table.absent_units:
        raise MissingUnitsError(table.absent_units, f"{table.mode} table")
    D = _pairwise(means, means)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def cross_modal_gap(audio: UnitRepresentationTable, video: UnitRepresentationTable, layer):
    """Same-unit audio/video distance relative to different-unit distance.

    Mean of ``|a_u - v_u|`` over units divided by the mean of ``|a_i - v_j|``
    over ordered pairs ``i != j``. Values below 1 mean a unit's audio and
    video representations are closer to each other than to other units.
    """
    if audio.mode != AUDIO_ONLY or video.mode != VIDEO_ONLY:
        raise ValueError(f"need an {AUDIO_ONLY!r} and a {VIDEO_ONLY!r} table, got {audio.mode!r}, {video.mode!r}")
    if audio.num_units != video.num_units:
        raise ValueError("tables cover different unit inventories")
    A, V = audio.means(layer), video.means(layer)
    missing = sorted(set(audio.absent_units) | set(video.absent_units))
    if missing:
        raise MissingUnitsError(missing, "audio/video tables")
    U = A.shape[0]
    if U < 2:
        raise ValueError("the gap needs at least two units")
    C = _pairwise(A, V)
    same = np.diag(C).mean()
    other = (C.sum() - np.trace(C)) / (U * (U - 1))
    if other == 0:
        return 0.0 if same == 0 else float("inf")
    return float(same / other)


def write_distance_csv(D, path, names=None):
    """Square matrix with unit names as header row and first column."""
    names = names or [unit_name(u) for u in range(D.shape[0])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([""] + names)
        for name, row in zip(names, D):
            w.writerow([name] + [repr(float(x)) for x in row])


MANIFEST_SUFFIX = ".csv"


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def export_embeddings(source, path):
    """Write embeddings as one stacked container tensor plus a CSV manifest.

    ``source`` is a :class:`UnitRepresentationTable`, a :class:`FrameStates`
    or a list of either. Unit tables contribute one row per present unit and
    layer; frame states one row per frame and layer. The manifest sits next
    to the container at ``<path>.csv``. Returns the number of rows.
    """
    items = source if isinstance(source, (list, tuple)) else [source]
    rows, meta = [], []
    for item in items:
        if isinstance(item, UnitRepresentationTable):
            if item.is_empty():
                continue
            for l in item.layers:
                means = item.means(l)
                for u in np.flatnonzero(item.present):
                    rows.append(means[u])
                    meta.append((l, item.mode, unit_name(int(u)), int(item.counts[u]), "", ""))
        elif isinstance(item, FrameStates):
            for l, S in sorted(item.states.items()):
                for i in range(S.shape[0]):
                    rows.append(S[i])
                    meta.append((l, item.mode, unit_name(int(item.units[i])), 1, item.utt_ids[i], int(item.frame_index[i])))
        else:
            raise TypeError(f"cannot export {type(item).__name__}")
    if not rows:
        raise EmptyExportError("nothing to export: every table is empty")
    container.write_tensors(path, [np.stack(rows)])
    with open(manifest_path(path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "layer", "mode", "unit", "frames", "utterance", "frame"])
        for i, m in enumerate(meta):
            w.writerow((i,) + m)
    return len(rows)


def read_manifest(path):
    with open(manifest_path(path), newline="") as f:
        return list(csv.DictReader(f))


def layer_gaps(model, corpus, layers, num_units=None):
    """``{layer: gap}`` from fresh audio-only and video-only tables."""
    a = collect_unit_representations(model, corpus, AUDIO_ONLY, layers, num_units)
    v = collect_unit_representations(model, corpus, VIDEO_ONLY, layers, num_units)
    return {l: cross_modal_gap(a, v, l) for l in a.layers}
