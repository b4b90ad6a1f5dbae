"""Run configuration and helpers that wire corpus, teachers, codebooks and
student together."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .codebook import fit_kmeans, load_codebook
from .distill import DistillTask, TrainConfig
from .student import HeadSpec, StudentConfig, StudentModel
from .synthdata import SynthCorpusConfig, generate_utterance, unit_prototypes
from .teacher import TeacherConfig, build_bank, load_bank


def default_teachers():
    """Two oracle teachers shaped like a self-supervised / supervised pair."""
    return [
        TeacherConfig(name="ssl", num_layers=24, hidden_dim=16, last_k=8, frame_rate_ratio=2, seed=101),
        TeacherConfig(name="asr", num_layers=16, hidden_dim=12, last_k=1, frame_rate_ratio=1, seed=202),
    ]


@dataclass
class RunConfig:
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    teachers: list = field(default_factory=default_teachers)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_clusters: int = 64
    kmeans_seed: int = 0
    kmeans_restarts: int = 3
    finetune_utterances: int = 5
    heldout_utterances: int = 40
    paths: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "corpus": self.corpus.to_dict(),
            "teachers": [t.to_dict() for t in self.teachers],
            "student": self.student.to_dict(),
            "train": self.train.to_dict(),
            "num_clusters": self.num_clusters,
            "kmeans_seed": self.kmeans_seed,
            "kmeans_restarts": self.kmeans_restarts,
            "finetune_utterances": self.finetune_utterances,
            "heldout_utterances": self.heldout_utterances,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        train = dict(d.pop("train", {}))
        if "snr_range" in train:
            train["snr_range"] = tuple(train["snr_range"])
        return cls(
            corpus=SynthCorpusConfig(**d.pop("corpus", {})),
            teachers=[TeacherConfig(**t) for t in d.pop("teachers")] if "teachers" in d else default_teachers(),
            student=StudentConfig(**d.pop("student", {})),
            train=TrainConfig(**train),
            **d,
        )

    def with_seed(self, seed):
        """Copy with every run-level seed set to ``seed``.

        Teacher seeds are left alone: they pick which frozen oracle is being
        distilled, not a random choice made by the run.
        """
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            student=replace(self.student, seed=seed),
            train=replace(self.train, seed=seed),
            kmeans_seed=seed,
            teachers=list(self.teachers),
            paths=dict(self.paths),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(self.to_json())


def heldout_corpus(cfg: SynthCorpusConfig, n):
    """Utterances from the same unit inventory, indexed after the training corpus."""
    protos = unit_prototypes(cfg)
    return [generate_utterance(cfg, cfg.num_utterances + i, protos) for i in range(n)]


def build_tasks(corpus, teachers, tau_prime, num_clusters, kmeans_seed=0, restarts=3):
    """Bank + codebook per teacher, codebook fit on all pooled teacher frames."""
    tasks = []
    for i, tcfg in enumerate(teachers):
        bank = build_bank(corpus, tcfg)
        cb = fit_kmeans(bank.frames(), num_clusters, seed=kmeans_seed + i, n_init=restarts)
        tasks.append(DistillTask(tcfg.name, bank, cb, tau_prime))
    return tasks


def tasks_from_files(bank_dirs, codebook_paths, tau_prime):
    if len(bank_dirs) != len(codebook_paths):
        raise ValueError(f"{len(bank_dirs)} teacher banks but {len(codebook_paths)} codebooks")
    tasks = []
    for bdir, cpath in zip(bank_dirs, codebook_paths):
        bank = load_bank(bdir)
        tasks.append(DistillTask(bank.config.name, bank, load_codebook(cpath), tau_prime))
    return tasks


def make_student(cfg: StudentConfig, tasks):
    heads = [HeadSpec(t.name, t.bank.config.hidden_dim, t.ratio, t.codebook.num_clusters) for t in tasks]
    return StudentModel(cfg, heads)
