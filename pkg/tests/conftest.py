import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from avkd.distill import DistillTask
from avkd.codebook import fit_kmeans
from avkd.pipeline import make_student
from avkd.student import StudentConfig
from avkd.synthdata import SynthCorpusConfig, generate_corpus
from avkd.teacher import TeacherConfig, build_bank

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the session
_CRITERIA = {}


def record_criterion(number, title, ok, detail):
    _CRITERIA[number] = (title, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")


SMALL_STUDENT = dict(audio_dim=6, video_dim=5, frontend_dim=8, encoder_dim=12, num_blocks=2,
                     num_heads=3, ff_dim=16, label_dim=5)
SMALL_TEACHERS = (
    TeacherConfig(name="wide", num_layers=6, hidden_dim=4, last_k=3, frame_rate_ratio=2, seed=11),
    TeacherConfig(name="narrow", num_layers=4, hidden_dim=3, last_k=1, frame_rate_ratio=1, seed=12),
)


@pytest.fixture(scope="session")
def small_corpus_cfg():
    return SynthCorpusConfig(num_utterances=12, frames_per_utterance=24, num_units=5, audio_dim=6,
                             video_dim=5, audio_noise_std=0.1, video_noise_std=0.3, unit_dwell=3.0, seed=4)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_cfg):
    return generate_corpus(small_corpus_cfg)


@pytest.fixture(scope="session")
def small_tasks(small_corpus):
    tasks = []
    for i, t in enumerate(SMALL_TEACHERS):
        bank = build_bank(small_corpus, t)
        tasks.append(DistillTask(t.name, bank, fit_kmeans(bank.frames(), 6, seed=i, n_init=2), 0.1))
    return tasks


@pytest.fixture
def small_model(small_tasks):
    return make_student(StudentConfig(**SMALL_STUDENT, seed=1), small_tasks)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
