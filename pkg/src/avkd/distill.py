"""Distillation objectives, Aligned-MTL gradient balancing and the
pretraining / finetuning loops.

Losses take the student output ``O`` (``T x D_o``) and return
``(value, dO, head_grads)``; gradients w.r.t. ``O`` are what Aligned-MTL
balances before a single backward pass through the encoder.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codebook import Codebook, hard_labels, soft_labels
from .numerics import log_softmax, softmax, symmetric_eig
from .student import BOTH, MaskSpec, StudentModel, draw_modality_mode, sample_mask
from .synthdata import mix_noise
from .teacher import TeacherBank

ALL, MASKED_ONLY = "all", "masked"
LOSS_VARIANTS = {
    "reg": ("reg",),
    "kld": ("kld",),
    "ce": ("ce",),
    "reg+kld": ("reg", "kld"),
    "reg+ce": ("reg", "ce"),
}


class EmptyRegionError(ValueError):
    """The selected KD region contains no frames."""


class MissingLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.1
    tau_prime: float = 0.1
    p_noise: float = 0.25
    snr_range: tuple = (-10.0, 10.0)
    kd_region: str = ALL
    losses: str = "reg+kld"
    lam: float = 0.1
    n_freeze: int = 0
    steps: int = 2000
    lr: float = 0.1
    clip_norm: float | None = None
    finetune_steps: int = 100
    finetune_lr: float = 0.05
    finetune_dropout: bool = True
    eigen_floor: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0 or self.tau_prime <= 0:
            raise ValueError("tau and tau_prime must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.kd_region not in (ALL, MASKED_ONLY):
            raise ValueError(f"kd_region must be {ALL!r} or {MASKED_ONLY!r}")
        if self.losses not in LOSS_VARIANTS:
            raise ValueError(f"losses must be one of {sorted(LOSS_VARIANTS)}")
        if not 0.0 <= self.p_noise <= 1.0:
            raise ValueError("p_noise must be in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["snr_range"] = list(self.snr_range)
        return d


# --- losses ---------------------------------------------------------------

def _region_rows(T, region):
    rows = np.arange(T) if region is None else np.unique(np.asarray(region, dtype=np.int64))
    if rows.size == 0:
        raise EmptyRegionError("KD region selects no frames")
    return rows


def loss_reg(O, W, target, region=None):
    """Mean squared distance between projected outputs and aligned teacher frames.

    ``target`` is ``T x (r * D_h)`` (see :func:`avkd.teacher.align_frames`),
    so both teacher frames of a pair contribute to a student frame's term.
    """
    rows = _region_rows(O.shape[0], region)
    n = rows.size
    Os = O[rows]
    diff = Os @ W - target[rows]
    value = float((diff**2).sum() / n)
    dpred = 2.0 * diff / n
    dO = np.zeros_like(O)
    dO[rows] = dpred @ W.T
    return value, dO, {"reg": Os.T @ dpred}


def _cosine_logits(Z, E):
    zn = np.linalg.norm(Z, axis=-1, keepdims=True)
    en = np.linalg.norm(E, axis=-1, keepdims=True)
    Zh = Z / np.maximum(zn, 1e-12)
    Eh = E / np.maximum(en, 1e-12)
    return Zh @ Eh.T, (Zh, Eh, zn, en)


def _cosine_back(dcos, cache):
    Zh, Eh, zn, en = cache
    dZh = dcos @ Eh
    dEh = dcos.T @ Zh
    dZ = (dZh - (dZh * Zh).sum(-1, keepdims=True) * Zh) / np.maximum(zn, 1e-12)
    dE = (dEh - (dEh * Eh).sum(-1, keepdims=True) * Eh) / np.maximum(en, 1e-12)
    return dZ, dE


def _label_loss(O, U, E, targets, tau, region):
    """KL(target || softmax(cos(U o, E) / tau)) summed over sub-frames, averaged over frames.

    ``targets`` is ``T x r x N``; the label head emits ``r`` embeddings per
    student frame, one per associated teacher frame.
    """
    rows = _region_rows(O.shape[0], region)
    n = rows.size
    T, r, N = targets.shape
    De = E.shape[1]
    Os = O[rows]
    Z = (Os @ U).reshape(n * r, De)
    q = targets[rows].reshape(n * r, N)
    cos, ccache = _cosine_logits(Z, E)
    logp = log_softmax(cos, tau)
    logq = np.log(np.maximum(q, 1e-12))
    value = float(np.where(q > 0, q * (logq - logp), 0.0).sum() / n)
    p = np.exp(logp)
    # exact for target rows that do not sum to one
    dcos = (p * q.sum(-1, keepdims=True) - q) / (tau * n)
    dZ, dE = _cosine_back(dcos, ccache)
    dZ = dZ.reshape(n, r * De)
    dO = np.zeros_like(O)
    dO[rows] = dZ @ U.T
    return value, dO, {"label": Os.T @ dZ, "codes": dE}


def loss_kld(O, U, E, soft_targets, tau, region=None):
    return _label_loss(O, U, E, soft_targets, tau, region)


def loss_ce_hard(O, U, E, hard_targets, tau, region=None):
    """Cross-entropy of the same cosine-softmax prediction against nearest-centroid labels."""
    hard_targets = np.asarray(hard_targets, dtype=np.int64)
    if hard_targets.ndim == 1:
        hard_targets = hard_targets[:, None]
    N = E.shape[0]
    onehot = np.zeros(hard_targets.shape + (N,))
    np.put_along_axis(onehot, hard_targets[..., None], 1.0, axis=-1)
    return _label_loss(O, U, E, onehot, tau, region)


def predictions(O, U, E, r, tau):
    """Cosine-softmax predictions ``T x r x N`` of one label head."""
    Z = (O @ U).reshape(O.shape[0] * r, -1)
    cos, _ = _cosine_logits(Z, E)
    return softmax(cos, tau).reshape(O.shape[0], r, E.shape[0])


# --- Aligned-MTL ----------------------------------------------------------

def aligned_mtl_aggregate(task_gradients, eigen_floor=1e-8):
    """Balance task gradients so their system has condition number one.

    With ``G`` holding the flattened gradients as columns and
    ``G^T G = V diag(s^2) V^T``, the aligned system is
    ``s_min * G V diag(1/s) V^T``; its columns are summed. Eigen-directions
    with eigenvalue at most ``eigen_floor * max_eigenvalue`` are dropped.

    Returns ``(aggregate, alpha)`` with ``aggregate == G @ alpha``.
    """
    shape = np.shape(task_gradients[0])
    G = np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g in task_gradients], axis=1)
    K = G.shape[1]
    lam, V = symmetric_eig(G.T @ G)
    if lam[0] <= 0:
        return np.zeros(shape), np.zeros(K)
    keep = lam > eigen_floor * lam[0]
    sigma = np.sqrt(lam[keep])
    Vk = V[:, keep]
    s_min = sigma.min()
    alpha = Vk @ ((s_min / sigma) * (Vk.T @ np.ones(K)))
    return (G @ alpha).reshape(shape), alpha


def aligned_system(task_gradients, eigen_floor=1e-8):
    """The aligned gradient columns themselves (``D x K``), for inspection."""
    G = np.stack([np.asarray(g, dtype=np.float64).reshape(-1) for g in task_gradients], axis=1)
    lam, V = symmetric_eig(G.T @ G)
    if lam[0] <= 0:
        return np.zeros_like(G)
    keep = lam > eigen_floor * lam[0]
    sigma = np.sqrt(lam[keep])
    Vk = V[:, keep]
    return sigma.min() * (G @ Vk) @ np.diag(1.0 / sigma) @ Vk.T


# --- distillation targets -------------------------------------------------

@dataclass
class DistillTask:
    """One teacher: its bank, codebook and cached per-utterance targets."""

    name: str
    bank: TeacherBank
    codebook: Codebook
    tau_prime: float
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def ratio(self):
        return self.bank.config.frame_rate_ratio

    def targets(self, utt_id, T):
        hit = self._cache.get(utt_id)
        if hit is None or hit[0].shape[0] != T:
            reg = self.bank.targets(utt_id, T)
            frames = reg.reshape(T * self.ratio, -1)
            soft = soft_labels(frames, self.codebook, self.tau_prime).reshape(T, self.ratio, -1)
            hard = hard_labels(frames, self.codebook).reshape(T, self.ratio)
            hit = (reg, soft, hard)
            self._cache[utt_id] = hit
        return hit


def kd_losses(model: StudentModel, O, tasks, kinds, tau, utt_id, region=None):
    """Every requested (teacher, loss kind) term for one utterance.

    Returns a list of ``(key, value, dO, head_grads)`` with head-grad keys
    already qualified (``head{j}.reg`` etc.).
    """
    out = []
    T = O.shape[0]
    for j, task in enumerate(tasks):
        W, U, E = model.head_params(j)
        reg_t, soft_t, hard_t = task.targets(utt_id, T)
        for kind in kinds:
            if kind == "reg":
                v, dO, hg = loss_reg(O, W, reg_t, region)
            elif kind == "kld":
                v, dO, hg = loss_kld(O, U, E, soft_t, tau, region)
            elif kind == "ce":
                v, dO, hg = loss_ce_hard(O, U, E, hard_t, tau, region)
            else:
                raise ValueError(f"unknown loss kind {kind!r}")
            out.append((f"{task.name}.{kind}", v, dO, {f"head{j}.{k}": g for k, g in hg.items()}))
    return out


# --- training -------------------------------------------------------------

@dataclass
class LossReport:
    step: int
    utt_id: str
    mode: str
    snr_db: float
    components: dict
    total: float
    weights: dict
    grad_norm: float = math.nan

    def row(self):
        return ([self.step, self.utt_id, self.mode, repr(self.snr_db)]
                + [repr(v) for v in self.components.values()]
                + [repr(self.total)]
                + [repr(v) for v in self.weights.values()]
                + [repr(self.grad_norm)])

    def header(self):
        return (["step", "utt", "mode", "snr_db"] + list(self.components) + ["total"]
                + [f"w.{k}" for k in self.weights] + ["grad_norm"])


def _noisy_audio(utt, cfg: TrainConfig, rng):
    if rng.random() < cfg.p_noise:
        lo, hi = cfg.snr_range
        snr = float(rng.uniform(lo, hi))
        return mix_noise(utt.clean_audio, snr, int(rng.integers(2**63))), snr
    return utt.clean_audio, math.inf


class DivergenceError(FloatingPointError):
    """Training produced non-finite losses or gradients."""


def clip_by_global_norm(grads, max_norm):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    return {k: g * (max_norm / norm) for k, g in grads.items()}, norm


def sgd_update(params, grads, lr, names=None):
    for k in (grads if names is None else names):
        if k in grads:
            params[k] -= lr * grads[k]


def pretrain_step(model: StudentModel, corpus, tasks, cfg: TrainConfig, step):
    """One distillation update on one utterance; returns the :class:`LossReport`."""
    rng = np.random.default_rng([cfg.seed, 0, step])
    utt = corpus[int(rng.integers(len(corpus)))]
    audio, snr = _noisy_audio(utt, cfg, rng)
    sc = model.config
    T = utt.num_frames
    masks = MaskSpec(
        sample_mask(T, sc.mask_prob_audio, sc.mask_span_audio, rng),
        sample_mask(T, sc.mask_prob_video, sc.mask_span_video, rng),
    )
    mode = draw_modality_mode(sc.modality_keep_both, sc.modality_audio_given_one, rng)
    O, _ = model.forward(audio, utt.video, masks, mode)
    region = None if cfg.kd_region == ALL else np.union1d(masks.audio, masks.video)
    terms = kd_losses(model, O, tasks, LOSS_VARIANTS[cfg.losses], cfg.tau, utt.id, region)
    if not all(math.isfinite(t[1]) for t in terms):
        raise DivergenceError(f"step {step}: non-finite loss {[t[1] for t in terms]}")
    dO, alpha = aligned_mtl_aggregate([t[2] for t in terms], cfg.eigen_floor)
    grads = model.backward(dO)
    for a, (_, _, _, hg) in zip(alpha, terms):
        for k, g in hg.items():
            grads[k] = grads.get(k, 0.0) + a * g
    grads, gnorm = clip_by_global_norm(grads, cfg.clip_norm)
    if not math.isfinite(gnorm):
        raise DivergenceError(f"step {step}: non-finite gradient")
    sgd_update(model.params, grads, cfg.lr)
    comps = {t[0]: t[1] for t in terms}
    return LossReport(step, utt.id, mode, snr, comps, float(sum(comps.values())),
                      {t[0]: float(a) for t, a in zip(terms, alpha)}, gnorm)


class MetricsWriter:
    """One CSV row per step; the header is written with the first row."""

    def __init__(self, path=None):
        self._f = open(path, "w", newline="") if path else io.StringIO()
        self._w = csv.writer(self._f, lineterminator="\n")
        self._started = False

    def write(self, report):
        if not self._started:
            self._w.writerow(report.header())
            self._started = True
        self._w.writerow(report.row())

    def close(self):
        self._f.close()


def pretrain(model, corpus, tasks, cfg: TrainConfig, metrics=None, on_step=None):
    reports = []
    for step in range(cfg.steps):
        rep = pretrain_step(model, corpus, tasks, cfg, step)
        reports.append(rep)
        if metrics is not None:
            metrics.write(rep)
        if on_step is not None:
            on_step(model, rep)
    return reports


# --- finetuning -----------------------------------------------------------

def init_classifier(encoder_dim, num_units, seed):
    rng = np.random.default_rng([seed, 11])
    return {"cls.w": rng.standard_normal((encoder_dim, num_units)) / np.sqrt(encoder_dim),
            "cls.b": np.zeros(num_units)}


def frame_cross_entropy(O, classifier, labels):
    logits = O @ classifier["cls.w"] + classifier["cls.b"]
    logp = log_softmax(logits)
    T = O.shape[0]
    value = float(-logp[np.arange(T), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(T), labels] -= 1.0
    dlogits /= T
    return value, dlogits @ classifier["cls.w"].T, {"cls.w": O.T @ dlogits, "cls.b": dlogits.sum(0)}


def finetune_step(model: StudentModel, classifier, corpus, cfg: TrainConfig, step, tasks=None):
    """Supervised frame classification plus ``lam`` times the summed KD losses.

    The backbone is frozen while ``step < n_freeze``; the classifier and the
    KD heads always update. ``tasks=None`` (or ``lam == 0``) is plain
    supervised finetuning.
    """
    rng = np.random.default_rng([cfg.seed, 1, step])
    utt = corpus[int(rng.integers(len(corpus)))]
    if utt.unit_labels is None:
        raise MissingLabelsError(f"{utt.id} has no unit labels")
    audio, snr = _noisy_audio(utt, cfg, rng)
    sc = model.config
    mode = BOTH
    if cfg.finetune_dropout:
        mode = draw_modality_mode(sc.modality_keep_both, sc.modality_audio_given_one, rng)
    O, _ = model.forward(audio, utt.video, None, mode)
    primary, dO, cls_grads = frame_cross_entropy(O, classifier, utt.unit_labels)
    comps = {"primary": primary}
    head_grads = {}
    if tasks and cfg.lam > 0:
        for key, v, dOk, hg in kd_losses(model, O, tasks, LOSS_VARIANTS[cfg.losses], cfg.tau, utt.id):
            comps[key] = v
            dO = dO + cfg.lam * dOk
            for k, g in hg.items():
                head_grads[k] = cfg.lam * g
    sgd_update(classifier, cls_grads, cfg.finetune_lr)
    sgd_update(model.params, head_grads, cfg.finetune_lr)
    if step >= cfg.n_freeze:
        sgd_update(model.params, model.backward(dO), cfg.finetune_lr)
    total = primary + cfg.lam * sum(v for k, v in comps.items() if k != "primary")
    return LossReport(step, utt.id, mode, snr, comps, float(total), {})


def finetune(model, classifier, corpus, cfg: TrainConfig, tasks=None, metrics=None):
    reports = []
    for step in range(cfg.finetune_steps):
        rep = finetune_step(model, classifier, corpus, cfg, step, tasks)
        reports.append(rep)
        if metrics is not None:
            metrics.write(rep)
    return reports


def frame_accuracy(model, classifier, corpus, mode=BOTH, snr_db=math.inf, seed=0):
    """Frame classification accuracy without masking; noise is seeded per utterance."""
    correct = total = 0
    for i, utt in enumerate(corpus):
        audio = utt.clean_audio
        if not math.isinf(snr_db):
            audio = mix_noise(audio, snr_db, np.random.default_rng([seed, 2, i]).integers(2**63))
        O, _ = model.forward(audio, utt.video, None, mode)
        pred = (O @ classifier["cls.w"] + classifier["cls.b"]).argmax(1)
        correct += int((pred == utt.unit_labels).sum())
        total += utt.num_frames
    return correct / total
