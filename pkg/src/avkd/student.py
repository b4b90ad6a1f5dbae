"""Audio-visual student encoder with explicit backpropagation.

Data flow for one utterance::

    audio --AF--> F_a --mask(e_a)--> --drop?--+
                                              +-- concat --proj(+pos)--> blocks --> O
    video --VF--> F_v --mask(e_v)--> --drop?--+

Frontends are a dense layer followed by GELU. Blocks are post-LN
transformer blocks (self-attention, then a GELU feed-forward). Teacher
projection heads live in the same parameter dict (``head{j}.*``) but their
losses and gradients are computed in :mod:`avkd.distill`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import container
from .numerics import gelu

LN_EPS = 1e-5
HEAD_INIT = 0.1

BOTH, AUDIO_ONLY, VIDEO_ONLY = "both", "audio", "video"
MODES = (BOTH, AUDIO_ONLY, VIDEO_ONLY)


@dataclass(frozen=True)
class StudentConfig:
    audio_dim: int = 16
    video_dim: int = 16
    frontend_dim: int = 32
    encoder_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ff_dim: int = 128
    label_dim: int = 16
    mask_prob_audio: float = 0.8
    mask_prob_video: float = 0.3
    mask_span_audio: int = 10
    mask_span_video: int = 5
    modality_keep_both: float = 0.5
    modality_audio_given_one: float = 0.5
    pos_encoding: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("mask_prob_audio", "mask_prob_video", "modality_keep_both", "modality_audio_given_one"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("audio_dim", "video_dim", "frontend_dim", "encoder_dim", "num_blocks",
                     "num_heads", "ff_dim", "label_dim", "mask_span_audio", "mask_span_video"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.encoder_dim % self.num_heads:
            raise ValueError("encoder_dim must be divisible by num_heads")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class HeadSpec:
    """Shape of one teacher's projection heads."""

    name: str
    hidden_dim: int
    frame_rate_ratio: int
    num_clusters: int


@dataclass
class MaskSpec:
    audio: np.ndarray
    video: np.ndarray


# --- stochastic input corruption ------------------------------------------

def sample_mask(T, prob, span, seed):
    """Span mask over ``T`` frames covering exactly ``round(prob * T)`` frames.

    Span starts are drawn uniformly; spans are clipped at ``T`` and the span
    that reaches the target is cut short so the count lands exactly.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must be in [0, 1]")
    if span < 1:
        raise ValueError("span must be >= 1")
    target = int(round(prob * T))
    if target >= T:
        return np.arange(T)
    rng = np.random.default_rng(seed)
    masked = np.zeros(T, dtype=bool)
    count = 0
    while count < target:
        start = int(rng.integers(T))
        for i in range(start, min(start + span, T)):
            if not masked[i]:
                masked[i] = True
                count += 1
                if count == target:
                    break
    return np.flatnonzero(masked)


def apply_mask(F, idx, emb):
    out = np.array(F, dtype=np.float64, copy=True)
    out[np.asarray(idx, dtype=np.int64)] = emb
    return out


def draw_modality_mode(p_m, p_a, seed):
    rng = np.random.default_rng(seed)
    if rng.random() < p_m:
        return BOTH
    return AUDIO_ONLY if rng.random() < p_a else VIDEO_ONLY


def modality_dropout(F_a, F_v, p_m, p_a, seed):
    """Zero one stream at random; returns ``(F_a', F_v', mode)``."""
    mode = draw_modality_mode(p_m, p_a, seed)
    return _drop(F_a, F_v, mode) + (mode,)


def _drop(F_a, F_v, mode):
    if mode == AUDIO_ONLY:
        return F_a, np.zeros_like(F_v)
    if mode == VIDEO_ONLY:
        return np.zeros_like(F_a), F_v
    return F_a, F_v


def sinusoidal_positions(T, dim):
    pos = np.arange(T)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# --- layer primitives: forward returns (out, cache) -----------------------

def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_back(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(0)
    db = dy.sum(0)
    dxhat = dy * g
    D = xhat.shape[-1]
    dx = inv / D * (D * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dg, db


def _attention(x, wqkv, bqv, wo, bo, heads):
    # no key bias: it shifts every score of a query equally and cannot be learned
    T, D = x.shape
    dh = D // heads
    qkv = x @ wqkv
    qkv[:, :D] += bqv[:D]
    qkv[:, 2 * D:] += bqv[D:]
    q, k, v = (qkv[:, i * D:(i + 1) * D].reshape(T, heads, dh).transpose(1, 0, 2) for i in range(3))
    s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    s -= s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    ctx = (a @ v).transpose(1, 0, 2).reshape(T, D)
    return ctx @ wo + bo, (x, q, k, v, a, ctx, wqkv, wo, heads)


def _attention_back(dy, cache):
    x, q, k, v, a, ctx, wqkv, wo, heads = cache
    T, D = x.shape
    dh = D // heads
    dwo = ctx.T @ dy
    dbo = dy.sum(0)
    dctx = (dy @ wo.T).reshape(T, heads, dh).transpose(1, 0, 2)
    da = dctx @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ dctx
    ds = a * (da - (da * a).sum(-1, keepdims=True)) / np.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dqkv = np.concatenate([t.transpose(1, 0, 2).reshape(T, D) for t in (dq, dk, dv)], axis=1)
    db = dqkv.sum(0)
    return dqkv @ wqkv.T, x.T @ dqkv, np.concatenate([db[:D], db[2 * D:]]), dwo, dbo


def _ffn(x, w1, b1, w2, b2):
    pre = x @ w1 + b1
    h, dh = gelu(pre)
    return h @ w2 + b2, (x, h, dh, w1, w2)


def _ffn_back(dy, cache):
    x, h, dgelu, w1, w2 = cache
    dw2 = h.T @ dy
    db2 = dy.sum(0)
    dpre = (dy @ w2.T) * dgelu
    return dpre @ w1.T, x.T @ dpre, dpre.sum(0), dw2, db2


class BackwardBeforeForwardError(RuntimeError):
    pass


class StudentModel:
    """Parameters plus forward/backward for one utterance at a time.

    ``params`` is an ordered dict of float64 arrays; its insertion order is
    the checkpoint order.
    """

    def __init__(self, config: StudentConfig, heads=()):
        self.config = config
        self.heads = list(heads)
        self.params = self._init_params(np.random.default_rng([config.seed, 7]))
        self._cache = None

    # -- construction ------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        p = {}

        def dense(name, n_in, n_out, bias=True):
            p[name + ".w"] = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
            if bias:
                p[name + ".b"] = np.zeros(n_out)

        dense("audio_frontend", c.audio_dim, c.frontend_dim)
        dense("video_frontend", c.video_dim, c.frontend_dim)
        p["mask_emb.audio"] = 0.1 * rng.standard_normal(c.frontend_dim)
        p["mask_emb.video"] = 0.1 * rng.standard_normal(c.frontend_dim)
        dense("input_proj", 2 * c.frontend_dim, c.encoder_dim)
        D = c.encoder_dim
        for i in range(c.num_blocks):
            pre = f"block{i}."
            dense(pre + "attn.qkv", D, 3 * D, bias=False)
            p[pre + "attn.qv.b"] = np.zeros(2 * D)
            dense(pre + "attn.out", D, D)
            p[pre + "ln1.g"] = np.ones(D)
            p[pre + "ln1.b"] = np.zeros(D)
            dense(pre + "ff.in", D, c.ff_dim)
            dense(pre + "ff.out", c.ff_dim, D)
            p[pre + "ln2.g"] = np.ones(D)
            p[pre + "ln2.b"] = np.zeros(D)
        for j, h in enumerate(self.heads):
            # small init: full-scale random regression heads push O toward a
            # frame-constant collapse early on; exact zeros stall under Aligned-MTL
            p[f"head{j}.reg"] = HEAD_INIT * rng.standard_normal((D, h.frame_rate_ratio * h.hidden_dim)) / np.sqrt(D)
            p[f"head{j}.label"] = rng.standard_normal((D, h.frame_rate_ratio * c.label_dim)) / np.sqrt(D)
            p[f"head{j}.codes"] = rng.standard_normal((h.num_clusters, c.label_dim))
        return p

    def backbone_names(self):
        return [k for k in self.params if not k.startswith("head")]

    def head_params(self, j):
        p = self.params
        return p[f"head{j}.reg"], p[f"head{j}.label"], p[f"head{j}.codes"]

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    # -- forward -----------------------------------------------------------

    def frontend_forward(self, audio, video):
        c, p = self.config, self.params
        audio = np.asarray(audio, dtype=np.float64)
        video = np.asarray(video, dtype=np.float64)
        if audio.ndim != 2 or audio.shape[1] != c.audio_dim:
            raise ValueError(f"audio must be T x {c.audio_dim}, got {audio.shape}")
        if video.ndim != 2 or video.shape[1] != c.video_dim:
            raise ValueError(f"video must be T x {c.video_dim}, got {video.shape}")
        if audio.shape[0] != video.shape[0]:
            raise ValueError("audio and video frame counts differ")
        pre_a = audio @ p["audio_frontend.w"] + p["audio_frontend.b"]
        pre_v = video @ p["video_frontend.w"] + p["video_frontend.b"]
        F_a, dg_a = gelu(pre_a)
        F_v, dg_v = gelu(pre_v)
        return F_a, F_v, (audio, video, dg_a, dg_v)

    def encoder_forward(self, F_a, F_v):
        """Concatenate the two streams and run the transformer stack.

        Returns ``(O, hidden)`` where ``hidden[0]`` is the projected input and
        ``hidden[i]`` the output of block ``i``; ``O is hidden[-1]``.
        """
        c, p = self.config, self.params
        F_av = np.concatenate([F_a, F_v], axis=1)
        x = F_av @ p["input_proj.w"] + p["input_proj.b"]
        if c.pos_encoding:
            x = x + sinusoidal_positions(x.shape[0], c.encoder_dim)
        hidden = [x]
        caches = []
        for i in range(c.num_blocks):
            pre = f"block{i}."
            a, ca = _attention(x, p[pre + "attn.qkv.w"], p[pre + "attn.qv.b"],
                               p[pre + "attn.out.w"], p[pre + "attn.out.b"], c.num_heads)
            y1, cl1 = _layernorm(x + a, p[pre + "ln1.g"], p[pre + "ln1.b"])
            f, cf = _ffn(y1, p[pre + "ff.in.w"], p[pre + "ff.in.b"], p[pre + "ff.out.w"], p[pre + "ff.out.b"])
            x, cl2 = _layernorm(y1 + f, p[pre + "ln2.g"], p[pre + "ln2.b"])
            caches.append((ca, cl1, cf, cl2))
            hidden.append(x)
        return x, hidden, (F_av, caches)

    def forward(self, audio, video, masks: MaskSpec | None = None, mode=BOTH):
        """Full forward pass; caches everything :meth:`backward` needs."""
        if mode not in MODES:
            raise ValueError(f"unknown modality mode {mode!r}")
        p = self.params
        F_a, F_v, fcache = self.frontend_forward(audio, video)
        if masks is not None:
            F_a = apply_mask(F_a, masks.audio, p["mask_emb.audio"])
            F_v = apply_mask(F_v, masks.video, p["mask_emb.video"])
        F_a, F_v = _drop(F_a, F_v, mode)
        O, hidden, ecache = self.encoder_forward(F_a, F_v)
        self._cache = (fcache, masks, mode, ecache)
        return O, hidden

    # -- backward ----------------------------------------------------------

    def backward(self, dO):
        """Gradients of all backbone parameters given ``dL/dO``.

        Head gradients are not produced here; the loss functions return them.
        """
        if self._cache is None:
            raise BackwardBeforeForwardError("backward() called before forward()")
        c, p = self.config, self.params
        (audio, video, dg_a, dg_v), masks, mode, (F_av, caches) = self._cache
        g = {k: np.zeros_like(p[k]) for k in self.backbone_names()}
        dx = np.asarray(dO, dtype=np.float64)
        for i in reversed(range(c.num_blocks)):
            pre = f"block{i}."
            ca, cl1, cf, cl2 = caches[i]
            ds2, g[pre + "ln2.g"], g[pre + "ln2.b"] = _layernorm_back(dx, cl2)
            dy1_f, g[pre + "ff.in.w"], g[pre + "ff.in.b"], g[pre + "ff.out.w"], g[pre + "ff.out.b"] = _ffn_back(ds2, cf)
            dy1 = ds2 + dy1_f
            ds1, g[pre + "ln1.g"], g[pre + "ln1.b"] = _layernorm_back(dy1, cl1)
            dx_a, g[pre + "attn.qkv.w"], g[pre + "attn.qv.b"], g[pre + "attn.out.w"], g[pre + "attn.out.b"] = _attention_back(ds1, ca)
            dx = ds1 + dx_a
        g["input_proj.w"] = F_av.T @ dx
        g["input_proj.b"] = dx.sum(0)
        dF_av = dx @ p["input_proj.w"].T
        Df = c.frontend_dim
        dF_a, dF_v = dF_av[:, :Df].copy(), dF_av[:, Df:].copy()
        if mode == VIDEO_ONLY:
            dF_a[:] = 0.0
        if mode == AUDIO_ONLY:
            dF_v[:] = 0.0
        if masks is not None:
            g["mask_emb.audio"] = dF_a[masks.audio].sum(0)
            g["mask_emb.video"] = dF_v[masks.video].sum(0)
            dF_a[masks.audio] = 0.0
            dF_v[masks.video] = 0.0
        dpre_a = dF_a * dg_a
        dpre_v = dF_v * dg_v
        g["audio_frontend.w"] = audio.T @ dpre_a
        g["audio_frontend.b"] = dpre_a.sum(0)
        g["video_frontend.w"] = video.T @ dpre_v
        g["video_frontend.b"] = dpre_v.sum(0)
        return g


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_PARAMS = "params.avkd"
CHECKPOINT_META = "student.json"


def save_checkpoint(model: StudentModel, path, extra=None):
    """Parameter tensors in ``model.params`` order plus a JSON sidecar.

    Vectors are stored as ``1 x n`` rows.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    container.write_tensors(path / CHECKPOINT_PARAMS, list(model.params.values()))
    meta = {
        "config": model.config.to_dict(),
        "heads": [asdict(h) for h in model.heads],
        "param_order": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    if extra:
        meta.update(extra)
    (path / CHECKPOINT_META).write_text(json.dumps(meta, indent=2) + "\n")


def load_checkpoint(path) -> StudentModel:
    path = Path(path)
    meta = json.loads((path / CHECKPOINT_META).read_text())
    model = StudentModel(StudentConfig(**meta["config"]), [HeadSpec(**h) for h in meta["heads"]])
    tensors = container.read_tensors(path / CHECKPOINT_PARAMS)
    if len(tensors) != len(model.params):
        raise container.ShapeMismatchError(f"checkpoint holds {len(tensors)} tensors, model has {len(model.params)}")
    for (name, ref), t in zip(model.params.items(), tensors):
        if t.size != ref.size:
            raise container.ShapeMismatchError(f"{name}: expected shape {ref.shape}, file has {t.shape}")
        model.params[name] = t.reshape(ref.shape).copy()
    return model
