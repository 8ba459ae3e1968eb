"""Toy-scale audio/video/text encoder stack.

Frozen random transformer towers turn stub features into token sequences;
the trainable parts (attention-pool queries, projection heads and the joint
projections) are linear enough to carry hand-written gradients.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError, FormatError
from .numeric import PrngStream, as_tensor, l2_normalize, l2_normalize_backward, softmax_axis

SCALES = ("S", "B", "L", "TOY")
MODALITIES = ("audio", "video", "caption:audio", "caption:video", "caption:av", "caption:transcript")
TOWERS = ("audio", "video_temporal", "av_fusion")
TEXT_HEADS = ("AT", "VT", "AVT")
MODALITY_HEADS = ("A", "V", "AV")


@dataclass(frozen=True)
class ModelConfig:
    scale: str = "TOY"
    audio_depth: int = 2
    audio_width: int = 32
    video_temporal_depth: int = 1
    av_depth: int = 1
    heads: int = 2
    shared_dim: int = 32
    feature_dims: tuple = (8, 16, 16)
    audio_hz: float = 25.0
    video_fps: float = 30.0
    mlp_dim: int = 64

    def __post_init__(self):
        self.validate()

    @classmethod
    def preset(cls, scale: str) -> "ModelConfig":
        # width = 64 * depth, heads = depth / 2, shared dim 1024 for every size
        table = {
            "S": dict(audio_depth=12, audio_width=768, heads=6, mlp_dim=2048),
            "B": dict(audio_depth=16, audio_width=1024, heads=8, mlp_dim=2752),
            "L": dict(audio_depth=28, audio_width=1792, heads=14, mlp_dim=4800),
        }
        if scale == "TOY":
            return cls()
        if scale not in table:
            raise ConfigurationError(f"unknown model scale {scale!r}")
        return cls(scale=scale, video_temporal_depth=4, av_depth=6, shared_dim=1024,
                   feature_dims=(128, 1024, 1024), **table[scale])

    def validate(self):
        if self.scale not in SCALES:
            raise ConfigurationError(f"unknown model scale {self.scale!r}")
        ints = (self.audio_depth, self.audio_width, self.video_temporal_depth, self.av_depth,
                self.heads, self.shared_dim, self.mlp_dim, *self.feature_dims)
        if any(int(v) != v or v < 0 for v in ints):
            raise ConfigurationError("model extents must be non-negative integers")
        if self.audio_hz <= 0 or self.video_fps <= 0:
            raise ConfigurationError("rates must be positive")
        if self.scale == "TOY":
            if min(self.audio_width, self.heads, self.shared_dim, *self.feature_dims) < 2:
                raise ConfigurationError("TOY extents must all be at least 2")
        else:
            if self.audio_width != 64 * self.audio_depth:
                raise ConfigurationError("audio width must be 64 x depth")
            if self.heads != self.audio_depth // 2 or self.shared_dim != 1024:
                raise ConfigurationError("heads must be depth / 2 and shared dim 1024")
        if self.audio_width % self.heads or (self.audio_width // self.heads) % 2:
            raise ConfigurationError("width must split into even-sized heads")

    @property
    def width(self) -> int:
        return self.audio_width

    @property
    def C_a(self) -> int:
        return self.feature_dims[0]

    @property
    def C_v(self) -> int:
        return self.feature_dims[1]

    @property
    def C_t(self) -> int:
        return self.feature_dims[2]

    def depth(self, tower: str) -> int:
        return {"audio": self.audio_depth, "video_temporal": self.video_temporal_depth,
                "av_fusion": self.av_depth}[tower]

    def input_dim(self, tower: str) -> int:
        return {"audio": self.C_a, "video_temporal": self.C_v, "av_fusion": 2 * self.width}[tower]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_dims"] = list(self.feature_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "feature_dims" in d:
            d["feature_dims"] = tuple(d["feature_dims"])
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    rate_hz: float
    has_cls: bool = False

    def __post_init__(self):
        self.tokens = as_tensor(self.tokens)
        if self.tokens.ndim != 2:
            raise DimensionError(f"token sequence must be 2-D, got {self.tokens.shape}")
        if not self.rate_hz > 0:
            raise DomainError("rate_hz must be positive")

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def body(self) -> "TokenSequence":
        """The sequence without its CLS token."""
        if not self.has_cls:
            return self
        return TokenSequence(self.tokens[1:], self.rate_hz, False)

    @property
    def cls(self) -> np.ndarray:
        if not self.has_cls:
            raise DomainError("sequence has no CLS token")
        return self.tokens[0]


class EmbeddingBundle(dict):
    """Mapping from stream tag (``"A"``, ``"AT"``, ``"V+AT"`` ...) to a row-normalized B x C_h matrix."""

    def __init__(self, streams=None, check: bool = True, **kw):
        super().__init__(streams or {}, **kw)
        if check:
            self.validate()

    def validate(self, tol: float = 1e-9):
        shape = None
        for tag, h in self.items():
            h = as_tensor(h)
            self[tag] = h
            if h.ndim != 2:
                raise DimensionError(f"stream {tag} must be 2-D")
            if shape is not None and h.shape != shape:
                raise DimensionError(f"stream {tag} has shape {h.shape}, expected {shape}")
            shape = h.shape
            norms = np.linalg.norm(h, axis=1)
            if h.shape[0] and np.max(np.abs(norms - 1.0)) > tol:
                raise DomainError(f"stream {tag} rows are not unit-normalized")

    @property
    def batch_size(self) -> int:
        return next(iter(self.values())).shape[0] if self else 0


# ---------------------------------------------------------------- stub features

def _concept_pattern(rng: PrngStream, concept: int, modality: str, dim: int):
    r = rng.child("pattern", modality, int(concept))
    base = r.normal(size=dim)
    direction = r.normal(size=dim)
    freq = r.uniform(0.2, 2.0)
    phase = r.uniform(0.0, 2 * math.pi)
    return base, direction, freq, phase


def vocab_embedding(rng: PrngStream, token_id: int, dim: int) -> np.ndarray:
    return rng.child("vocab", int(token_id)).normal(size=dim)


def text_features(token_ids, dim: int, rng: PrngStream, noise: float = 0.0,
                  noise_rng: PrngStream | None = None) -> TokenSequence:
    rows = np.stack([vocab_embedding(rng, t, dim) for t in token_ids]) if len(token_ids) else np.zeros((0, dim))
    if noise > 0:
        rows = rows + noise * (noise_rng or rng.child("text-noise")).normal(size=rows.shape)
    return TokenSequence(rows, 1.0, False)


def stub_features(clip: dict, modality: str, cfg: ModelConfig, noise: float,
                  rng: PrngStream) -> TokenSequence:
    """Deterministic stand-in for a frozen feature extractor.

    Audio and video are a concept-keyed vector plus a slow concept-keyed
    oscillation, sampled at the audio/video rate; captions are looked up from
    the clip's token ids. ``noise`` adds i.i.d. Gaussian noise per element.
    """
    if modality not in MODALITIES:
        raise DomainError(f"unknown modality {modality!r}")
    if noise < 0:
        raise DomainError("noise must be non-negative")
    concept = int(clip["concept"])
    noise_rng = rng.child("noise", str(clip.get("id", concept)), modality)
    if modality.startswith("caption:"):
        kind = modality.split(":", 1)[1]
        captions = clip.get("captions", {})
        if kind not in captions or captions[kind] is None:
            raise DomainError(f"clip {clip.get('id')} has no {kind} caption")
        return text_features(captions[kind], cfg.C_t, rng, noise, noise_rng)

    rate, dim = (cfg.audio_hz, cfg.C_a) if modality == "audio" else (cfg.video_fps, cfg.C_v)
    length = int(round(float(clip["duration_s"]) * rate))
    base, direction, freq, phase = _concept_pattern(rng, concept, modality, dim)
    t = np.arange(length) / rate
    tokens = base[None, :] + 0.5 * np.sin(2 * math.pi * freq * t + phase)[:, None] * direction[None, :]
    if noise > 0:
        tokens = tokens + noise * noise_rng.normal(size=tokens.shape)
    return TokenSequence(tokens, rate, False)


# ---------------------------------------------------------------- frozen towers

@dataclass
class TowerParams:
    entry: np.ndarray                  # (C_in, width)
    cls: np.ndarray                    # (width,)
    blocks: list = field(default_factory=list)


def init_tower(cfg: ModelConfig, tower: str, rng: PrngStream, residual_scale: float = 0.5) -> TowerParams:
    if tower not in TOWERS:
        raise DomainError(f"unknown tower {tower!r}")
    r = rng.child("tower", tower)
    w, m, c_in = cfg.width, cfg.mlp_dim, cfg.input_dim(tower)
    entry = r.normal(size=(c_in, w)) / math.sqrt(c_in)
    cls = 0.5 * r.normal(size=w)
    blocks = []
    for _ in range(cfg.depth(tower)):
        blocks.append({
            "wq": r.normal(size=(w, w)) / math.sqrt(w),
            "wk": r.normal(size=(w, w)) / math.sqrt(w),
            "wv": r.normal(size=(w, w)) / math.sqrt(w),
            "wo": r.normal(size=(w, w)) / math.sqrt(w) * residual_scale,
            "w1": r.normal(size=(w, m)) / math.sqrt(w),
            "w2": r.normal(size=(m, w)) / math.sqrt(m) * residual_scale,
        })
    return TowerParams(entry, cls, blocks)


@dataclass
class FrozenTowers:
    audio: TowerParams
    video_temporal: TowerParams
    av_fusion: TowerParams

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "FrozenTowers":
        rng = PrngStream(seed, "model")
        return cls(*(init_tower(cfg, t, rng) for t in TOWERS))

    def __getitem__(self, tower: str) -> TowerParams:
        return getattr(self, tower)


def _layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def rope_angles(n_positions: int, head_dim: int, base: float = 10000.0):
    inv = base ** (-np.arange(0, head_dim, 2) / head_dim)
    ang = np.arange(n_positions)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate channel pairs (2i, 2i+1) of ``x[..., L, D]`` by position-dependent angles."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _attention(x, block, heads, attn_log=None):
    L, w = x.shape
    hd = w // heads
    q = (x @ block["wq"]).reshape(L, heads, hd).transpose(1, 0, 2)
    k = (x @ block["wk"]).reshape(L, heads, hd).transpose(1, 0, 2)
    v = (x @ block["wv"]).reshape(L, heads, hd).transpose(1, 0, 2)
    # CLS sits at index 0 and is left unrotated; body tokens get positions 0..L-2
    cos, sin = rope_angles(L - 1, hd)
    q[:, 1:] = apply_rope(q[:, 1:], cos, sin)
    k[:, 1:] = apply_rope(k[:, 1:], cos, sin)
    att = softmax_axis(q @ k.transpose(0, 2, 1) / math.sqrt(hd), axis=-1)
    if attn_log is not None:
        attn_log.append(att)
    out = (att @ v).transpose(1, 0, 2).reshape(L, w)
    return out @ block["wo"]


def encode_stream(x: TokenSequence, tower: str, cfg: ModelConfig, params, attn_log=None) -> TokenSequence:
    """Entry projection, CLS prepend, then pre-norm attention + MLP blocks."""
    if tower not in TOWERS:
        raise DomainError(f"unknown tower {tower!r}")
    if x.has_cls:
        raise DomainError("input already carries a CLS token")
    tp = params[tower] if not isinstance(params, TowerParams) else params
    if x.tokens.shape[1] != tp.entry.shape[0]:
        raise DimensionError(
            f"{tower} tower expects width {tp.entry.shape[0]}, got {x.tokens.shape[1]}")
    h = np.concatenate([tp.cls[None, :], x.tokens @ tp.entry], axis=0)
    for block in tp.blocks:
        h = h + _attention(_layer_norm(h), block, cfg.heads, attn_log)
        h = h + _gelu(_layer_norm(h) @ block["w1"]) @ block["w2"]
    return TokenSequence(h, x.rate_hz, True)


def nn_resample(src: TokenSequence, target_len: int) -> TokenSequence:
    """Nearest-neighbour resampling of a CLS-free sequence to ``target_len`` rows."""
    if src.has_cls:
        raise DomainError("drop the CLS token before resampling")
    L_src = len(src)
    if L_src < 1 or target_len < 1:
        raise DomainError("resampling needs non-empty sequences")
    idx = resample_index(L_src, target_len)
    return TokenSequence(src.tokens[idx], src.rate_hz * target_len / L_src, False)


def resample_index(src_len: int, target_len: int) -> np.ndarray:
    idx = np.floor((np.arange(target_len) + 0.5) * src_len / target_len).astype(np.int64)
    return np.clip(idx, 0, src_len - 1)


def fuse_av(e_a: TokenSequence, e_v: TokenSequence, cfg: ModelConfig, params) -> TokenSequence:
    """Align video to the audio timeline, concatenate channels and run the fusion tower."""
    if e_a.has_cls or e_v.has_cls:
        raise DomainError("fusion expects CLS-free token bodies")
    aligned = nn_resample(e_v, len(e_a))
    cat = np.concatenate([e_a.tokens, aligned.tokens], axis=1)
    return encode_stream(TokenSequence(cat, e_a.rate_hz, False), "av_fusion", cfg, params)


# ---------------------------------------------------------------- trainable pieces

def attention_pool(tokens: np.ndarray, mask: np.ndarray, query: np.ndarray):
    """Single-query attention pool over a padded batch ``tokens[B, L, C]``.

    Keys and values are the tokens themselves; ``mask`` marks valid rows.
    Returns the pooled ``[B, C]`` vectors and the attention weights.
    """
    scale = 1.0 / math.sqrt(tokens.shape[-1])
    scores = np.einsum("blc,c->bl", tokens, query) * scale
    scores = np.where(mask, scores, -np.inf)
    w = softmax_axis(scores, axis=1)
    return np.einsum("bl,blc->bc", w, tokens), w


def attention_pool_backward(tokens, weights, grad_pooled) -> np.ndarray:
    scale = 1.0 / math.sqrt(tokens.shape[-1])
    d_w = np.einsum("blc,bc->bl", tokens, grad_pooled)
    d_scores = weights * (d_w - np.sum(weights * d_w, axis=1, keepdims=True))
    return np.einsum("bl,blc->c", d_scores, tokens) * scale


def init_heads(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Trainable parameters: pool queries, six projection heads, two joint projections."""
    r = PrngStream(seed, "heads")
    w, ch, ct = cfg.width, cfg.shared_dim, cfg.C_t
    params = {}
    for tower in ("A", "V", "AV"):
        params[f"pool/{tower}"] = np.zeros(w)
    for tag in MODALITY_HEADS:
        params[f"head/{tag}"] = r.child(tag).normal(size=(ch, w)) / math.sqrt(w)
    for tag in TEXT_HEADS:
        params[f"head/{tag}"] = r.child(tag).normal(size=(ch, ct)) / math.sqrt(ct)
    for tag in ("A+VT", "V+AT"):
        params[f"joint/{tag}"] = r.child(tag).normal(size=(ch, 2 * ch)) / math.sqrt(2 * ch)
    return params


def head_forward(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"head expects width {weight.shape[1]}, got {x.shape[-1]}")
    return l2_normalize(x @ weight.T, axis=-1)


def head_backward(x, weight, grad_out):
    """Gradients of ``normalize(x W^T)`` w.r.t. ``W`` and ``x``."""
    y = x @ weight.T
    d_y = l2_normalize_backward(y, grad_out, axis=-1)
    return d_y.T @ x, d_y @ weight


def project_heads(cls_vectors: dict, heads: dict, required=()) -> EmbeddingBundle:
    """Map per-stream CLS vectors through their heads into the shared space.

    ``cls_vectors`` is keyed by head tag (``A``, ``V``, ``AV``, ``AT``, ``VT``,
    ``AVT``); a single text CLS may be passed under several text tags.
    """
    for tag in required:
        if tag in ("A+VT", "V+AT"):
            continue
        if tag not in cls_vectors:
            raise ConfigurationError(f"stream {tag} required by the loss registry is missing")
    out = {}
    for tag, x in cls_vectors.items():
        out[tag] = head_forward(as_tensor(x), heads[f"head/{tag}"])
    return EmbeddingBundle(out)


def joint_embed(c_x, c_t, proj) -> np.ndarray:
    c_x, c_t = as_tensor(c_x), as_tensor(c_t)
    if c_x.shape != c_t.shape or c_x.ndim != 2:
        raise DimensionError(f"joint inputs differ: {c_x.shape} vs {c_t.shape}")
    if proj.shape != (proj.shape[0], 2 * c_x.shape[1]):
        raise DimensionError(f"joint projection has shape {proj.shape}")
    return l2_normalize(np.concatenate([c_x, c_t], axis=1) @ proj.T, axis=-1)


def joint_embed_backward(c_x, c_t, proj, grad_out):
    """Returns gradients for ``(proj, c_x, c_t)``."""
    cat = np.concatenate([c_x, c_t], axis=1)
    d_w, d_cat = head_backward(cat, proj, grad_out)
    C = c_x.shape[1]
    return d_w, d_cat[:, :C], d_cat[:, C:]


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"PEAVCKPT"


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """JSON header (config + tensor names/shapes) followed by little-endian float32 payload."""
    names = sorted(tensors)
    header = {
        "config": config,
        "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.asarray(tensors[n], dtype="<f4").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(data) < 16:
        raise FormatError("truncated checkpoint header", len(data))
    (n,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + n:
        raise FormatError("truncated checkpoint header", len(data))
    header = json.loads(data[16:16 + n].decode("utf-8"))
    offset = 16 + n
    tensors = {}
    for item in header["tensors"]:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"payload for {item['name']} truncated", len(data))
        arr = np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64)
        tensors[item["name"]] = arr.reshape(item["shape"])
        offset = end
    return header["config"], tensors
