"""Deterministic synthetic corpora and their on-disk formats."""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .frame import Event, EventTimeline, Ontology, frame_count, read_annotations, write_annotations
from .model import ModelConfig, TokenSequence, stub_features
from .numeric import PrngStream, l2_normalize

CAPTION_KINDS = ("audio", "video", "av")
FEATURE_MAGIC = b"PEAV"
FEATURE_VERSION = 1
DTYPE_F32 = 0


# ---------------------------------------------------------------- feature files

def write_feature_file(path, tensor) -> None:
    arr = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ParameterError("refusing to write non-finite features")
    header = FEATURE_MAGIC + bytes([FEATURE_VERSION, DTYPE_F32]) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise FormatError("bad magic", 0)
    if len(data) < 6:
        raise FormatError("truncated header", len(data))
    if data[4] != FEATURE_VERSION:
        raise FormatError(f"unsupported version {data[4]}", 4)
    if data[5] != DTYPE_F32:
        raise FormatError(f"unsupported dtype {data[5]}", 5)
    if len(data) < 10:
        raise FormatError("truncated header", len(data))
    (rank,) = struct.unpack_from("<I", data, 6)
    dims_end = 10 + 8 * rank
    if len(data) < dims_end:
        raise FormatError("truncated dimensions", len(data))
    shape = struct.unpack_from(f"<{rank}Q", data, 10)
    count = int(np.prod(shape)) if rank else 1
    end = dims_end + 4 * count
    if len(data) < end:
        raise FormatError(f"payload truncated: expected {end} bytes", len(data))
    if len(data) > end:
        raise FormatError("trailing bytes after payload", end)
    return np.frombuffer(data[dims_end:end], dtype="<f4").astype(np.float64).reshape(shape)


# ---------------------------------------------------------------- contrastive corpus

def caption_tokens(concept: int, kind: str) -> list[int]:
    """Four token ids per (concept, caption kind); kinds key disjoint sub-vocabularies."""
    kinds = CAPTION_KINDS + ("transcript",)
    base = 1000 + (int(concept) * len(kinds) + kinds.index(kind)) * 4
    return [base + j for j in range(4)]


def _split_counts(n: int, ratios: dict) -> dict:
    """Largest-remainder apportionment of ``n`` items over named ratios."""
    names = sorted(ratios)
    raw = {k: n * ratios[k] for k in names}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    rest = n - sum(counts.values())
    for k in sorted(names, key=lambda k: (-(raw[k] - counts[k]), k))[:rest]:
        counts[k] += 1
    return counts


@dataclass
class Corpus:
    clips: list
    cfg: ModelConfig
    seed: int
    noise: float
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def feature_rng(self) -> PrngStream:
        return PrngStream(self.seed, "features")

    def features(self, clip: dict, modality: str) -> TokenSequence:
        key = (clip["id"], modality)
        if key not in self._cache:
            if self.root is not None and modality in clip.get("features", {}):
                arr = read_feature_file(self.root / clip["features"][modality])
                rate = self.cfg.audio_hz if modality == "audio" else (
                    self.cfg.video_fps if modality == "video" else 1.0)
                self._cache[key] = TokenSequence(arr, rate, False)
            else:
                self._cache[key] = stub_features(clip, modality, self.cfg, self.noise, self.feature_rng())
        return self._cache[key]

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.get("split", "train") == name]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for clip in self.clips:
                rec = dict(clip)
                paths = {}
                for modality in clip_modalities(clip):
                    rel = f"features/{clip['id']}.{modality.replace(':', '_')}.bin"
                    write_feature_file(out / rel, self.features(clip, modality).tokens)
                    paths[modality] = rel
                rec["features"] = paths
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        meta = {"kind": "contrastive", "seed": self.seed, "noise": self.noise,
                "model": self.cfg.to_dict()}
        (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def clip_modalities(clip: dict) -> list[str]:
    mods = [m for m in ("audio", "video") if clip.get("modalities", {}).get(m, True)]
    mods += [f"caption:{k}" for k, v in sorted(clip.get("captions", {}).items()) if v is not None]
    return mods


def gen_contrastive_corpus(n_clips: int, n_concepts: int, noise: float = 0.1,
                           duration_range=(5.0, 30.0), mix: dict | None = None, seed: int = 0,
                           transcript_fraction: float = 0.0, test_fraction: float = 0.25,
                           cfg: ModelConfig | None = None) -> Corpus:
    """Concept-grounded clips with audio, video and three caption kinds.

    Concepts are assigned round-robin so every concept appears in both splits;
    ``mix`` maps source tags (e.g. real/synthetic) to ratios and only labels
    clips.
    """
    if n_concepts < 2:
        raise ParameterError("need at least two concepts")
    mix = mix or {"real": 1.0}
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ParameterError("mix ratios must sum to 1")
    lo, hi = duration_range
    if not 0 < lo <= hi:
        raise ParameterError("bad duration range")
    cfg = cfg or ModelConfig()
    rng = PrngStream(seed, "corpus")

    counts = _split_counts(n_clips, mix)
    tags = [t for t in sorted(counts) for _ in range(counts[t])]
    tags = [tags[i] for i in rng.child("mix").permutation(n_clips)]
    every = max(1, int(round(1 / test_fraction))) if test_fraction > 0 else 0

    clips = []
    for i in range(n_clips):
        r = rng.child("clip", i)
        concept = i % n_concepts
        frames = int(round(r.uniform(lo, hi) * cfg.audio_hz))
        duration = min(max(frames / cfg.audio_hz, lo), hi)
        captions = {k: caption_tokens(concept, k) for k in CAPTION_KINDS}
        clip = {
            "id": f"clip_{i:05d}",
            "concept": concept,
            "duration_s": round(duration, 6),
            "captions": captions,
            "noise": noise,
            "source": tags[i],
            "split": "test" if every and (i // n_concepts) % every == every - 1 else "train",
            "modalities": {"audio": True, "video": True},
        }
        if transcript_fraction > 0 and r.uniform() < transcript_fraction:
            captions["transcript"] = caption_tokens(concept, "transcript")
            clip["lid"] = ["en", "fr", "es", "de"][int(r.integers(4))]
        clips.append(clip)
    return Corpus(clips, cfg, seed, noise)


def read_corpus(path) -> Corpus:
    root = Path(path)
    meta = json.loads((root / "corpus.json").read_text())
    with open(root / "manifest.jsonl", encoding="utf-8") as fh:
        clips = [json.loads(line) for line in fh if line.strip()]
    return Corpus(clips, ModelConfig.from_dict(meta["model"]), meta["seed"], meta["noise"], root)


# ---------------------------------------------------------------- SED corpus

@dataclass
class SedCorpus:
    timelines: list
    features: dict          # clip id -> (L, C_a)
    ontology: Ontology
    splits: dict
    seed: int
    smear_frames: int = 0

    def split(self, name: str) -> list:
        return [t for t in self.timelines if self.splits[t.clip_id] == name]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        (out / "ontology.json").write_text(self.ontology.to_json() + "\n")
        write_annotations(out / "annotations.jsonl", self.timelines)
        with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for t in self.timelines:
                rel = f"features/{t.clip_id}.audio.bin"
                write_feature_file(out / rel, self.features[t.clip_id])
                rec = {"id": t.clip_id, "duration_s": t.duration_s, "split": self.splits[t.clip_id],
                       "events": [e.as_dict() for e in t.events], "features": {"audio": rel}}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        meta = {"kind": "sed", "seed": self.seed, "smear_frames": self.smear_frames}
        (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_sed_corpus(path) -> SedCorpus:
    root = Path(path)
    meta = json.loads((root / "corpus.json").read_text())
    ont = Ontology.from_json((root / "ontology.json").read_text())
    timelines = read_annotations(root / "annotations.jsonl")
    feats, splits = {}, {}
    with open(root / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                feats[rec["id"]] = read_feature_file(root / rec["features"]["audio"])
                splits[rec["id"]] = rec["split"]
    return SedCorpus(timelines, feats, ont, splits, meta["seed"], meta.get("smear_frames", 0))


def class_signatures(ontology: Ontology, dim: int, seed: int) -> dict:
    rng = PrngStream(seed, "signature")
    return {leaf: 2.0 * l2_normalize(rng.child(leaf).normal(size=dim)) for leaf in ontology.leaves()}


def smear(x: np.ndarray, width: int) -> np.ndarray:
    """Causal moving average over ``width`` frames (0 or 1 leaves ``x`` unchanged)."""
    if width <= 1:
        return x
    c = np.cumsum(np.vstack([np.zeros((1, x.shape[1])), x]), axis=0)
    idx = np.arange(1, x.shape[0] + 1)
    start = np.maximum(idx - width, 0)
    return (c[idx] - c[start]) / (idx - start)[:, None]


def gen_sed_corpus(n_clips: int, ontology: Ontology, polyphony_max: int, seed: int = 0,
                   duration_s: float = 10.0, noise: float = 0.1, smear_frames: int = 0,
                   event_len=(1.0, 4.0), p_empty: float = 0.1, test_fraction: float = 0.25,
                   cfg: ModelConfig | None = None) -> SedCorpus:
    """Polyphonic mixtures of leaf-class signatures with frame-accurate annotations.

    Each clip holds 0..polyphony_max events with distinct leaf labels; frame
    features sum the active events' signatures (scaled by a per-event level),
    add Gaussian background noise and apply a causal smear.
    """
    if not ontology.nodes:
        raise ParameterError("ontology is empty")
    if polyphony_max < 1:
        raise ParameterError("polyphony_max must be at least 1")
    cfg = cfg or ModelConfig()
    leaves = ontology.leaves()
    L = frame_count(duration_s)
    if smear_frames >= L:
        raise ParameterError("smear_frames must be shorter than the clip")
    sigs = class_signatures(ontology, cfg.C_a, seed)
    rng = PrngStream(seed, "sed")
    every = max(1, int(round(1 / test_fraction))) if test_fraction > 0 else 0

    timelines, feats, splits = [], {}, {}
    for i in range(n_clips):
        r = rng.child("clip", i)
        clip_id = f"sed_{i:05d}"
        if r.uniform() < p_empty:
            n_events = 0
        else:
            n_events = int(r.integers(1, min(polyphony_max, len(leaves)) + 1))
        labels = [leaves[j] for j in r.choice(len(leaves), size=n_events, replace=False)]
        events = []
        x = noise * r.normal(size=(L, cfg.C_a))
        for label in labels:
            length = r.uniform(*event_len)
            length = min(length, duration_s)
            onset = round(r.uniform(0.0, duration_s - length), 2)
            offset = min(round(onset + length, 2), duration_s)
            ev = Event(label, onset, offset)
            events.append(ev)
        tl = EventTimeline(clip_id, duration_s, events)
        mask = tl.mask
        for k, ev in enumerate(events):
            level = r.uniform(0.7, 1.3)
            x += level * mask[:, k:k + 1] * sigs[ev.label][None, :]
        feats[clip_id] = smear(x, smear_frames)
        timelines.append(tl)
        splits[clip_id] = "test" if every and i % every == every - 1 else "train"
    return SedCorpus(timelines, feats, ontology, splits, seed, smear_frames)


def complementary_bundle(n_video: int, n_text: int, dim: int | None = None):
    """Embeddings where video and text each carry one half of a two-part concept.

    Audio row (i, j) is the normalised sum of an orthonormal video code for
    ``i`` and a text code for ``j``; neither unimodal query can tell apart
    audio rows sharing its half, while the joint query can.
    Returns ``(bundle_streams, joint_proj)`` with rows ordered ``i * n_text + j``.
    """
    dim = dim or (n_video + n_text)
    if dim < n_video + n_text:
        raise ParameterError("dim too small for orthogonal codes")
    eye = np.eye(dim)
    u = eye[:n_video]
    w = eye[n_video:n_video + n_text]
    rows = [(i, j) for i in range(n_video) for j in range(n_text)]
    h_v = np.stack([u[i] for i, _ in rows])
    h_t = np.stack([w[j] for _, j in rows])
    h_a = l2_normalize(h_v + h_t)
    proj = np.hstack([np.eye(dim), np.eye(dim)])
    return {"A": h_a, "V": h_v, "AT": h_t, "VT": h_t, "AV": h_a, "AVT": h_t}, proj
