"""Training loops and evaluation glue shared by the CLI and the experiment harnesses."""
from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError
from .frame import (EventTimeline, FrameBatch, FrameItem, ObjectiveCounter, Ontology, build_frame_labels,
                    frame_loss, local_labels)
from .model import (FrozenTowers, ModelConfig, TokenSequence, attention_pool,
                    attention_pool_backward, encode_stream, fuse_av, head_backward, head_forward,
                    init_heads, joint_embed, joint_embed_backward, text_features)
from .numeric import PrngStream, l2_normalize, sigmoid
from .objective import (PairRegistry, apply_registry_params, multi_pair_loss, registry_grads,
                        registry_params, sgd_step)
from .retrieval import SimMatrix, concept_positives, dsl_reweight, recall_at_k
from .sed import ScoreTrack, median_filter, psds1, segment_auroc, PsdsParams

log = logging.getLogger(__name__)

POOLED = {"A": "audio", "V": "video_temporal", "AV": "av_fusion"}
TEXT_KIND = {"AT": "audio", "VT": "video", "AVT": "av"}
JOINT_INPUTS = {"A+VT": ("A", "VT"), "V+AT": ("V", "AT")}

RETRIEVAL_TASKS = {
    "T->A": ("AT", "A"),
    "T->V": ("VT", "V"),
    "A->T": ("A", "AT"),
    "V->T": ("V", "VT"),
    "A->V": ("A", "V"),
    "V->A": ("V", "A"),
    "T->AV": ("AVT", "AV"),
    "AV->T": ("AV", "AVT"),
}


# ---------------------------------------------------------------- contrastive

@dataclass
class EncodedSet:
    """Frozen-tower outputs for a list of clips, padded per tower."""
    ids: list
    concepts: np.ndarray
    tokens: dict      # "A"/"V"/"AV" -> (N, L, C_e)
    masks: dict       # "A"/"V"/"AV" -> (N, L) bool
    text: dict        # "AT"/"VT"/"AVT" -> (N, C_t)

    def __len__(self):
        return len(self.ids)


def _pad(seqs):
    L = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), L, seqs[0].shape[1]))
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = True
    return out, mask


def text_cls(seq: TokenSequence) -> np.ndarray:
    """Mean of caption token features stands in for the text encoder's CLS output."""
    return seq.tokens.mean(axis=0)


def encode_clips(corpus, clips, cfg: ModelConfig, towers: FrozenTowers) -> EncodedSet:
    a_seqs, v_seqs, av_seqs = [], [], []
    text = {tag: [] for tag in TEXT_KIND}
    for clip in clips:
        e_a = encode_stream(corpus.features(clip, "audio"), "audio", cfg, towers)
        e_v = encode_stream(corpus.features(clip, "video"), "video_temporal", cfg, towers)
        e_av = fuse_av(e_a.body, e_v.body, cfg, towers)
        a_seqs.append(e_a.tokens)
        v_seqs.append(e_v.tokens)
        av_seqs.append(e_av.tokens)
        for tag, kind in TEXT_KIND.items():
            text[tag].append(text_cls(corpus.features(clip, f"caption:{kind}")))
    tokens, masks = {}, {}
    for tag, seqs in (("A", a_seqs), ("V", v_seqs), ("AV", av_seqs)):
        tokens[tag], masks[tag] = _pad(seqs)
    return EncodedSet([c["id"] for c in clips], np.array([c["concept"] for c in clips]),
                      tokens, masks, {k: np.stack(v) for k, v in text.items()})


def needed_streams(streams) -> set:
    out = set(streams)
    for tag in streams:
        out.update(JOINT_INPUTS.get(tag, ()))
    return out


def forward(enc: EncodedSet, idx, params: dict, streams):
    """Embed the clips ``idx`` for the requested stream tags; returns (streams, cache)."""
    h, cache = {}, {}
    need = needed_streams(streams)
    for tag in POOLED:
        if tag in need:
            tok, mask = enc.tokens[tag][idx], enc.masks[tag][idx]
            pooled, w = attention_pool(tok, mask, params[f"pool/{tag}"])
            h[tag] = head_forward(pooled, params[f"head/{tag}"])
            cache[tag] = (tok, w, pooled)
    for tag in TEXT_KIND:
        if tag in need:
            x = enc.text[tag][idx]
            h[tag] = head_forward(x, params[f"head/{tag}"])
            cache[tag] = x
    for tag, (x, t) in JOINT_INPUTS.items():
        if tag in need:
            h[tag] = joint_embed(h[x], h[t], params[f"joint/{tag}"])
    return h, cache


def backward(h: dict, cache: dict, params: dict, stream_grads: dict) -> dict:
    g = {k: v.copy() for k, v in stream_grads.items()}
    grads = {}
    for tag, (x, t) in JOINT_INPUTS.items():
        if tag in g:
            d_w, d_x, d_t = joint_embed_backward(h[x], h[t], params[f"joint/{tag}"], g[tag])
            grads[f"joint/{tag}"] = d_w
            g[x] = g[x] + d_x if x in g else d_x
            g[t] = g[t] + d_t if t in g else d_t
    for tag in POOLED:
        if tag in g:
            tok, w, pooled = cache[tag]
            d_w, d_pooled = head_backward(pooled, params[f"head/{tag}"], g[tag])
            grads[f"head/{tag}"] = d_w
            grads[f"pool/{tag}"] = attention_pool_backward(tok, w, d_pooled)
    for tag in TEXT_KIND:
        if tag in g:
            d_w, _ = head_backward(cache[tag], params[f"head/{tag}"], g[tag])
            grads[f"head/{tag}"] = d_w
    return grads


def sample_batch(concepts: np.ndarray, batch: int, rng: PrngStream) -> np.ndarray:
    """One clip per concept for ``batch`` distinct concepts (falls back to plain sampling)."""
    uniq = np.unique(concepts)
    if batch > len(uniq):
        return rng.choice(len(concepts), size=batch, replace=batch > len(concepts))
    chosen = rng.choice(uniq, size=batch, replace=False)
    out = []
    for c in chosen:
        members = np.flatnonzero(concepts == c)
        out.append(members[int(rng.integers(len(members)))])
    return np.array(out)


@dataclass
class TrainResult:
    params: dict
    registry: PairRegistry
    history: list = field(default_factory=list)   # (step, total, per_pair)


def train_contrastive(enc: EncodedSet, registry: PairRegistry, params: dict, steps: int,
                      batch: int = 32, lr: float = 0.05, momentum: float = 0.9, seed: int = 0,
                      on_step=None) -> TrainResult:
    registry = copy.deepcopy(registry)
    params = dict(params)
    params.update(registry_params(registry))
    state: dict = {}
    rng = PrngStream(seed, "train")
    streams = registry.streams()
    history = []
    for step in range(steps):
        idx = sample_batch(enc.concepts, min(batch, len(enc)), rng.child("batch", step))
        h, cache = forward(enc, idx, params, streams)
        res = multi_pair_loss(h, registry)
        if not math.isfinite(res.total):
            raise NumericError(f"non-finite loss at step {step}")
        history.append((step, res.total, list(res.per_pair)))
        grads = backward(h, cache, params, res.stream_grads)
        grads.update(registry_grads(registry, res))
        params = sgd_step(params, grads, lr, momentum, state)
        apply_registry_params(registry, params)
        if on_step is not None:
            on_step(step, res, params, registry)
    return TrainResult(params, registry, history)


def embed_all(enc: EncodedSet, params: dict, streams=None) -> dict:
    streams = streams or list(POOLED) + list(TEXT_KIND)
    h, _ = forward(enc, np.arange(len(enc)), params, streams)
    return h


def retrieval_metrics(h: dict, concepts, sharpen: float = 10.0, ks=(1,),
                      tasks=None) -> dict:
    """Recall@k per task, with and without dual-softmax reweighting; positives share a concept."""
    pos = concept_positives(concepts, concepts)
    out = {}
    for task in tasks or RETRIEVAL_TASKS:
        q, g = RETRIEVAL_TASKS[task]
        if q not in h or g not in h:
            continue
        sims = h[q] @ h[g].T
        for dsl in (False, True):
            vals = dsl_reweight(sims, sharpen) if dsl else sims
            for k in ks:
                out[(task, "dsl" if dsl else "raw", f"R@{k}")] = recall_at_k(SimMatrix(vals, pos), k)
    return out


CROSS_MODAL_TASKS = ("T->A", "T->V", "A->V", "V->A", "T->AV")


def cross_modal_average(metrics: dict, variant: str = "dsl") -> float:
    vals = [metrics[(t, variant, "R@1")] for t in CROSS_MODAL_TASKS]
    return float(np.mean(vals))


# ---------------------------------------------------------------- frame-level

def label_tokens(text: str) -> list[int]:
    return [2_000_000 + zlib.crc32(w.encode("utf-8")) % 100_000 for w in text.casefold().split()]


def text_embedding(text: str, cfg: ModelConfig, heads: dict, seed: int, head: str = "AT") -> np.ndarray:
    seq = text_features(label_tokens(text), cfg.C_t, PrngStream(seed, "features"))
    return head_forward(text_cls(seq)[None, :], heads[f"head/{head}"])[0]


@dataclass
class FrameSet:
    timelines: list
    embeddings: list     # per clip (L, C_e)


def encode_sed(corpus, timelines, cfg: ModelConfig, towers: FrozenTowers) -> FrameSet:
    embs = []
    for t in timelines:
        seq = TokenSequence(corpus.features[t.clip_id], cfg.audio_hz, False)
        embs.append(encode_stream(seq, "audio", cfg, towers).body.tokens)
    return FrameSet(list(timelines), embs)


def init_frame_params(cfg: ModelConfig, seed: int, alpha: float = 10.0, beta: float = -10.0) -> dict:
    r = PrngStream(seed, "bridge")
    return {
        "bridge": r.normal(size=(cfg.shared_dim, cfg.width)) / math.sqrt(cfg.width),
        "frame/log_alpha": np.array(math.log(alpha)),
        "frame/beta": np.array(beta),
    }


def _sample_query(tl, ontology: Ontology, rng: PrngStream) -> str:
    labels = tl.labels()
    if not labels:
        leaves = ontology.leaves()
        return leaves[int(rng.integers(len(leaves)))]
    return labels[int(rng.integers(len(labels)))]


@dataclass
class FrameTrainResult:
    params: dict
    counter: ObjectiveCounter
    history: list = field(default_factory=list)   # (step, mode, loss)


def train_frame(fs: FrameSet, ontology: Ontology, params: dict, text_of, steps: int,
                batch: int = 16, lr: float = 0.05, momentum: float = 0.9, p_local: float = 0.7,
                seed: int = 0, include_ancestors: bool = False, on_step=None) -> FrameTrainResult:
    """Train the frame bridge (and its temperature/bias) with sampled local/global objectives.

    ``text_of`` maps a query string to its unit text embedding.
    """
    params = dict(params)
    state: dict = {}
    rng = PrngStream(seed, "frame-train")
    counter = ObjectiveCounter()
    history = []
    n = len(fs.timelines)
    for step in range(steps):
        r = rng.child("step", step)
        idx = r.choice(n, size=min(batch, n), replace=False)
        items = [FrameItem(fs.embeddings[i], _sample_query(fs.timelines[i], ontology, r),
                           fs.timelines[i]) for i in idx]
        fb = FrameBatch(items)
        z = build_frame_labels(fb, ontology, include_ancestors)
        E = fb.padded()
        H = np.stack([text_of(it.query) for it in items])
        W = params["bridge"]
        P = E @ W.T
        logits = P @ H.T
        alpha = float(np.exp(params["frame/log_alpha"]))
        beta = float(params["frame/beta"])
        mode = counter.draw(p_local, r)
        if mode == "local":
            B = len(items)
            res = frame_loss(logits[np.arange(B), :, np.arange(B)], local_labels(z), "local", alpha, beta)
            g = np.zeros_like(logits)
            g[np.arange(B), :, np.arange(B)] = res.grad_logits
        else:
            res = frame_loss(logits, z, "global", alpha, beta)
            g = res.grad_logits
        if not math.isfinite(res.loss):
            raise NumericError(f"non-finite frame loss at step {step}")
        history.append((step, mode, res.loss))
        d_w = (g @ H).reshape(-1, H.shape[1]).T @ E.reshape(-1, E.shape[2])
        grads = {"bridge": d_w, "frame/log_alpha": np.array(res.grad_alpha * alpha),
                 "frame/beta": np.array(res.grad_beta)}
        params = sgd_step(params, grads, lr, momentum, state)
        if on_step is not None:
            on_step(step, mode, res, params)
    return FrameTrainResult(params, counter, history)


def frame_scores(fs: FrameSet, classes, params: dict, text_of) -> list[ScoreTrack]:
    alpha = float(np.exp(params["frame/log_alpha"]))
    beta = float(params["frame/beta"])
    tracks = []
    for tl, E in zip(fs.timelines, fs.embeddings):
        P = E @ params["bridge"].T
        for c in classes:
            s = sigmoid(alpha * (P @ text_of(c)) + beta)
            tracks.append(ScoreTrack(tl.clip_id, c, s))
    return tracks


def sed_report(tracks, timelines, params: PsdsParams | None = None, filter_width: int = 9,
               segment_s: float = 1.0) -> dict:
    params = params or PsdsParams()
    filtered = [ScoreTrack(t.clip, t.cls, median_filter(t.scores, filter_width)) for t in tracks]
    gt = {t.clip_id: t for t in timelines}
    report = {
        "psds1_a": psds1(filtered, gt, params, "all_classes"),
        "psds1_t": psds1(filtered, gt, params, "target_only"),
        "auroc": segment_auroc(filtered, gt, segment_s, open_vocab=True),
    }
    per_class = {}
    for c in sorted({t.cls for t in filtered}):
        sub = [t for t in filtered if t.cls == c]
        gt_c = {k: EventTimeline(k, tl.duration_s, [e for e in tl.events if e.label == c])
                for k, tl in gt.items()}
        try:
            per_class[c] = psds1(sub, gt_c, params, "all_classes")
        except DomainError:  # class without ground truth in scope
            per_class[c] = None
    report["per_class"] = per_class
    return report
