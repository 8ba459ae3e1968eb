"""Frame-level audio/text alignment: ontology-aware labels and local/global sigmoid losses."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, DomainError, ParameterError
from .numeric import PrngStream, as_tensor, log_sigmoid, sigmoid

FRAME_RATE = 25.0
IGNORE = 0  # label value for padded frames


@dataclass
class OntologyNode:
    id: str
    name: str
    parent: str | None = None
    synonyms: list = field(default_factory=list)


class Ontology:
    """Forest of sound-event classes with synonyms."""

    def __init__(self, nodes):
        self.nodes: dict[str, OntologyNode] = {}
        for n in nodes:
            if not isinstance(n, OntologyNode):
                n = OntologyNode(**n)
            if n.id in self.nodes:
                raise DomainError(f"duplicate ontology id {n.id!r}")
            self.nodes[n.id] = n
        self._lookup: dict[str, str] = {}
        for n in self.nodes.values():
            for text in [n.name, *n.synonyms]:
                key = text.casefold()
                if key in self._lookup and self._lookup[key] != n.id:
                    raise DomainError(f"name or synonym {text!r} is not unique")
                self._lookup[key] = n.id
        self.children: dict[str, list[str]] = {i: [] for i in self.nodes}
        for n in self.nodes.values():
            if n.parent is not None:
                if n.parent not in self.nodes:
                    raise DomainError(f"unknown parent {n.parent!r} of {n.id!r}")
                self.children[n.parent].append(n.id)
        for i in self.nodes:
            self.ancestors(i)  # raises on cycles

    def resolve(self, label: str) -> str:
        """Map an id, name or synonym to its node id."""
        if label in self.nodes:
            return label
        key = str(label).casefold()
        if key not in self._lookup:
            raise DomainError(f"unknown label {label!r}")
        return self._lookup[key]

    def __contains__(self, label) -> bool:
        try:
            self.resolve(label)
        except DomainError:
            return False
        return True

    def ancestors(self, node_id: str) -> list[str]:
        out, seen = [], {node_id}
        cur = self.nodes[node_id].parent
        while cur is not None:
            if cur in seen:
                raise DomainError(f"cycle in ontology at {cur!r}")
            seen.add(cur)
            out.append(cur)
            cur = self.nodes[cur].parent
        return out

    def descendants(self, node_id: str) -> set[str]:
        out, stack = set(), list(self.children[node_id])
        while stack:
            c = stack.pop()
            out.add(c)
            stack.extend(self.children[c])
        return out

    def leaves(self) -> list[str]:
        return sorted(i for i, ch in self.children.items() if not ch)

    def to_json(self) -> str:
        nodes = [{"id": n.id, "name": n.name, "parent": n.parent, "synonyms": list(n.synonyms)}
                 for n in sorted(self.nodes.values(), key=lambda n: n.id)]
        return json.dumps({"nodes": nodes}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Ontology":
        return cls(json.loads(text)["nodes"])


def default_ontology() -> Ontology:
    """Small three-domain tree (speech / animal / music plus a root leaf) with 8 leaves."""
    spec = [
        ("speech", None, ["talking"]),
        ("female_speech", "speech", ["woman speaking"]),
        ("male_speech", "speech", ["man speaking"]),
        ("animal", None, []),
        ("dog", "animal", ["canine"]),
        ("bark", "dog", ["barking"]),
        ("growl", "dog", ["growling"]),
        ("meow", "animal", ["cat meowing"]),
        ("music", None, []),
        ("guitar", "music", ["guitar strumming"]),
        ("drum", "music", ["drumming"]),
        ("siren", None, ["alarm siren"]),
    ]
    return Ontology([OntologyNode(i, i.replace("_", " "), p, s) for i, p, s in spec])


def ont_expand(label: str, ont: Ontology, include_ancestors: bool = False) -> set[str]:
    """Ontology-linked variants of ``label``: itself plus descendants, optionally ancestors.

    Synonyms resolve to the same node id, so a synonym query lands in the
    same set as the canonical name.
    """
    node = ont.resolve(label)
    out = {node} | ont.descendants(node)
    if include_ancestors:
        out.update(ont.ancestors(node))
    return out


@dataclass
class Event:
    label: str
    onset_s: float
    offset_s: float

    def as_dict(self):
        return {"label": self.label, "onset_s": self.onset_s, "offset_s": self.offset_s}


def frame_count(duration_s: float, rate: float = FRAME_RATE) -> int:
    return int(round(duration_s * rate))


def rasterize(events, duration_s: float, rate: float = FRAME_RATE) -> np.ndarray:
    """0/1 mask of shape (L, K): frame l is active for event k when its centre lies in [onset, offset)."""
    L = frame_count(duration_s, rate)
    centres = (np.arange(L) + 0.5) / rate
    mask = np.zeros((L, len(events)))
    for k, ev in enumerate(events):
        mask[:, k] = (centres >= ev.onset_s) & (centres < ev.offset_s)
    return mask


@dataclass
class EventTimeline:
    clip_id: str
    duration_s: float
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.events = [e if isinstance(e, Event) else Event(**e) for e in self.events]
        for e in self.events:
            if not 0 <= e.onset_s < e.offset_s <= self.duration_s + 1e-9:
                raise DomainError(f"event {e} outside clip {self.clip_id} of {self.duration_s}s")

    @property
    def mask(self) -> np.ndarray:
        return rasterize(self.events, self.duration_s)

    @property
    def n_frames(self) -> int:
        return frame_count(self.duration_s)

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.events})

    def to_json(self) -> str:
        return json.dumps({"clip": self.clip_id, "duration_s": self.duration_s,
                           "events": [e.as_dict() for e in self.events]}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EventTimeline":
        return cls(d["clip"], d["duration_s"], d.get("events", []))


def read_annotations(path) -> list[EventTimeline]:
    with open(path, encoding="utf-8") as fh:
        return [EventTimeline.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_annotations(path, timelines) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in timelines:
            fh.write(t.to_json() + "\n")


@dataclass
class FrameItem:
    embeddings: np.ndarray  # (L_b, C_e)
    query: str
    timeline: EventTimeline


@dataclass
class FrameBatch:
    items: list

    def __len__(self):
        return len(self.items)

    @property
    def max_len(self) -> int:
        return max(it.embeddings.shape[0] for it in self.items)

    def valid(self) -> np.ndarray:
        """(B, L) validity mask for the padded batch."""
        L = self.max_len
        return np.array([[l < it.embeddings.shape[0] for l in range(L)] for it in self.items])

    def padded(self) -> np.ndarray:
        L = self.max_len
        C = self.items[0].embeddings.shape[1]
        out = np.zeros((len(self.items), L, C))
        for b, it in enumerate(self.items):
            out[b, :it.embeddings.shape[0]] = it.embeddings
        return out


def build_frame_labels(batch: FrameBatch, ont: Ontology, include_ancestors: bool = False) -> np.ndarray:
    """z[b, l, b'] = +1 when an event active at frame l of item b lies in the expansion of query b'.

    A query therefore matches its own class and every descendant ("dog"
    matches "bark" frames). All other valid frames get -1 and padded frames
    get 0 (ignored by the loss).
    """
    B, L = len(batch), batch.max_len
    expanded = [ont_expand(it.query, ont, include_ancestors) for it in batch.items]
    z = np.zeros((B, L, B))
    for b, it in enumerate(batch.items):
        n = it.embeddings.shape[0]
        tl = it.timeline
        mask = tl.mask
        if mask.shape[0] < n:
            mask = np.vstack([mask, np.zeros((n - mask.shape[0], mask.shape[1]))])
        mask = mask[:n]
        active = np.zeros((n, B), dtype=bool)
        for k, ev in enumerate(tl.events):
            label = ont.resolve(ev.label)
            hit = np.array([label in variants for variants in expanded])
            if hit.any():
                active |= (mask[:, k] > 0)[:, None] & hit[None, :]
        z[b, :n] = np.where(active, 1.0, -1.0)
    return z


def frame_logits(e_a, h_t, bridge) -> np.ndarray:
    """logit_l = (bridge @ e_l) . h_t for each frame."""
    e_a, h_t, bridge = as_tensor(e_a), as_tensor(h_t), as_tensor(bridge)
    if e_a.shape[-1] != bridge.shape[1] or h_t.shape[-1] != bridge.shape[0]:
        raise DimensionError(
            f"frame logits: embeddings {e_a.shape}, text {h_t.shape}, bridge {bridge.shape}")
    return (e_a @ bridge.T) @ h_t


def frame_logits_backward(e_a, h_t, bridge, grad_logits):
    """Gradients of :func:`frame_logits` for ``(bridge, e_a, h_t)``."""
    proj = e_a @ bridge.T
    d_bridge = np.outer(h_t, grad_logits @ e_a)
    d_e = np.outer(grad_logits, h_t @ bridge)
    d_h = grad_logits @ proj
    return d_bridge, d_e, d_h


class FrameLoss(NamedTuple):
    loss: float
    grad_logits: np.ndarray
    grad_alpha: float
    grad_beta: float


def frame_loss(logits, labels, mode: str, alpha: float, beta: float) -> FrameLoss:
    """Mean of -log sigmoid(z * (alpha * logit + beta)) over non-ignored cells.

    ``local`` expects ``(B, L)`` logits and labels; ``global`` expects ``(B, L, B)``.
    Labels equal to 0 mark padded frames.
    """
    logits, labels = as_tensor(logits), as_tensor(labels)
    if mode not in ("local", "global"):
        raise ParameterError(f"unknown frame-loss mode {mode!r}")
    want = 2 if mode == "local" else 3
    if logits.ndim != want or logits.shape != labels.shape:
        raise DimensionError(f"{mode} mode needs matching rank-{want} logits/labels, "
                             f"got {logits.shape} and {labels.shape}")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        raise DomainError("every frame is ignored")
    u = alpha * logits + beta
    cell = np.where(valid, -log_sigmoid(labels * u), 0.0)
    loss = float(cell.sum() / n)
    d_u = np.where(valid, -labels * sigmoid(-labels * u), 0.0) / n
    return FrameLoss(loss, alpha * d_u, float(np.sum(d_u * logits)), float(np.sum(d_u)))


def local_labels(z: np.ndarray) -> np.ndarray:
    """Diagonal slice z[b, l, b] used by the local-activity objective."""
    B = z.shape[0]
    return z[np.arange(B), :, np.arange(B)]


def sample_objective(p_local: float, rng: PrngStream) -> str:
    if not 0.0 <= p_local <= 1.0:
        raise ParameterError("p_local must lie in [0, 1]")
    return "local" if rng.uniform() < p_local else "global"


class ObjectiveCounter:
    """Tally of sampled objectives, one counter per mode."""

    def __init__(self):
        self.local = 0
        self.global_ = 0

    def draw(self, p_local: float, rng: PrngStream) -> str:
        mode = sample_objective(p_local, rng)
        if mode == "local":
            self.local += 1
        else:
            self.global_ += 1
        return mode

    @property
    def total(self) -> int:
        return self.local + self.global_


def binomial_within(k: int, n: int, p: float, n_sigma: float = 3.0) -> bool:
    return abs(k - n * p) <= n_sigma * math.sqrt(n * p * (1 - p)) + 1e-12
