"""Zero-shot retrieval and classification metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, ParameterError
from .numeric import as_tensor, l2_normalize, softmax_axis

JOINT_TASKS = ("T+V->A", "T+A->V", "T->A+V", "A+V->T")

# each joint task: native (query, gallery) and the two unimodal (query, gallery) pairs
_JOINT = {
    "T+V->A": (("V+AT", "A"), (("AT", "A"), ("V", "A"))),
    "T+A->V": (("A+VT", "V"), (("VT", "V"), ("A", "V"))),
    "T->A+V": (("AVT", "A+V"), (("AT", "A"), ("VT", "V"))),
    "A+V->T": (("AV", "AVT"), (("A", "AT"), ("V", "VT"))),
}


@dataclass
class SimMatrix:
    values: np.ndarray
    positives: np.ndarray       # bool (Q, G)
    query_ids: list | None = None
    gallery_ids: list | None = None

    def __post_init__(self):
        self.values = as_tensor(self.values)
        self.positives = np.asarray(self.positives, dtype=bool)
        if self.values.shape != self.positives.shape:
            raise DomainError("positives must match the similarity matrix shape")
        if not self.positives.any(axis=1).all():
            raise DomainError("every query needs at least one positive")


def concept_positives(query_concepts, gallery_concepts) -> np.ndarray:
    return np.asarray(query_concepts)[:, None] == np.asarray(gallery_concepts)[None, :]


def dsl_reweight(sims, sharpen: float = 10.0, axis: int = 0) -> np.ndarray:
    """Dual-softmax reweighting: ``sims * softmax(sharpen * sims)`` along the query axis.

    No bias is added; a shift would cancel inside the softmax anyway.
    """
    if not sharpen > 0:
        raise ParameterError("sharpen must be positive")
    sims = as_tensor(sims)
    return sims * softmax_axis(sharpen * sims, axis=axis)


def recall_at_k(sims: SimMatrix, k: int) -> float:
    Q, G = sims.values.shape
    if k < 1 or k > G:
        raise ParameterError(f"k={k} outside [1, {G}]")
    # stable sort keeps the lower gallery index first on ties
    order = np.argsort(-sims.values, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(sims.positives, order, axis=1).any(axis=1)
    return float(hits.mean())


def class_prototypes(class_names, templates, text_encoder) -> np.ndarray:
    if not class_names:
        raise ParameterError("empty class list")
    if not templates:
        raise ParameterError("need at least one template")
    protos = []
    for c in class_names:
        # sorted unique prompts: order of templates and duplicates cannot matter
        prompts = sorted({t.format(c=c) for t in templates})
        embs = l2_normalize(np.stack([as_tensor(text_encoder(p)) for p in prompts]), axis=-1)
        protos.append(l2_normalize(embs.mean(axis=0)))
    return np.stack(protos)


def classify_zero_shot(embeds, labels, class_names, templates, text_encoder) -> float:
    """Top-1 accuracy of nearest template-averaged class prototype."""
    protos = class_prototypes(class_names, templates, text_encoder)
    pred = np.argmax(l2_normalize(as_tensor(embeds), axis=-1) @ protos.T, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def _stream(bundle, tag):
    if tag == "A+V":
        for t in ("A", "V"):
            if t not in bundle:
                raise ConfigurationError(f"gallery fusion needs stream {t}")
        return l2_normalize(bundle["A"] + bundle["V"], axis=-1)
    if tag not in bundle:
        raise ConfigurationError(f"stream {tag} is missing from the bundle")
    return bundle[tag]


def pair_recall(bundle, query: str, gallery: str, positives=None, k: int = 1,
                dsl: bool = False, sharpen: float = 10.0) -> float:
    q, g = _stream(bundle, query), _stream(bundle, gallery)
    sims = q @ g.T
    if dsl:
        sims = dsl_reweight(sims, sharpen)
    if positives is None:
        positives = np.eye(q.shape[0], g.shape[0], dtype=bool)
    return recall_at_k(SimMatrix(sims, positives), k)


def joint_query_eval(bundle, task: str, strategy: str = "native", positives=None,
                     dsl: bool = False, sharpen: float = 10.0) -> float:
    """Recall@1 for a joint-modality task.

    ``native`` ranks with the joint embeddings; ``max_unimodal`` returns the
    larger of the two unimodal recalls the task decomposes into.
    """
    if task not in _JOINT:
        raise ParameterError(f"unknown joint task {task!r}")
    native, unimodal = _JOINT[task]
    if strategy == "native":
        return pair_recall(bundle, *native, positives=positives, dsl=dsl, sharpen=sharpen)
    if strategy == "max_unimodal":
        return max(pair_recall(bundle, q, g, positives=positives, dsl=dsl, sharpen=sharpen)
                   for q, g in unimodal)
    raise ParameterError(f"unknown strategy {strategy!r}")


def metrics_rows(metrics: dict) -> list[tuple]:
    """Flatten ``{(task, direction, metric): value}`` into sorted CSV rows."""
    return [(t, d, m, float(v)) for (t, d, m), v in sorted(metrics.items())]


def metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "direction", "metric", "value"])
    for row in metrics_rows(metrics):
        w.writerow([row[0], row[1], row[2], f"{row[3]:.6f}"])
    return buf.getvalue()


def metrics_json(metrics: dict, extra: dict | None = None) -> str:
    rows = [{"task": t, "direction": d, "metric": m, "value": v} for t, d, m, v in metrics_rows(metrics)]
    payload = {"metrics": rows, **(extra or {})}
    return json.dumps(payload, sort_keys=True, indent=1)
