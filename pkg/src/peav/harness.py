"""Experiment drivers shared by the CLI and the acceptance tests.

Each driver takes a resolved experiment config (see :mod:`peav.config`) and
returns plain dicts/lists so results can be serialised deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .frame import Ontology, default_ontology
from .model import FrozenTowers, ModelConfig, init_heads
from .objective import PairRegistry
from .retrieval import JOINT_TASKS, concept_positives, joint_query_eval
from .sed import PsdsParams
from .synth import Corpus, SedCorpus, gen_contrastive_corpus, gen_sed_corpus, read_corpus, read_sed_corpus
from .training import (CROSS_MODAL_TASKS, EncodedSet, FrameSet, cross_modal_average, embed_all,
                       encode_clips, encode_sed, frame_scores, init_frame_params, retrieval_metrics,
                       sed_report, text_embedding, train_contrastive, train_frame)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.preset(cfg["model"]["preset"])


def registry_from(cfg: dict) -> PairRegistry:
    reg = cfg["registry"]
    if reg.get("pairs"):
        return PairRegistry.from_names(reg["pairs"])
    return PairRegistry.from_preset(reg["preset"])


def contrastive_corpus(cfg: dict, data_dir=None) -> Corpus:
    d = cfg["data"]
    path = data_dir or d["dir"]
    if path is not None:
        return read_corpus(path)
    return gen_contrastive_corpus(d["n_clips"], d["n_concepts"], d["noise"], tuple(d["duration_range"]),
                                  d["mix"], cfg["seed"], d["transcript_fraction"], d["test_fraction"],
                                  model_config(cfg))


def sed_corpus(cfg: dict, data_dir=None, ontology: Ontology | None = None) -> SedCorpus:
    d = cfg["data"]
    path = data_dir or d["dir"]
    if path is not None:
        return read_sed_corpus(path)
    return gen_sed_corpus(d["n_clips"], ontology or default_ontology(), d["polyphony_max"], cfg["seed"],
                          noise=d["noise"], smear_frames=d["smear_frames"],
                          test_fraction=d["test_fraction"], cfg=model_config(cfg))


def psds_params(cfg: dict) -> PsdsParams:
    return PsdsParams(**cfg["eval"]["psds"])


# ---------------------------------------------------------------- contrastive

@dataclass
class ContrastiveSetup:
    model: ModelConfig
    towers: FrozenTowers
    train: EncodedSet
    test: EncodedSet


def prepare_contrastive(cfg: dict, corpus: Corpus | None = None, data_dir=None) -> ContrastiveSetup:
    corpus = corpus or contrastive_corpus(cfg, data_dir)
    mc = corpus.cfg
    towers = FrozenTowers.init(mc, cfg["seed"])
    train = encode_clips(corpus, corpus.split("train"), mc, towers)
    test = encode_clips(corpus, corpus.split("test"), mc, towers)
    if len(train) == 0 or len(test) == 0:
        raise ConfigurationError("corpus needs both train and test clips")
    return ContrastiveSetup(mc, towers, train, test)


def fit_contrastive(setup: ContrastiveSetup, registry: PairRegistry, cfg: dict, seed: int | None = None,
                    steps: int | None = None, train: EncodedSet | None = None, on_step=None):
    t = cfg["training"]
    seed = cfg["seed"] if seed is None else seed
    params = init_heads(setup.model, seed)
    return train_contrastive(setup.train if train is None else train, registry, params,
                             t["steps"] if steps is None else steps, t["batch"], t["lr"],
                             t["momentum"], seed, on_step)


def evaluate_retrieval(setup: ContrastiveSetup, params: dict, cfg: dict) -> dict:
    """Unimodal recall@k (raw and dual-softmax) plus joint tasks in both strategies."""
    ev = cfg["eval"]
    h = embed_all(setup.test, params, ["A", "V", "AV", "AT", "VT", "AVT", "A+VT", "V+AT"])
    metrics = retrieval_metrics(h, setup.test.concepts, ev["sharpen"], tuple(ev["ks"]), ev["tasks"])
    pos = concept_positives(setup.test.concepts, setup.test.concepts)
    for task in JOINT_TASKS:
        for strategy in ("native", "max_unimodal"):
            for dsl in (False, True):
                metrics[(task, f"{strategy}/{'dsl' if dsl else 'raw'}", "R@1")] = joint_query_eval(
                    h, task, strategy, pos, dsl, ev["sharpen"])
    return metrics


def pair_coverage(setup: ContrastiveSetup, rows, seeds, cfg: dict, steps: int | None = None) -> list[dict]:
    """Retrain from scratch for every (registry subset, seed) and report cross-modal R@1."""
    out = []
    for row in rows:
        registry = PairRegistry.from_names(row)
        for seed in seeds:
            res = fit_contrastive(setup, registry, cfg, seed=seed, steps=steps)
            h = embed_all(setup.test, res.params)
            m = retrieval_metrics(h, setup.test.concepts, cfg["eval"]["sharpen"], (1,), CROSS_MODAL_TASKS)
            out.append({
                "pairs": list(row),
                "seed": seed,
                "r1": {t: m[(t, "dsl", "R@1")] for t in CROSS_MODAL_TASKS},
                "r1_raw": {t: m[(t, "raw", "R@1")] for t in CROSS_MODAL_TASKS},
                "cross_modal_avg": cross_modal_average(m),
                "final_loss": res.history[-1][1] if res.history else None,
            })
    return out


def _subset(enc: EncodedSet, idx) -> EncodedSet:
    idx = np.asarray(idx)
    return EncodedSet([enc.ids[i] for i in idx], enc.concepts[idx],
                      {k: v[idx] for k, v in enc.tokens.items()},
                      {k: v[idx] for k, v in enc.masks.items()},
                      {k: v[idx] for k, v in enc.text.items()})


def data_scaling(setup: ContrastiveSetup, fractions, cfg: dict, registry: PairRegistry | None = None,
                 steps: int | None = None) -> list[dict]:
    """Train on nested prefixes of the training split and report cross-modal R@1."""
    registry = registry or registry_from(cfg)
    n = len(setup.train)
    out = []
    for frac in fractions:
        k = max(2, int(round(frac * n)))
        res = fit_contrastive(setup, registry, cfg, steps=steps, train=_subset(setup.train, range(k)))
        m = retrieval_metrics(embed_all(setup.test, res.params), setup.test.concepts,
                              cfg["eval"]["sharpen"], (1,), CROSS_MODAL_TASKS)
        out.append({"fraction": frac, "n_train": k, "cross_modal_avg": cross_modal_average(m)})
    return out


def data_mixing(setup: ContrastiveSetup, sources: list, mixes, cfg: dict, budget: int,
                registry: PairRegistry | None = None, steps: int | None = None) -> list[dict]:
    """Train on ``budget`` clips drawn per source tag in the given ratios.

    ``sources`` lists the source tag of each training clip; every mix maps a
    tag to its share of the budget.
    """
    registry = registry or registry_from(cfg)
    sources = np.asarray(sources)
    out = []
    for mix in mixes:
        idx = []
        for tag, share in sorted(mix.items()):
            pool = np.flatnonzero(sources == tag)
            take = int(round(share * budget))
            if take > len(pool):
                raise ConfigurationError(f"mix needs {take} clips of source {tag!r}, only {len(pool)} exist")
            idx.extend(pool[:take].tolist())
        res = fit_contrastive(setup, registry, cfg, steps=steps, train=_subset(setup.train, sorted(idx)))
        m = retrieval_metrics(embed_all(setup.test, res.params), setup.test.concepts,
                              cfg["eval"]["sharpen"], (1,), CROSS_MODAL_TASKS)
        out.append({"mix": dict(sorted(mix.items())), "n_train": len(idx),
                    "cross_modal_avg": cross_modal_average(m)})
    return out


# ---------------------------------------------------------------- frame-level

@dataclass
class FrameSetup:
    model: ModelConfig
    ontology: Ontology
    train: FrameSet
    test: FrameSet
    text_of: object
    seed: int


def text_encoder(ontology: Ontology, mc: ModelConfig, seed: int):
    """Cached query -> unit text embedding using the frozen audio-caption head."""
    heads = init_heads(mc, seed)
    cache: dict = {}

    def encode(query: str):
        node = ontology.resolve(query)
        if node not in cache:
            cache[node] = text_embedding(ontology.nodes[node].name, mc, heads, seed)
        return cache[node]
    return encode


def prepare_frame(cfg: dict, corpus: SedCorpus | None = None, data_dir=None) -> FrameSetup:
    corpus = corpus or sed_corpus(cfg, data_dir)
    mc = model_config(cfg)
    towers = FrozenTowers.init(mc, cfg["seed"])
    train = encode_sed(corpus, corpus.split("train"), mc, towers)
    test = encode_sed(corpus, corpus.split("test"), mc, towers)
    return FrameSetup(mc, corpus.ontology, train, test, text_encoder(corpus.ontology, mc, cfg["seed"]),
                      cfg["seed"])


def fit_frame(setup: FrameSetup, cfg: dict, steps: int | None = None, p_local: float | None = None,
              seed: int | None = None, on_step=None):
    t = cfg["training"]
    seed = setup.seed if seed is None else seed
    params = init_frame_params(setup.model, seed)
    return train_frame(setup.train, setup.ontology, params, setup.text_of,
                       t["steps"] if steps is None else steps, t["batch"], t["lr"], t["momentum"],
                       t["p_local"] if p_local is None else p_local, seed, t["include_ancestors"], on_step)


def evaluate_sed(setup: FrameSetup, params: dict, cfg: dict) -> dict:
    tracks = frame_scores(setup.test, setup.ontology.leaves(), params, setup.text_of)
    return sed_report(tracks, setup.test.timelines, psds_params(cfg), cfg["eval"]["median_filter"],
                      cfg["eval"]["segment_s"])


def p_local_sweep(setup: FrameSetup, values, cfg: dict, steps: int | None = None) -> list[dict]:
    out = []
    for p in values:
        res = fit_frame(setup, cfg, steps=steps, p_local=p)
        rep = evaluate_sed(setup, res.params, cfg)
        out.append({"p_local": p, "local_steps": res.counter.local, "global_steps": res.counter.global_,
                    "psds1_a": rep["psds1_a"], "psds1_t": rep["psds1_t"], "auroc": rep["auroc"]})
    return out
