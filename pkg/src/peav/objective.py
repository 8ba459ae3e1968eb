"""Multi-pair sigmoid contrastive objective with analytic gradients."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, DomainError, NumericError, ParameterError
from .numeric import as_tensor, log_sigmoid, sigmoid

STREAM_TAGS = ("A", "V", "AV", "AT", "VT", "AVT", "A+VT", "V+AT")

PRETRAIN_8 = (
    ("A", "AT"),
    ("A", "V"),
    ("A", "AVT"),
    ("AV", "AT"),
    ("AV", "AVT"),
    ("V", "AT"),
    ("V", "VT"),
    ("V", "AVT"),
)
JOINT_PAIRS = (("A+VT", "V"), ("V+AT", "A"))

DEFAULT_ALPHA = 10.0
DEFAULT_BETA = -10.0


@dataclass
class LossPairSpec:
    left: str
    right: str
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    weight: float = 1.0

    def __post_init__(self):
        for tag in (self.left, self.right):
            if tag not in STREAM_TAGS:
                raise ConfigurationError(f"unknown stream tag {tag!r}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive for pair {self.name}")
        if self.weight < 0:
            raise ConfigurationError(f"weight must be non-negative for pair {self.name}")

    @property
    def name(self) -> str:
        return f"{self.left}-{self.right}"

    @property
    def key(self) -> frozenset:
        return frozenset((self.left, self.right))


@dataclass
class PairRegistry:
    pairs: list[LossPairSpec] = field(default_factory=list)
    preset: str = "CUSTOM"

    def __post_init__(self):
        seen = set()
        for p in self.pairs:
            if p.key in seen:
                raise ConfigurationError(f"duplicate pair {p.name}")
            seen.add(p.key)

    @classmethod
    def pretrain(cls, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> "PairRegistry":
        return cls([LossPairSpec(l, r, alpha, beta) for l, r in PRETRAIN_8], "PRETRAIN_8")

    @classmethod
    def finetune(cls, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> "PairRegistry":
        pairs = [LossPairSpec(l, r, alpha, beta) for l, r in PRETRAIN_8 + JOINT_PAIRS]
        return cls(pairs, "FINETUNE_10")

    @classmethod
    def from_preset(cls, name: str) -> "PairRegistry":
        if name == "PRETRAIN_8":
            return cls.pretrain()
        if name == "FINETUNE_10":
            return cls.finetune()
        raise ConfigurationError(f"unknown registry preset {name!r}")

    @classmethod
    def from_names(cls, names) -> "PairRegistry":
        """Build a custom registry from names such as ``"A-AT"`` or ``"V+AT-A"``."""
        pairs = []
        for name in names:
            left, sep, right = _split_pair_name(name)
            pairs.append(LossPairSpec(left, right))
        return cls(pairs, "CUSTOM")

    def streams(self) -> list[str]:
        out = []
        for p in self.pairs:
            for tag in (p.left, p.right):
                if tag not in out:
                    out.append(tag)
        return out

    def to_json(self) -> str:
        return json.dumps([asdict(p) for p in self.pairs], sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PairRegistry":
        items = json.loads(text)
        return cls([LossPairSpec(**item) for item in items], "CUSTOM")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _split_pair_name(name: str):
    # tags never contain '-', so the last '-' is the separator only for simple tags;
    # try every split and keep the one that yields two known tags
    for i, ch in enumerate(name):
        if ch == "-" and name[:i] in STREAM_TAGS and name[i + 1:] in STREAM_TAGS:
            return name[:i], "-", name[i + 1:]
    raise ConfigurationError(f"cannot parse pair name {name!r}")


class PairLoss(NamedTuple):
    loss: float
    grad_left: np.ndarray
    grad_right: np.ndarray
    grad_alpha: float
    grad_beta: float


def sigmoid_pair_loss(h_left, h_right, alpha: float, beta: float,
                      literal_sign: bool = False) -> PairLoss:
    """Sigmoid contrastive loss over the full B x B similarity matrix.

    Matched rows (b == b') are positives, every other cell a negative; the
    sum runs over all B*B cells and is divided by B. ``literal_sign`` negates
    the similarity term, a diagnostic variant that rewards mismatched pairs.
    """
    h_left = as_tensor(h_left)
    h_right = as_tensor(h_right)
    if h_left.ndim != 2 or h_left.shape != h_right.shape:
        raise DomainError(f"pair shapes differ: {h_left.shape} vs {h_right.shape}")
    B = h_left.shape[0]
    if B == 0:
        raise DomainError("empty batch")
    if not (np.all(np.isfinite(h_left)) and np.all(np.isfinite(h_right))
            and math.isfinite(alpha) and math.isfinite(beta)):
        raise DomainError("non-finite input to sigmoid_pair_loss")

    sign = -1.0 if literal_sign else 1.0
    s = h_left @ h_right.T
    z = np.full((B, B), -1.0)
    np.fill_diagonal(z, 1.0)
    u = sign * alpha * s + beta
    loss = -np.sum(log_sigmoid(z * u)) / B

    d_u = -z * sigmoid(-z * u) / B
    d_s = d_u * (sign * alpha)
    return PairLoss(
        loss=float(loss),
        grad_left=d_s @ h_right,
        grad_right=d_s.T @ h_left,
        grad_alpha=float(np.sum(d_u * sign * s)),
        grad_beta=float(np.sum(d_u)),
    )


class MultiPairLoss(NamedTuple):
    total: float
    per_pair: list[float]
    stream_grads: dict[str, np.ndarray]
    alpha_grads: list[float]
    beta_grads: list[float]


def multi_pair_loss(bundle, registry: PairRegistry, literal_sign: bool = False) -> MultiPairLoss:
    """Weighted sum of pair losses; gradients accumulate over pairs sharing a stream."""
    per_pair, alpha_grads, beta_grads = [], [], []
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for pair in registry:
        for tag in (pair.left, pair.right):
            if tag not in bundle:
                raise ConfigurationError(f"stream {tag} missing for pair {pair.name}")
        res = sigmoid_pair_loss(bundle[pair.left], bundle[pair.right], pair.alpha, pair.beta,
                                literal_sign)
        per_pair.append(res.loss)
        total += pair.weight * res.loss
        for tag, g in ((pair.left, res.grad_left), (pair.right, res.grad_right)):
            g = pair.weight * g
            grads[tag] = grads[tag] + g if tag in grads else g
        alpha_grads.append(pair.weight * res.grad_alpha)
        beta_grads.append(pair.weight * res.grad_beta)
    return MultiPairLoss(total, per_pair, grads, alpha_grads, beta_grads)


def registry_params(registry: PairRegistry) -> dict[str, np.ndarray]:
    """Trainable per-pair scalars; temperatures live in log-space."""
    params = {}
    for p in registry:
        params[f"pair/{p.name}/log_alpha"] = np.array(math.log(p.alpha))
        params[f"pair/{p.name}/beta"] = np.array(float(p.beta))
    return params


def registry_grads(registry: PairRegistry, result: MultiPairLoss) -> dict[str, np.ndarray]:
    grads = {}
    for p, ga, gb in zip(registry, result.alpha_grads, result.beta_grads):
        # d/d(log a) = a * d/da
        grads[f"pair/{p.name}/log_alpha"] = np.array(ga * p.alpha)
        grads[f"pair/{p.name}/beta"] = np.array(gb)
    return grads


def apply_registry_params(registry: PairRegistry, params: dict[str, np.ndarray]) -> None:
    for p in registry:
        log_alpha = float(params[f"pair/{p.name}/log_alpha"])
        beta = float(params[f"pair/{p.name}/beta"])
        if not (math.isfinite(log_alpha) and log_alpha < 700 and math.isfinite(beta)):
            raise NumericError(f"temperature/bias of pair {p.name} left the finite range")
        p.alpha = math.exp(log_alpha)
        p.beta = beta


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0, state: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """One SGD step with optional heavy-ball momentum.

    Returns a new parameter dict. ``state`` holds the momentum buffers and is
    updated in place. Parameters without a gradient are passed through.
    """
    if not lr > 0:
        raise ParameterError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if momentum:
            if state is None:
                raise ParameterError("momentum requires a state dict")
            buf = state.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            state[name] = buf
            g = buf
        out[name] = p - lr * g
    return out
