"""Gated multimodal score fusion and prototype imprinting.

Two small perceptrons read the concatenated ``[f3d; f2d]`` feature: one
produces modality weights (softmax over 2 logits), the other per-novel-class
rebalancing factors (sigmoid, or softmax in the alternative mode). Fused
novel-class scores are ``gamma * (a3d * S3d + a2d * S2d)``. Gates are fit
by full-batch gradient descent on the incremental loss with hand-derived
gradients; prototypes stay fixed during that fit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assignment import DEFAULT_K, assign_centers
from .errors import CategoryWithoutPositives, DimensionMismatch, EmptySupport, NonFiniteLoss, ShapeMismatch
from .losses import incremental_loss, incremental_loss_grad
from .prototypes import PrototypeStore, class_scores, update_prototype

log = logging.getLogger(__name__)

HIDDEN = 64
_PARAM_NAMES = ("w1", "b1", "w2", "b2")


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Mlp:
    """Two-layer perceptron, ReLU hidden layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_in, d_out, hidden, rng):
        bound = 1.0 / np.sqrt(d_in)
        return cls(rng.uniform(-bound, bound, (hidden, d_in)), np.zeros(hidden),
                   np.zeros((d_out, hidden)), np.zeros(d_out))

    def forward(self, x):
        pre = x @ self.w1.T + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.w2.T + self.b2, (x, pre, h)

    def backward(self, dz, cache):
        x, pre, h = cache
        dh = dz @ self.w2
        dpre = dh * (pre > 0)
        return {"w1": dpre.T @ x, "b1": dpre.sum(axis=0), "w2": dz.T @ h, "b2": dz.sum(axis=0)}

    def params(self):
        return {k: getattr(self, k) for k in _PARAM_NAMES}

    def copy(self):
        return Mlp(*(getattr(self, k).copy() for k in _PARAM_NAMES))

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in _PARAM_NAMES}

    @classmethod
    def from_dict(cls, d):
        w1, b1, w2, b2 = (np.asarray(d[k], dtype=np.float64) for k in _PARAM_NAMES)
        # an empty output layer serializes as [] and loses its hidden width
        return cls(w1, b1, w2.reshape(-1, len(b1)), b2)


@dataclass
class GateParams:
    alpha: Mlp
    gamma: Mlp
    dim3d: int
    dim2d: int
    novel: list = field(default_factory=list)
    hidden: int = HIDDEN
    gamma_activation: str = "sigmoid"
    seed: int = 0

    @classmethod
    def init(cls, dim3d, dim2d, novel=(), hidden=HIDDEN, seed=0, gamma_activation="sigmoid"):
        """Neutral start: zero output layers give alpha = (0.5, 0.5) and
        gamma = 0.5 (sigmoid) for every input."""
        if gamma_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown gamma activation {gamma_activation!r}")
        rng = np.random.default_rng(seed)
        d = dim3d + dim2d
        alpha = Mlp.init(d, 2, hidden, rng)
        gamma = Mlp.init(d, len(novel), hidden, rng)
        return cls(alpha, gamma, dim3d, dim2d, list(novel), hidden, gamma_activation, seed)

    def add_classes(self, categories):
        """Grow the gamma output layer with zero rows for new novel classes."""
        new = [c for c in categories if c not in self.novel]
        if not new:
            return self
        self.gamma.w2 = np.vstack([self.gamma.w2, np.zeros((len(new), self.hidden))])
        self.gamma.b2 = np.concatenate([self.gamma.b2, np.zeros(len(new))])
        self.novel.extend(new)
        return self

    def copy(self):
        return GateParams(self.alpha.copy(), self.gamma.copy(), self.dim3d, self.dim2d, list(self.novel),
                          self.hidden, self.gamma_activation, self.seed)

    def flat(self) -> dict:
        out = {f"alpha.{k}": v for k, v in self.alpha.params().items()}
        out.update({f"gamma.{k}": v for k, v in self.gamma.params().items()})
        return out

    def to_dict(self) -> dict:
        return {"dim3d": self.dim3d, "dim2d": self.dim2d, "hidden": self.hidden,
                "gamma_activation": self.gamma_activation, "seed": self.seed, "novel": list(self.novel),
                "alpha": self.alpha.to_dict(), "gamma": self.gamma.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "GateParams":
        return cls(Mlp.from_dict(d["alpha"]), Mlp.from_dict(d["gamma"]), int(d["dim3d"]), int(d["dim2d"]),
                   list(d["novel"]), int(d["hidden"]), d["gamma_activation"], int(d.get("seed", 0)))


def _concat(f3d, f2d, g: GateParams):
    f3 = np.atleast_2d(np.asarray(f3d, dtype=np.float64))
    f2 = np.atleast_2d(np.asarray(f2d, dtype=np.float64))
    if f3.shape[1] != g.dim3d or f2.shape[1] != g.dim2d or len(f3) != len(f2):
        raise DimensionMismatch(f"gate expects ({g.dim3d}, {g.dim2d}) features, got {f3.shape} and {f2.shape}")
    return np.hstack([f3, f2])


def _forward(x, g: GateParams):
    za, ca = g.alpha.forward(x)
    zg, cg = g.gamma.forward(x)
    alpha = _softmax(za)
    gamma = _sigmoid(zg) if g.gamma_activation == "sigmoid" else _softmax(zg)
    return alpha, gamma, (ca, cg)


def gate_forward(f3d, f2d, g: GateParams):
    """Return (alpha3d, alpha2d, gamma); batched over rows when given matrices."""
    single = np.ndim(f3d) == 1
    alpha, gamma, _ = _forward(_concat(f3d, f2d, g), g)
    if single:
        return float(alpha[0, 0]), float(alpha[0, 1]), gamma[0]
    return alpha[:, 0], alpha[:, 1], gamma


def fuse_scores(s3d, s2d, alpha3d, alpha2d, gamma) -> np.ndarray:
    s3 = np.asarray(s3d, dtype=np.float64)
    s2 = np.asarray(s2d, dtype=np.float64)
    gm = np.asarray(gamma, dtype=np.float64)
    if s3.shape != s2.shape or np.broadcast_shapes(gm.shape, s3.shape) != s3.shape:
        raise ShapeMismatch(f"S3D {s3.shape}, S2D {s2.shape}, gamma {gm.shape} do not agree")
    a3 = np.asarray(alpha3d, dtype=np.float64)
    a2 = np.asarray(alpha2d, dtype=np.float64)
    if a3.ndim == 1 and s3.ndim == 2:
        a3, a2 = a3[:, None], a2[:, None]
    return gm * (a3 * s3 + a2 * s2)


def novel_scores(f3d, f2d, store: PrototypeStore, g: GateParams, categories=None):
    """Raw per-modality cosine scores against novel prototypes (N x C each)."""
    cats = g.novel if categories is None else categories
    p3, p2 = store.matrices(cats)
    return class_scores(f3d, p3), class_scores(f2d, p2)


def fused_forward(f3d, f2d, s3d, s2d, g: GateParams):
    alpha, gamma, _ = _forward(_concat(f3d, f2d, g), g)
    return fuse_scores(s3d, s2d, alpha[:, 0], alpha[:, 1], gamma)


def loss_and_grad(g: GateParams, x, s3, s2, y):
    """Incremental loss and its gradient w.r.t. every gate parameter."""
    alpha, gamma, (ca, cg) = _forward(x, g)
    mix = alpha[:, :1] * s3 + alpha[:, 1:] * s2
    fused = gamma * mix
    loss = incremental_loss(fused, y)
    d_fused = incremental_loss_grad(fused, y)
    d_gamma = d_fused * mix
    d_mix = d_fused * gamma
    d_alpha = np.column_stack([(d_mix * s3).sum(axis=1), (d_mix * s2).sum(axis=1)])
    d_za = alpha * (d_alpha - (alpha * d_alpha).sum(axis=1, keepdims=True))
    if g.gamma_activation == "sigmoid":
        d_zg = d_gamma * gamma * (1.0 - gamma)
    else:
        d_zg = gamma * (d_gamma - (gamma * d_gamma).sum(axis=1, keepdims=True))
    grads = {f"alpha.{k}": v for k, v in g.alpha.backward(d_za, ca).items()}
    grads.update({f"gamma.{k}": v for k, v in g.gamma.backward(d_zg, cg).items()})
    return loss, grads


def train_gates(f3d, f2d, labels, g: GateParams, store: PrototypeStore, epochs: int = 200, lr: float = 0.01):
    """Full-batch gradient descent on the incremental loss.

    ``labels[i]`` is an index into ``g.novel`` or -1 for a sample with an
    all-zero target. Returns the trained copy of ``g`` and the loss trace
    (loss before each step, then the final loss).
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) == 0:
        raise EmptySupport("no support samples to train gates on")
    if not g.novel:
        raise EmptySupport("gate has no novel classes")
    x = _concat(f3d, f2d, g)
    s3, s2 = novel_scores(f3d, f2d, store, g)
    y = np.zeros((len(labels), len(g.novel)))
    pos = labels >= 0
    y[np.flatnonzero(pos), labels[pos]] = 1.0
    g = g.copy()
    params = g.flat()
    trace = []
    for _ in range(epochs):
        loss, grads = loss_and_grad(g, x, s3, s2, y)
        trace.append(loss)
        if not np.isfinite(loss):
            raise NonFiniteLoss("incremental loss became non-finite", trace)
        for k, p in params.items():
            p -= lr * grads[k]
    final, _ = loss_and_grad(g, x, s3, s2, y)
    trace.append(final)
    if not np.isfinite(final):
        raise NonFiniteLoss("incremental loss became non-finite", trace)
    return g, trace


@dataclass
class SupportScene:
    """One annotated support scene: candidate locations with their 3D and
    aligned 2D features, plus the annotated (box, category) pairs."""

    locations: np.ndarray
    feat3d: np.ndarray
    feat2d: np.ndarray
    boxes: list
    scene_id: str = ""


@dataclass
class ImprintResult:
    store: PrototypeStore
    gates: GateParams
    trace: list
    missing: list

    def __iter__(self):
        return iter((self.store, self.gates))


def imprint_session(support, store: PrototypeStore, g: GateParams, novel=None, k: int = DEFAULT_K,
                    epochs: int = 200, lr: float = 0.01, imprint: bool = True, strict: bool = False) -> ImprintResult:
    """Imprint novel prototypes from ``support`` scenes, then fit the gates.

    For each scene in order, positives are selected by center assignment;
    every novel category present contributes its per-scene mean 3D and 2D
    feature to a momentum update. Categories that never get a positive are
    listed in ``missing`` (or raised with ``strict``).
    """
    support = list(support)
    if not support:
        raise EmptySupport("empty support set")
    novel = list(novel) if novel is not None else [c for c in store.novel if c not in g.novel]
    novel_set = set(novel)
    samples3, samples2, labels = [], [], []
    seen = set()
    for scene in support:
        res = assign_centers(scene.locations, scene.boxes, k)
        for c, idx in res.by_category().items():
            if c not in novel_set:
                continue
            f3 = np.asarray(scene.feat3d)[idx]
            f2 = np.asarray(scene.feat2d)[idx]
            update_prototype(store, c, f3.mean(axis=0), f2.mean(axis=0), imprint=imprint)
            seen.add(c)
            samples3.append(f3)
            samples2.append(f2)
            labels.append(np.full(len(idx), c, dtype=object))
    missing = [c for c in novel if c not in seen]
    if missing and strict:
        raise CategoryWithoutPositives(missing)
    g.add_classes([c for c in novel if c in seen])
    trace = []
    if samples3:
        names = np.concatenate(labels)
        lab = np.array([g.novel.index(c) for c in names])
        g, trace = train_gates(np.vstack(samples3), np.vstack(samples2), lab, g, store, epochs, lr)
    if missing:
        log.warning("categories without positives: %s", missing)
    return ImprintResult(store, g, trace, missing)
