"""Per-category 3D/2D prototypes with momentum updates and cosine scoring."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CategoryCollision, DimensionMismatch, UnknownCategory, ZeroNormRow

DEFAULT_MOMENTUM = 0.999


@dataclass
class PrototypeStore:
    """Category registry plus one prototype vector per modality.

    ``sessions[0]`` holds the base categories, ``sessions[t]`` the novel
    categories introduced by incremental session ``t``. Prototypes stay
    ``None`` until the first update.
    """

    dim3d: int
    dim2d: int
    momentum: float = DEFAULT_MOMENTUM
    sessions: list = field(default_factory=list)
    proto3d: dict = field(default_factory=dict)
    proto2d: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @property
    def categories(self) -> list[str]:
        return [c for s in self.sessions for c in s]

    @property
    def base(self) -> list[str]:
        return list(self.sessions[0]) if self.sessions else []

    @property
    def novel(self) -> list[str]:
        return [c for s in self.sessions[1:] for c in s]

    def register(self, categories) -> int:
        """Open a new session with ``categories``; returns its index."""
        categories = list(categories)
        if len(set(categories)) != len(categories):
            raise CategoryCollision(f"duplicate categories in session: {categories}")
        clash = set(categories) & set(self.categories)
        if clash:
            raise CategoryCollision(f"categories already registered: {sorted(clash)}")
        self.sessions.append(categories)
        for c in categories:
            self.proto3d.setdefault(c, None)
            self.proto2d.setdefault(c, None)
        return len(self.sessions) - 1

    def has_prototype(self, c) -> bool:
        return self.proto3d.get(c) is not None

    def matrices(self, categories):
        """Stacked (C x L, C x K) prototypes for ``categories``."""
        missing = [c for c in categories if not self.has_prototype(c)]
        if missing:
            raise UnknownCategory(f"no prototype for {missing}")
        if not categories:
            return np.zeros((0, self.dim3d)), np.zeros((0, self.dim2d))
        return (np.stack([self.proto3d[c] for c in categories]),
                np.stack([self.proto2d[c] for c in categories]))

    def digest(self, categories=None) -> str:
        """SHA-256 over the registry and prototype bytes (optionally a subset)."""
        h = hashlib.sha256()
        h.update(repr((self.dim3d, self.dim2d, self.momentum)).encode())
        cats = self.categories if categories is None else list(categories)
        if categories is None:
            h.update(repr(self.sessions).encode())
        for c in cats:
            h.update(c.encode() + b"\0")
            for proto in (self.proto3d.get(c), self.proto2d.get(c)):
                h.update(b"-" if proto is None else np.ascontiguousarray(proto, dtype=np.float64).tobytes())
        return h.hexdigest()

    def copy(self) -> "PrototypeStore":
        cp = lambda d: {k: (None if v is None else v.copy()) for k, v in d.items()}
        return PrototypeStore(self.dim3d, self.dim2d, self.momentum,
                              [list(s) for s in self.sessions], cp(self.proto3d), cp(self.proto2d))

    def to_dict(self) -> dict:
        vec = lambda v: None if v is None else [float(x) for x in v]
        return {
            "dim3d": self.dim3d,
            "dim2d": self.dim2d,
            "momentum": self.momentum,
            "sessions": [list(s) for s in self.sessions],
            "prototypes": {c: {"proto3d": vec(self.proto3d[c]), "proto2d": vec(self.proto2d[c])}
                           for c in self.categories},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeStore":
        store = cls(int(d["dim3d"]), int(d["dim2d"]), float(d["momentum"]))
        for s in d["sessions"]:
            store.register(s)
        arr = lambda v: None if v is None else np.asarray(v, dtype=np.float64)
        for c, p in d["prototypes"].items():
            if c not in store.proto3d:
                raise UnknownCategory(f"prototype for unregistered category {c!r}")
            store.proto3d[c], store.proto2d[c] = arr(p["proto3d"]), arr(p["proto2d"])
        return store


def ema(old, new, mu: float):
    return mu * old + (1.0 - mu) * new


def update_prototype(store: PrototypeStore, c, mean_feat3d, mean_feat2d, imprint: bool = True) -> PrototypeStore:
    """T <- mu T + (1 - mu) F for both modalities of category ``c``.

    The first update of an unset prototype copies the mean feature when
    ``imprint`` is true; otherwise the prototype starts from zeros.
    """
    if c not in store.proto3d:
        raise UnknownCategory(f"category {c!r} is not registered")
    f3 = np.asarray(mean_feat3d, dtype=np.float64).reshape(-1)
    f2 = np.asarray(mean_feat2d, dtype=np.float64).reshape(-1)
    if f3.shape != (store.dim3d,) or f2.shape != (store.dim2d,):
        raise DimensionMismatch(f"expected ({store.dim3d}, {store.dim2d}) features, got ({f3.size}, {f2.size})")
    for protos, f in ((store.proto3d, f3), (store.proto2d, f2)):
        if protos[c] is None:
            protos[c] = f.copy() if imprint else ema(np.zeros_like(f), f, store.momentum)
        else:
            protos[c] = ema(protos[c], f, store.momentum)
    return store


def _unit_rows(x, what):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ZeroNormRow(f"{what} has zero-norm rows: {np.flatnonzero(n[:, 0] == 0).tolist()}")
    return x / n


def class_scores(feats, protos) -> np.ndarray:
    """Cosine similarity matrix (N x C) between feature rows and prototype rows."""
    f = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    p = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    if p.size == 0:
        return np.zeros((len(f), 0))
    if f.shape[1] != p.shape[1]:
        raise DimensionMismatch(f"feature dim {f.shape[1]} != prototype dim {p.shape[1]}")
    return np.clip(_unit_rows(f, "features") @ _unit_rows(p, "prototypes").T, -1.0, 1.0)
