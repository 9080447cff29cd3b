"""Named category splits (alphabetical category order) and synthetic sizes."""
from __future__ import annotations

from dataclasses import dataclass

SCANNET = ["bathtub", "bed", "bookshelf", "cabinet", "chair", "counter", "curtain", "desk", "door",
           "garbagebin", "picture", "refrigerator", "showercurtain", "sink", "sofa", "table", "toilet", "window"]
SUNRGBD = ["bathtub", "bed", "bookshelf", "chair", "desk", "dresser", "night_stand", "sofa", "table", "toilet"]
SYNTH = [f"c{i:02d}" for i in range(9)]


@dataclass(frozen=True)
class ProtocolPreset:
    name: str
    categories: tuple
    base: tuple
    tasks: tuple  # sequential tasks; batch mode merges them
    aligned_iou: bool

    @property
    def novel(self) -> list:
        return [c for t in self.tasks for c in t]

    def sessions(self, protocol: str = "batch") -> list:
        if protocol == "batch":
            return [self.novel]
        if protocol == "sequential":
            return [list(t) for t in self.tasks]
        raise ValueError(f"unknown protocol {protocol!r}")


def _p(name, cats, n_base, tasks, aligned):
    return ProtocolPreset(name, tuple(cats), tuple(cats[:n_base]), tuple(tuple(t) for t in tasks), aligned)


PRESETS = {p.name: p for p in [
    _p("scannet-1way", SCANNET, 17, [SCANNET[17:]], True),
    _p("scannet-9way", SCANNET, 9, [SCANNET[9:]], True),
    _p("scannet-seq", SCANNET, 9, [SCANNET[9:12], SCANNET[12:15], SCANNET[15:18]], True),
    _p("sunrgbd-1way", SUNRGBD, 9, [SUNRGBD[9:]], False),
    _p("sunrgbd-5way", SUNRGBD, 5, [SUNRGBD[5:]], False),
    _p("sunrgbd-seq", SUNRGBD, 5, [SUNRGBD[5:8], SUNRGBD[8:10]], False),
    _p("synth-3way", SYNTH, 6, [SYNTH[6:]], True),
    _p("synth-seq", SYNTH, 3, [SYNTH[3:6], SYNTH[6:9]], True),
]}


def get_preset(name: str) -> ProtocolPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# rough (min, max) extents in meters for synthetic stand-ins
SIZE_TABLE = {
    "bathtub": ((1.4, 0.7, 0.5), (1.8, 0.9, 0.7)),
    "bed": ((1.4, 1.9, 0.4), (2.0, 2.2, 0.7)),
    "bookshelf": ((0.8, 0.3, 1.2), (1.2, 0.45, 2.0)),
    "cabinet": ((0.5, 0.4, 0.6), (1.2, 0.6, 1.2)),
    "chair": ((0.45, 0.45, 0.8), (0.6, 0.6, 1.0)),
    "counter": ((1.2, 0.6, 0.85), (2.0, 0.7, 0.95)),
    "curtain": ((1.0, 0.1, 1.6), (2.0, 0.2, 2.2)),
    "desk": ((1.0, 0.5, 0.7), (1.6, 0.8, 0.8)),
    "door": ((0.8, 0.1, 1.9), (1.0, 0.2, 2.1)),
    "garbagebin": ((0.3, 0.3, 0.4), (0.45, 0.45, 0.7)),
    "picture": ((0.4, 0.05, 0.3), (1.0, 0.1, 0.8)),
    "refrigerator": ((0.6, 0.6, 1.6), (0.9, 0.8, 1.9)),
    "showercurtain": ((0.8, 0.1, 1.6), (1.2, 0.2, 1.9)),
    "sink": ((0.4, 0.35, 0.2), (0.7, 0.5, 0.35)),
    "sofa": ((1.6, 0.8, 0.7), (2.2, 1.0, 0.9)),
    "table": ((0.8, 0.6, 0.7), (1.6, 1.0, 0.8)),
    "toilet": ((0.4, 0.6, 0.7), (0.5, 0.75, 0.85)),
    "window": ((0.6, 0.1, 0.8), (1.4, 0.2, 1.4)),
    "dresser": ((0.8, 0.4, 0.8), (1.4, 0.55, 1.2)),
    "night_stand": ((0.4, 0.35, 0.45), (0.6, 0.5, 0.65)),
}
