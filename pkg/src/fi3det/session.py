"""Base and incremental sessions, N-way K-shot sampling and the full protocol.

The runner strings the other modules together on the synthetic world: a
base session mines pseudo objects, weights them and evaluates the
auxiliary losses against oracle predictions, then imprints base
prototypes from base annotations. Each incremental session samples a
K-shot support set for its novel categories, imprints their prototypes,
fits the gates, and is evaluated over the cumulative category space.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from .assignment import assign_centers
from .errors import CategoryCollision, FormatError, FrozenStateViolation, InsufficientSupport
from .evaluation import Detection, MetricsReport, map_report
from .gating import GateParams, SupportScene, fused_forward, imprint_session
from .geometry import iou3d
from .losses import LossReport, scene_aux_losses
from .presets import PRESETS, SIZE_TABLE, ProtocolPreset, get_preset
from .prototypes import PrototypeStore, class_scores, update_prototype
from .synth import (
    SUPPORT,
    CategorySpec,
    WorldConfig,
    generate_scene,
    make_rng,
    oracle_detector,
    oracle_features,
    oracle_point_predictions,
    render_frames,
)
from .vlm_ingest import MiningConfig, MiningStats, mine_unknown_objects
from .weighting import combined_weights

log = logging.getLogger(__name__)

REPORT_FORMAT = "fi3det-report"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("FI3DET_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items) -> list:
    """Ordered map, threaded up to FI3DET_THREADS workers."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1)[0])


@dataclass
class ProtocolConfig:
    preset: str = "synth-3way"
    protocol: str = "batch"
    split: dict | None = None  # {"categories": [...], "base": [...], "tasks": [[...], ...]}
    world: WorldConfig | None = None
    shot: int = 5
    n_train: int = 24
    n_val: int = 8
    sigma: float = 0.5
    momentum: float = 0.999
    epochs: int = 200
    lr: float = 0.01
    k: int = 6
    hidden: int = 64
    gamma_activation: str = "sigmoid"
    reinit_gates: bool = False
    mine: bool = True
    mining: dict = field(default_factory=dict)
    weighting: dict = field(default_factory=lambda: {"use_point": True, "use_box": True, "normalized": False})
    iou_thresh: float = 0.25
    aligned_iou: bool | None = None
    ap_mode: str = "all_point"
    head_mode: str = "split"
    score_floor: float = 0.0

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = WorldConfig.from_dict(self.world)
        if self.protocol not in ("batch", "sequential"):
            raise ValueError(f"protocol must be batch or sequential, got {self.protocol!r}")
        if self.head_mode not in ("split", "unified"):
            raise ValueError(f"head_mode must be split or unified, got {self.head_mode!r}")
        if self.world is None:
            p = self.split_preset()
            specs = [CategorySpec(c, *SIZE_TABLE[c]) if c in SIZE_TABLE else CategorySpec(c) for c in p.categories]
            n = max(len(specs), 32)
            self.world = WorldConfig(categories=specs, dim3d=n, dim2d=n)
        missing = set(self.split_preset().categories) - set(self.world.names)
        if missing:
            raise ValueError(f"world lacks split categories {sorted(missing)}")

    def split_preset(self) -> ProtocolPreset:
        if self.split is None:
            return get_preset(self.preset)
        s = self.split
        base = list(s["base"])
        tasks = [list(t) for t in s["tasks"]]
        cats = list(s.get("categories", base + [c for t in tasks for c in t]))
        aligned = bool(s.get("aligned_iou", True))
        return ProtocolPreset("custom", tuple(cats), tuple(base), tuple(tuple(t) for t in tasks), aligned)

    @property
    def aligned(self) -> bool:
        return self.split_preset().aligned_iou if self.aligned_iou is None else bool(self.aligned_iou)

    def sessions(self) -> list:
        return self.split_preset().sessions(self.protocol)

    def mining_config(self) -> MiningConfig:
        return MiningConfig(**{"aligned_iou": self.aligned, **self.mining})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = self.world.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ProtocolConfig":
        with open(os.fspath(path)) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SessionState:
    store: PrototypeStore
    gates: GateParams
    t: int = 0
    seed: int = 0
    gate_trace: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    @property
    def c_base(self) -> list:
        return self.store.base

    @property
    def c_all(self) -> list:
        return self.store.categories

    def c_novel(self, t: int) -> list:
        return list(self.store.sessions[t])

    def check_bookkeeping(self):
        sizes = [len(s) for s in self.store.sessions]
        if len(set(self.c_all)) != len(self.c_all) or len(self.c_all) != sum(sizes):
            raise CategoryCollision("session category sets overlap")

    def copy(self) -> "SessionState":
        return SessionState(self.store.copy(), self.gates.copy(), self.t, self.seed)


STATE_FORMAT = "fi3det-state"


def state_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("schemas/state.schema.json").read_text())


def state_to_dict(state: SessionState) -> dict:
    return {"format": STATE_FORMAT, "version": 1, "t": state.t, "seed": state.seed,
            "store": state.store.to_dict(), "gates": state.gates.to_dict()}


def state_from_dict(d: dict) -> SessionState:
    try:
        jsonschema.validate(d, state_schema())
    except jsonschema.ValidationError as exc:
        raise FormatError(f"invalid state file: {exc.message}") from None
    store = PrototypeStore.from_dict(d["store"])
    gates = GateParams.from_dict(d["gates"])
    unknown = set(gates.novel) - set(store.novel)
    if unknown:
        raise FormatError(f"gates cover categories missing from the store: {sorted(unknown)}")
    return SessionState(store, gates, int(d["t"]), int(d["seed"]))


def save_state(path, state: SessionState) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump(state_to_dict(state), fh, indent=1, allow_nan=False)
        fh.write("\n")


def load_state(path) -> SessionState:
    with open(os.fspath(path)) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"state file is not JSON: {exc}") from None
    return state_from_dict(d)


# ------------------------------------------------------------------ scenes

@dataclass
class SceneBundle:
    """A scene with everything the oracle backbone produces for it."""

    scene: object
    seed: int
    feat3d: np.ndarray
    feat2d: np.ndarray
    proposals: list


def make_bundle(world: WorldConfig, seed: int, scene_id: str) -> SceneBundle:
    scene = generate_scene(world, seed, scene_id)
    f3, f2 = oracle_features(scene, world, seed)
    return SceneBundle(scene, seed, f3, f2, oracle_detector(scene, world, seed))


def make_split_scenes(cfg: ProtocolConfig, seed: int, split: str, n: int) -> list:
    stream = {"train": 1, "val": 2}[split]
    return parallel_map(lambda i: make_bundle(cfg.world, derive_seed(seed, stream, i), f"{split}{i:03d}"), range(n))


def names_of(bundle: SceneBundle, world: WorldConfig) -> list:
    return [world.names[int(c)] for c in bundle.scene.gt_labels]


# ------------------------------------------------------------------ base

def supervised_pseudo_iou(field_, pseudo_objects, gt_boxes, aligned=False):
    """Supervision-weighted mean IoU of pseudo boxes against their best GT.

    Each pseudo box counts with the total weight of its (point, box)
    entries, i.e. with the mass it contributes to the auxiliary losses.
    Returns (weighted mean IoU, total weight); (nan, 0) when nothing is
    supervised.
    """
    if len(field_) == 0:
        return float("nan"), 0.0
    w = field_.weight
    num = den = 0.0
    for j in np.unique(field_.box_index):
        mass = float(w[field_.box_index == j].sum())
        best = max((iou3d(pseudo_objects[j].box, g, aligned) for g in gt_boxes), default=0.0)
        num += mass * best
        den += mass
    return (num / den if den > 0 else float("nan")), den


@dataclass
class BaseSceneResult:
    scene_id: str
    pseudo: list
    field: object
    losses: LossReport
    stats: dict


def base_scene(bundle: SceneBundle, cfg: ProtocolConfig, base_names) -> BaseSceneResult:
    world, scene = cfg.world, bundle.scene
    names = names_of(bundle, world)
    base_gt = [b for b, n in zip(scene.gt_boxes, names) if n in base_names]
    unknown_gt = [b for b, n in zip(scene.gt_boxes, names) if n not in base_names]
    frames = render_frames(scene, world, bundle.seed)
    mstats = MiningStats()
    pseudo = mine_unknown_objects(frames, base_gt, cfg.mining_config(), mstats)
    fld = combined_weights(scene.xyz, pseudo, bundle.feat2d, cfg.sigma, **cfg.weighting)
    flat = combined_weights(scene.xyz, pseudo, bundle.feat2d, cfg.sigma, use_point=False, use_box=False)
    obj, boxes = oracle_point_predictions(scene, bundle.proposals)
    losses = scene_aux_losses(fld, pseudo, obj, bundle.feat2d, boxes, cfg.aligned)
    audit = [max((iou3d(o.box, g, cfg.aligned) for g in unknown_gt), default=0.0) for o in pseudo]
    sup_w, mass_w = supervised_pseudo_iou(fld, pseudo, scene.gt_boxes, cfg.aligned)
    sup_u, mass_u = supervised_pseudo_iou(flat, pseudo, scene.gt_boxes, cfg.aligned)
    stats = {
        "n_frames": len(frames), "n_candidates": mstats.candidates, "n_merged": mstats.merged,
        "n_suppressed": mstats.suppressed, "skipped": dict(mstats.skipped), "n_pseudo": len(pseudo),
        "n_unknown_gt": len(unknown_gt), "pseudo_best_iou": audit,
        "supervised_iou": sup_w, "supervised_mass": mass_w,
        "supervised_iou_unweighted": sup_u, "supervised_mass_unweighted": mass_u,
        "weight_boxes_dropped": fld.n_dropped,
    }
    return BaseSceneResult(scene.scene_id, pseudo, fld, losses, stats)


def imprint_base(store: PrototypeStore, bundles, world: WorldConfig, k: int) -> PrototypeStore:
    """Base prototypes from base annotations, scenes in order (momentum EMA)."""
    base = set(store.base)
    for b in bundles:
        boxes = [(box, n) for box, n in zip(b.scene.gt_boxes, names_of(b, world)) if n in base]
        res = assign_centers(b.scene.xyz, boxes, k)
        for c, idx in res.by_category().items():
            update_prototype(store, c, b.feat3d[idx].mean(axis=0), b.feat2d[idx].mean(axis=0))
    return store


@dataclass
class BaseArtifacts:
    state: SessionState
    scenes: list
    summary: dict


def summarize_base(results) -> dict:
    def mean(key):
        vals = [r.stats[key] for r in results if np.isfinite(r.stats[key])]
        return float(np.mean(vals)) if vals else float("nan")

    audit = [v for r in results for v in r.stats["pseudo_best_iou"]]
    loss = lambda attr: float(np.mean([getattr(r.losses, attr) for r in results])) if results else 0.0
    return {
        "n_scenes": len(results),
        "n_pseudo": int(sum(r.stats["n_pseudo"] for r in results)),
        "n_unknown_gt": int(sum(r.stats["n_unknown_gt"] for r in results)),
        "pseudo_iou_min": float(min(audit)) if audit else float("nan"),
        "pseudo_iou_mean": float(np.mean(audit)) if audit else float("nan"),
        "supervised_iou": mean("supervised_iou"),
        "supervised_iou_unweighted": mean("supervised_iou_unweighted"),
        "loss_obj": loss("obj"), "loss_feat": loss("feat"), "loss_reg": loss("reg"),
        "loss_aux": loss("aux_total"),
        "skipped_empty": int(sum("EmptyRegion" in r.losses.skipped for r in results)),
    }


def run_base_session(cfg: ProtocolConfig, seed: int, train=None) -> BaseArtifacts:
    """Mine, weight and score pseudo objects on the base training scenes,
    then imprint base prototypes from base annotations."""
    preset = cfg.split_preset()
    train = make_split_scenes(cfg, seed, "train", cfg.n_train) if train is None else train
    base = list(preset.base)
    results = []
    if cfg.mine:
        results = parallel_map(lambda b: base_scene(b, cfg, set(base)), train)
    store = PrototypeStore(cfg.world.dim3d, cfg.world.dim2d, cfg.momentum)
    store.register(base)
    imprint_base(store, train, cfg.world, cfg.k)
    gates = GateParams.init(cfg.world.dim3d, cfg.world.dim2d, hidden=cfg.hidden, seed=seed,
                            gamma_activation=cfg.gamma_activation)
    return BaseArtifacts(SessionState(store, gates, 0, seed), results, summarize_base(results))


# ------------------------------------------------------------- incremental

def sample_support(scenes, categories, k: int, seed: int, world: WorldConfig | None = None, task: int = 0):
    """K (scene index, category, gt index) annotations per category.

    ``scenes`` are SceneBundles (category names via ``world``) or plain
    lists of category names per scene. Each category draws K distinct
    scenes; a scene may serve several categories.
    """
    rng = make_rng(seed, SUPPORT, task)
    per_scene = [names_of(s, world) if world is not None else list(s) for s in scenes]
    picks = []
    for c in categories:
        eligible = [i for i, names in enumerate(per_scene) if c in names]
        if len(eligible) < k:
            raise InsufficientSupport(f"category {c!r}: {len(eligible)} eligible scenes < {k} shots")
        chosen = sorted(rng.choice(eligible, size=k, replace=False).tolist())
        for i in chosen:
            inst = [g for g, n in enumerate(per_scene[i]) if n == c]
            picks.append((i, c, int(inst[int(rng.integers(len(inst)))])))
    return picks


def support_scenes(bundles, picks) -> list:
    """Group picks into SupportScene objects carrying only annotated instances."""
    grouped: dict = {}
    for i, c, g in picks:
        grouped.setdefault(i, []).append((bundles[i].scene.gt_boxes[g], c))
    out = []
    for i in sorted(grouped):
        b = bundles[i]
        out.append(SupportScene(b.scene.xyz, b.feat3d, b.feat2d, grouped[i], b.scene.scene_id))
    return out


def run_incremental_session(state: SessionState, support, novel, cfg: ProtocolConfig) -> SessionState:
    """Register ``novel``, imprint prototypes and fit gates on ``support``.

    The input state is left untouched; base prototypes are hash-checked.
    """
    support = list(support)
    novel = list(novel)
    if not support or not novel:
        raise InsufficientSupport("incremental session needs a non-empty support set")
    clash = set(novel) & set(state.c_all)
    if clash:
        raise CategoryCollision(f"categories already learned: {sorted(clash)}")
    new = state.copy()
    frozen = new.store.digest(new.c_base)
    new.store.register(novel)
    if cfg.reinit_gates:
        prior = [c for c in new.gates.novel]
        new.gates = GateParams.init(new.store.dim3d, new.store.dim2d, prior, cfg.hidden, state.seed,
                                    cfg.gamma_activation)
    result = imprint_session(support, new.store, new.gates, novel, cfg.k, cfg.epochs, cfg.lr)
    new.gates = result.gates
    new.t += 1
    new.gate_trace = result.trace
    new.missing = result.missing
    if new.store.digest(new.c_base) != frozen:
        raise FrozenStateViolation("base prototypes changed during an incremental session")
    new.check_bookkeeping()
    return new


# ---------------------------------------------------------------- inference

def detect_scene(bundle: SceneBundle, state: SessionState, cfg: ProtocolConfig) -> list:
    """Classify oracle proposals with prototype scores.

    Base categories use neutral fusion (0.5 / 0.5) of frozen base
    prototypes; novel categories use the gated fusion. In ``split`` mode
    every proposal may yield one base and one novel detection; ``unified``
    keeps only the better of the two. Raw fused scores at or below
    ``score_floor`` are dropped; kept scores map to [0, 1] by (s + 1) / 2.
    """
    props = bundle.proposals
    if not props:
        return []
    res = assign_centers(bundle.scene.xyz, [p.box for p in props], cfg.k)
    keep, p3, p2 = [], [], []
    for i in range(len(props)):
        idx = res.positives(i)
        if len(idx) == 0:
            continue
        f3, f2 = bundle.feat3d[idx].mean(axis=0), bundle.feat2d[idx].mean(axis=0)
        if not (np.linalg.norm(f3) > 0 and np.linalg.norm(f2) > 0):
            continue
        keep.append(i)
        p3.append(f3)
        p2.append(f2)
    if not keep:
        return []
    p3, p2 = np.array(p3), np.array(p2)
    heads = []
    base = [c for c in state.c_base if state.store.has_prototype(c)]
    if base:
        t3, t2 = state.store.matrices(base)
        heads.append((base, 0.5 * class_scores(p3, t3) + 0.5 * class_scores(p2, t2)))
    novel = [c for c in state.gates.novel if state.store.has_prototype(c)]
    if novel and novel == state.gates.novel:
        t3, t2 = state.store.matrices(novel)
        heads.append((novel, fused_forward(p3, p2, class_scores(p3, t3), class_scores(p2, t2), state.gates)))
    dets = []
    for row, i in enumerate(keep):
        cands = []
        for cats, scores in heads:
            c = int(np.argmax(scores[row]))
            cands.append((float(scores[row, c]), cats[c]))
        if cfg.head_mode == "unified":
            cands = [max(cands, key=lambda x: x[0])]
        for raw, cat in cands:
            if raw > cfg.score_floor:
                dets.append(Detection(props[i].box, cat, (raw + 1.0) / 2.0, bundle.scene.scene_id))
    return dets


def ground_truth(bundles, world: WorldConfig, categories) -> list:
    cats = set(categories)
    return [Detection(box, n, 1.0, b.scene.scene_id)
            for b in bundles for box, n in zip(b.scene.gt_boxes, names_of(b, world)) if n in cats]


def detections_digest(dets, categories) -> str:
    cats = set(categories)
    h = hashlib.sha256()
    for key in sorted(d.key() for d in dets if d.category in cats):
        h.update(repr(key).encode())
    return h.hexdigest()


def evaluate_state(state: SessionState, val, cfg: ProtocolConfig, meta=None):
    dets = [d for b in val for d in detect_scene(b, state, cfg)]
    novel = [c for t in range(1, len(state.store.sessions)) for c in state.c_novel(t)]
    report = map_report(dets, ground_truth(val, cfg.world, state.c_all), state.c_base, novel,
                        cfg.iou_thresh, cfg.aligned, cfg.ap_mode, meta)
    return report, dets


# ---------------------------------------------------------------- protocol

@dataclass
class ProtocolResult:
    reports: list
    document: dict
    states: list


def json_safe(x):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(x, dict):
        return {str(k): json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not np.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def run_protocol(cfg: ProtocolConfig, seed: int = 0) -> ProtocolResult:
    """Base session, then every incremental session, each evaluated on the
    validation scenes over its cumulative category space."""
    train = make_split_scenes(cfg, seed, "train", cfg.n_train)
    val = make_split_scenes(cfg, seed, "val", cfg.n_val)
    base = run_base_session(cfg, seed, train)
    state = base.state
    sessions = cfg.sessions()
    shots = f"{cfg.shot}-shot"
    meta = lambda t, cats: {"session": t, "protocol": cfg.protocol, "way": len(cats), "shot": cfg.shot,
                            "seed": seed, "label": f"{len(cats)}-way {shots}" if t else "base"}
    report, dets = evaluate_state(state, val, cfg, meta(0, []))
    reports, states = [report], [state]
    base_digest = detections_digest(dets, state.c_base)
    entries = [{"session": 0, "categories": list(state.c_base), "metrics": report.to_dict(),
                "base_detection_digest": base_digest}]
    complete = True
    for t, novel in enumerate(sessions, start=1):
        try:
            picks = sample_support(train, novel, cfg.shot, seed, cfg.world, task=t)
            state = run_incremental_session(state, support_scenes(train, picks), novel, cfg)
        except (InsufficientSupport, CategoryCollision) as exc:
            log.error("session %d aborted: %s", t, exc)
            entries.append({"session": t, "categories": list(novel), "error": str(exc)})
            complete = False
            break
        report, dets = evaluate_state(state, val, cfg, meta(t, novel))
        reports.append(report)
        states.append(state)
        trace = state.gate_trace
        entries.append({
            "session": t, "categories": list(novel), "c_all": len(state.c_all),
            "support": [[train[i].scene.scene_id, c, g] for i, c, g in picks],
            "metrics": report.to_dict(), "base_detection_digest": detections_digest(dets, state.c_base),
            "missing": list(state.missing),
            "gate_loss": [trace[0], trace[-1]] if trace else [],
        })
    doc = {"format": REPORT_FORMAT, "version": 1, "seed": seed, "protocol": cfg.protocol,
           "config": cfg.to_dict(), "base_session": base.summary, "sessions": entries, "complete": complete}
    return ProtocolResult(reports, json_safe(doc), states)


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "label", "base", "novel", "all"])
    pct = lambda v: "" if v is None else f"{100 * v:.2f}"
    for e in doc["sessions"]:
        if "metrics" not in e:
            continue
        m = e["metrics"]
        w.writerow([e["session"], m["meta"].get("label", ""), pct(m["base_map"]), pct(m["novel_map"]),
                    pct(m["all_map"])])
    return buf.getvalue()


def write_report(path, doc: dict) -> None:
    """JSON report at ``path`` plus a CSV table next to it."""
    path = os.fspath(path)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")
    with open(os.path.splitext(path)[0] + ".csv", "w") as fh:
        fh.write(report_csv(doc))


__all__ = [
    "PRESETS", "ProtocolConfig", "SessionState", "SceneBundle", "run_base_session", "run_incremental_session",
    "run_protocol", "sample_support", "detect_scene", "evaluate_state", "write_report", "report_csv",
    "save_state", "load_state",
]
