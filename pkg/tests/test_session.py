import json

import numpy as np
import pytest

from fi3det.errors import CategoryCollision, FormatError, FrozenStateViolation, InsufficientSupport
from fi3det.presets import PRESETS, get_preset
from fi3det.session import (
    ProtocolConfig,
    load_state,
    make_split_scenes,
    report_csv,
    run_base_session,
    run_incremental_session,
    run_protocol,
    sample_support,
    save_state,
    support_scenes,
)
from fi3det.synth import CategorySpec, WorldConfig

FAST = dict(n_train=12, n_val=3, epochs=20)


class TestPresets:
    @pytest.mark.parametrize("name,n_base,tasks", [
        ("scannet-1way", 17, [1]), ("scannet-9way", 9, [9]), ("scannet-seq", 9, [3, 3, 3]),
        ("sunrgbd-1way", 9, [1]), ("sunrgbd-5way", 5, [5]), ("sunrgbd-seq", 5, [3, 2]),
    ])
    def test_counts(self, name, n_base, tasks):
        p = get_preset(name)
        assert len(p.base) == n_base and [len(t) for t in p.tasks] == tasks
        assert list(p.categories) == sorted(p.categories)
        assert len(p.categories) == {"scannet": 18, "sunrgbd": 10}[name.split("-")[0]]
        assert p.aligned_iou == name.startswith("scannet")

    def test_unknown(self):
        with pytest.raises(KeyError):
            get_preset("nope")

    def test_batch_merges_tasks(self):
        assert PRESETS["scannet-seq"].sessions("batch") == [PRESETS["scannet-9way"].novel]


class TestSampling:
    def test_single_eligible(self):
        assert sample_support([["a"], ["b"]], ["b"], 1, seed=0) == [(1, "b", 0)]

    def test_deterministic_and_distinct(self):
        scenes = [["a", "b", "a"]] * 8
        one = sample_support(scenes, ["a", "b"], 5, seed=3)
        assert one == sample_support(scenes, ["a", "b"], 5, seed=3)
        for c in "ab":
            picked = [i for i, cc, _ in one if cc == c]
            assert len(picked) == 5 == len(set(picked))
        assert all(scenes[i][g] == c for i, c, g in one)

    def test_insufficient(self):
        with pytest.raises(InsufficientSupport):
            sample_support([["a"]] * 3, ["a"], 5, seed=0)


class TestBaseSession:
    def test_zero_noise_audit_and_determinism(self):
        cfg = ProtocolConfig(**FAST)
        a = run_base_session(cfg, 1)
        assert a.summary["pseudo_iou_min"] > 0.9
        assert a.summary["n_pseudo"] == a.summary["n_unknown_gt"]
        assert a.summary["loss_feat"] < 1e-12
        b = run_base_session(cfg, 1)
        assert json.dumps(a.summary) == json.dumps(b.summary)
        assert a.state.store.digest() == b.state.store.digest()
        assert a.state.store.novel == [] and all(a.state.store.has_prototype(c) for c in a.state.c_base)

    def test_scene_without_unknowns(self):
        cats = [CategorySpec(f"c{i:02d}", count=(1, 1) if i < 2 else (0, 0)) for i in range(4)]
        cfg = ProtocolConfig(world=WorldConfig(categories=cats, dim3d=8, dim2d=8), n_train=2, n_val=1,
                             split={"base": ["c00", "c01"], "tasks": [["c02", "c03"]]})
        art = run_base_session(cfg, 0)
        assert all(not r.pseudo and r.losses.skipped == ["EmptyRegion"] for r in art.scenes)
        assert art.summary["loss_aux"] == 0.0


class TestIncremental:
    def prepare(self, preset="synth-3way", **kw):
        cfg = ProtocolConfig(preset=preset, mine=False, **{**FAST, **kw})
        train = make_split_scenes(cfg, 0, "train", cfg.n_train)
        return cfg, train, run_base_session(cfg, 0, train).state

    def test_empty_support(self):
        cfg, _, state = self.prepare()
        with pytest.raises(InsufficientSupport):
            run_incremental_session(state, [], ["c06"], cfg)

    def test_one_way(self):
        cfg, train, state = self.prepare()
        picks = sample_support(train, ["c06"], 5, 0, cfg.world)
        new = run_incremental_session(state, support_scenes(train, picks), ["c06"], cfg)
        assert new.c_all == state.c_all + ["c06"] and new.t == 1
        assert np.linalg.norm(new.store.proto3d["c06"]) > 0 and np.linalg.norm(new.store.proto2d["c06"]) > 0
        assert "c06" not in state.c_all  # input state untouched
        with pytest.raises(CategoryCollision):
            run_incremental_session(new, support_scenes(train, picks), ["c06"], cfg)

    def test_sequential_growth(self):
        cfg = ProtocolConfig(preset="scannet-seq", protocol="sequential", shot=1, mine=False, **FAST)
        res = run_protocol(cfg, 0)
        assert [len(s.c_all) for s in res.states] == [9, 12, 15, 18]
        assert len(res.reports) == 4

    def test_frozen_guard(self, monkeypatch):
        cfg, train, state = self.prepare()
        picks = sample_support(train, ["c06"], 5, 0, cfg.world)
        import fi3det.session as session

        real = session.imprint_session

        def tamper(support, store, *a, **k):
            store.proto3d["c00"] = store.proto3d["c00"] * 2
            return real(support, store, *a, **k)

        monkeypatch.setattr(session, "imprint_session", tamper)
        with pytest.raises(FrozenStateViolation):
            run_incremental_session(state, support_scenes(train, picks), ["c06"], cfg)


class TestProtocol:
    def test_zero_noise_batch(self):
        res = run_protocol(ProtocolConfig(mine=False, **FAST), 2)
        assert abs(res.reports[-1].novel_map - 1.0) < 1e-6
        base = [e["base_detection_digest"] for e in res.document["sessions"]]
        assert len(set(base)) == 1

    def test_report_and_csv(self):
        res = run_protocol(ProtocolConfig(preset="synth-seq", protocol="sequential", shot=1, **FAST), 0)
        doc = res.document
        assert doc["complete"] and len(doc["sessions"]) == 3
        json.dumps(doc, allow_nan=False)
        rows = report_csv(doc).strip().splitlines()
        assert rows[0] == "session,label,base,novel,all" and len(rows) == 4

    def test_incomplete_flagged(self):
        res = run_protocol(ProtocolConfig(mine=False, shot=50, **FAST), 0)
        assert not res.document["complete"] and "error" in res.document["sessions"][-1]

    def test_config_round_trip(self):
        cfg = ProtocolConfig(world=WorldConfig(feature_noise=0.1), shot=1)
        back = ProtocolConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProtocolConfig(protocol="online")
        with pytest.raises(ValueError):
            ProtocolConfig(world=WorldConfig(), preset="scannet-1way")

    def test_threads_do_not_change_output(self, monkeypatch):
        cfg = ProtocolConfig(**FAST)
        one = json.dumps(run_protocol(cfg, 5).document, sort_keys=True)
        monkeypatch.setenv("FI3DET_THREADS", "4")
        assert json.dumps(run_protocol(cfg, 5).document, sort_keys=True) == one


class TestStateFile:
    def test_round_trip(self, tmp_path):
        res = run_protocol(ProtocolConfig(mine=False, **FAST), 0)
        save_state(tmp_path / "s.json", res.states[-1])
        back = load_state(tmp_path / "s.json")
        assert back.store.digest() == res.states[-1].store.digest()
        assert back.gates.novel == ["c06", "c07", "c08"]
        assert np.array_equal(back.gates.gamma.w2, res.states[-1].gates.gamma.w2)

    def test_schema_rejects(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"format": "fi3det-state", "version": 2}))
        with pytest.raises(FormatError):
            load_state(tmp_path / "bad.json")
        (tmp_path / "junk.json").write_text("{")
        with pytest.raises(FormatError):
            load_state(tmp_path / "junk.json")
