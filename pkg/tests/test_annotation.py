import json
import os
import signal
import subprocess
import sys
import time
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np
import pytest

from trajlab import diffusion, pipeline, world
from trajlab.annotation import (
    AnnotationServer, AnnotationSession, BlindPair, DuplicateChoice,
    SessionIncomplete, build_pairs, open_session,
)
from trajlab.config import RunConfig, save_config
from trajlab.metrics import boe_compute


def make_session(tmp_path, n_pairs=4, styles=None):
    rng = np.random.default_rng(0)
    pairs = []
    srng = np.random.default_rng(1)
    for i in range(n_pairs):
        w = world.WorldState(3.6, 10.0, [world.Agent(15, 0, 4, 0, "vehicle")],
                             None)
        a = world.style_rollout(w, "aggressive", rng=srng)
        b = world.style_rollout(w, "normal", rng=srng)
        a_is_subject = bool(rng.random() < 0.5)
        pairs.append(BlindPair(
            pair_id=f"pair-{i:04d}", scenario_id=f"s{i}", style="aggressive",
            scene=w.to_dict(),
            traj_a=(a if a_is_subject else b).tolist(),
            traj_b=(b if a_is_subject else a).tolist(),
            a_is_subject=a_is_subject))
    return AnnotationSession.create(tmp_path / "session", pairs)


def get(url):
    with urllib.request.urlopen(url) as resp:
        return json.load(resp)


def post(url, payload):
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(),
        headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return json.load(resp)


class TestSession:
    def test_public_payload_never_leaks_identity(self, tmp_path):
        session = make_session(tmp_path)
        for pair in session.pairs.values():
            blob = json.dumps(pair.public_payload()).lower()
            for needle in ("subject", "baseline", "finetune", "pretrain",
                           "a_is_subject", "model"):
                assert needle not in blob

    def test_tie_maps_to_zero(self, tmp_path):
        session = make_session(tmp_path, n_pairs=1)
        session.record_choice("pair-0000", "e1", "tie")
        records = session.export()
        assert records[0].h == 0

    def test_unblinding_orientation(self, tmp_path):
        session = make_session(tmp_path, n_pairs=2)
        for pid, pair in session.pairs.items():
            # always choose the side that maps to the subject
            session.record_choice(pid, "e1", "A" if pair.a_is_subject else "B")
        records = session.export()
        assert all(r.h == 1 for r in records)
        assert boe_compute(records) == (1.0, 0.0)

    def test_duplicate_choice_rejected(self, tmp_path):
        session = make_session(tmp_path, n_pairs=1)
        session.record_choice("pair-0000", "e1", "A")
        with pytest.raises(DuplicateChoice):
            session.record_choice("pair-0000", "e1", "B")
        # same pair, different evaluator is fine
        session.record_choice("pair-0000", "e2", "B")

    def test_export_requires_closed_session(self, tmp_path):
        session = make_session(tmp_path, n_pairs=2)
        session.record_choice("pair-0000", "e1", "A")
        with pytest.raises(SessionIncomplete):
            session.export()

    def test_queue_progression_per_evaluator(self, tmp_path):
        session = make_session(tmp_path, n_pairs=2)
        assert session.next_pair("e1").pair_id == "pair-0000"
        session.record_choice("pair-0000", "e1", "tie")
        assert session.next_pair("e1").pair_id == "pair-0001"
        session.record_choice("pair-0001", "e1", "tie")
        assert session.next_pair("e1") is None

    def test_restart_replays_choice_log(self, tmp_path):
        session = make_session(tmp_path, n_pairs=3)
        session.record_choice("pair-0000", "e1", "A")
        session.record_choice("pair-0001", "e1", "tie")
        session.close()
        reloaded = AnnotationSession.load(tmp_path / "session")
        assert reloaded.choices == {("pair-0000", "e1"): "A",
                                    ("pair-0001", "e1"): "tie"}
        assert reloaded.next_pair("e1").pair_id == "pair-0002"

    def test_provisional_boe_matches_hand_count(self, tmp_path):
        session = make_session(tmp_path, n_pairs=4)
        # choose subject twice, tie once, baseline once
        picks = []
        for pid, pair in list(session.pairs.items())[:3]:
            choice = "A" if pair.a_is_subject else "B"
            if len(picks) == 2:
                choice = "tie"
            session.record_choice(pid, "e1", choice)
            picks.append(choice)
        stats = session.stats()
        assert stats["pairs_done"] == 3
        assert stats["provisional_boe"] == pytest.approx(3 / 3)


class TestHttpApi:
    @pytest.fixture
    def server(self, tmp_path):
        session = make_session(tmp_path, n_pairs=2)
        server = AnnotationServer(session, port=0).start()
        yield server, f"http://127.0.0.1:{server.port}"
        server.stop()

    def test_pair_choice_stats_flow(self, server):
        _, base = server
        pair = get(base + "/api/pair?evaluator=e1")
        assert set(pair) == {"pair_id", "style", "scene", "traj_a", "traj_b"}
        out = post(base + "/api/choice", {"pair_id": pair["pair_id"],
                                          "evaluator": "e1", "choice": "tie"})
        assert out == {"accepted": True}
        stats = get(base + "/api/stats")
        assert stats["pairs_done"] == 1

    def test_duplicate_conflict_status(self, server):
        _, base = server
        pair = get(base + "/api/pair?evaluator=e1")
        post(base + "/api/choice", {"pair_id": pair["pair_id"],
                                    "evaluator": "e1", "choice": "A"})
        with pytest.raises(urllib.error.HTTPError) as err:
            post(base + "/api/choice", {"pair_id": pair["pair_id"],
                                        "evaluator": "e1", "choice": "B"})
        assert err.value.code == 409

    def test_bad_request(self, server):
        _, base = server
        with pytest.raises(urllib.error.HTTPError) as err:
            post(base + "/api/choice", {"pair_id": "nope", "evaluator": "e",
                                        "choice": "A"})
        assert err.value.code == 400

    def test_export_after_completion(self, server):
        srv, base = server
        while True:
            try:
                pair = get(base + "/api/pair?evaluator=e1")
            except urllib.error.HTTPError as err:
                assert err.code == 404
                break
            post(base + "/api/choice", {"pair_id": pair["pair_id"],
                                        "evaluator": "e1", "choice": "tie"})
        out = get(base + "/api/export")
        assert len(out["records"]) == 2
        assert all(r["h"] == 0 for r in out["records"])
        # records were also written to disk
        assert (srv.session.dir / "records.jsonl").exists()

    def test_export_before_completion_conflict(self, server):
        _, base = server
        with pytest.raises(urllib.error.HTTPError) as err:
            get(base + "/api/export")
        assert err.value.code == 409


@pytest.mark.slow
class TestCrashRecovery:
    def test_kill_and_restart_preserves_choices(self, tmp_path):
        # build a real run dir with checkpoints, serve it as a subprocess,
        # submit choices, SIGKILL, restart, and verify nothing was lost
        cfg = RunConfig(
            seed=3, out_dir=str(tmp_path / "run"), train_count=40,
            pref_count=16, eval_count=8, pretrain_steps=30, pretrain_batch=16,
            hidden=[16, 16], ae_epochs=2, ae_subset=10, reward_epochs=2,
            rl_epochs=1, refresh_epochs=1, group_size=4, eval_samples=4,
            mining_samples=4, annotation_pairs=3, port=18731)
        pipeline.cmd_gen_data(cfg)
        pipeline.cmd_pretrain(cfg, log_every=0)
        pipeline.cmd_mine(cfg, "aggressive")
        pipeline.cmd_build_pairs(cfg, "aggressive")
        pipeline.cmd_train_reward(cfg, "aggressive")
        pipeline.cmd_finetune(cfg, "aggressive")
        pipeline.cmd_refresh(cfg, "aggressive")
        cfg_path = tmp_path / "cfg.yaml"
        save_config(cfg, cfg_path)

        def spawn():
            proc = subprocess.Popen(
                [sys.executable, "-m", "trajlab.cli", "serve", "--config",
                 str(cfg_path), "--style", "aggressive"],
                stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
            base = f"http://127.0.0.1:{cfg.port}"
            for _ in range(100):
                try:
                    get(base + "/api/stats")
                    return proc, base
                except Exception:
                    time.sleep(0.1)
            proc.kill()
            raise RuntimeError("service did not come up")

        proc, base = spawn()
        try:
            pair = get(base + "/api/pair?evaluator=e1")
            post(base + "/api/choice", {"pair_id": pair["pair_id"],
                                        "evaluator": "e1", "choice": "A"})
            pair2 = get(base + "/api/pair?evaluator=e1")
            post(base + "/api/choice", {"pair_id": pair2["pair_id"],
                                        "evaluator": "e1", "choice": "tie"})
        finally:
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait()

        proc, base = spawn()
        try:
            stats = get(base + "/api/stats")
            assert stats["pairs_done"] == 2
            nxt = get(base + "/api/pair?evaluator=e1")
            assert nxt["pair_id"] not in (pair["pair_id"], pair2["pair_id"])
        finally:
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait()


class TestOpenSession:
    def test_builds_and_reloads(self, tmp_path, rng):
        scens = world.generate_scenarios(5, 4, world.MixtureWeights(0, 1, 0))
        split = tmp_path / "split.jsonl"
        world.save_scenarios(split, scens, 5)
        policy = diffusion.new_policy(diffusion.build_schedule(4, 1e-3, 0.2),
                                      rng, hidden=(16, 16))
        subj, base = tmp_path / "s.ckpt", tmp_path / "b.ckpt"
        diffusion.save_policy(policy, subj)
        diffusion.save_policy(policy, base)
        cfg = RunConfig(out_dir=str(tmp_path / "run"), annotation_pairs=3,
                        eval_samples=4)
        session = open_session(cfg, split, subj, base, "aggressive")
        assert len(session.pairs) == 3
        session.record_choice(next(iter(session.pairs)), "e1", "tie")
        session.close()
        again = open_session(cfg, split, subj, base, "aggressive")
        assert len(again.choices) == 1
