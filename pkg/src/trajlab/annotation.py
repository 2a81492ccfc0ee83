"""Blind pairwise annotation service.

Serves scenario + two unlabeled trajectories to human evaluators and
collects preferences. The side-to-model mapping is randomized per pair
and never leaves the process until export: clients only ever see "A" and
"B". Every accepted choice is fsynced to an append-only log before the
request is acknowledged, so a crash loses nothing.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import diffusion, emselect, metrics, world
from .config import RunConfig

SESSION_VERSION = 1
CHOICES = ("A", "B", "tie")


class DuplicateChoice(ValueError):
    pass


class SessionIncomplete(RuntimeError):
    pass


@dataclass
class BlindPair:
    pair_id: str
    scenario_id: str
    style: str
    scene: dict
    traj_a: list
    traj_b: list
    a_is_subject: bool   # hidden server-side mapping

    def public_payload(self) -> dict:
        """What clients may see: no model identity anywhere."""
        return {"pair_id": self.pair_id, "style": self.style,
                "scene": self.scene, "traj_a": self.traj_a,
                "traj_b": self.traj_b}

    def to_dict(self):
        return {"pair_id": self.pair_id, "scenario_id": self.scenario_id,
                "style": self.style, "scene": self.scene,
                "traj_a": self.traj_a, "traj_b": self.traj_b,
                "a_is_subject": self.a_is_subject}

    @classmethod
    def from_dict(cls, d):
        return cls(d["pair_id"], d["scenario_id"], d["style"], d["scene"],
                   d["traj_a"], d["traj_b"], d["a_is_subject"])


def build_pairs(scenarios: list[world.Scenario], subject, baseline,
                cfg: RunConfig, style: str, seed: int) -> list[BlindPair]:
    """Sample an aggregated plan per model per scenario and blind the
    presentation order. Sampling both models up front also proves the
    checkpoints can run on this split."""
    rng = np.random.default_rng([seed, 90])
    pairs = []
    for i, scen in enumerate(scenarios):
        plans = {}
        for role, model in (("subject", subject), ("baseline", baseline)):
            srng = np.random.default_rng([seed, 91, i])
            cands = diffusion.sample_candidates(model, scen.obs,
                                                cfg.eval_samples, srng)
            plans[role] = emselect.aggregate(cands, d=cfg.em_radius,
                                             iters=cfg.em_iters)
        a_is_subject = bool(rng.random() < 0.5)
        first = plans["subject"] if a_is_subject else plans["baseline"]
        second = plans["baseline"] if a_is_subject else plans["subject"]
        pairs.append(BlindPair(
            pair_id=f"pair-{i:04d}", scenario_id=scen.id, style=style,
            scene=scen.world.to_dict(), traj_a=first.tolist(),
            traj_b=second.tolist(), a_is_subject=a_is_subject))
    return pairs


class AnnotationSession:
    """Pair queue, collected choices, and the durable choice log."""

    def __init__(self, session_dir, pairs: list[BlindPair]):
        self.dir = Path(session_dir)
        self.pairs = {p.pair_id: p for p in pairs}
        self.order = [p.pair_id for p in pairs]
        self.choices: dict[tuple, str] = {}
        self._lock = threading.Lock()
        self._log = open(self.dir / "choices.jsonl", "a", encoding="utf-8")

    # -- construction / persistence --

    @classmethod
    def create(cls, session_dir, pairs: list[BlindPair]) -> "AnnotationSession":
        session_dir = Path(session_dir)
        session_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"version": SESSION_VERSION,
                    "pairs": [p.to_dict() for p in pairs]}
        with open(session_dir / "session.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, sort_keys=True)
        return cls(session_dir, pairs)

    @classmethod
    def load(cls, session_dir) -> "AnnotationSession":
        """Reload the manifest and replay the choice log after a restart."""
        session_dir = Path(session_dir)
        with open(session_dir / "session.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        if manifest.get("version") != SESSION_VERSION:
            raise ValueError(f"unsupported session version {manifest.get('version')}")
        pairs = [BlindPair.from_dict(d) for d in manifest["pairs"]]
        session = cls(session_dir, pairs)
        log_path = session_dir / "choices.jsonl"
        if log_path.exists():
            with open(log_path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        row = json.loads(line)
                        session.choices[(row["pair_id"], row["evaluator"])] = \
                            row["choice"]
        return session

    @classmethod
    def exists(cls, session_dir) -> bool:
        return (Path(session_dir) / "session.json").exists()

    # -- protocol --

    def next_pair(self, evaluator: str | None = None) -> BlindPair | None:
        with self._lock:
            for pid in self.order:
                answered = {e for (p, e) in self.choices if p == pid}
                if evaluator is not None:
                    if evaluator not in answered:
                        return self.pairs[pid]
                elif not answered:
                    return self.pairs[pid]
        return None

    def record_choice(self, pair_id: str, evaluator: str, choice: str) -> None:
        """Validate, append durably, then register in memory. The write is
        flushed and fsynced before the caller can acknowledge."""
        if choice not in CHOICES:
            raise ValueError(f"choice must be one of {CHOICES}, got {choice!r}")
        if pair_id not in self.pairs:
            raise KeyError(f"unknown pair_id {pair_id!r}")
        if not evaluator:
            raise ValueError("evaluator id required")
        with self._lock:
            if (pair_id, evaluator) in self.choices:
                raise DuplicateChoice(
                    f"evaluator {evaluator!r} already answered {pair_id!r}")
            self._log.write(json.dumps(
                {"pair_id": pair_id, "evaluator": evaluator, "choice": choice},
                sort_keys=True) + "\n")
            self._log.flush()
            os.fsync(self._log.fileno())
            self.choices[(pair_id, evaluator)] = choice

    def _records(self) -> list[metrics.ComparisonRecord]:
        """Unblind the collected choices into subject-vs-baseline records."""
        out = []
        for (pair_id, evaluator), choice in sorted(self.choices.items()):
            pair = self.pairs[pair_id]
            if choice == "tie":
                h = 0
            else:
                chose_a = choice == "A"
                h = 1 if chose_a == pair.a_is_subject else -1
            out.append(metrics.ComparisonRecord(
                scenario_id=pair.scenario_id, a_src="subject",
                b_src="baseline", h=h, evaluator=evaluator))
        return out

    def stats(self) -> dict:
        with self._lock:
            answered = {p for (p, _) in self.choices}
            done = len(answered)
            boe = None
            if self.choices:
                boe = metrics.boe_compute(self._records())[0]
        return {"pairs_total": len(self.pairs), "pairs_done": done,
                "provisional_boe": boe}

    def is_complete(self) -> bool:
        answered = {p for (p, _) in self.choices}
        return answered == set(self.pairs)

    def export(self, force: bool = False) -> list[metrics.ComparisonRecord]:
        """Resolve blinding and write the comparison records; only allowed
        once every pair has at least one choice (the session is closed)."""
        with self._lock:
            if not self.is_complete() and not force:
                raise SessionIncomplete(
                    "session still has unanswered pairs; export after close")
            records = self._records()
        path = self.dir / "records.jsonl"
        path.unlink(missing_ok=True)
        metrics.save_comparison_records(path, records)
        return records

    def close(self):
        self._log.close()


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------


def _handler_for(session: AnnotationSession, static_dir: Path | None):

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet
            pass

        def _json(self, status: int, payload) -> None:
            raw = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(raw)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/api/pair":
                query = parse_qs(url.query)
                evaluator = query.get("evaluator", [None])[0]
                pair = session.next_pair(evaluator)
                if pair is None:
                    self._json(404, {"done": True})
                else:
                    self._json(200, pair.public_payload())
            elif url.path == "/api/stats":
                self._json(200, session.stats())
            elif url.path == "/api/export":
                try:
                    records = session.export()
                except SessionIncomplete as e:
                    self._json(409, {"error": str(e)})
                    return
                self._json(200, {"records": [r.to_dict() for r in records]})
            elif static_dir is not None:
                self._serve_static(url.path)
            else:
                self._json(404, {"error": "not found"})

        def _serve_static(self, path: str):
            rel = "index.html" if path == "/" else path.lstrip("/")
            target = (static_dir / rel).resolve()
            if not str(target).startswith(str(static_dir.resolve())) \
                    or not target.is_file():
                self._json(404, {"error": "not found"})
                return
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css", "map": "application/json"}.get(
                         target.suffix.lstrip("."), "application/octet-stream")
            raw = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_POST(self):
            url = urlparse(self.path)
            if url.path != "/api/choice":
                self._json(404, {"error": "not found"})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                session.record_choice(body.get("pair_id", ""),
                                      body.get("evaluator", ""),
                                      body.get("choice", ""))
            except DuplicateChoice as e:
                self._json(409, {"error": str(e)})
                return
            except (KeyError, ValueError, json.JSONDecodeError) as e:
                self._json(400, {"error": str(e)})
                return
            self._json(200, {"accepted": True})

    return Handler


class AnnotationServer:
    """ThreadingHTTPServer wrapper usable in-process or from the CLI."""

    def __init__(self, session: AnnotationSession, host="127.0.0.1", port=0,
                 static_dir=None):
        self.session = session
        static = Path(static_dir) if static_dir else None
        self.httpd = ThreadingHTTPServer((host, port),
                                         _handler_for(session, static))
        self.port = self.httpd.server_address[1]
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.session.close()

    def serve_forever(self):
        try:
            self.httpd.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


def open_session(cfg: RunConfig, split_path, subject_path, baseline_path,
                 style: str, session_dir=None, n_pairs=None) -> AnnotationSession:
    """Create the session (sampling both checkpoints) or reload an existing
    one from disk so acknowledged choices survive restarts."""
    session_dir = Path(session_dir or Path(cfg.out_dir) / "annotation")
    if AnnotationSession.exists(session_dir):
        return AnnotationSession.load(session_dir)
    scenarios, _ = world.load_scenarios(split_path)
    n = n_pairs or cfg.annotation_pairs
    subject = diffusion.load_policy(subject_path)
    baseline = diffusion.load_policy(baseline_path)
    pairs = build_pairs(scenarios[:n], subject, baseline, cfg, style, cfg.seed)
    return AnnotationSession.create(session_dir, pairs)
