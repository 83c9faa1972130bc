"""Ring-buffer replay with per-step (or per-episode) insertion and planner reanalyze.

Transitions are stored column-wise in preallocated arrays.  ``insert`` in
per-step mode makes a transition sampleable immediately; per-episode mode
stages an episode until its final transition arrives.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from etdmpc import planner as planner_mod
from etdmpc.planner import PlannerConfig, PlanningError
from etdmpc.worldmodel import LatentModel

SNAPSHOT_FORMAT = "etdmpc-replay/1"


class InsufficientData(RuntimeError):
    """No segment of the requested span lies inside a single stored episode."""


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    target_mean: np.ndarray
    target_std: np.ndarray
    episode_id: int
    step_index: int
    target_version: int = 0
    # exact simulator state, when known, for oracle scoring
    sim_state: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "obs": np.asarray(self.obs).tolist(), "action": np.asarray(self.action).tolist(),
            "reward": float(self.reward), "done": bool(self.done),
            "target_mean": np.asarray(self.target_mean).tolist(), "target_std": np.asarray(self.target_std).tolist(),
            "episode_id": int(self.episode_id), "step_index": int(self.step_index),
            "target_version": int(self.target_version),
        }
        if self.sim_state is not None:
            d["sim_state"] = np.asarray(self.sim_state).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(np.asarray(d["obs"], dtype=np.float64), np.asarray(d["action"], dtype=np.float64),
                   float(d["reward"]), bool(d["done"]), np.asarray(d["target_mean"], dtype=np.float64),
                   np.asarray(d["target_std"], dtype=np.float64), int(d["episode_id"]), int(d["step_index"]),
                   int(d.get("target_version", 0)),
                   None if d.get("sim_state") is None else np.asarray(d["sim_state"], dtype=np.float64))


@dataclass
class SegmentBatch:
    """``B`` segments of ``span`` consecutive transitions, time-major: ``(span, B, ...)``."""

    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    slots: np.ndarray  # (span, B) ring slots

    @property
    def span(self) -> int:
        return self.obs.shape[0]


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, action_dim: int, mode: str = "per_step",
                 state_dim: int | None = None):
        if mode not in ("per_step", "per_episode"):
            raise ValueError(f"unknown insertion mode {mode!r}")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity, self.mode = capacity, mode
        self.obs_dim, self.action_dim, self.state_dim = obs_dim, action_dim, state_dim
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.target_mean = np.zeros((capacity, action_dim))
        self.target_std = np.zeros((capacity, action_dim))
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.step_index = np.zeros(capacity, dtype=np.int64)
        self.version = np.zeros(capacity, dtype=np.int64)
        self.sim_state = None if state_dim is None else np.full((capacity, state_dim), np.nan)
        self.inserted = 0  # transitions written to the ring, ever
        self.evicted = 0
        self._staged: list[Transition] = []
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    @property
    def num_staged(self) -> int:
        return len(self._staged)

    def _logical_slots(self) -> np.ndarray:
        """Ring slots ordered oldest first."""
        n = len(self)
        start = self.inserted - n
        return (start + np.arange(n)) % self.capacity

    def _write(self, t: Transition) -> None:
        k = self.inserted % self.capacity
        if self.inserted >= self.capacity:
            self.evicted += 1
        self.obs[k] = t.obs
        self.action[k] = t.action
        self.reward[k] = t.reward
        self.done[k] = t.done
        self.target_mean[k] = t.target_mean
        self.target_std[k] = t.target_std
        self.episode[k] = t.episode_id
        self.step_index[k] = t.step_index
        self.version[k] = t.target_version
        if self.sim_state is not None:
            self.sim_state[k] = np.nan if t.sim_state is None else t.sim_state
        self.inserted += 1

    def insert(self, t: Transition) -> None:
        with self._lock:
            if self.mode == "per_step":
                self._write(t)
                return
            self._staged.append(t)
            if t.done:
                for s in self._staged:
                    self._write(s)
                self._staged = []

    def __getitem__(self, i: int) -> Transition:
        """The ``i``-th oldest stored transition."""
        with self._lock:
            k = int(self._logical_slots()[i])
            return self._transition_at(k)

    def _transition_at(self, k: int) -> Transition:
        sim = None
        if self.sim_state is not None and not np.isnan(self.sim_state[k]).any():
            sim = self.sim_state[k].copy()
        return Transition(self.obs[k].copy(), self.action[k].copy(), float(self.reward[k]), bool(self.done[k]),
                          self.target_mean[k].copy(), self.target_std[k].copy(), int(self.episode[k]),
                          int(self.step_index[k]), int(self.version[k]), sim)

    def transitions(self) -> list[Transition]:
        with self._lock:
            return [self._transition_at(int(k)) for k in self._logical_slots()]

    def valid_starts(self, span: int) -> np.ndarray:
        """Logical positions whose next ``span`` transitions are contiguous steps of one episode."""
        slots = self._logical_slots()
        n = len(slots) - span + 1
        if n <= 0:
            return np.empty(0, dtype=np.int64)
        ep = self.episode[slots]
        st = self.step_index[slots]
        ok = (ep[:n] == ep[span - 1:]) & (st[span - 1:] - st[:n] == span - 1)
        return np.flatnonzero(ok)

    def sample_sequences(self, batch: int, span: int, rng: np.random.Generator) -> SegmentBatch:
        with self._lock:
            starts = self.valid_starts(span)
            if starts.size == 0:
                raise InsufficientData(f"no stored episode segment of length {span}")
            slots = self._logical_slots()
            pick = starts[rng.integers(starts.size, size=batch)]
            idx = slots[(pick[None, :] + np.arange(span)[:, None]) % len(slots)]
            return SegmentBatch(self.obs[idx].copy(), self.action[idx].copy(), self.reward[idx].copy(),
                                self.target_mean[idx].copy(), self.target_std[idx].copy(), idx)

    def segments(self, batch: SegmentBatch) -> list[list[Transition]]:
        return [[self._transition_at(int(k)) for k in batch.slots[:, b]] for b in range(batch.slots.shape[1])]

    # reanalyze -----------------------------------------------------------
    def reanalyze_pass(self, model: LatentModel, cfg: PlannerConfig, batch: int,
                       rng: np.random.Generator) -> tuple[int, int]:
        """Replan from ``batch`` uniformly drawn stored states and overwrite their policy targets.

        Returns ``(refreshed, skipped)``.
        """
        with self._lock:
            n = len(self)
            if n == 0:
                raise InsufficientData("reanalyze on an empty buffer")
            slots = self._logical_slots()[rng.integers(n, size=batch)]
            z = model.encode(self.obs[slots])
            try:
                res = planner_mod.plan_batch(z, model, cfg, rng)
            except PlanningError:
                return 0, batch
            first = res.plan.first()
            good = slots[res.ok]
            self.target_mean[good] = first.mean[res.ok]
            self.target_std[good] = first.std[res.ok]
            self.version[good] += 1
            return int(res.ok.sum()), int((~res.ok).sum())

    # snapshots -----------------------------------------------------------
    def save_snapshot(self, path: str | Path, env_name: str, checkpoint: str | None = None) -> None:
        from etdmpc._io import atomic_write_text

        header = {"format": SNAPSHOT_FORMAT, "env": env_name, "checkpoint": checkpoint,
                  "capacity": self.capacity, "mode": self.mode, "obs_dim": self.obs_dim,
                  "action_dim": self.action_dim, "state_dim": self.state_dim}
        lines = [json.dumps(header)] + [json.dumps(t.to_dict()) for t in self.transitions()]
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load_snapshot(cls, path: str | Path) -> tuple["ReplayBuffer", dict]:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"unsupported replay snapshot format {header.get('format')!r}")
        buf = cls(header["capacity"], header["obs_dim"], header["action_dim"], "per_step", header.get("state_dim"))
        for line in lines[1:]:
            if line.strip():
                buf.insert(Transition.from_dict(json.loads(line)))
        return buf, header
