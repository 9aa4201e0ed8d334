"""Session-based HTTP API for interactive what-if weaning exploration.

Each session owns a current window, a support level, an append-only history,
and a private seed stream.  Steps advance the session through one stochastic
twin forecast; what-if queries fan out candidate rollouts without touching
session state.  The guardian and policy are optional: without them the
service runs in degraded mode (no OOD flags / no suggestions), advertised
by ``GET /capabilities``.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .domain import (
    CLINICAL_THRESHOLDS,
    GRADIENT_THRESHOLDS,
    N_FEATURES,
    N_STEPS,
    PLEVEL_MAX,
    PLEVEL_MIN,
    IDX_MAP,
    IDX_HR,
    IDX_PULSAT,
    InvalidInputError,
    RewardConfig,
    Trajectory,
    action_change_penalty,
    is_stable,
    normalize_reward,
    physiological_reward,
    weaning_score,
)
from .guardian import DensityModel
from .nets import derive_seed
from .orl import PolicyModel
from .synthenv import GeneratorConfig, init_patient
from .twin import TwinModel

MAX_WHATIF_HORIZON = 24
MAX_WHATIF_SAMPLES = 100


@dataclass
class Session:
    id: str
    seed: int
    window: np.ndarray
    plevel: int
    history: list = field(default_factory=list)  # append-only step records
    created_at: float = field(default_factory=time.time)
    last_access: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def actions(self) -> list[int]:
        return [rec["action"] for rec in self.history]

    def trajectory(self) -> Trajectory | None:
        if not self.history:
            return None
        states = [self.history[0]["prev_state"]] + [rec["state"] for rec in self.history]
        return Trajectory(states=tuple(states), actions=tuple(self.actions))


def _state_hash(session: Session) -> str:
    payload = {
        "window": np.round(session.window, 12).tolist(),
        "plevel": session.plevel,
        "n_steps": len(session.history),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _running_metrics(session: Session, reward_cfg: RewardConfig) -> dict:
    if not session.history:
        return {"acp": 0.0, "ws": 0.0, "mean_reward": 0.0, "steps": 0}
    traj = session.trajectory()
    rewards = [rec["reward_normalized"] for rec in session.history]
    return {
        "acp": action_change_penalty(traj.actions),
        "ws": weaning_score(traj, GRADIENT_THRESHOLDS) if len(traj.states) >= 2 else 0.0,
        "mean_reward": float(np.mean(rewards)),
        "steps": len(session.history),
    }


def _parse_window(raw) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape != (N_STEPS, N_FEATURES):
        raise InvalidInputError(
            f"state must be a {N_STEPS}x{N_FEATURES} array, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("state entries must be finite")
    return arr


def _validate_plevel(value) -> int:
    try:
        level = int(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"action must be an integer, got {value!r}")
    if not (PLEVEL_MIN <= level <= PLEVEL_MAX):
        raise InvalidInputError(
            f"action must be in [{PLEVEL_MIN}, {PLEVEL_MAX}], got {level}"
        )
    return level


class WhatIfService:
    """Holds the models and the session table; wrapped by the FastAPI app."""

    def __init__(
        self,
        twin: TwinModel,
        guardian: DensityModel | None = None,
        policy: PolicyModel | None = None,
        gen_cfg: GeneratorConfig | None = None,
        session_timeout_s: float = 1800.0,
    ) -> None:
        if twin is None:
            raise InvalidInputError("the what-if service requires a twin model")
        self.twin = twin
        self.guardian = guardian
        self.policy = policy
        self.gen_cfg = gen_cfg or GeneratorConfig()
        self.session_timeout_s = session_timeout_s
        self.reward_cfg = RewardConfig(
            znorm_mean=twin.stats.reward_mean, znorm_std=twin.stats.reward_std
        )
        self._sessions: dict[str, Session] = {}
        self._table_lock = threading.Lock()

    # -- session bookkeeping -------------------------------------------------

    def _purge_expired(self) -> None:
        now = time.time()
        with self._table_lock:
            expired = [
                sid
                for sid, s in self._sessions.items()
                if now - s.last_access > self.session_timeout_s
            ]
            for sid in expired:
                del self._sessions[sid]

    def get_session(self, session_id: str) -> Session:
        self._purge_expired()
        with self._table_lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        session.last_access = time.time()
        return session

    def create_session(self, state=None, plevel=None, seed: int = 0) -> Session:
        self._purge_expired()
        if state is not None:
            window = _parse_window(state)
            level = _validate_plevel(plevel) if plevel is not None else 5
        else:
            _, window, level = init_patient(derive_seed(seed, 9001), self.gen_cfg)
            if plevel is not None:
                level = _validate_plevel(plevel)
        session = Session(id=uuid.uuid4().hex, seed=int(seed), window=window, plevel=level)
        with self._table_lock:
            self._sessions[session.id] = session
        return session

    def delete_session(self, session_id: str) -> bool:
        with self._table_lock:
            return self._sessions.pop(session_id, None) is not None

    # -- views ----------------------------------------------------------------

    def guardian_terms(self, window: np.ndarray, level: int) -> dict:
        if self.guardian is None or self.guardian.tau is None:
            return {"u": None, "u_plus": None, "u_minus": None, "ood": None}
        u, up, um = self.guardian.regularizer(window, level)
        return {"u": u, "u_plus": up, "u_minus": um, "ood": bool(up > 0)}

    def session_view(self, session: Session) -> dict:
        metrics = _running_metrics(session, self.reward_cfg)
        history = []
        for rec in session.history:
            entry = {k: v for k, v in rec.items() if k != "prev_state"}
            entry["state"] = rec["state"].tolist()
            history.append(entry)
        return {
            "id": session.id,
            "state": session.window.tolist(),
            "plevel": session.plevel,
            "t": len(session.history),
            "history": history,
            "metrics": metrics,
            "state_hash": _state_hash(session),
            "thresholds": {
                "map": CLINICAL_THRESHOLDS.map_floor,
                "hr": CLINICAL_THRESHOLDS.hr_floor,
                "pulsatility": CLINICAL_THRESHOLDS.pulsat_floor,
            },
        }

    # -- operations -------------------------------------------------------------

    def step(self, session: Session, action) -> dict:
        level = _validate_plevel(action)
        with session.lock:
            t = len(session.history)
            dropout_seed = derive_seed(session.seed, 9100, t)
            prev_state = session.window
            next_window = self.twin.predict(prev_state, level, dropout_seed=dropout_seed)
            raw_reward = physiological_reward(next_window)
            record = {
                "t": t,
                "action": level,
                "state": next_window,
                "prev_state": prev_state,
                "reward_raw": raw_reward,
                "reward_normalized": normalize_reward(raw_reward, self.reward_cfg),
                "stable_clinical": is_stable(next_window, CLINICAL_THRESHOLDS),
                "stable_gradient": is_stable(next_window, GRADIENT_THRESHOLDS),
                **self.guardian_terms(prev_state, level),
            }
            session.history.append(record)
            session.window = next_window
            session.plevel = level
            metrics = _running_metrics(session, self.reward_cfg)
            return {
                **{k: v for k, v in record.items() if k != "prev_state"},
                "state": next_window.tolist(),
                "metrics": metrics,
                "state_hash": _state_hash(session),
            }

    def whatif(self, session: Session, action=None, horizon: int = 6, n_samples: int = 50) -> dict:
        if not (1 <= int(horizon) <= MAX_WHATIF_HORIZON):
            raise InvalidInputError(f"horizon must be in [1, {MAX_WHATIF_HORIZON}]")
        if not (1 <= int(n_samples) <= MAX_WHATIF_SAMPLES):
            raise InvalidInputError(f"n_samples must be in [1, {MAX_WHATIF_SAMPLES}]")
        horizon = int(horizon)
        n_samples = int(n_samples)
        fixed_level = _validate_plevel(action) if action is not None else None
        if fixed_level is None and self.policy is None:
            raise InvalidInputError("no policy loaded; an explicit action is required")
        with session.lock:
            start = session.window.copy()
            base = derive_seed(session.seed, 9200, fixed_level or 0, horizon, n_samples)
        trajectories = []
        ws_values = []
        for i in range(n_samples):
            window = start
            rng = np.random.default_rng(derive_seed(base, i, 0))
            steps = []
            windows = [start]
            actions = []
            for t in range(horizon):
                level = fixed_level if fixed_level is not None else self.policy.act(window, rng)
                window = self.twin.predict(
                    window, level, dropout_seed=derive_seed(base, i, 1, t)
                )
                windows.append(window)
                actions.append(level)
                raw = physiological_reward(window)
                steps.append({
                    "t": t,
                    "action": level,
                    "map": window[:, IDX_MAP].tolist(),
                    "hr": window[:, IDX_HR].tolist(),
                    "pulsatility": window[:, IDX_PULSAT].tolist(),
                    "reward_raw": raw,
                    "reward_normalized": normalize_reward(raw, self.reward_cfg),
                })
            trajectories.append(steps)
            ws_values.append(
                weaning_score(
                    Trajectory(states=tuple(windows), actions=tuple(actions)),
                    GRADIENT_THRESHOLDS,
                )
            )

        def band(values: np.ndarray) -> dict:
            return {
                "p10": np.percentile(values, 10, axis=0).tolist(),
                "p50": np.percentile(values, 50, axis=0).tolist(),
                "p90": np.percentile(values, 90, axis=0).tolist(),
            }

        vitals = {}
        for key in ("map", "hr", "pulsatility"):
            series = np.asarray(
                [[v for step in traj for v in step[key]] for traj in trajectories]
            )
            vitals[key] = band(series)
        rewards = np.asarray(
            [[step["reward_normalized"] for step in traj] for traj in trajectories]
        )
        ws_arr = np.asarray(ws_values, dtype=np.float64)
        return {
            "action": fixed_level,
            "horizon": horizon,
            "n_samples": n_samples,
            "bands": vitals,
            "reward_bands": band(rewards),
            "ws": {
                "p10": float(np.percentile(ws_arr, 10)),
                "p50": float(np.percentile(ws_arr, 50)),
                "p90": float(np.percentile(ws_arr, 90)),
            },
            "samples": trajectories,
        }

    def suggest(self, session: Session) -> dict:
        if self.policy is None:
            raise LookupError("no policy loaded")
        with session.lock:
            probs = self.policy.probs_batch(session.window)
            u_values = []
            for level in range(PLEVEL_MIN, PLEVEL_MAX + 1):
                terms = self.guardian_terms(session.window, level)
                u_values.append(terms["u"])
            best = int(np.argmax(probs)) + PLEVEL_MIN
            return {
                "action": best,
                "distribution": probs.tolist(),
                "levels": list(range(PLEVEL_MIN, PLEVEL_MAX + 1)),
                "u": u_values,
            }


def build_app_from_models(
    twin: TwinModel,
    guardian: DensityModel | None = None,
    policy: PolicyModel | None = None,
    gen_cfg: GeneratorConfig | None = None,
    session_timeout_s: float = 1800.0,
) -> FastAPI:
    service = WhatIfService(twin, guardian, policy, gen_cfg, session_timeout_s)
    app = FastAPI(title="what-if weaning console", version="1")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.service = service

    @app.exception_handler(InvalidInputError)
    async def _invalid(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    def _get(session_id: str) -> Session:
        try:
            return service.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")

    @app.get("/capabilities")
    def capabilities():
        return {
            "twin": True,
            "guardian": service.guardian is not None,
            "policy": service.policy is not None,
            "session_timeout_s": service.session_timeout_s,
        }

    @app.post("/sessions", status_code=201)
    def create_session(body: dict | None = None):
        body = body or {}
        session = service.create_session(
            state=body.get("state"),
            plevel=body.get("plevel"),
            seed=int(body.get("seed", 0)),
        )
        return service.session_view(session)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return service.session_view(_get(session_id))

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str, body: dict):
        session = _get(session_id)
        if "action" not in body:
            raise InvalidInputError("body must contain 'action'")
        return service.step(session, body["action"])

    @app.post("/sessions/{session_id}/whatif")
    def whatif(session_id: str, body: dict | None = None):
        session = _get(session_id)
        body = body or {}
        return service.whatif(
            session,
            action=body.get("action"),
            horizon=body.get("horizon", 6),
            n_samples=body.get("n_samples", 50),
        )

    @app.get("/sessions/{session_id}/suggest")
    def suggest(session_id: str):
        session = _get(session_id)
        try:
            return service.suggest(session)
        except LookupError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        if not service.delete_session(session_id):
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return {"deleted": session_id}

    return app


def build_app(
    twin_path: str,
    guardian_path: str | None = None,
    policy_path: str | None = None,
    gen_cfg: GeneratorConfig | None = None,
    session_timeout_s: float = 1800.0,
) -> FastAPI:
    twin = TwinModel.load(twin_path)
    guardian = DensityModel.load(guardian_path) if guardian_path else None
    policy = PolicyModel.load(policy_path) if policy_path else None
    return build_app_from_models(twin, guardian, policy, gen_cfg, session_timeout_s)
