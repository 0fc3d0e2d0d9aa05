"""HTTP reward and environment service.

Shared state (catalog, product index, instances and their memory indices) is
built once at startup and only read afterwards. Live episodes are the one
mutable piece; each belongs to a single client and is guarded by a lock.
"""

from __future__ import annotations

import hashlib
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from ..catalog import Catalog, ProductIndex, build_product_index, ingest_products
from ..episode import EpisodeState, Environment, Trajectory, replay
from ..errors import BackendError, CompanionError, SchemaError
from ..rewards import Judge, OracleJudge, final_reward, score_tool_call
from ..synth.instance import BenchmarkInstance, load_instances
from ..tools import ToolInvocation


@dataclass
class ServiceConfig:
    catalog: str
    datasets: tuple[str, ...]
    index_dir: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    judge: Literal["oracle", "llm"] = "oracle"
    max_in_flight: int = 64
    workers: int = 1
    timeout: float = 60.0

    def validate(self) -> None:
        if self.judge == "llm" and not os.environ.get("COMPANION_LLM_BASE_URL"):
            raise SchemaError("judge mode 'llm' needs COMPANION_LLM_BASE_URL", field="judge")
        if self.max_in_flight < 1:
            raise SchemaError("max_in_flight must be positive", field="max_in_flight")


class ServiceState:
    def __init__(
        self,
        catalog: Catalog,
        product_index: ProductIndex,
        instances: list[BenchmarkInstance],
        judge: Judge | None = None,
    ):
        self.catalog = catalog
        self.product_index = product_index
        self.instances = {i.instance_id: i for i in instances}
        self.judge = judge or OracleJudge(catalog)
        self.env = Environment(catalog, product_index)
        for inst in instances:
            self.env.memory_for(inst)
        self.episodes: dict[str, EpisodeState] = {}
        self.episode_lock = threading.Lock()

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "ServiceState":
        config.validate()
        catalog = ingest_products(config.catalog)
        if config.index_dir and (Path(config.index_dir) / "index-meta.json").exists():
            index = ProductIndex.load(config.index_dir)
        else:
            index = build_product_index(catalog)
        instances = [inst for path in config.datasets for inst in load_instances(path)]
        judge: Judge
        if config.judge == "llm":
            from ..llm import ChatClient, LLMJudge

            judge = LLMJudge(ChatClient.from_env(), catalog)
        else:
            judge = OracleJudge(catalog)
        return cls(catalog, index, instances, judge)

    def instance(self, instance_id: str) -> BenchmarkInstance:
        inst = self.instances.get(instance_id)
        if inst is None:
            raise HTTPException(404, f"unknown instance {instance_id!r}")
        return inst

    def checksum(self) -> str:
        """Digest of every read-only structure, for before/after comparisons."""
        h = hashlib.sha256()
        h.update(self.catalog.to_jsonl().encode())
        for term in sorted(self.product_index.postings):
            h.update(f"{term}:{self.product_index.postings[term]}".encode())
        for iid in sorted(self.instances):
            h.update(self.instances[iid].to_json().encode())
            _, mem = self.env.memory_for(self.instances[iid])
            h.update(mem.vectors.tobytes())
        return h.hexdigest()


class ToolRewardRequest(BaseModel):
    instance_id: str
    tool_name: str
    arguments: dict[str, Any] = Field(default_factory=dict)
    results: Any = None


class TrajectoryRewardRequest(BaseModel):
    instance_id: str
    stage: Literal["1", "2", "one-stage", 1, 2]
    trajectory: dict[str, Any]
    strict_tools: bool = False


class ResetRequest(BaseModel):
    instance_id: str
    stage: Literal["1", "2", "one-stage", 1, 2]
    preferences: str | None = None


class StepRequest(BaseModel):
    episode_id: str
    policy_output: str


def create_app(state: ServiceState, max_in_flight: int = 64) -> FastAPI:
    app = FastAPI(title="companion-gym", version="1")
    slots = threading.BoundedSemaphore(max_in_flight)

    @app.middleware("http")
    async def backpressure(request: Request, call_next):
        if not slots.acquire(blocking=False):
            return JSONResponse({"detail": "too many requests in flight"}, status_code=429)
        try:
            return await call_next(request)
        finally:
            slots.release()

    @app.exception_handler(CompanionError)
    async def companion_error(request: Request, exc: CompanionError):
        status = 502 if isinstance(exc, BackendError) else 422
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=status)

    @app.get("/health")
    def health() -> dict[str, Any]:
        return {
            "status": "ok",
            "products": len(state.catalog),
            "index_docs": state.product_index.doc_count,
            "index_terms": len(state.product_index.postings),
            "instances": len(state.instances),
        }

    @app.post("/v1/reward/tool")
    def reward_tool(req: ToolRewardRequest) -> dict[str, Any]:
        inst = state.instance(req.instance_id)
        if req.results is None:
            invocation = state.env.toolbox(inst, "one-stage").dispatch({"name": req.tool_name, "arguments": req.arguments})
        else:
            invocation = ToolInvocation(req.tool_name, req.arguments, results=req.results)
        score = score_tool_call(invocation, inst.gold)
        return {"score": None if score is None else float(score)}

    @app.post("/v1/reward/trajectory")
    def reward_trajectory(req: TrajectoryRewardRequest) -> dict[str, Any]:
        inst = state.instance(req.instance_id)
        data = dict(req.trajectory)
        data["mode"] = str(req.stage)
        data.setdefault("instance_id", inst.instance_id)
        recorded = Trajectory.from_dict(data)
        traj = replay(state.env, inst, recorded)
        breakdown = final_reward(traj, inst.gold, state.judge, strict_tools=req.strict_tools)
        return {"instance_id": inst.instance_id, "stage": traj.stage, **breakdown.to_dict()}

    @app.post("/v1/env/reset")
    def env_reset(req: ResetRequest) -> dict[str, Any]:
        inst = state.instance(req.instance_id)
        mode = str(req.stage)
        if mode == "2" and req.preferences is None:
            raise HTTPException(422, "stage 2 needs 'preferences'")
        episode = state.env.reset(inst, mode, preferences=req.preferences)
        episode_id = uuid.uuid4().hex
        with state.episode_lock:
            state.episodes[episode_id] = episode
        return {"episode_id": episode_id, "messages": episode.messages}

    @app.post("/v1/env/step")
    def env_step(req: StepRequest) -> dict[str, Any]:
        with state.episode_lock:
            episode = state.episodes.get(req.episode_id)
        if episode is None:
            raise HTTPException(404, f"unknown episode {req.episode_id!r}")
        _, observation = state.env.step(episode, req.policy_output)
        out: dict[str, Any] = {"observation": observation, "terminal": episode.terminal}
        if episode.terminal:
            with state.episode_lock:
                state.episodes.pop(req.episode_id, None)
            out["trajectory"] = episode.trajectory.to_dict()
        return out

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    state = ServiceState.from_config(config)
    app = create_app(state, config.max_in_flight)
    uvicorn.run(app, host=config.host, port=config.port, workers=1, timeout_keep_alive=int(config.timeout))
