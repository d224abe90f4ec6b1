"""HTTP/WebSocket inference service.

Serves a loaded checkpoint plus phantom volume and rest surface. The server
owns condition-feature computation so clients only send probe endpoints.
Interactive sessions apply latest-wins coalescing: when probe updates arrive
faster than the model can answer, intermediate probes are skipped, and a
response for an older probe is never sent after a newer one.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .errors import OutOfBoundsError, TissueGnnError
from .geometry import PointCloud
from .model import ModelConfig, load_checkpoint, model_forward
from .phantom import (
    ProbeCondition,
    TissueVolume,
    condition_features,
    point_features,
    read_tvol,
)

__all__ = ["InferenceEngine", "build_engine", "create_app"]


class ProbeValidationError(TissueGnnError):
    """Request rejected before inference (bounds, widths, geometry)."""


@dataclass
class InferenceEngine:
    """Immutable model + phantom state shared by all requests."""

    params: dict
    model_cfg: ModelConfig
    checkpoint_id: str
    volume: TissueVolume
    surface: PointCloud
    max_depth: float = 30.0
    max_inclination: float = 41.0

    def validate_probe(self, c_s: np.ndarray, c_e: np.ndarray) -> None:
        for name, v in (("c_s", c_s), ("c_e", c_e)):
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ProbeValidationError(f"{name} must be three finite values")
        if not (self.volume.contains_footprint(c_s[:2])[0]
                and self.volume.contains_footprint(c_e[:2])[0]):
            raise ProbeValidationError("probe endpoint outside the phantom "
                                       "footprint")
        d = c_e - c_s
        depth = float(np.linalg.norm(d))
        if depth <= 0:
            raise ProbeValidationError("probe segment has zero length")
        if depth > self.max_depth + 1e-6:
            raise ProbeValidationError(
                f"probe depth {depth:.2f} mm exceeds {self.max_depth} mm")
        inclination = np.degrees(np.arccos(np.clip(-d[2] / depth, -1.0, 1.0)))
        if inclination > self.max_inclination + 1e-6:
            raise ProbeValidationError(
                f"probe inclination {inclination:.1f} deg exceeds "
                f"{self.max_inclination} deg")

    def predict(self, c_s, c_e, points=None, features=None, c_h=None) -> dict:
        c_s = np.asarray(c_s, dtype=np.float64).reshape(-1)
        c_e = np.asarray(c_e, dtype=np.float64).reshape(-1)
        self.validate_probe(c_s, c_e)
        if points is None:
            cloud = self.surface
        else:
            points = np.asarray(points, dtype=np.float64)
            if features is None:
                features = point_features(self.volume, points)
            cloud = PointCloud(positions=points, features=np.asarray(features))
        if c_h is None:
            c_h = condition_features(self.volume, c_s, c_e)
        probe = ProbeCondition(c_s=c_s, c_e=c_e, c_h=np.asarray(c_h))
        if probe.c_h.shape[0] != self.model_cfg.cond_width:
            raise ProbeValidationError(
                f"condition width {probe.c_h.shape[0]} != "
                f"{self.model_cfg.cond_width}")
        t0 = time.perf_counter()
        u, yhat, force = model_forward(self.params, self.model_cfg, cloud,
                                       probe)
        latency_ms = (time.perf_counter() - t0) * 1e3
        return {
            "displaced": yhat.astype(float).tolist(),
            "magnitudes": np.linalg.norm(u, axis=1).astype(float).tolist(),
            "force": float(force),
            "latency_ms": latency_ms,
            "checkpoint_id": self.checkpoint_id,
        }

    def surface_payload(self) -> dict:
        pos = self.surface.positions
        heights = self.volume.bone_height_at(pos[:, :2])
        return {
            "positions": pos.astype(float).tolist(),
            "bone_heights": heights.astype(float).tolist(),
            "extent": self.volume.extent.astype(float).tolist(),
            "origin": self.volume.origin.astype(float).tolist(),
            "max_depth": self.max_depth,
            "max_inclination": self.max_inclination,
            "units": {"length": "mm", "force": "N"},
        }


def _load_surface_points(path) -> np.ndarray:
    from .cli import _load_points
    return _load_points(path)


def build_engine(checkpoint_path, volume_path, surface_path,
                 max_depth: float = 30.0,
                 max_inclination: float = 41.0) -> InferenceEngine:
    params, model_cfg, header = load_checkpoint(checkpoint_path)
    volume = read_tvol(volume_path)
    positions = _load_surface_points(surface_path)
    surface = PointCloud(positions=positions,
                         features=point_features(volume, positions))
    return InferenceEngine(
        params=params, model_cfg=model_cfg,
        checkpoint_id=header["checkpoint_id"], volume=volume,
        surface=surface, max_depth=max_depth,
        max_inclination=max_inclination)


def create_app(engine: InferenceEngine, static_dir=None) -> FastAPI:
    app = FastAPI(title="tissuegnn inference service")

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "checkpoint_id": engine.checkpoint_id,
            "n_points": len(engine.surface),
            "mode": engine.model_cfg.mode,
            "graph_policy": engine.model_cfg.graph_policy,
            "units": {"length": "mm", "force": "N"},
        }

    @app.get("/surface")
    def surface():
        return engine.surface_payload()

    @app.post("/infer")
    async def infer(payload: dict):
        try:
            c_s = payload["c_s"]
            c_e = payload["c_e"]
        except KeyError as e:
            return JSONResponse(status_code=422,
                                content={"error": f"missing field {e}"})
        try:
            result = await run_in_threadpool(
                engine.predict, c_s, c_e,
                payload.get("points"), payload.get("features"),
                payload.get("c_h"))
        except (ProbeValidationError, OutOfBoundsError, TissueGnnError,
                ValueError) as e:
            return JSONResponse(status_code=422, content={"error": str(e)})
        except Exception as e:  # numeric failure inside the model
            return JSONResponse(status_code=500, content={"error": str(e)})
        # latency rides in a header so identical requests give
        # byte-identical bodies
        latency = result.pop("latency_ms")
        return JSONResponse(content=result,
                            headers={"X-Model-Latency-Ms": f"{latency:.3f}"})

    @app.websocket("/interactive")
    async def interactive(ws: WebSocket):
        await ws.accept()
        latest: dict = {}
        wake = asyncio.Event()
        closed = False

        async def receiver():
            nonlocal closed
            try:
                while True:
                    frame = await ws.receive_json()
                    latest["frame"] = frame
                    wake.set()
            except WebSocketDisconnect:
                closed = True
                wake.set()
            except Exception:
                closed = True
                wake.set()

        recv_task = asyncio.create_task(receiver())
        try:
            while True:
                await wake.wait()
                wake.clear()
                if closed:
                    break
                frame = latest.pop("frame", None)
                if frame is None:
                    continue
                seq = frame.get("seq")
                try:
                    c_s = frame["c_s"]
                    c_e = frame["c_e"]
                    result = await run_in_threadpool(engine.predict, c_s, c_e)
                    result["seq"] = seq
                    await ws.send_json(result)
                except (KeyError, ProbeValidationError, OutOfBoundsError,
                        TissueGnnError, ValueError, TypeError) as e:
                    # malformed frame: report and keep the session alive
                    await ws.send_json({"seq": seq, "error": str(e)})
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            recv_task.cancel()
        return

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")
    return app
