"""HTTP rating service: task queue, rating submission, image/heatmap PNGs.

Serves the rating UI bundle when one is available. All JSON endpoints live
under /api; heatmaps are rendered as a color overlay at 0.5 opacity on the
base image.
"""

from __future__ import annotations

import io
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from matplotlib import cm
from PIL import Image

from .core import ProtoPNet, activation_map
from .data import DatasetManifest
from .errors import DuplicateRatingError, ValidationError
from .feedback import RUBRIC, RatingRecord, RatingStore, TaskPool, pool_from_model

OVERLAY_OPACITY = 0.5


def heatmap_overlay_png(pixels: np.ndarray, display: np.ndarray) -> bytes:
    """Base image blended with a jet-colormapped heatmap at fixed opacity."""
    colored = cm.jet(display)[:, :, :3]
    blended = (1.0 - OVERLAY_OPACITY) * pixels + OVERLAY_OPACITY * colored
    arr = np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def image_png(pixels: np.ndarray) -> bytes:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    model: ProtoPNet,
    model_id: str,
    dataset: DatasetManifest,
    store: RatingStore,
    ui_dir: Path | str | None = None,
) -> FastAPI:
    app = FastAPI(title="rating service")
    pool = TaskPool(pool_from_model(model, dataset), model_id)

    @app.get("/api/tasks/next")
    def next_task(rater_id: str) -> Response:
        task = pool.next_task(rater_id, store)
        if task is None:
            return Response(status_code=204)
        return JSONResponse(
            {
                "task_id": task.task_id,
                "image_id": task.image_id,
                "prototype_id": task.prototype_id,
                "model_id": model_id,
                "image_url": f"/api/images/{task.image_id}",
                "heatmap_url": task.heatmap_ref,
                "rubric": {str(k): v for k, v in task.rubric.items()},
            }
        )

    @app.post("/api/ratings")
    async def submit_rating(request: Request) -> Response:
        body = await request.json()
        try:
            rating = body["rating"]
            if not isinstance(rating, int) or isinstance(rating, bool):
                raise ValidationError(f"rating must be an integer, got {rating!r}")
            record = RatingRecord(
                rating_id=str(uuid.uuid4()),
                image_id=str(body["image_id"]),
                prototype_id=int(body["prototype_id"]),
                model_id=str(body.get("model_id", model_id)),
                rating=rating,
                rater_id=str(body["rater_id"]),
                timestamp=time.time(),
            )
        except (KeyError, TypeError, ValueError) as exc:
            return JSONResponse({"error": f"bad rating payload: {exc}"}, status_code=400)
        try:
            store.add(record)
        except ValidationError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except DuplicateRatingError as exc:
            return JSONResponse({"error": str(exc)}, status_code=409)
        return JSONResponse({"rating_id": record.rating_id}, status_code=201)

    @app.get("/api/progress")
    def progress() -> JSONResponse:
        records = [r for r in store.all() if r.model_id == model_id]
        per_rater: dict[str, int] = {}
        for r in records:
            per_rater[r.rater_id] = per_rater.get(r.rater_id, 0) + 1
        return JSONResponse(
            {"total": len(pool.items), "rated": len(records), "per_rater": per_rater}
        )

    @app.get("/api/rubric")
    def rubric() -> JSONResponse:
        return JSONResponse({"levels": {str(k): v for k, v in sorted(RUBRIC.items())}})

    @app.get("/api/images/{image_id}")
    def image_endpoint(image_id: str) -> Response:
        try:
            im = dataset.image(image_id)
        except KeyError:
            return JSONResponse({"error": f"unknown image {image_id}"}, status_code=404)
        return Response(image_png(im.pixels), media_type="image/png")

    @app.get("/api/heatmaps/{image_id}/{prototype_id}")
    def heatmap_endpoint(image_id: str, prototype_id: int) -> Response:
        try:
            im = dataset.image(image_id)
        except KeyError:
            return JSONResponse({"error": f"unknown image {image_id}"}, status_code=404)
        if not 0 <= prototype_id < model.num_prototypes:
            return JSONResponse(
                {"error": f"unknown prototype {prototype_id}"}, status_code=404
            )
        amap = activation_map(model, prototype_id, im)
        return Response(heatmap_overlay_png(im.pixels, amap.display), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(app: FastAPI, port: int) -> None:
    import uvicorn

    uvicorn.run(app, host="127.0.0.1", port=port, log_level="info")
