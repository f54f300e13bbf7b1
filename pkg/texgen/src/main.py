"""
FastAPI Gateway to complete textures, evaluate predictions and prepare fixture sets.
"""

import os, asyncio, fastapi, pydantic
import modules.inference as inference, modules.metrics as metrics, modules.fixtures as fixtures, modules.training as training
import utils.images as images

from typing import Dict, List, Literal, Optional
from utils.jsondb import JsonDB
from modules.types import InvalidInputError, ConfigurationError, FixtureError, CheckpointVersionError


app = fastapi.FastAPI(title="Texture Completion API")

DATA_DIR = os.environ.get("TEXGEN_DATA_DIR", "./data")


PIPELINES: Dict[str, inference.TexturePipeline] = {}
def get_pipeline() -> inference.TexturePipeline:
    """
    Loaded once from TEXGEN_SAMPLER_CKPT (required) and TEXGEN_REFINER_CKPT (optional).
    """
    if "default" not in PIPELINES:
        sampler = os.environ.get("TEXGEN_SAMPLER_CKPT")
        if not sampler:
            raise fastapi.HTTPException(status_code=404, detail="No sampler checkpoint configured (TEXGEN_SAMPLER_CKPT).")
        PIPELINES["default"] = inference.TexturePipeline.from_checkpoints(
            sampler, os.environ.get("TEXGEN_REFINER_CKPT") or None, device=os.environ.get("TEXGEN_DEVICE", "cpu")
        )
    return PIPELINES["default"]


def http_error(e: Exception, action: str) -> fastapi.HTTPException:
    if isinstance(e, fastapi.HTTPException):
        return e
    if isinstance(e, (InvalidInputError, ConfigurationError, CheckpointVersionError, pydantic.ValidationError)):
        return fastapi.HTTPException(status_code=400, detail=f"{action} failed: {e}")
    if isinstance(e, (FixtureError, FileNotFoundError)):
        return fastapi.HTTPException(status_code=404, detail=f"{action} failed: {e}")
    return fastapi.HTTPException(status_code=500, detail=f"{action} failed: {e}")


@app.post("/infer")
async def infer(
    normal: fastapi.UploadFile,
    partial: Optional[fastapi.UploadFile] = None,
    mask: Optional[fastapi.UploadFile] = None,
    image: Optional[fastapi.UploadFile] = None,
    iuv: Optional[fastapi.UploadFile] = None,
    output: Literal["final", "sample", "refine", "blend"] = "final",
    use_refiner: bool = True,
    blend_override: Optional[float] = fastapi.Query(default=None, ge=0.0, le=1.0),
):
    """
    Completes a texture from a partial texture + mask, or from a photo + 16-bit IUV map.
    Returns the requested texture (or the blend mask) as a PNG.
    """
    try:
        named = {"normal": normal, "partial": partial, "mask": mask, "image": image, "iuv": iuv}
        uploads = {name: await upload.read() for name, upload in named.items() if upload is not None}

        kwargs = {}
        if "image" in uploads:
            kwargs["image"] = images.decode_texture(images.decode_upload(uploads["image"]))
            kwargs["iuv"] = images.decode_iuv(images.decode_upload(uploads["iuv"])) if "iuv" in uploads else None
        else:
            if "partial" not in uploads or "mask" not in uploads:
                raise InvalidInputError("Upload either 'image' and 'iuv', or 'partial' and 'mask'.")
            kwargs["partial"] = images.decode_texture(images.decode_upload(uploads["partial"]))
            kwargs["mask"] = images.decode_mask(images.decode_upload(uploads["mask"]))

        pipeline = await asyncio.to_thread(get_pipeline)
        result = await asyncio.to_thread(
            pipeline.run,
            images.decode_texture(images.decode_upload(uploads["normal"])),
            use_refiner=use_refiner,
            blend_override=blend_override,
            **kwargs,
        )

        selected = {"final": result.t_final, "sample": result.t_sample, "refine": result.t_refine, "blend": result.m_blend}[output]
        if selected is None:
            raise InvalidInputError(f"Output '{output}' is only available when the refiner runs.")
        return fastapi.Response(content=images.encode_png(selected), media_type="image/png")

    except Exception as e:
        raise http_error(e, "Inference")


class EvaluateRequest(pydantic.BaseModel):
    pred_dir: str
    gt_dir: str
    strict: bool = False
    out_dir: Optional[str] = pydantic.Field(default=None, description="Also write metrics.csv and metrics.json here.")


@app.post("/evaluate", response_model=metrics.MetricReport)
async def evaluate(request: EvaluateRequest):
    """
    Scores predicted textures against same-named ground truth textures.
    """
    try:
        report = await asyncio.to_thread(
            metrics.evaluate, request.pred_dir, request.gt_dir, metrics.EvalConfig(strict=request.strict)
        )
        if request.out_dir:
            await asyncio.to_thread(metrics.write_report, report, request.out_dir)
        if report.failed:
            raise fastapi.HTTPException(status_code=400, detail=f"Unmatched files: {', '.join(report.unmatched)}")
        return report
    except Exception as e:
        raise http_error(e, "Evaluation")


class PrepareDataRequest(pydantic.BaseModel):
    spec: fixtures.FixtureSpec = pydantic.Field(default_factory=fixtures.FixtureSpec)
    out_dir: str = pydantic.Field(..., description="Directory the fixture set is written to (relative to the data dir).")


@app.post("/prepare_data", response_model=fixtures.FixtureManifest)
async def prepare_data(request: PrepareDataRequest):
    """
    Generates a procedural fixture set and returns its manifest.
    """
    try:
        # NOTE : generate_fixtures drives its own event loop for the manifest, so it runs in a worker thread
        return await asyncio.to_thread(fixtures.generate_fixtures, request.spec, os.path.join(DATA_DIR, request.out_dir))
    except Exception as e:
        raise http_error(e, "Fixture generation")


@app.get("/runs", response_model=List[training.RunEntry])
async def list_runs(out_dir: str = "runs"):
    """
    Lists the checkpoints recorded in a training output directory.
    """
    try:
        registry = await JsonDB(training.registry_path(os.path.join(DATA_DIR, out_dir)), training.RunRegistry).read()
        return registry.runs
    except Exception as e:
        raise http_error(e, "Run listing")
