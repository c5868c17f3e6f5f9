# main.py - inference service for trained mask generators
import logging

from config import settings

logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL, logging.INFO))
logger = logging.getLogger(__name__)

from fastapi import Depends, FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response

from config import APP_NAME, APP_VERSION
from deps import InferenceService, get_inference_service, rate_limiter
from models_checkpoint import CheckpointError, TaskMismatchError
from models_schemas import HealthResponse, ModelInfo
from services_autodiff import ShapeMismatchError
from services_data import ImageIOError

app = FastAPI(title=APP_NAME, version=APP_VERSION)

# ---------- CORS ----------
ALLOWED = [o.strip() for o in settings.ALLOWED_ORIGINS.split(",") if o.strip()]
app.add_middleware(
    CORSMiddleware,
    allow_origins=ALLOWED if ALLOWED else ["*"],
    allow_credentials=False,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["Content-Type"],
)


async def _read_upload(upload: UploadFile) -> bytes:
    payload = await upload.read(settings.MAX_UPLOAD_BYTES + 1)
    if len(payload) > settings.MAX_UPLOAD_BYTES:
        raise HTTPException(status_code=413, detail=f"Upload exceeds {settings.MAX_UPLOAD_BYTES} bytes")
    if not payload:
        raise HTTPException(status_code=400, detail="Empty upload")
    return payload


def _run(action, *args, **kwargs) -> bytes:
    """Map library errors onto HTTP status codes."""
    try:
        return action(*args, **kwargs)
    except TaskMismatchError as e:
        logger.warning(f"Task mismatch: {e}")
        raise HTTPException(status_code=409, detail=str(e))
    except CheckpointError as e:
        logger.error(f"Checkpoint unavailable: {e}")
        raise HTTPException(status_code=503, detail="No model loaded")
    except (ImageIOError, ShapeMismatchError) as e:
        logger.warning(f"Bad input image: {e}")
        raise HTTPException(status_code=400, detail=f"Invalid image: {e}")
    except Exception as e:
        logger.error(f"Inference failed: {e}")
        raise HTTPException(status_code=500, detail="Inference failed")


@app.get("/health", response_model=HealthResponse)
def health(service: InferenceService = Depends(get_inference_service)):
    loaded = service.try_load()
    return HealthResponse(
        ok=True,
        service=APP_NAME,
        checkpoint_loaded=loaded,
        task=service.checkpoint.task if loaded else None,
    )


@app.get("/api/model", response_model=ModelInfo)
def model_info(service: InferenceService = Depends(get_inference_service)):
    try:
        return service.model_info()
    except CheckpointError as e:
        logger.error(f"Checkpoint unavailable: {e}")
        raise HTTPException(status_code=503, detail="No model loaded")


@app.post("/api/segment", dependencies=[Depends(rate_limiter)])
async def segment(
    file: UploadFile = File(...),
    raw: bool = Form(False),
    threshold: float = Form(0.0),
    service: InferenceService = Depends(get_inference_service),
):
    payload = await _read_upload(file)
    png = _run(service.segment, payload, threshold=threshold, raw=raw)
    logger.info(f"Segmented upload {file.filename} ({len(payload)} bytes)")
    return Response(content=png, media_type="image/png")


@app.post("/api/generate-image", dependencies=[Depends(rate_limiter)])
async def generate_image(
    file: UploadFile = File(...),
    service: InferenceService = Depends(get_inference_service),
):
    payload = await _read_upload(file)
    png = _run(service.generate_image, payload)
    logger.info(f"Generated image from mask {file.filename}")
    return Response(content=png, media_type="image/png")
