import logging
import threading
import time
from collections import defaultdict
from typing import Optional

from fastapi import HTTPException, Request

from config import settings
from models_checkpoint import Checkpoint, CheckpointError, load_checkpoint
from models_networks import parameter_count
from models_schemas import Direction, ModelInfo, Task
from services_data import encode_png
from services_metrics import DEFAULT_THRESHOLD, translate_payload
from services_training import loss_stability

logger = logging.getLogger(__name__)

# Rate limiting storage (per process)
rate_limit_storage = defaultdict(list)


def get_client_ip(request: Request) -> str:
    """Extract client IP from request"""
    forwarded = request.headers.get("X-Forwarded-For")
    if forwarded:
        return forwarded.split(",")[0].strip()
    return request.client.host if request.client else "unknown"


async def rate_limiter(request: Request) -> bool:
    """Simple sliding-window limiter keyed by client IP"""
    client_ip = get_client_ip(request)
    current_time = time.time()

    cutoff_time = current_time - 60
    rate_limit_storage[client_ip] = [t for t in rate_limit_storage[client_ip] if t > cutoff_time]

    if len(rate_limit_storage[client_ip]) >= settings.REQUESTS_PER_MINUTE:
        raise HTTPException(
            status_code=429,
            detail=f"Rate limit exceeded. Maximum {settings.REQUESTS_PER_MINUTE} requests per minute."
        )

    rate_limit_storage[client_ip].append(current_time)
    return True


class InferenceService:
    """Serves one checkpoint, loaded on first use."""

    def __init__(self, checkpoint_path: str):
        self.checkpoint_path = checkpoint_path
        self._checkpoint: Optional[Checkpoint] = None
        self._lock = threading.Lock()

    @property
    def loaded(self) -> bool:
        return self._checkpoint is not None

    @property
    def checkpoint(self) -> Checkpoint:
        with self._lock:
            if self._checkpoint is None:
                logger.info(f"Loading checkpoint {self.checkpoint_path}")
                self._checkpoint = load_checkpoint(self.checkpoint_path)
        return self._checkpoint

    def try_load(self) -> bool:
        try:
            self.checkpoint
        except CheckpointError as e:
            logger.warning(f"Checkpoint not available: {e}")
            return False
        return True

    def model_info(self) -> ModelInfo:
        ckpt = self.checkpoint
        return ModelInfo(
            task=ckpt.task,
            image_size=ckpt.image_size,
            image_channels=ckpt.config.image_channels,
            epochs_trained=ckpt.epochs_trained,
            parameter_counts={role: parameter_count(params) for role, params in ckpt.models.items()},
            loss_stability=loss_stability(ckpt.history),
        )

    def segment(self, payload: bytes, threshold: float = DEFAULT_THRESHOLD, raw: bool = False) -> bytes:
        generator = self.checkpoint.generator(Direction.A2B)
        return encode_png(translate_payload(generator, payload, threshold=threshold, raw=raw))

    def generate_image(self, payload: bytes) -> bytes:
        ckpt = self.checkpoint.require_task(Task.CYCLEGAN)
        return encode_png(translate_payload(ckpt.generator(Direction.B2A), payload, from_mask=True))


_service: Optional[InferenceService] = None


def get_inference_service() -> InferenceService:
    """Process-wide service bound to MASKGAN_CHECKPOINT"""
    global _service
    if _service is None or _service.checkpoint_path != settings.CHECKPOINT_PATH:
        _service = InferenceService(settings.CHECKPOINT_PATH)
    return _service
