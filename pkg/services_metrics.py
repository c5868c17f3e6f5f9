import logging
import time
from pathlib import Path
from typing import Callable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from sklearn.metrics import confusion_matrix

from models_networks import ModelParams, forward_generator
from models_schemas import MetricReport, SampleMetrics
from services_autodiff import DTYPE, DomainError, ShapeMismatchError, Tensor
from services_data import EmptyDatasetError, ImageIOError, PairedDataset, decode_image, resize_tensor, unit_to_pixels

logger = logging.getLogger(__name__)

SEPARATOR_GRAY = 128
DEFAULT_THRESHOLD = 0.0

Generator = Union[ModelParams, Callable[[Tensor], Tensor]]
MaskLike = Union[Tensor, np.ndarray]


def binarize(pred: MaskLike, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where the value is strictly above ``threshold``, else 0."""
    values = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return (values > threshold).astype(np.uint8)


def binary_to_unit(mask: np.ndarray) -> Tensor:
    """{0, 1} mask -> {-1, +1} tensor, ready for write_image."""
    return Tensor(np.where(np.asarray(mask) > 0, DTYPE(1.0), DTYPE(-1.0)))


def _counts(a: MaskLike, b: MaskLike) -> Tuple[int, int, int, int]:
    """(tn, fp, fn, tp) treating ``a`` as reference and ``b`` as candidate."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.size and not np.isin(m, (0, 1)).all():
            raise DomainError("Masks must be binary {0, 1}; binarize predictions first")
    tn, fp, fn, tp = confusion_matrix(a.reshape(-1), b.reshape(-1), labels=[0, 1]).ravel()
    return int(tn), int(fp), int(fn), int(tp)


def iou(a: MaskLike, b: MaskLike) -> float:
    _, fp, fn, tp = _counts(a, b)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def dice(a: MaskLike, b: MaskLike) -> float:
    _, fp, fn, tp = _counts(a, b)
    total = 2 * tp + fp + fn
    return 1.0 if total == 0 else 2 * tp / total


def pixel_accuracy(a: MaskLike, b: MaskLike) -> float:
    tn, fp, fn, tp = _counts(a, b)
    return (tp + tn) / (tn + fp + fn + tp)


def sample_metrics(name: str, truth: MaskLike, pred: MaskLike) -> SampleMetrics:
    tn, fp, fn, tp = _counts(truth, pred)
    union = tp + fp + fn
    return SampleMetrics(
        name=name,
        iou=1.0 if union == 0 else tp / union,
        dice=1.0 if union == 0 else 2 * tp / (2 * tp + fp + fn),
        pixel_accuracy=(tp + tn) / (tn + fp + fn + tp),
    )


def _as_callable(generator: Generator) -> Callable[[Tensor], Tensor]:
    if isinstance(generator, ModelParams):
        return lambda image: forward_generator(generator, image, training=False)
    return generator


def predict(generator: Generator, images: Sequence[Tensor]) -> List[Tensor]:
    """Eval-mode forward pass per image, logging the mean time per image."""
    forward = _as_callable(generator)
    outputs = []
    started = time.perf_counter()
    for image in images:
        outputs.append(forward(image))
    if images:
        per_image = (time.perf_counter() - started) / len(images)
        logger.info(f"Generator forward pass: {per_image * 1000:.2f} ms per image over {len(images)} images")
    return outputs


def evaluate(generator: Generator, test_ds: PairedDataset, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    if len(test_ds) == 0:
        raise EmptyDatasetError("Cannot evaluate on an empty test set")

    predictions = predict(generator, [s.image for s in test_ds])
    samples = [
        sample_metrics(s.name, binarize(s.mask, 0.0), binarize(pred, threshold))
        for s, pred in zip(test_ds, predictions)
    ]
    report = MetricReport(
        samples=samples,
        mean_iou=float(np.mean([m.iou for m in samples])),
        mean_dice=float(np.mean([m.dice for m in samples])),
        mean_pixel_accuracy=float(np.mean([m.pixel_accuracy for m in samples])),
        n_samples=len(samples),
        threshold=threshold,
    )
    logger.info(
        f"Evaluated {report.n_samples} samples: IoU={report.mean_iou:.4f} "
        f"Dice={report.mean_dice:.4f} accuracy={report.mean_pixel_accuracy:.4f}"
    )
    return report


def format_report(report: MetricReport) -> str:
    """One tab-separated line per sample, then the means."""
    lines = ["name\tiou\tdice\tpixel_accuracy"]
    for m in report.samples:
        lines.append(f"{m.name}\t{m.iou:.6f}\t{m.dice:.6f}\t{m.pixel_accuracy:.6f}")
    lines.append(f"mean\t{report.mean_iou:.6f}\t{report.mean_dice:.6f}\t{report.mean_pixel_accuracy:.6f}")
    return "\n".join(lines) + "\n"


# ---------- Figures ----------

def _panel(t: MaskLike, channels: int) -> np.ndarray:
    values = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    if values.ndim == 4:
        values = values[0]
    pixels = unit_to_pixels(values).transpose(1, 2, 0)
    if pixels.shape[2] != channels:
        pixels = np.repeat(pixels[:, :, :1], channels, axis=2)
    return pixels


def triptych(image: MaskLike, gt_mask: MaskLike, pred_mask: MaskLike, path: Union[str, Path]) -> Path:
    """Image, ground truth and prediction side by side, split by mid-gray columns.

    All three inputs are tensors in [-1, 1] with equal height and width.
    """
    shapes = [np.shape(t.data if isinstance(t, Tensor) else t)[-2:] for t in (image, gt_mask, pred_mask)]
    if len(set(shapes)) != 1:
        raise ShapeMismatchError(f"Triptych panels differ in size: {shapes}")

    img_values = image.data if isinstance(image, Tensor) else np.asarray(image)
    channels = 3 if img_values.shape[-3] == 3 else 1
    height = shapes[0][0]
    separator = np.full((height, 1, channels), SEPARATOR_GRAY, dtype=np.uint8)
    canvas = np.concatenate(
        [_panel(image, channels), separator, _panel(gt_mask, channels), separator, _panel(pred_mask, channels)],
        axis=1,
    )

    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(canvas[:, :, 0] if channels == 1 else canvas).save(target, format="PNG")
    except OSError as e:
        raise ImageIOError(target, f"cannot write triptych ({e.strerror or e})") from e
    return target


# ---------- CycleGAN reverse direction ----------

class TranslationResult(NamedTuple):
    images: List[Tensor]
    mean_l1: float


def cycle_reconstruction_error(gen_ab: Generator, gen_ba: Generator, images: Sequence[Tensor]) -> float:
    """Mean L1 between each image and its A->B->A reconstruction."""
    if not images:
        raise EmptyDatasetError("No images to reconstruct")
    forward_ab, forward_ba = _as_callable(gen_ab), _as_callable(gen_ba)
    errors = [float(np.mean(np.abs(forward_ba(forward_ab(x)).data - x.data))) for x in images]
    return float(np.mean(errors))


def translate_masks(gen_ba: Generator, test_ds: PairedDataset) -> TranslationResult:
    """Generate images from the test masks and score them against the real images."""
    if len(test_ds) == 0:
        raise EmptyDatasetError("Cannot translate an empty test set")
    generated = predict(gen_ba, [s.mask for s in test_ds])
    l1 = [float(np.mean(np.abs(g.data - s.image.data))) for g, s in zip(generated, test_ds)]
    return TranslationResult(images=generated, mean_l1=float(np.mean(l1)))


# ---------- Single-image inference ----------

def translate_payload(
    generator: ModelParams,
    payload: bytes,
    from_mask: bool = False,
    threshold: float = DEFAULT_THRESHOLD,
    raw: bool = False,
    source: str = "<upload>",
) -> Tensor:
    """Run one encoded image through the generator and return the output at the input's size.

    Image->mask outputs are binarised unless ``raw``; mask->image outputs are always continuous.
    """
    channels = generator.config.in_channels
    height, width = decode_image(payload, mask=from_mask, channels=channels, source=source).shape[2:]
    image = decode_image(payload, size=generator.config.image_size, mask=from_mask, channels=channels, source=source)

    started = time.perf_counter()
    output = forward_generator(generator, image)
    logger.info(f"Forward pass took {(time.perf_counter() - started) * 1000:.2f} ms")

    binary = not raw and not from_mask
    if binary:
        output = binary_to_unit(binarize(output, threshold))
    return resize_tensor(output, height, width, mask=binary)
