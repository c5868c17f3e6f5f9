import asyncio
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import aiofiles
import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.model_selection import train_test_split

from config import settings
from models_schemas import SplitSpec
from services_autodiff import DTYPE, ShapeMismatchError, Tensor

logger = logging.getLogger(__name__)

IMAGES_DIR = "images"
MASKS_DIR = "masks"
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}
MASK_THRESHOLD = 127.5
TEST_FRACTION = 1 / 8

# Published train/test counts of the two microscopy datasets
SPLIT_PRESETS: Dict[str, Tuple[int, int]] = {
    "particles": (35, 5),
    "bacteria": (320, 46),
}

PathLike = Union[str, Path]


class DatasetError(ValueError):
    """Base class for dataset problems."""


class MissingCounterpartError(DatasetError):
    """An image without a mask, or a mask without an image."""

    def __init__(self, orphans: Sequence[str]):
        self.orphans = list(orphans)
        super().__init__(f"Files without a counterpart in images/ or masks/: {', '.join(self.orphans)}")


class EmptyDatasetError(DatasetError):
    """No samples found."""


class SplitError(DatasetError):
    """Split counts do not match the dataset."""


class ImageIOError(OSError):
    """Reading or writing an image file failed."""

    def __init__(self, path: PathLike, reason: str):
        self.path = str(path)
        super().__init__(f"{path}: {reason}")


class PairedSample(NamedTuple):
    image: Tensor
    mask: Tensor
    name: str


@dataclass
class PairedDataset:
    """(image, mask) couples in deterministic order."""
    samples: List[PairedSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> PairedSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[PairedSample]:
        return iter(self.samples)

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.samples]

    @property
    def image_channels(self) -> int:
        return self.samples[0].image.shape[1] if self.samples else 1


@dataclass
class UnpairedDataset:
    """Two independent pools: domain A (images) and domain B (masks)."""
    domain_a: List[Tensor] = field(default_factory=list)
    domain_b: List[Tensor] = field(default_factory=list)
    names_a: List[str] = field(default_factory=list)


# ---------- Pixel mapping ----------

def pixels_to_unit(values: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1], linear."""
    return np.asarray(values, dtype=DTYPE) / DTYPE(127.5) - DTYPE(1.0)


def unit_to_pixels(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> 8-bit grid, clipped."""
    scaled = (np.asarray(values, dtype=DTYPE) + DTYPE(1.0)) * DTYPE(127.5)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def quantize(values: np.ndarray) -> np.ndarray:
    """Snap values onto the 256-level grid that PNG files can hold."""
    return pixels_to_unit(unit_to_pixels(values))


def binarize_pixels(values: np.ndarray) -> np.ndarray:
    """8-bit mask values -> exactly {-1, +1}."""
    return np.where(np.asarray(values, dtype=DTYPE) > MASK_THRESHOLD, DTYPE(1.0), DTYPE(-1.0)).astype(DTYPE)


# ---------- Image codec ----------

def _is_grayscale(img: Image.Image) -> bool:
    return img.mode in ("1", "L", "LA", "I", "I;16", "F")


def decode_image(
    data: bytes,
    size: Optional[int] = None,
    mask: bool = False,
    channels: Optional[int] = None,
    source: str = "<bytes>",
) -> Tensor:
    """Decode raster bytes into a (1, C, H, W) tensor in [-1, 1].

    Masks are read as one channel, resized nearest-neighbour and binarised;
    images are resized bilinearly and keep 1 or 3 channels.
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if mask:
                img = img.convert("L")
            else:
                if channels is None:
                    channels = 1 if _is_grayscale(img) else 3
                img = img.convert("L" if channels == 1 else "RGB")
            if size is not None and img.size != (size, size):
                resample = Image.Resampling.NEAREST if mask else Image.Resampling.BILINEAR
                img = img.resize((size, size), resample)
            pixels = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageIOError(source, f"cannot decode image ({e})") from e

    values = binarize_pixels(pixels) if mask else pixels_to_unit(pixels)
    if values.ndim == 2:
        values = values[None, :, :]
    else:
        values = values.transpose(2, 0, 1)
    return Tensor(values[None, ...])


def read_image(path: PathLike, size: Optional[int] = None, mask: bool = False, channels: Optional[int] = None) -> Tensor:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ImageIOError(path, f"cannot read file ({e.strerror or e})") from e
    return decode_image(data, size=size, mask=mask, channels=channels, source=str(path))


def encode_png(t: Union[Tensor, np.ndarray]) -> bytes:
    """Quantise a (1, C, H, W) or (C, H, W) tensor with C in {1, 3} into PNG bytes."""
    values = t.data if isinstance(t, Tensor) else np.asarray(t)
    if values.ndim == 4:
        if values.shape[0] != 1:
            raise ShapeMismatchError(f"Can only encode a single image, got batch of {values.shape[0]}")
        values = values[0]
    if values.ndim != 3 or values.shape[0] not in (1, 3):
        raise ShapeMismatchError(f"Expected (1, C, H, W) with C in {{1, 3}}, got {values.shape}")

    pixels = unit_to_pixels(values)
    # uint8 (H, W) -> "L", (H, W, 3) -> "RGB"
    img = Image.fromarray(pixels[0] if pixels.shape[0] == 1 else np.ascontiguousarray(pixels.transpose(1, 2, 0)))
    buffer = io.BytesIO()
    img.save(buffer, format="PNG")
    return buffer.getvalue()


def write_image(t: Union[Tensor, np.ndarray], path: PathLike) -> Path:
    target = Path(path)
    payload = encode_png(t)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payload)
    except OSError as e:
        raise ImageIOError(target, f"cannot write file ({e.strerror or e})") from e
    return target


def resize_tensor(t: Tensor, height: int, width: int, mask: bool = False) -> Tensor:
    """Resample a (1, C, H, W) tensor through the 8-bit image path."""
    if t.shape[2:] == (height, width):
        return t
    data = encode_png(t)
    with Image.open(io.BytesIO(data)) as img:
        resample = Image.Resampling.NEAREST if mask else Image.Resampling.BILINEAR
        resized = np.asarray(img.resize((width, height), resample), dtype=np.uint8)
    values = pixels_to_unit(resized)
    values = values[None, :, :] if values.ndim == 2 else values.transpose(2, 0, 1)
    return Tensor(values[None, ...])


# ---------- Loading ----------

def _list_images(directory: Path) -> List[str]:
    return sorted(p.name for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


async def _read_bytes(path: Path, semaphore: asyncio.Semaphore) -> bytes:
    async with semaphore:
        try:
            async with aiofiles.open(path, "rb") as f:
                return await f.read()
        except OSError as e:
            raise ImageIOError(path, f"cannot read file ({e.strerror or e})") from e


async def _read_all(paths: List[Path]) -> List[bytes]:
    semaphore = asyncio.Semaphore(max(1, settings.LOAD_CONCURRENCY))
    # gather keeps input order regardless of completion order
    return await asyncio.gather(*(_read_bytes(p, semaphore) for p in paths))


def load_paired(root: PathLike, image_size: int, channels: Optional[int] = None) -> PairedDataset:
    """Load ``<root>/images`` and ``<root>/masks`` with matching file names."""
    root = Path(root)
    image_dir, mask_dir = root / IMAGES_DIR, root / MASKS_DIR
    for directory in (image_dir, mask_dir):
        if not directory.is_dir():
            raise DatasetError(f"Dataset directory {directory} does not exist")

    image_names = _list_images(image_dir)
    mask_names = _list_images(mask_dir)
    orphans = sorted(set(image_names) ^ set(mask_names))
    if orphans:
        logger.error(f"Orphan files in {root}: {orphans}")
        raise MissingCounterpartError(orphans)
    if not image_names:
        raise EmptyDatasetError(f"No images found under {image_dir}")

    logger.info(f"Loading {len(image_names)} samples from {root} at {image_size}x{image_size}")
    paths = [image_dir / n for n in image_names] + [mask_dir / n for n in image_names]
    payloads = asyncio.run(_read_all(paths))

    count = len(image_names)
    samples = []
    for i, name in enumerate(image_names):
        image = decode_image(payloads[i], size=image_size, channels=channels, source=str(paths[i]))
        if channels is None:
            channels = image.shape[1]
        mask = decode_image(payloads[count + i], size=image_size, mask=True, source=str(paths[count + i]))
        samples.append(PairedSample(image=image, mask=mask, name=name))

    return PairedDataset(samples)


# ---------- Splitting ----------

def resolve_split(
    n_samples: int,
    n_train: Optional[int] = None,
    n_test: Optional[int] = None,
    preset: Optional[str] = None,
    seed: int = 0,
) -> SplitSpec:
    """Fill in missing split counts; without counts, hold out round(n/8) samples."""
    if preset is not None:
        if preset not in SPLIT_PRESETS:
            raise SplitError(f"Unknown split preset {preset!r}; choose from {sorted(SPLIT_PRESETS)}")
        n_train, n_test = SPLIT_PRESETS[preset]
    elif n_train is None and n_test is None:
        n_test = max(1, round(n_samples * TEST_FRACTION))
        n_train = n_samples - n_test
    elif n_train is None:
        n_train = n_samples - n_test
    elif n_test is None:
        n_test = n_samples - n_train

    if n_train < 1 or n_test < 1 or n_train + n_test != n_samples:
        raise SplitError(f"Split {n_train}/{n_test} does not partition {n_samples} samples")
    return SplitSpec(n_train=n_train, n_test=n_test, seed=seed)


def split(ds: PairedDataset, spec: SplitSpec) -> Tuple[PairedDataset, PairedDataset]:
    """Seeded partition into disjoint, exhaustive train and test sets."""
    if spec.total != len(ds):
        raise SplitError(f"Split {spec.n_train}/{spec.n_test} does not match dataset size {len(ds)}")

    train_idx, test_idx = train_test_split(
        np.arange(len(ds)),
        train_size=spec.n_train,
        test_size=spec.n_test,
        random_state=spec.seed,
        shuffle=True,
    )
    train = PairedDataset([ds[int(i)] for i in train_idx])
    test = PairedDataset([ds[int(i)] for i in test_idx])
    logger.info(f"Split {len(ds)} samples into {len(train)} train / {len(test)} test (seed {spec.seed})")
    return train, test


def to_unpaired(ds: PairedDataset, seed: int) -> UnpairedDataset:
    """Keep images in order; shuffle masks so no pairing survives."""
    rng = np.random.default_rng(seed)
    n = len(ds)
    identity = np.arange(n)
    order = rng.permutation(n)
    while n >= 2 and np.array_equal(order, identity):
        order = rng.permutation(n)
    return UnpairedDataset(
        domain_a=[s.image for s in ds],
        domain_b=[ds[int(i)].mask for i in order],
        names_a=ds.names,
    )


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))


# ---------- Synthetic data ----------

def synth_shapes(n: int, image_size: int, seed: int) -> PairedDataset:
    """Dark noisy fields with 1-3 bright ellipses or rectangles; masks mark the shapes."""
    if n < 1:
        raise DatasetError(f"Need at least one sample, got {n}")
    if image_size < 16:
        raise DatasetError(f"Synthetic images need image_size >= 16, got {image_size}")

    rng = np.random.default_rng(seed)
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    samples = []

    for i in range(n):
        foreground = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
            ry, rx = rng.uniform(0.08 * size, 0.2 * size, size=2)
            if rng.random() < 0.5:
                shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            else:
                shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            foreground |= shape

        background = -0.8 + rng.normal(0.0, 0.08, size=(size, size))
        bright = 0.6 + rng.normal(0.0, 0.08, size=(size, size))
        image = quantize(np.clip(np.where(foreground, bright, background), -1.0, 1.0))
        mask = np.where(foreground, DTYPE(1.0), DTYPE(-1.0)).astype(DTYPE)

        samples.append(PairedSample(
            image=Tensor(image[None, None]),
            mask=Tensor(mask[None, None]),
            name=f"synth_{i:04d}.png",
        ))

    return PairedDataset(samples)


def materialize(ds: PairedDataset, out_dir: PathLike) -> List[Path]:
    """Write a dataset in the images/ + masks/ layout."""
    root = Path(out_dir)
    written = []
    for sample in ds:
        written.append(write_image(sample.image, root / IMAGES_DIR / sample.name))
        written.append(write_image(sample.mask, root / MASKS_DIR / sample.name))
    logger.info(f"Wrote {len(ds)} samples to {root}")
    return written
