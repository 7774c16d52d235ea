"""
Corpus ingestion, normalisation, splitting and synthetic corpus generation.

A corpus on disk is a root directory with one sub-directory per label::

    corpus/
    ├── spam/     *.jpg, *.png, *.gif
    └── normal/   *.jpg, *.png, *.gif

Ingestion decodes every file, skips the ones that cannot be decoded, resizes
the survivors to 128x128 RGB with intensities in [0, 1] and collapses files
whose normalised pixels are identical.

Classes:
    LabeledSample: A normalised image with its label and provenance
    IngestReport: Counts of decoded, corrupt, duplicate and kept files
    DatasetSplit: Train/test partition
    SyntheticCorpus: Summary of a generated corpus

Functions:
    decode_image: Decode one file to a pixel grid
    normalize: Pixel grid to 128x128x3 unit-interval image
    ingest: Load, clean and deduplicate a corpus directory
    write_samples: Write normalised samples in the corpus layout
    split: Stratified, seeded 3:1 train/test split
    gen_synthetic: Generate a deterministic spam-like/normal-like corpus
    gradient_energy: Mean squared horizontal intensity difference
"""
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from spamlens.errors import CorruptImageError, DatasetError
from spamlens.files import atomic_write_bytes
from spamlens.parallel import map_ordered

log = logging.getLogger(__name__)

SPAM = 1
NORMAL = 0
LABEL_NAMES = {SPAM: "spam", NORMAL: "normal"}
DEFAULT_LABEL_MAP = {"spam": SPAM, "normal": NORMAL}

IMAGE_SIZE = 128
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".gif")
SPLIT_RATIO = (3, 1)


@dataclass(frozen=True)
class LabeledSample:
    """A normalised image with its label.

    Attributes:
        image (np.ndarray): ``(128, 128, 3)`` float32 in [0, 1].
        label (int): 1 for spam, 0 for normal.
        source_id (str): Path of the originating file relative to the corpus root.
        content_hash (str): SHA-256 of the normalised 8-bit pixels.
    """

    image: np.ndarray
    label: int
    source_id: str
    content_hash: str

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass
class IngestReport:
    """Outcome of an ingest run.

    ``per_label`` holds the same four counts for every label directory.
    """

    decoded: int = 0
    corrupt: int = 0
    duplicates_removed: int = 0
    kept: Dict[str, int] = field(default_factory=dict)
    per_label: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "decoded": self.decoded,
            "corrupt": self.corrupt,
            "duplicates_removed": self.duplicates_removed,
            "kept": dict(self.kept),
        }


@dataclass
class DatasetSplit:
    train: List[LabeledSample]
    test: List[LabeledSample]
    seed: int


def decode_image(path) -> np.ndarray:
    """Decode an image file to an 8-bit ``(H, W, C)`` grid with 1, 3 or 4 channels.

    GIFs contribute their first frame only. Palette, LA and CMYK images are
    converted to RGB(A).

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CorruptImageError: If Pillow cannot decode the file completely.
    """
    try:
        with Image.open(path) as img:
            img.seek(0)
            img.load()
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            elif img.mode == "LA":
                img = img.convert("RGBA")
            elif img.mode not in ("L", "RGB", "RGBA"):
                img = img.convert("RGB")
            pixels = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError, EOFError) as e:
        raise CorruptImageError(f"Cannot decode {path}: {e}") from e
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    return pixels


def _normalized_bytes(pixels: np.ndarray) -> np.ndarray:
    """Normalise to an 8-bit ``(128, 128, 3)`` grid (before rescaling)."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3, 4):
        raise DatasetError(f"Expected an (H, W, 1|3|4) pixel grid, got shape {pixels.shape}")
    if pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise DatasetError(f"Image has zero area: shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        pixels = np.clip(pixels, 0, 255).astype(np.uint8)

    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    elif pixels.shape[2] == 4:
        pixels = pixels[..., :3]

    if pixels.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        resized = Image.fromarray(np.ascontiguousarray(pixels)).resize(
            (IMAGE_SIZE, IMAGE_SIZE), Image.Resampling.BILINEAR
        )
        pixels = np.asarray(resized, dtype=np.uint8)
    return np.ascontiguousarray(pixels)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """Turn a decoded pixel grid into a model input image.

    Grayscale is replicated to three channels, alpha is dropped, the grid is
    resized bilinearly to 128x128 and divided by 255.

    Args:
        pixels (np.ndarray): ``(H, W)`` or ``(H, W, C)`` with C in {1, 3, 4}.

    Returns:
        np.ndarray: ``(128, 128, 3)`` float32 in [0, 1].

    Raises:
        DatasetError: For a zero-area image or an unsupported channel count.

    Examples:
        >>> normalize(np.full((256, 256, 3), 128, np.uint8))[0, 0, 0]
        0.5019608
    """
    return _normalized_bytes(pixels).astype(np.float32) / np.float32(255)


def content_hash(normalized: np.ndarray) -> str:
    return hashlib.sha256(normalized.tobytes()).hexdigest()


def _load_file(path: Path):
    try:
        grid = _normalized_bytes(decode_image(path))
    except DatasetError as e:
        log.warning("skipping %s: %s", path, e)
        return None
    return grid, content_hash(grid)


def _image_files(folder: Path) -> List[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest(
    root_dir,
    label_map: Optional[Dict[str, int]] = None,
    threads: Optional[int] = None,
) -> Tuple[List[LabeledSample], IngestReport]:
    """Load a labelled corpus directory.

    Corrupt files are skipped and counted. Files whose normalised pixels are
    identical are collapsed to the one with the smallest relative path, so the
    kept set does not depend on file order.

    Args:
        root_dir (str or Path): Corpus root with one sub-directory per label.
        label_map (dict, optional): Directory name to label. Defaults to
            ``{"spam": 1, "normal": 0}``.
        threads (int, optional): Decoding fan-out. Defaults to the machine
            parallelism.

    Returns:
        tuple: ``(samples, report)``.

    Raises:
        FileNotFoundError: If ``root_dir`` does not exist.
        DatasetError: If a label directory yields no decodable image.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"Corpus directory not found: {root_dir}")
    label_map = label_map or DEFAULT_LABEL_MAP

    samples = []
    report = IngestReport()
    seen = set()
    for label_name, label in label_map.items():
        files = _image_files(root / label_name)
        results = map_ordered(_load_file, files, threads)
        counts = {"decoded": 0, "corrupt": 0, "duplicates_removed": 0, "kept": 0}
        for path, result in zip(files, results):
            if result is None:
                counts["corrupt"] += 1
                continue
            counts["decoded"] += 1
            grid, digest = result
            if digest in seen:
                counts["duplicates_removed"] += 1
                continue
            seen.add(digest)
            counts["kept"] += 1
            image = grid.astype(np.float32) / np.float32(255)
            samples.append(LabeledSample(image, label, path.relative_to(root).as_posix(), digest))

        if counts["kept"] == 0:
            raise DatasetError(f"Label directory '{label_name}' under {root} has no decodable images")
        report.decoded += counts["decoded"]
        report.corrupt += counts["corrupt"]
        report.duplicates_removed += counts["duplicates_removed"]
        report.kept[label_name] = counts["kept"]
        report.per_label[label_name] = counts
        log.info("ingested %s: %s", label_name, counts)
    return samples, report


def write_samples(samples: Sequence[LabeledSample], out_dir, image_format: str = "png") -> List[Path]:
    """Write normalised samples in the corpus layout, named by content hash.

    PNG output is lossless, so ingesting the output again changes nothing.
    ``jpg`` output follows the convention of storing everything as JPEG but
    is not idempotent.

    Returns:
        list of Path: The written files.
    """
    if image_format not in ("png", "jpg"):
        raise ValueError(f"image_format must be 'png' or 'jpg', got {image_format!r}")
    out = Path(out_dir)
    written = []
    for sample in samples:
        grid = np.round(sample.image * 255).astype(np.uint8)
        buffer = io.BytesIO()
        if image_format == "png":
            Image.fromarray(grid).save(buffer, format="PNG")
        else:
            Image.fromarray(grid).save(buffer, format="JPEG", quality=95)
        path = out / sample.label_name / f"{sample.content_hash[:16]}.{image_format}"
        atomic_write_bytes(path, buffer.getvalue())
        written.append(path)
    return written


def split(
    samples: Sequence[LabeledSample],
    ratio: Tuple[int, int] = SPLIT_RATIO,
    seed: int = 0,
) -> DatasetSplit:
    """Stratified, seeded train/test split.

    Each class is ordered by content hash, shuffled with one generator seeded
    by ``seed`` and cut so that train:test is ``ratio`` (rounded to the nearest
    sample, at least one sample on each side). A corpus of 6636 images splits
    into about 4977 training and 1659 test samples.

    Raises:
        DatasetError: For fewer than 4 samples or a class with fewer than 2.
    """
    if len(samples) < 4:
        raise DatasetError(f"Need at least 4 samples to split, got {len(samples)}")
    train_part, test_part = ratio
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted({s.label for s in samples}):
        group = sorted((s for s in samples if s.label == label), key=lambda s: s.content_hash)
        if len(group) < 2:
            raise DatasetError(
                f"Class '{LABEL_NAMES.get(label, label)}' has {len(group)} sample; need at least 2"
            )
        n_test = int(len(group) * test_part / (train_part + test_part) + 0.5)
        n_test = min(max(n_test, 1), len(group) - 1)
        order = rng.permutation(len(group))
        test.extend(group[i] for i in order[:n_test])
        train.extend(group[i] for i in order[n_test:])
    return DatasetSplit(train=train, test=test, seed=seed)


def gradient_energy(image: np.ndarray) -> float:
    """Mean squared difference between horizontally adjacent intensities."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    return float(np.mean(np.diff(gray, axis=1) ** 2))


def _render_spam(rng: np.random.Generator) -> np.ndarray:
    """Background plus lines of glyph-like blocks and speckle noise."""
    height = int(rng.integers(96, 257))
    width = int(rng.integers(96, 257))
    start = rng.integers(0, 256, size=3).astype(np.float64)
    if rng.random() < 0.5:
        canvas = np.broadcast_to(start, (height, width, 3)).copy()
    else:
        end = rng.integers(0, 256, size=3).astype(np.float64)
        t = np.linspace(0.0, 1.0, width)[None, :, None]
        canvas = np.broadcast_to(start + (end - start) * t, (height, width, 3)).copy()

    light_background = canvas.mean() > 127
    ink = rng.integers(0, 60, size=3) if light_background else rng.integers(195, 256, size=3)

    margin = int(rng.integers(4, 10))
    y = margin
    while True:
        line_height = int(rng.integers(6, 13))
        if y + line_height > height - margin:
            break
        x = margin
        while x < width - margin:
            for _ in range(int(rng.integers(2, 9))):
                glyph_width = int(rng.integers(3, 7))
                if x + glyph_width > width - margin:
                    break
                strokes = rng.random((line_height, glyph_width)) < 0.5
                region = canvas[y:y + line_height, x:x + glyph_width]
                region[strokes] = ink
                x += glyph_width + 1
            x += int(rng.integers(3, 8))
        y += line_height + int(rng.integers(3, 7))

    speckle = rng.random((height, width)) < 0.02
    canvas[speckle] = rng.integers(0, 256, size=(int(speckle.sum()), 3))
    return canvas.astype(np.uint8)


def _render_normal(rng: np.random.Generator) -> np.ndarray:
    """Smooth composite of blurred colour blobs."""
    height = int(rng.integers(96, 257))
    width = int(rng.integers(96, 257))
    canvas = np.broadcast_to(rng.integers(0, 256, size=3).astype(np.float64), (height, width, 3)).copy()
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = rng.uniform(15, 60)
        color = rng.integers(0, 256, size=3).astype(np.float64)
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))[..., None]
        canvas = canvas * (1 - weight) + color * weight
    canvas = gaussian_filter(canvas, sigma=(3, 3, 0))
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


@dataclass
class SyntheticCorpus:
    root: Path
    files: List[Path]
    n_per_class: int
    seed: int


def _jpeg_bytes(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="JPEG", quality=90)
    return buffer.getvalue()


def gen_synthetic(n_per_class: int, seed: int, out_dir) -> SyntheticCorpus:
    """Generate a desk-scale corpus in the ingest layout.

    Spam-like images are solid or gradient backgrounds covered by lines of
    high-contrast glyph blocks with speckle noise. Normal-like images are
    smooth composites of blurred colour blobs. Output is byte-identical for the
    same ``(n_per_class, seed)``.

    Args:
        n_per_class (int): Images per class, at least 1.
        seed (int): Generator seed.
        out_dir (str or Path): Corpus root; ``spam/`` and ``normal/`` are created.

    Returns:
        SyntheticCorpus: Root and the written files.

    Raises:
        ValueError: If ``n_per_class`` is below 1.
        DatasetError: If the output directory cannot be written.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be at least 1, got {n_per_class}")
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    files = []
    try:
        for i in range(n_per_class):
            for name, render in (("spam", _render_spam), ("normal", _render_normal)):
                path = root / name / f"{name}_{i:05d}.jpg"
                atomic_write_bytes(path, _jpeg_bytes(render(rng)))
                files.append(path)
    except OSError as e:
        raise DatasetError(f"Cannot write synthetic corpus to {root}: {e}") from e
    log.info("wrote %d synthetic images to %s", len(files), root)
    return SyntheticCorpus(root=root, files=files, n_per_class=n_per_class, seed=seed)
