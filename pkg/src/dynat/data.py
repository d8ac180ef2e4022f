"""Datasets: IDX files, synthetic blobs, splits, and batch streams.

Images live as float64 arrays in [0, 1] shaped [n, channels, h, w];
labels are exact one-hot float64 rows.  IDX is the big-endian binary
layout used for handwritten-digit corpora: magic 0x00000803 for u8
image volumes [n, h, w] and 0x00000801 for u8 label vectors.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import IdxCountError, IdxFormatError, IdxTruncatedError, ValidationError
from .seeding import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [n, ch, h, w], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0], self.class_count):
            raise ValidationError(
                f"labels must be [{self.images.shape[0]}, {self.class_count}], got {self.labels.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixels must lie in [0, 1]")
        one = (self.labels == 1.0).sum(axis=1)
        if not (np.all((self.labels == 0.0) | (self.labels == 1.0)) and np.all(one == 1)):
            raise ValidationError("labels must be exact one-hot rows")

    def __len__(self):
        return self.images.shape[0]

    def take(self, n: int) -> "Dataset":
        """First n examples, as a view-backed dataset."""
        return Dataset(self.images[:n], self.labels[:n], self.name, self.class_count)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxTruncatedError(f"IDX file ends inside {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, name: str = "idx", class_count: int = 10) -> Dataset:
    """Read a u8 image volume and label vector; pixels scale to [0, 1].

    Raises IdxFormatError on a bad magic, IdxCountError when the two
    files disagree on the number of examples, IdxTruncatedError when a
    file is shorter than its header promises.
    """
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">l", _read_exact(f, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
        n, h, w = struct.unpack(">3l", _read_exact(f, 12, "image dims"))
        if n < 0 or h <= 0 or w <= 0:
            raise IdxFormatError(f"bad image dims n={n} h={h} w={w}")
        raw = _read_exact(f, n * h * w, "image data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">l", _read_exact(f, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
        (ln,) = struct.unpack(">l", _read_exact(f, 4, "label count"))
        if ln != n:
            raise IdxCountError(f"{n} images but {ln} labels")
        raw = _read_exact(f, ln, "label data")
        classes = np.frombuffer(raw, dtype=np.uint8)
    if classes.size and int(classes.max()) >= class_count:
        raise IdxFormatError(f"label value {int(classes.max())} outside {class_count} classes")
    labels = np.zeros((n, class_count))
    labels[np.arange(n), classes] = 1.0
    return Dataset(images, labels, name, class_count)


def write_idx(ds: Dataset, images_path, labels_path):
    """Quantise pixels to u8 (round half up via rint) and write both files."""
    if ds.images.shape[1] != 1:
        raise ValidationError(f"IDX stores single-channel images, got {ds.images.shape[1]} channels")
    n, _, h, w = ds.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4l", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.rint(ds.images[:, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2l", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.argmax(axis=1).astype(np.uint8).tobytes())


CUE_ROWS = 2


def synthetic_blobs(n_per_class: int, classes: int, image_side: int, noise_sigma: float,
                    seed: int, background: float = 0.2, foreground: float = 0.8,
                    patch_size: int | None = None, cue_amplitude: float = 0.0,
                    patch_reliability: float = 1.0) -> Dataset:
    """Gaussian-noise images, each class marked by a bright square patch
    at a class-specific grid position.

    The patch grid is the smallest square holding all classes; patch
    centres sit mid-cell, so classes stay linearly separable until the
    noise washes the patch contrast out.  Pixels are clipped to [0, 1].

    Two optional knobs reshape the feature landscape for robustness
    experiments:

    cue_amplitude > 0 stamps a brittle class marker: a noise-free strip
    on the bottom CUE_ROWS rows carrying a class-specific +-amplitude
    sign pattern around background.  Keep the amplitude below the
    attack budget and the cue is perfectly predictive on clean data yet
    erasable (and forgeable) by any within-budget adversary.  The patch
    grid then occupies only the rows above the strip.

    patch_reliability < 1 scatters that fraction of patches to a
    uniformly random grid cell while the label (and cue) stay truthful,
    capping how useful the patch can ever be.  Together the knobs build
    datasets where ordinary training rides the brittle cue and collapses
    under attack, while attack-time training is forced onto the patch.
    """
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    if n_per_class < 1:
        raise ValidationError(f"need at least 1 example per class, got {n_per_class}")
    if noise_sigma < 0.0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 0.0 <= cue_amplitude <= min(background, 1.0 - background):
        raise ValidationError(
            f"cue_amplitude {cue_amplitude} must sit in [0, min(background, 1 - background)]")
    if not 0.0 < patch_reliability <= 1.0:
        raise ValidationError(
            f"patch_reliability {patch_reliability} must sit in (0, 1]")
    strip = CUE_ROWS if cue_amplitude > 0.0 else 0
    grid = int(np.ceil(np.sqrt(classes)))
    cell_h = (image_side - strip) // grid
    cell_w = image_side // grid
    if min(cell_h, cell_w) < 2:
        raise ValidationError(f"image side {image_side} too small for {classes} classes")
    if patch_size is None:
        patch_size = max(2, min(cell_h, cell_w) // 2)
    if patch_size > min(cell_h, cell_w):
        raise ValidationError(
            f"patch_size {patch_size} exceeds grid cell {min(cell_h, cell_w)}")

    def corner(cell):
        row, col = divmod(cell, grid)
        return (row * cell_h + (cell_h - patch_size) // 2,
                col * cell_w + (cell_w - patch_size) // 2)

    rng = make_rng(seed, "blobs")
    cue_signs = None
    if strip:
        cue_signs = np.where(rng.random((classes, strip, image_side)) < 0.5, -1.0, 1.0)
    n = n_per_class * classes
    labels = np.zeros((n, classes))
    images = np.empty((n, 1, image_side, image_side))
    for c in range(classes):
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        noise = rng.normal(0.0, noise_sigma, size=(n_per_class, image_side, image_side))
        cells = np.full(n_per_class, c)
        if patch_reliability < 1.0:
            scattered = rng.random(n_per_class) >= patch_reliability
            cells[scattered] = rng.integers(0, classes, size=int(scattered.sum()))
        block = background + noise
        for k in range(n_per_class):
            top, left = corner(int(cells[k]))
            block[k, top:top + patch_size, left:left + patch_size] = (
                foreground + noise[k, top:top + patch_size, left:left + patch_size])
        if strip:
            block[:, image_side - strip:, :] = background + cue_amplitude * cue_signs[c]
        images[sl, 0] = np.clip(block, 0.0, 1.0)
        labels[sl, c] = 1.0
    return Dataset(images, labels, f"blobs-{classes}x{n_per_class}", classes)


def split(ds: Dataset, train_fraction: float, seed: int):
    """Shuffle once with a seed-keyed permutation and cut into
    (train, test); both sides must be non-empty."""
    n = len(ds)
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ValidationError(
            f"train_fraction {train_fraction} leaves an empty side of a {n}-example dataset")
    perm = make_rng(seed, "split").permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    return (Dataset(ds.images[tr], ds.labels[tr], f"{ds.name}-train", ds.class_count),
            Dataset(ds.images[te], ds.labels[te], f"{ds.name}-test", ds.class_count))


@dataclass
class BatchStream:
    """Reshuffling batch source; the permutation is keyed by (seed,
    epoch), so epochs differ but reruns are identical."""
    dataset: Dataset
    batch_size: int
    seed: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def batches(self, epoch: int):
        """Yield (x, y) tensor pairs covering the dataset once; the last
        batch may be short."""
        ds = self.dataset
        perm = make_rng(self.seed, "batches", epoch).permutation(len(ds))
        for lo in range(0, len(ds), self.batch_size):
            pick = perm[lo:lo + self.batch_size]
            yield ad.Tensor(ds.images[pick]), ad.Tensor(ds.labels[pick])
