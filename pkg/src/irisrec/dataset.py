"""Image loading and preprocessing, dataset indexing, and train/test splits.

Supported image formats are binary PGM (P5, maxval 255) and 8-bit PNG
(grayscale or RGB, non-interlaced).  A dataset directory holds one
subdirectory per subject: ``<root>/<subject_id>/<image files>``.

Everything here is pure and deterministic: indexes are sorted, and the
random split mode uses a counter-based generator keyed by the run seed
and a hash of the subject id, so splits never depend on iteration order.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DatasetError(Exception):
    pass


class UnsupportedFormatError(DatasetError):
    """Magic bytes or encoding parameters outside the supported subset."""


class CorruptImageError(DatasetError):
    """Declared dimensions disagree with the payload, or the payload is broken."""


class MeanShapeMismatchError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class InsufficientSamplesError(DatasetError):
    def __init__(self, subject_id: str, have: int, need: int):
        super().__init__(
            f"subject {subject_id!r} has {have} images; "
            f"need more than {need} to leave test samples"
        )
        self.subject_id = subject_id


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C grid of float32 samples, row-major (row, col, channel).

    Raw decoded images hold values in [0, 255]; preprocessed tensors hold
    mean-subtracted reals.  Instances are immutable and safe to share.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"image data must be 3-D (H, W, C), got shape {arr.shape}")
        h, w, c = arr.shape
        if h < 1 or w < 1:
            raise ValueError(f"image dimensions must be >= 1, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {c}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def load_image(path) -> ImageTensor:
    """Decode a PGM(P5) or PNG file into a raw [0, 255] ImageTensor."""
    buf = Path(path).read_bytes()
    if buf[:2] == b"P5":
        return _decode_pgm(buf, path)
    if buf[:8] == PNG_SIGNATURE:
        return _decode_png(buf, path)
    raise UnsupportedFormatError(f"{path}: unrecognized magic bytes {buf[:8]!r}")


def write_pgm(path, img: ImageTensor) -> None:
    """Write a single-channel integer-valued ImageTensor as binary PGM (maxval 255)."""
    if img.channels != 1:
        raise ValueError("PGM writer requires a single-channel image")
    data = img.data[:, :, 0]
    if not np.all((data >= 0) & (data <= 255) & (data == np.rint(data))):
        raise ValueError("PGM writer requires integer values in [0, 255]")
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.astype(np.uint8).tobytes())


def _decode_pgm(buf: bytes, path) -> ImageTensor:
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise CorruptImageError(f"{path}: PGM header truncated")
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise CorruptImageError(f"{path}: unexpected byte {ch!r} in PGM header")
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: PGM maxval {maxval}, only 255 supported")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise CorruptImageError(f"{path}: missing whitespace before PGM payload")
    pos += 1
    payload = buf[pos:]
    if len(payload) != width * height:
        raise CorruptImageError(
            f"{path}: PGM payload is {len(payload)} bytes, expected {width * height}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 1)
    return ImageTensor(arr)


def _decode_png(buf: bytes, path) -> ImageTensor:
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(buf):
        length, ctype = struct.unpack_from(">I4s", buf, pos)
        pos += 8
        chunk = buf[pos : pos + length]
        if len(chunk) < length or pos + length + 4 > len(buf):
            raise CorruptImageError(f"{path}: truncated PNG chunk {ctype!r}")
        (crc,) = struct.unpack_from(">I", buf, pos + length)
        if zlib.crc32(ctype + chunk) != crc:
            raise CorruptImageError(f"{path}: CRC mismatch in PNG chunk {ctype!r}")
        pos += length + 4
        if ctype == b"IHDR":
            ihdr = chunk
        elif ctype == b"IDAT":
            idat += chunk
        elif ctype == b"IEND":
            break
    if ihdr is None or len(ihdr) != 13:
        raise CorruptImageError(f"{path}: missing or malformed IHDR")
    width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if depth != 8 or color not in (0, 2):
        raise UnsupportedFormatError(
            f"{path}: only 8-bit grayscale/RGB PNG supported "
            f"(bit depth {depth}, color type {color})"
        )
    if comp != 0 or filt != 0 or interlace != 0:
        raise UnsupportedFormatError(f"{path}: unsupported PNG compression/interlace")
    channels = 1 if color == 0 else 3
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise CorruptImageError(f"{path}: PNG inflate failed: {exc}") from exc
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise CorruptImageError(
            f"{path}: PNG scanline data is {len(raw)} bytes, "
            f"expected {height * (stride + 1)}"
        )
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for row in range(height):
        ftype = raw[row * (stride + 1)]
        line = np.frombuffer(
            raw, dtype=np.uint8, count=stride, offset=row * (stride + 1) + 1
        ).astype(np.int32)
        out[row] = _unfilter_scanline(ftype, line, prev, channels, path)
        prev = out[row].astype(np.int32)
    return ImageTensor(out.reshape(height, width, channels))


def _unfilter_scanline(ftype, line, prev, bpp, path):
    if ftype == 0:
        recon = line
    elif ftype == 2:  # Up
        recon = (line + prev) & 0xFF
    elif ftype == 1:  # Sub
        recon = line.copy()
        for x in range(bpp, len(line)):
            recon[x] = (recon[x] + recon[x - bpp]) & 0xFF
    elif ftype == 3:  # Average
        recon = line.copy()
        for x in range(len(line)):
            left = recon[x - bpp] if x >= bpp else 0
            recon[x] = (recon[x] + (left + prev[x]) // 2) & 0xFF
    elif ftype == 4:  # Paeth
        recon = line.copy()
        for x in range(len(line)):
            a = int(recon[x - bpp]) if x >= bpp else 0
            b = int(prev[x])
            c = int(prev[x - bpp]) if x >= bpp else 0
            p = a + b - c
            pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
            if pa <= pb and pa <= pc:
                pred = a
            elif pb <= pc:
                pred = b
            else:
                pred = c
            recon[x] = (recon[x] + pred) & 0xFF
    else:
        raise CorruptImageError(f"{path}: unknown PNG filter type {ftype}")
    return recon.astype(np.uint8)


def resize_bilinear(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with the align-corners=false convention.

    Source coordinate for destination index d is (d + 0.5) * scale - 0.5,
    clamped to the image bounds; channel count is preserved and outputs
    stay within the per-channel input range.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    src = img.data.astype(np.float64)
    h, w = img.height, img.width

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]

    top = src[y0][:, x0] * (1.0 - tx) + src[y0][:, x1] * tx
    bot = src[y1][:, x0] * (1.0 - tx) + src[y1][:, x1] * tx
    out = top * (1.0 - ty) + bot * ty
    return ImageTensor(out.astype(np.float32))


def to_network_input(img: ImageTensor, mean) -> ImageTensor:
    """Replicate grayscale to 3 channels and subtract the per-channel mean."""
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (3,):
        raise MeanShapeMismatchError(f"mean must have 3 entries, got shape {mean.shape}")
    data = img.data
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    out = data.astype(np.float64) - mean[None, None, :]
    return ImageTensor(out.astype(np.float32))


@dataclass(frozen=True)
class DatasetIndex:
    """Sorted (subject_id, image_path) entries plus the sorted subject list."""

    entries: tuple
    subjects: tuple

    @classmethod
    def from_entries(cls, entries) -> "DatasetIndex":
        ordered = tuple(sorted((str(s), str(p)) for s, p in entries))
        subjects = tuple(sorted({s for s, _ in ordered}))
        return cls(entries=ordered, subjects=subjects)

    def __len__(self) -> int:
        return len(self.entries)

    def by_subject(self) -> dict:
        groups: dict = {s: [] for s in self.subjects}
        for subject, path in self.entries:
            groups[subject].append(path)
        return groups


@dataclass(frozen=True)
class SplitSpec:
    """Per-subject train size, split mode, and the seed for random mode."""

    train_per_subject: int
    seed: int = 0
    mode: str = "first_n"

    def __post_init__(self):
        if self.train_per_subject < 1:
            raise ValueError("train_per_subject must be >= 1")
        if self.mode not in ("first_n", "random"):
            raise ValueError(f"unknown split mode {self.mode!r}")


def index_dataset(root) -> DatasetIndex:
    """Index ``<root>/<subject>/<image>`` into a sorted DatasetIndex.

    Non-image files and stray files at the top level are skipped with a
    warning; an index with no entries is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    entries = []
    for sub in sorted(root.iterdir()):
        if not sub.is_dir():
            log.warning("skipping non-directory entry %s", sub)
            continue
        for item in sorted(sub.iterdir()):
            if item.is_file() and item.suffix.lower() in IMAGE_SUFFIXES:
                entries.append((sub.name, str(item)))
            else:
                log.warning("skipping non-image file %s", item)
    if not entries:
        raise EmptyDatasetError(f"no subject images found under {root}")
    return DatasetIndex.from_entries(entries)


def _subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    # Counter-based generator keyed by (seed, subject hash): per-subject
    # shuffles stay stable no matter how many subjects exist or in what
    # order they are processed.
    digest = hashlib.sha256(subject_id.encode("utf-8")).digest()
    key = np.array(
        [seed % (1 << 64), int.from_bytes(digest[:8], "little")], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def split_dataset(index: DatasetIndex, spec: SplitSpec):
    """Split into (train, test), exactly train_per_subject entries per subject.

    first_n takes the lexicographically first n paths; random shuffles each
    subject's paths with a generator seeded by (spec.seed, subject id).
    """
    train_entries = []
    test_entries = []
    for subject, paths in index.by_subject().items():
        if len(paths) <= spec.train_per_subject:
            raise InsufficientSamplesError(subject, len(paths), spec.train_per_subject)
        if spec.mode == "first_n":
            chosen = set(paths[: spec.train_per_subject])
        else:
            perm = _subject_rng(spec.seed, subject).permutation(len(paths))
            chosen = {paths[i] for i in perm[: spec.train_per_subject]}
        for path in paths:
            (train_entries if path in chosen else test_entries).append((subject, path))
    return (
        DatasetIndex.from_entries(train_entries),
        DatasetIndex.from_entries(test_entries),
    )
