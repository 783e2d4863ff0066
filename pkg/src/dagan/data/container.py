"""Binary dataset container.

Layout (all little-endian)::

    b"DGAN" | u32 version | u32 class_count | u32 H | u32 W | u32 C
    class_count x (u64 byte offset into payload, u32 image count)
    u32 names_len | names_len bytes of UTF-8, class names joined by "\\n"
    payload: float32 images, class-major, each H*W*C in HWC order
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .dataset import DatasetError, LabeledImageSet

MAGIC = b"DGAN"
VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


def encode_container(dataset: LabeledImageSet) -> bytes:
    h, w, c = dataset.image_shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<5I", VERSION, dataset.class_count, h, w, c))
    offset = 0
    per_image = h * w * c * 4
    for im in dataset.images:
        buf.write(struct.pack("<QI", offset, len(im)))
        offset += len(im) * per_image
    names = "\n".join(dataset.class_names).encode("utf-8")
    buf.write(struct.pack("<I", len(names)))
    buf.write(names)
    for im in dataset.images:
        buf.write(np.ascontiguousarray(im, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_container(raw: bytes, name: str = "") -> LabeledImageSet:
    if raw[:4] != MAGIC:
        raise DatasetError("not a DGAN container (bad magic)")
    version, count, h, w, c = struct.unpack_from("<5I", raw, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported container version {version}")
    pos = 24
    index = []
    for _ in range(count):
        index.append(struct.unpack_from("<QI", raw, pos))
        pos += 12
    (names_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    names = raw[pos:pos + names_len].decode("utf-8").split("\n") if count else []
    pos += names_len
    payload = memoryview(raw)[pos:]
    images = []
    for offset, n in index:
        arr = np.frombuffer(payload, dtype="<f4", count=n * h * w * c, offset=offset)
        images.append(arr.reshape(n, h, w, c).astype(np.float32))
    return LabeledImageSet(images=images, class_names=names, name=name)


def save_container(dataset: LabeledImageSet, path) -> None:
    Path(path).write_bytes(encode_container(dataset))


def load_container(path) -> LabeledImageSet:
    path = Path(path)
    return decode_container(path.read_bytes(), name=path.stem)


def load_image(path, size: tuple[int, int] | None = None, grayscale: bool | None = None) -> np.ndarray:
    """Decode an image file to ``[H, W, C]`` float32 in [0, 1].

    With ``size`` the image is resampled by area averaging.
    """
    from PIL import Image

    with Image.open(path) as img:
        if grayscale or (grayscale is None and img.mode in ("L", "1", "P", "LA", "I", "I;16")):
            img = img.convert("L")
        else:
            img = img.convert("RGB")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), resample=Image.BOX)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def read_image_folders(directory, size: tuple[int, int] | None = None,
                       grayscale: bool | None = None) -> LabeledImageSet:
    """One sub-folder per class; classes and files in sorted order."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root} contains no class folders")
    images, names, shape, first = [], [], None, None
    for d in class_dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"class folder {d} has no images")
        arrs = []
        for f in files:
            try:
                arr = load_image(f, size, grayscale)
            except OSError as exc:
                raise DatasetError(f"cannot decode {f}: {exc}") from exc
            if shape is None:
                shape, first = arr.shape, f
            elif arr.shape != shape:
                raise DatasetError(f"{f} has shape {arr.shape}, expected {shape} (from {first})")
            arrs.append(arr)
        images.append(np.stack(arrs))
        names.append(d.name)
    return LabeledImageSet(images=images, class_names=names, name=root.name)


def pack_dataset(directory, out_path, size: tuple[int, int] | None = None,
                 grayscale: bool | None = None) -> LabeledImageSet:
    dataset = read_image_folders(directory, size, grayscale)
    save_container(dataset, out_path)
    return dataset
