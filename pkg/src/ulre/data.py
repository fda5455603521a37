"""Data plumbing: the bit-exact tensor container format, synthetic dataset
generators (1-D Gaussian pairs and clustered feature scenes), the
cut-resize-paste outlier compositor with its pseudo label maps, and per-class
mean-feature computation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numkernel import Rng, resize_nearest, upsample_bilinear

__all__ = [
    "DataError",
    "TensorFileError",
    "ClassMeans",
    "write_tensor_file",
    "read_tensor_file",
    "gen_gaussian_1d",
    "analytic_gaussian_lr",
    "anomaly_mix",
    "sample_unit_directions",
    "gen_synthetic_scene",
    "ellipse_mask",
    "make_feature_object",
    "class_means",
]


class DataError(ValueError):
    """Invalid data contents (labels, shapes, degenerate inputs)."""


class TensorFileError(DataError):
    """Malformed, truncated, or unsupported tensor container file."""


TENSOR_MAGIC = b"ULRE"
TENSOR_FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("u1")}
_CODE_FOR_KIND = {"f": 0, "u": 1}


def write_tensor_file(path, records: dict[str, np.ndarray]) -> None:
    """Write named arrays to the binary container. Round trips are bitwise.

    Layout (all little-endian): magic "ULRE", version u16, record count u16,
    then per record: name length u16 + UTF-8 name, dtype code u8 (0 = f64,
    1 = u8), rank u8, dims as u64 each, raw row-major payload.
    """
    if len(records) > 0xFFFF:
        raise TensorFileError(f"too many records ({len(records)})")
    chunks = [TENSOR_MAGIC, struct.pack("<HH", TENSOR_FORMAT_VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = np.ascontiguousarray(arr, dtype="<f8")
        elif arr.dtype.kind in "ui" and arr.dtype != np.dtype("u1"):
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise TensorFileError(
                    f"record {name!r}: integer values outside u8 range"
                )
            arr = np.ascontiguousarray(arr, dtype="u1")
        else:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.kind not in _CODE_FOR_KIND:
            raise TensorFileError(
                f"record {name!r}: unsupported dtype {arr.dtype}"
            )
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise TensorFileError(f"record name too long ({len(name_bytes)} bytes)")
        if arr.ndim > 0xFF:
            raise TensorFileError(f"record {name!r}: rank {arr.ndim} too large")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _CODE_FOR_KIND[arr.dtype.kind], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, path, blob: bytes):
        self.path = path
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TensorFileError(
                f"{self.path}: truncated while reading {what} at byte {self.pos} "
                f"(need {n} bytes, have {len(self.blob) - self.pos})"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def read_tensor_file(path) -> dict[str, np.ndarray]:
    """Read a container written by write_tensor_file, preserving order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(path, blob)
    if r.take(4, "magic") != TENSOR_MAGIC:
        raise TensorFileError(f"{path}: bad magic (not a tensor container)")
    version, count = struct.unpack("<HH", r.take(4, "header"))
    if version != TENSOR_FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported format version {version}")
    records: dict[str, np.ndarray] = {}
    for i in range(count):
        where = f"record {i} header"
        (name_len,) = struct.unpack("<H", r.take(2, where))
        try:
            name = r.take(name_len, where).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileError(f"{path}: record {i} name is not UTF-8") from exc
        code, rank = struct.unpack("<BB", r.take(2, f"record {name!r} header"))
        if code not in _DTYPE_CODES:
            raise TensorFileError(f"{path}: record {name!r} has unknown dtype {code}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"record {name!r} dims"))
        dtype = _DTYPE_CODES[code]
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = r.take(n_elem * dtype.itemsize, f"record {name!r} payload")
        if name in records:
            raise TensorFileError(f"{path}: duplicate record name {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(blob):
        raise TensorFileError(
            f"{path}: {len(blob) - r.pos} trailing bytes after last record"
        )
    return records


def gen_gaussian_1d(n_per_class: int, mu0: float, mu1: float, seed: int):
    """Balanced unit-variance Gaussian pair: n labelled 0 from N(mu0, 1) and
    n labelled 1 from N(mu1, 1), interleaved by a seeded shuffle.

    Returns (features (2n, 1), labels (2n,) uint8).
    """
    if n_per_class < 1:
        raise ValueError("gen_gaussian_1d: n_per_class must be >= 1")
    rng = Rng(seed)
    x0 = rng.standard_normal(n_per_class) + mu0
    x1 = rng.standard_normal(n_per_class) + mu1
    x = np.concatenate([x0, x1])
    y = np.concatenate(
        [np.zeros(n_per_class, dtype=np.uint8), np.ones(n_per_class, dtype=np.uint8)]
    )
    perm = rng.permutation(2 * n_per_class)
    return x[perm].reshape(-1, 1), y[perm]


def analytic_gaussian_lr(x, mu0: float, mu1: float):
    """Exact density ratio N(x; mu1, 1) / N(x; mu0, 1): the 1-D ground truth.

    Closed form exp((mu1 - mu0) * x + (mu0^2 - mu1^2) / 2).
    """
    x = np.asarray(x, dtype=np.float64)
    return np.exp((mu1 - mu0) * x + (mu0**2 - mu1**2) / 2.0)


def _resize_values(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if raster.ndim == 2:
        return upsample_bilinear(raster, out_h, out_w)
    out = np.empty((out_h, out_w, raster.shape[2]), dtype=np.float64)
    for c in range(raster.shape[2]):
        out[:, :, c] = upsample_bilinear(raster[:, :, c], out_h, out_w)
    return out


def anomaly_mix(
    target,
    obj,
    mask,
    rng: Rng,
    scale_range: tuple[float, float] = (0.5, 2.0),
    max_retries: int = 10,
):
    """Cut-resize-paste compositing of an outlier object into a raster.

    The object and its binary mask are rescaled by a factor drawn uniformly
    from scale_range (bilinear for values, nearest for the mask) and pasted
    at a uniform random position fully inside the target. Returns the
    composited raster plus the pseudo label map, which is 1 exactly on the
    pasted mask pixels.
    """
    target = np.asarray(target, dtype=np.float64)
    obj = np.asarray(obj, dtype=np.float64)
    mask = np.asarray(mask)
    if target.ndim not in (2, 3):
        raise DataError(f"anomaly_mix: target must be 2-D or 3-D, got {target.ndim}-D")
    if obj.ndim != target.ndim or (
        target.ndim == 3 and obj.shape[2] != target.shape[2]
    ):
        raise DataError("anomaly_mix: object channels must match target")
    if mask.shape != obj.shape[:2]:
        raise DataError("anomaly_mix: mask shape must match object height/width")
    if not np.isin(mask, (0, 1)).all():
        raise DataError("anomaly_mix: mask must be binary")
    if mask.sum() == 0:
        raise DataError("anomaly_mix: mask is empty")
    lo, hi = scale_range
    if not 0.0 < lo <= hi:
        raise DataError(f"anomaly_mix: bad scale range {scale_range}")

    th, tw = target.shape[:2]
    oh, ow = obj.shape[:2]
    for _ in range(max_retries):
        scale = float(rng.uniform_range(1, lo, hi)[0])
        new_h = max(1, int(round(oh * scale)))
        new_w = max(1, int(round(ow * scale)))
        if new_h > th or new_w > tw:
            continue
        mask_r = resize_nearest(mask, new_h, new_w)
        if mask_r.sum() == 0:
            continue
        obj_r = _resize_values(obj, new_h, new_w)
        top = int(rng.integers(1, th - new_h + 1)[0])
        left = int(rng.integers(1, tw - new_w + 1)[0])
        out = target.copy()
        region = out[top : top + new_h, left : left + new_w]
        sel = mask_r.astype(bool)
        region[sel] = obj_r[sel]
        label = np.zeros((th, tw), dtype=np.uint8)
        label[top : top + new_h, left : left + new_w][sel] = 1
        return out, label
    raise DataError(
        f"anomaly_mix: no admissible scale in {scale_range} after "
        f"{max_retries} tries (object {oh}x{ow} into target {th}x{tw})"
    )


def sample_unit_directions(
    dim: int,
    count: int,
    min_angle: float,
    rng: Rng,
    max_tries: int = 1000,
    avoid: np.ndarray | None = None,
) -> np.ndarray:
    """Random unit vectors pairwise separated by at least min_angle radians.

    Vectors listed in `avoid` are kept at the same minimum angle without
    being part of the returned set.
    """
    if dim < 2:
        raise ValueError("sample_unit_directions: dim must be >= 2")
    cos_limit = np.cos(min_angle)
    chosen: list[np.ndarray] = (
        [] if avoid is None else list(np.asarray(avoid, dtype=np.float64))
    )
    n_avoid = len(chosen)
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            continue
        v = v / norm
        if all(np.dot(v, u) <= cos_limit for u in chosen):
            chosen.append(v)
            if len(chosen) - n_avoid == count:
                return np.stack(chosen[n_avoid:])
    raise ValueError(
        f"sample_unit_directions: could not place {count} directions in "
        f"{dim}-D with min angle {min_angle} after {max_tries} draws"
    )


def gen_synthetic_scene(
    h: int,
    w: int,
    d: int,
    n_id_classes: int,
    seed: int,
    *,
    directions: np.ndarray | None = None,
    min_angle: float = 0.5,
    noise_sigma: float = 0.1,
    mean_scale: float = 1.0,
):
    """Clustered stand-in for backbone feature maps.

    Pixels are partitioned into contiguous regions (nearest of one random
    anchor per class) and each pixel's feature is its class mean direction
    times mean_scale plus isotropic Gaussian noise. Deterministic per seed.
    Pass precomputed unit `directions` to share class identities across
    scenes; otherwise they are drawn from the scene seed.
    """
    if d < 2:
        raise ValueError("gen_synthetic_scene: d must be >= 2")
    if n_id_classes < 1:
        raise ValueError("gen_synthetic_scene: n_id_classes must be >= 1")
    if n_id_classes > 255:
        raise ValueError("gen_synthetic_scene: at most 255 classes (u8 ids)")
    rng = Rng(seed)
    if directions is None:
        directions = sample_unit_directions(d, n_id_classes, min_angle, rng)
    else:
        directions = np.asarray(directions, dtype=np.float64)
        if directions.shape != (n_id_classes, d):
            raise ValueError(
                f"gen_synthetic_scene: directions must be ({n_id_classes}, {d})"
            )

    if n_id_classes == 1:
        class_ids = np.zeros((h, w), dtype=np.uint8)
    else:
        anchor_y = rng.uniform_range(n_id_classes, 0.0, float(h))
        anchor_x = rng.uniform_range(n_id_classes, 0.0, float(w))
        yy, xx = np.mgrid[0:h, 0:w]
        dist2 = (yy[..., None] - anchor_y) ** 2 + (xx[..., None] - anchor_x) ** 2
        class_ids = dist2.argmin(axis=-1).astype(np.uint8)

    noise = rng.standard_normal(h * w * d).reshape(h, w, d) * noise_sigma
    features = mean_scale * directions[class_ids] + noise
    return features, class_ids


def ellipse_mask(h: int, w: int) -> np.ndarray:
    """Binary mask of the axis-aligned ellipse inscribed in an h x w box."""
    if h < 1 or w < 1:
        raise ValueError("ellipse_mask: dims must be >= 1")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ry, rx = max(h / 2.0, 0.5), max(w / 2.0, 0.5)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return inside.astype(np.uint8)


def make_feature_object(
    h: int,
    w: int,
    direction: np.ndarray,
    rng: Rng,
    *,
    noise_sigma: float = 0.1,
    mean_scale: float = 1.0,
) -> np.ndarray:
    """Small feature-space raster clustered around one direction (an outlier
    object for the compositor)."""
    direction = np.asarray(direction, dtype=np.float64)
    d = direction.shape[0]
    noise = rng.standard_normal(h * w * d).reshape(h, w, d) * noise_sigma
    return mean_scale * direction[None, None, :] + noise


@dataclass(frozen=True)
class ClassMeans:
    """Per-class mean feature vectors, raw and unit-normalized."""

    ids: np.ndarray  # (K,) sorted class ids present
    means: np.ndarray  # (K, D) arithmetic means
    unit_means: np.ndarray  # (K, D) normalized copies
    counts: np.ndarray  # (K,) rows per class


def class_means(features, class_ids) -> ClassMeans:
    """Arithmetic mean feature vector per observed class id.

    A class whose raw mean has zero norm cannot be normalized and is a data
    error (it would make cosine distances undefined).
    """
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(class_ids)
    if x.ndim != 2:
        raise DataError(f"class_means: features must be (N, D), got {x.shape}")
    if ids.shape != (x.shape[0],):
        raise DataError("class_means: one class id per feature row required")
    uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), x.shape[1]))
    np.add.at(sums, inverse, x)
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0.0):
        bad = uniq[norms == 0.0][0]
        raise DataError(f"class_means: class {bad} mean has zero norm")
    return ClassMeans(uniq, means, means / norms[:, None], counts)
