"""Core domain types, deterministic RNG substreams, and the FPT tensor file format.

Every other module builds on these. Types are immutable after construction
(arrays are defensively copied and marked read-only) and therefore safe to
share between concurrent workers; use ``.copy()`` to get an independent,
writable-array clone.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BACKGROUND = 0
MYOCARDIUM = 1
BLOODPOOL = 2
N_CLASSES = 3

#: Per-pixel uncertainty ceiling, attained by the half-ones/half-zeros split.
UMAP_MAX = 0.5

#: u_pp assigned when a solution segments zero myocardial pixels. Orders
#: above every finite value so empty solutions are never selected.
UPP_SENTINEL = math.inf


class EngineError(Exception):
    """Base engine error; ``exit_code`` is what the CLI reports."""

    exit_code = 2


class DataError(EngineError):
    exit_code = 2


class UsageError(EngineError):
    exit_code = 1


class BackendError(EngineError):
    """External segmenter backend failed (crash, timeout, protocol)."""

    exit_code = 3

    def __init__(self, message: str, model_id: int | None = None):
        super().__init__(message if model_id is None else f"model {model_id}: {message}")
        self.model_id = model_id


class FptError(DataError):
    """Base for FPT container problems."""


class FptMalformedHeader(FptError):
    pass


class FptDimensionOverflow(FptError):
    pass


class FptTruncatedPayload(FptError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr).copy()
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageSeries:
    """A 2D+time scalar field: ``data[t, y, x]`` with pixel spacing and frame times."""

    data: np.ndarray  # (n_frames, height, width) float32
    spacing_mm: tuple[float, float]  # (dx, dy) millimeters per pixel
    frame_times_s: np.ndarray  # (n_frames,) float64, strictly increasing

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.float32))
        times = _freeze(np.asarray(self.frame_times_s, dtype=np.float64))
        if data.ndim != 3:
            raise DataError(f"series data must be 3-D (t, y, x), got shape {data.shape}")
        if min(data.shape) < 1:
            raise DataError("series dimensions must all be >= 1")
        if times.shape != (data.shape[0],):
            raise DataError("frame_times_s length must equal n_frames")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise DataError("frame times must be strictly increasing")
        dx, dy = self.spacing_mm
        if not (dx > 0 and dy > 0):
            raise DataError("pixel spacing must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_times_s", times)
        object.__setattr__(self, "spacing_mm", (float(dx), float(dy)))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def copy(self) -> "ImageSeries":
        return ImageSeries(self.data.copy(), self.spacing_mm, self.frame_times_s.copy())

    def with_data(self, data: np.ndarray) -> "ImageSeries":
        return ImageSeries(data, self.spacing_mm, self.frame_times_s)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class codes: 0 background, 1 LV myocardium, 2 bloodpool."""

    labels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        labels = _freeze(np.asarray(self.labels, dtype=np.uint8))
        if labels.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {labels.shape}")
        if labels.size and labels.max() > BLOODPOOL:
            raise DataError("mask labels must be in {0, 1, 2}")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_pixels(self, cls: int) -> int:
        return int(np.count_nonzero(self.labels == cls))

    def copy(self) -> "LabelMask":
        return LabelMask(self.labels.copy())


@dataclass(frozen=True)
class ClassProbabilityMap:
    """Per-pixel 3-class scores; each pixel sums to 1 within 1e-6."""

    probs: np.ndarray  # (height, width, 3) float32

    def __post_init__(self):
        probs = _freeze(np.asarray(self.probs, dtype=np.float32))
        if probs.ndim != 3 or probs.shape[2] != N_CLASSES:
            raise DataError(f"probability map must be (h, w, 3), got shape {probs.shape}")
        if probs.size:
            if probs.min() < -1e-6 or probs.max() > 1 + 1e-6:
                raise DataError("class probabilities must lie in [0, 1]")
            sums = probs.sum(axis=2, dtype=np.float64)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise DataError("per-pixel class probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "probs", probs)

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    def copy(self) -> "ClassProbabilityMap":
        return ClassProbabilityMap(self.probs.copy())


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window geometry over an image; origins are row-major (x0, y0) corners."""

    image_h: int
    image_w: int
    patch: int
    stride: int
    origins: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not (1 <= self.patch <= min(self.image_h, self.image_w)):
            raise DataError("patch must satisfy 1 <= patch <= min(h, w)")
        if not (1 <= self.stride <= self.patch):
            raise DataError("stride must satisfy 1 <= stride <= patch")
        seen = set()
        for (x0, y0) in self.origins:
            if not (0 <= x0 <= self.image_w - self.patch and 0 <= y0 <= self.image_h - self.patch):
                raise DataError(f"origin {(x0, y0)} leaves the image")
            if (x0, y0) in seen:
                raise DataError(f"duplicate origin {(x0, y0)}")
            seen.add((x0, y0))
        object.__setattr__(self, "origins", tuple((int(x), int(y)) for x, y in self.origins))

    def __len__(self) -> int:
        return len(self.origins)

    def coverage_count(self) -> np.ndarray:
        """|Gamma_(x,y)| for every pixel, as an (h, w) int array."""
        count = np.zeros((self.image_h, self.image_w), dtype=np.int32)
        for x0, y0 in self.origins:
            count[y0 : y0 + self.patch, x0 : x0 + self.patch] += 1
        return count

    def covering_patches(self, x: int, y: int) -> list[int]:
        """Indices of grid patches whose window contains pixel (x, y)."""
        p = self.patch
        return [
            i
            for i, (x0, y0) in enumerate(self.origins)
            if x0 <= x < x0 + p and y0 <= y < y0 + p
        ]


@dataclass(frozen=True)
class UncertaintyMap:
    """Pixel-wise std across overlapping patch predictions plus its scalar metrics."""

    u: np.ndarray  # (height, width) float32, values in [0, 0.5]
    n_myo: int
    u_pp: float
    u_tot: float

    def __post_init__(self):
        u = _freeze(np.asarray(self.u, dtype=np.float32))
        if u.ndim != 2:
            raise DataError("U-map must be 2-D")
        if u.size and (u.min() < 0.0 or u.max() > UMAP_MAX + 1e-6):
            raise DataError("U-map values must lie in [0, 0.5]")
        if self.n_myo < 0:
            raise DataError("n_myo must be >= 0")
        object.__setattr__(self, "u", u)

    @classmethod
    def from_values(cls, u: np.ndarray, n_myo: int) -> "UncertaintyMap":
        """Fill u_tot / u_pp from the map; n_myo = 0 maps u_pp to the sentinel."""
        u32 = np.asarray(u, dtype=np.float32)
        u_tot = float(np.sum(u32.astype(np.float64) ** 2))
        u_pp = u_tot / n_myo if n_myo > 0 else UPP_SENTINEL
        return cls(u=u32, n_myo=int(n_myo), u_pp=u_pp, u_tot=u_tot)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def copy(self) -> "UncertaintyMap":
        return UncertaintyMap(self.u.copy(), self.n_myo, self.u_pp, self.u_tot)


@dataclass(frozen=True)
class SegmentationSolution:
    """One pool member's full output for a case: probabilities, mask, U-map."""

    model_id: int
    mean_probs: ClassProbabilityMap
    mask: LabelMask
    umap: UncertaintyMap

    def __post_init__(self):
        n_myo = self.mask.class_pixels(MYOCARDIUM)
        if self.umap.n_myo != n_myo:
            raise DataError(
                f"umap.n_myo ({self.umap.n_myo}) disagrees with mask myocardium count ({n_myo})"
            )

    def metric(self, name: str) -> float:
        if name == "upp":
            return self.umap.u_pp
        if name == "utot":
            return self.umap.u_tot
        raise UsageError(f"unknown uncertainty metric {name!r} (expected 'upp' or 'utot')")


# ---------------------------------------------------------------------------
# Deterministic RNG substreams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Standard splitmix64 finalizer; frozen so golden files stay stable.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stream_key(seed: int, *key: int) -> int:
    """128-bit Philox key for (seed, key...).

    Frozen mapping: fold each key element into the running 64-bit state with
    xor + splitmix64 (order sensitive), then extend to 128 bits with one more
    splitmix64 round. Golden outputs depend on this staying fixed.
    """
    k = _splitmix64(int(seed) & _MASK64)
    for item in key:
        k = _splitmix64(k ^ (int(item) & _MASK64))
    return (k << 64) | _splitmix64(k)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic, independent random stream for (seed, key...).

    Identical arguments yield identical streams on every run and under any
    worker count; distinct key tuples (including permutations) yield
    independent streams. Used with per-domain leading tags, e.g.
    ``substream(seed, DOMAIN_TAG, case_id, model_id)``.
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *key)))


# Domain tags for substream derivation (arbitrary but frozen).
DOM_PHANTOM = 11
DOM_SHIFT = 12
DOM_MOCO = 13
DOM_POOL = 14
DOM_MODEL_CASE = 15
DOM_MODEL_PATCH = 16
DOM_COHORT = 17


# ---------------------------------------------------------------------------
# FPT binary tensor container
# ---------------------------------------------------------------------------

FPT_MAGIC = b"FPT1"
FPT_F32 = 1
FPT_U8 = 2
#: Refuse headers whose element count exceeds this (2^40 elements ~ 4 TiB f32).
FPT_MAX_ELEMS = 1 << 40

_DTYPE_CODE = {np.dtype(np.float32): FPT_F32, np.dtype(np.uint8): FPT_U8}
_CODE_DTYPE = {FPT_F32: np.dtype("<f4"), FPT_U8: np.dtype(np.uint8)}


def write_fpt(path: str | Path, tensor: np.ndarray) -> None:
    """Write a tensor in the FPT container (f32 LE or u8, row-major)."""
    arr = np.asarray(tensor)
    if arr.dtype == np.uint8:
        code = FPT_U8
    else:
        arr = np.asarray(arr, dtype=np.float32)
        code = FPT_F32
    if arr.ndim < 1 or min(arr.shape) < 1:
        raise DataError("FPT tensors need >= 1 dims, each >= 1")
    if arr.ndim > 255 or max(arr.shape) >= 1 << 32:
        raise FptDimensionOverflow("tensor shape does not fit the FPT header")
    header = FPT_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPE[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_fpt(path: str | Path) -> np.ndarray:
    """Read an FPT tensor; raises a distinct error per malformation class."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if len(blob) < 6:
        raise FptMalformedHeader("file shorter than the fixed header")
    if blob[:4] != FPT_MAGIC:
        raise FptMalformedHeader("malformed header: bad magic bytes")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPE:
        raise FptMalformedHeader(f"malformed header: unknown dtype code {code}")
    if ndim == 0:
        raise FptMalformedHeader("malformed header: zero-dimensional tensor")
    dims_end = 6 + 4 * ndim
    if len(blob) < dims_end:
        raise FptMalformedHeader("malformed header: truncated dim list")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    if any(d == 0 for d in dims):
        raise FptMalformedHeader("malformed header: zero-length dimension")
    n_elems = math.prod(dims)
    if n_elems > FPT_MAX_ELEMS:
        raise FptDimensionOverflow(f"dimension overflow: {n_elems} elements")
    dtype = _CODE_DTYPE[code]
    expected = n_elems * dtype.itemsize
    got = len(blob) - dims_end
    if got < expected:
        raise FptTruncatedPayload(f"truncated payload: expected {expected} bytes, got {got}")
    if got > expected:
        raise FptMalformedHeader(f"payload has {got - expected} trailing bytes")
    arr = np.frombuffer(blob, dtype=dtype, count=n_elems, offset=dims_end)
    out = arr.reshape(dims)
    if code == FPT_F32:
        out = out.astype(np.float32, copy=False)
    return out.copy()


def write_series_fpt(path: str | Path, series: ImageSeries) -> None:
    write_fpt(path, series.data)


def read_series_fpt(
    path: str | Path, dt_s: float, spacing_mm: tuple[float, float]
) -> ImageSeries:
    """Load a series tensor; FPT stores the bare (t, y, x) array, metadata rides alongside."""
    data = read_fpt(path)
    if data.ndim != 3:
        raise DataError(f"series tensor must be 3-D, got {data.ndim}-D")
    times = np.arange(data.shape[0], dtype=np.float64) * float(dt_s)
    return ImageSeries(data, spacing_mm, times)


def write_mask_fpt(path: str | Path, mask: LabelMask) -> None:
    write_fpt(path, mask.labels)


def read_mask_fpt(path: str | Path) -> LabelMask:
    labels = read_fpt(path)
    if labels.dtype != np.uint8:
        raise DataError("mask tensors must be stored as u8")
    return LabelMask(labels)
