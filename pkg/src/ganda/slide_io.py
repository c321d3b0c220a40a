"""Multi-channel slide rasters: loading, validation, 16-to-8 bit conversion, saving.

Two on-disk layouts are understood:

* a multi-plane TIFF (planes first, or interleaved RGB-style); ``save_slide``
  stores the channel roles, slide id and pixel size in the TIFF description
  so the file round-trips without a channel map;
* a JSON sidecar listing one grayscale image per channel::

      {"slide_id": "s1", "pixel_size_um": 0.5,
       "channels": [{"role": "NUCLEI", "file": "s1_nuclei.png"},
                    {"role": "VESSEL", "image": "s1.tif", "plane": 1}]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import tifffile
from PIL import Image

from .errors import (
    DuplicateRole,
    IoFailure,
    MissingChannel,
    MissingFile,
    PlaneCountMismatch,
    ShapeMismatch,
    UnsupportedBitDepth,
)

PathLike = Union[str, os.PathLike]


class Role(str, Enum):
    NUCLEI = "NUCLEI"
    VESSEL = "VESSEL"
    NP = "NP"

    @classmethod
    def parse(cls, value) -> "Role":
        if isinstance(value, Role):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown channel role {value!r}") from None


DEFAULT_ROLE_ORDER = (Role.NUCLEI, Role.VESSEL, Role.NP)


@dataclass(frozen=True)
class ChannelPlane:
    role: Role
    data: np.ndarray


@dataclass
class SlideImage:
    channels: list
    pixel_size_um: float = 1.0
    slide_id: str = "slide"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.channels:
            raise PlaneCountMismatch("a slide needs at least one channel")
        if not self.pixel_size_um > 0:
            raise ValueError("pixel_size_um must be positive")
        planes = []
        seen = set()
        shape = None
        for ch in self.channels:
            role = Role.parse(ch.role)
            if role in seen:
                raise DuplicateRole(f"role {role.value} appears twice")
            seen.add(role)
            data = np.asarray(ch.data)
            if data.ndim != 2:
                raise ShapeMismatch(f"channel {role.value} is not 2D: {data.shape}")
            if data.dtype != np.uint8:
                raise UnsupportedBitDepth(
                    f"channel {role.value} has dtype {data.dtype}; convert with to_8bit first"
                )
            if shape is None:
                shape = data.shape
            elif data.shape != shape:
                raise ShapeMismatch(f"channel {role.value} is {data.shape}, expected {shape}")
            planes.append(ChannelPlane(role, data))
        self.channels = planes

    @property
    def height_px(self) -> int:
        return int(self.channels[0].data.shape[0])

    @property
    def width_px(self) -> int:
        return int(self.channels[0].data.shape[1])

    @property
    def shape(self):
        return (self.height_px, self.width_px)

    @property
    def roles(self):
        return [ch.role for ch in self.channels]

    def has(self, role) -> bool:
        return Role.parse(role) in self.roles

    def channel(self, role) -> np.ndarray:
        role = Role.parse(role)
        for ch in self.channels:
            if ch.role is role:
                return ch.data
        raise MissingChannel(f"slide {self.slide_id!r} has no {role.value} channel")

    def stack(self, roles: Sequence) -> np.ndarray:
        """Channels in ``roles`` order as an (H, W, C) uint8 array."""
        return np.stack([self.channel(r) for r in roles], axis=-1)

    def with_channels(self, channels, **changes) -> "SlideImage":
        kw = dict(pixel_size_um=self.pixel_size_um, slide_id=self.slide_id,
                  provenance=dict(self.provenance))
        kw.update(changes)
        return SlideImage(list(channels), **kw)


def to_8bit(plane16: np.ndarray) -> np.ndarray:
    """Linear full-range 16 -> 8 bit conversion, rounding half up."""
    v = np.asarray(plane16).astype(np.uint32)
    # round(v * 255 / 65535) in exact integer arithmetic
    return ((v * 255 * 2 + 65535) // (2 * 65535)).astype(np.uint8)


def _coerce_depth(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype == np.uint16:
        return to_8bit(arr)
    if arr.dtype == np.bool_:
        return arr.astype(np.uint8) * 255
    raise UnsupportedBitDepth(f"{what}: unsupported pixel type {arr.dtype}")


def _read_planes(path: Path):
    """Return (list of 2D planes, stored metadata dict or None)."""
    suffix = path.suffix.lower()
    meta = None
    if suffix in (".tif", ".tiff"):
        with tifffile.TiffFile(path) as tf:
            arr = tf.asarray()
            shaped = tf.shaped_metadata
            if shaped and "ganda" in shaped[0]:
                meta = json.loads(shaped[0]["ganda"])
        if arr.ndim == 2:
            planes = [arr]
        elif arr.ndim == 3:
            if meta is None and arr.shape[-1] <= 4 and arr.shape[0] > 4:
                arr = np.moveaxis(arr, -1, 0)
            planes = list(arr)
        else:
            raise PlaneCountMismatch(f"{path}: cannot interpret array of shape {arr.shape}")
    else:
        with Image.open(path) as im:
            arr = np.array(im)
        planes = [arr] if arr.ndim == 2 else list(np.moveaxis(arr, -1, 0))
    return [_coerce_depth(np.ascontiguousarray(p), str(path)) for p in planes], meta


def _pairs(channel_map) -> list:
    if isinstance(channel_map, Mapping):
        items = list(channel_map.items())
    else:
        items = list(channel_map)
    pairs = []
    seen = set()
    for role, idx in items:
        role = Role.parse(role)
        if role in seen:
            raise DuplicateRole(f"role {role.value} mapped twice")
        seen.add(role)
        pairs.append((role, int(idx)))
    return pairs


def _load_manifest(path: Path, pixel_size_um, slide_id) -> SlideImage:
    doc = json.loads(path.read_text())
    cache = {}
    channels = []
    seen = set()
    for entry in doc["channels"]:
        role = Role.parse(entry["role"])
        if role in seen:
            raise DuplicateRole(f"role {role.value} listed twice in {path}")
        seen.add(role)
        src = entry.get("file") or entry.get("image") or doc.get("image")
        if src is None:
            raise PlaneCountMismatch(f"{path}: channel {role.value} names no file")
        src_path = (path.parent / src)
        if not src_path.exists():
            raise MissingFile(str(src_path))
        if src_path not in cache:
            cache[src_path] = _read_planes(src_path)[0]
        planes = cache[src_path]
        idx = int(entry.get("plane", entry.get("plane_index", 0)))
        if idx >= len(planes):
            raise PlaneCountMismatch(f"{src_path} has {len(planes)} planes, asked for {idx}")
        channels.append(ChannelPlane(role, planes[idx]))
    return SlideImage(
        channels,
        pixel_size_um=float(pixel_size_um or doc.get("pixel_size_um", 1.0)),
        slide_id=slide_id or doc.get("slide_id", path.stem),
        provenance=dict(doc.get("provenance", {})),
    )


def load_slide(path: PathLike, channel_map=None, pixel_size_um: float | None = None,
               slide_id: str | None = None) -> SlideImage:
    """Load a slide from a TIFF/PNG raster or a JSON channel sidecar.

    ``channel_map`` maps role -> plane index. When omitted, roles stored by
    ``save_slide`` are used, falling back to NUCLEI, VESSEL, NP order.
    Explicit ``pixel_size_um``/``slide_id`` override stored values.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if path.suffix.lower() == ".json":
        return _load_manifest(path, pixel_size_um, slide_id)

    planes, meta = _read_planes(path)
    meta = meta or {}
    if channel_map is None:
        roles = meta.get("roles") or [r.value for r in DEFAULT_ROLE_ORDER[: len(planes)]]
        if len(planes) > len(roles):
            raise PlaneCountMismatch(
                f"{path} has {len(planes)} planes; pass a channel_map to select them"
            )
        channel_map = list(zip(roles, range(len(planes))))
    pairs = _pairs(channel_map)
    channels = []
    for role, idx in pairs:
        if not 0 <= idx < len(planes):
            raise PlaneCountMismatch(f"{path} has {len(planes)} planes, asked for {idx}")
        channels.append(ChannelPlane(role, planes[idx]))
    return SlideImage(
        channels,
        pixel_size_um=float(pixel_size_um or meta.get("pixel_size_um", 1.0)),
        slide_id=slide_id or meta.get("slide_id", path.stem),
        provenance=dict(meta.get("provenance", {})),
    )


def save_slide(slide: SlideImage, path: PathLike) -> None:
    """Persist losslessly; ``load_slide`` inverts this bit-exactly.

    ``.tif``/``.tiff`` writes one planar TIFF, ``.json`` writes one PNG per
    channel next to the sidecar, ``.png`` is allowed for 1- or 3-channel slides
    but drops the metadata.
    """
    path = Path(path)
    meta = {
        "slide_id": slide.slide_id,
        "pixel_size_um": slide.pixel_size_um,
        "roles": [r.value for r in slide.roles],
        "provenance": slide.provenance,
    }
    suffix = path.suffix.lower()
    try:
        if suffix in (".tif", ".tiff"):
            arr = np.stack([ch.data for ch in slide.channels], axis=0)
            tifffile.imwrite(
                path, arr, photometric="minisblack",
                metadata={"axes": "CYX", "ganda": json.dumps(meta, sort_keys=True)},
            )
        elif suffix == ".json":
            entries = []
            for ch in slide.channels:
                name = f"{path.stem}_{ch.role.value.lower()}.png"
                Image.fromarray(ch.data).save(path.parent / name)
                entries.append({"role": ch.role.value, "file": name})
            doc = {k: meta[k] for k in ("slide_id", "pixel_size_um", "provenance")}
            doc["channels"] = entries
            path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        elif suffix == ".png":
            if len(slide.channels) == 1:
                Image.fromarray(slide.channels[0].data).save(path)
            elif len(slide.channels) == 3:
                Image.fromarray(np.stack([c.data for c in slide.channels], -1)).save(path)
            else:
                raise PlaneCountMismatch("PNG holds 1 or 3 channels; use .tif or .json")
        else:
            raise IoFailure(f"unsupported slide extension {suffix!r}")
    except OSError as exc:
        if isinstance(exc, IoFailure):
            raise
        raise IoFailure(f"cannot write {path}: {exc}") from exc


class SourceMode(str, Enum):
    """Which real channels the generator sees."""

    NUCLEI = "NUCLEI"
    VESSEL = "VESSEL"
    BOTH = "BOTH"

    @classmethod
    def parse(cls, value) -> "SourceMode":
        if isinstance(value, SourceMode):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown source mode {value!r}") from None

    @property
    def roles(self):
        if self is SourceMode.BOTH:
            return (Role.NUCLEI, Role.VESSEL)
        return (Role(self.value),)

    @property
    def channels(self) -> int:
        return len(self.roles)
