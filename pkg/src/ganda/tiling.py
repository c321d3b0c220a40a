"""Zero padding, non-overlapping patch decomposition, exclusion, normalization, recomposition."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoFailure, MissingChannel, MissingFile, MissingPatch, ShapeMismatch
from .slide_io import ChannelPlane, Role, SlideImage

DEFAULT_PATCH_SIZE = 512
PATCH_ROLES = (Role.NUCLEI, Role.VESSEL, Role.NP)
MANIFEST_FIELDS = ("slide_id", "grid_row", "grid_col", "origin_x_px", "origin_y_px", "included")


@dataclass(frozen=True)
class PatchRecord:
    slide_id: str
    grid_row: int
    grid_col: int
    origin_x_px: int
    origin_y_px: int
    included: bool = True

    @property
    def key(self):
        return (self.grid_row, self.grid_col)

    @property
    def name(self) -> str:
        return f"{self.slide_id}_{self.grid_row}_{self.grid_col}"


@dataclass
class PatchManifest:
    slide_id: str
    patch_size_px: int
    original_width_px: int
    original_height_px: int
    padded_width_px: int
    padded_height_px: int
    records: list = field(default_factory=list)
    roles: list = field(default_factory=lambda: list(PATCH_ROLES))

    def __post_init__(self):
        self.roles = [Role.parse(r) for r in self.roles]

    @property
    def grid_shape(self):
        return (self.padded_height_px // self.patch_size_px,
                self.padded_width_px // self.patch_size_px)

    @property
    def included(self):
        return [r for r in self.records if r.included]

    @property
    def excluded(self):
        return [r for r in self.records if not r.included]

    def header(self) -> dict:
        d = asdict(self)
        d.pop("records")
        d["roles"] = [r.value for r in self.roles]
        return d

    def write_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_FIELDS)
            for r in self.records:
                w.writerow([r.slide_id, r.grid_row, r.grid_col, r.origin_x_px,
                            r.origin_y_px, int(r.included)])
        path.with_suffix(".meta.json").write_text(json.dumps(self.header(), indent=2))

    @classmethod
    def read_csv(cls, path) -> "PatchManifest":
        path = Path(path)
        if not path.exists():
            raise MissingFile(str(path))
        header = json.loads(path.with_suffix(".meta.json").read_text())
        with open(path, newline="") as fh:
            records = [
                PatchRecord(row["slide_id"], int(row["grid_row"]), int(row["grid_col"]),
                            int(row["origin_x_px"]), int(row["origin_y_px"]),
                            row["included"].strip().lower() in ("1", "true"))
                for row in csv.DictReader(fh)
            ]
        return cls(records=records, **header)


def padded_size(n: int, patch_size_px: int) -> int:
    return max(1, math.ceil(n / patch_size_px)) * patch_size_px


def pad_array(arr: np.ndarray, patch_size_px: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = padded_size(h, patch_size_px), padded_size(w, patch_size_px)
    if (ph, pw) == (h, w):
        return arr
    pad = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="constant", constant_values=0)


def pad_to_multiple(slide: SlideImage, patch_size_px: int) -> SlideImage:
    """Zero-pad at the bottom/right so both sides are multiples of the patch size."""
    if patch_size_px <= 0:
        raise ValueError("patch_size_px must be positive")
    return slide.with_channels(
        [ChannelPlane(ch.role, pad_array(ch.data, patch_size_px)) for ch in slide.channels]
    )


def build_manifest(slide_id: str, height: int, width: int, patch_size_px: int,
                   roles=PATCH_ROLES) -> PatchManifest:
    ph, pw = padded_size(height, patch_size_px), padded_size(width, patch_size_px)
    records = [
        PatchRecord(slide_id, r, c, c * patch_size_px, r * patch_size_px)
        for r in range(ph // patch_size_px)
        for c in range(pw // patch_size_px)
    ]
    return PatchManifest(slide_id, patch_size_px, width, height, pw, ph, records, list(roles))


def decompose(slide: SlideImage, patch_size_px: int = DEFAULT_PATCH_SIZE):
    """Split a slide into row-major (H, W, C) uint8 tiles.

    Returns ``(manifest, patches)`` with ``patches[i]`` belonging to
    ``manifest.records[i]``; tile channels follow ``slide.roles``.
    """
    padded = pad_to_multiple(slide, patch_size_px)
    stack = np.stack([ch.data for ch in padded.channels], axis=-1)
    manifest = build_manifest(slide.slide_id, slide.height_px, slide.width_px, patch_size_px,
                              slide.roles)
    p = patch_size_px
    patches = [stack[r.origin_y_px:r.origin_y_px + p, r.origin_x_px:r.origin_x_px + p]
               for r in manifest.records]
    return manifest, patches


def filter_empty(manifest: PatchManifest, patches, roles=None) -> PatchManifest:
    """Exclude tiles whose NUCLEI + VESSEL sum is zero; all others are included."""
    roles = manifest.roles if roles is None else [Role.parse(r) for r in roles]
    try:
        idx = [roles.index(Role.NUCLEI), roles.index(Role.VESSEL)]
    except ValueError:
        raise MissingChannel("exclusion rule needs NUCLEI and VESSEL channels") from None
    records = []
    for rec, patch in zip(manifest.records, patches):
        total = int(patch[..., idx].sum(dtype=np.int64))
        records.append(replace(rec, included=total != 0))
    return replace(manifest, records=records, roles=roles)


def normalize(patch8: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(patch8, dtype=np.float64) / 127.5 - 1.0).astype(np.float32)


def denormalize(patch: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8, half-way values rounding up."""
    v = (np.asarray(patch, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def recompose(manifest: PatchManifest, patches: dict, strict: bool = True) -> np.ndarray:
    """Place single-channel tiles at their recorded origins and crop to the original size.

    ``patches`` maps ``(grid_row, grid_col)`` (or a record's ``name``) to a
    2D tile. Absent tiles stay zero; with ``strict`` an absent tile for an
    included record is an error.
    """
    p = manifest.patch_size_px
    out = np.zeros((manifest.padded_height_px, manifest.padded_width_px), dtype=np.uint8)
    for rec in manifest.records:
        tile = patches.get(rec.key)
        if tile is None:
            tile = patches.get(rec.name)
        if tile is None:
            if strict and rec.included:
                raise MissingPatch(f"no patch for included tile {rec.name}")
            continue
        tile = np.asarray(tile)
        if tile.ndim == 3 and tile.shape[-1] == 1:
            tile = tile[..., 0]
        if tile.shape != (p, p):
            raise ShapeMismatch(f"tile {rec.name} is {tile.shape}, expected {(p, p)}")
        out[rec.origin_y_px:rec.origin_y_px + p, rec.origin_x_px:rec.origin_x_px + p] = tile
    return out[: manifest.original_height_px, : manifest.original_width_px]


def write_patch_store(slide: SlideImage, out_dir, patch_size_px: int = DEFAULT_PATCH_SIZE):
    """Decompose, apply the exclusion rule and write ``{slide_id}_{row}_{col}.png`` tiles.

    Tiles are stored as RGB PNGs in NUCLEI, VESSEL, NP order (absent roles are
    zero). Excluded tiles are not written. Returns the manifest.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        full = [ChannelPlane(r, slide.channel(r) if slide.has(r)
                             else np.zeros(slide.shape, np.uint8)) for r in PATCH_ROLES]
        manifest, patches = decompose(slide.with_channels(full), patch_size_px)
        manifest = filter_empty(manifest, patches)
        for rec, patch in zip(manifest.records, patches):
            if rec.included:
                Image.fromarray(np.ascontiguousarray(patch)).save(out_dir / f"{rec.name}.png")
        manifest.write_csv(out_dir / f"{slide.slide_id}_manifest.csv")
    except OSError as exc:
        raise IoFailure(f"cannot write patch store {out_dir}: {exc}") from exc
    return manifest


def read_patch(store_dir, record: PatchRecord) -> np.ndarray:
    path = Path(store_dir) / f"{record.name}.png"
    if not path.exists():
        raise MissingPatch(str(path))
    with Image.open(path) as im:
        return np.array(im)
