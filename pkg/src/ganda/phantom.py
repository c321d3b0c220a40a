"""Synthetic slides with a known vessel -> nanoparticle forward model.

NP intensity at a pixel is ``s * exp(-d / lambda_px)`` plus Gaussian noise,
where ``d`` is the distance to the nearest vessel pixel. Nuclei are random
disks placed independently of the vessels, so they carry no information
about the NP channel beyond what the vessels already give.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .analysis import DistanceStats, distance_stats
from .errors import InvalidParams, IoFailure
from .slide_io import ChannelPlane, Role, SlideImage, save_slide


@dataclass(frozen=True)
class PhantomParams:
    width_px: int = 1024
    height_px: int = 1024
    vessel_segment_count: int = 24
    vessel_segment_steps: int = 40
    vessel_step_px: float = 5.0
    vessel_turn_deg: float = 30.0
    vessel_thickness_px: int = 5
    vessel_intensity: int = 220
    nuclei_count: int = 5000
    nuclei_radius_px: int = 4
    nuclei_intensity: int = 180
    decay_length_um: float = 12.0
    np_peak_intensity: int = 200
    noise_sigma: float = 4.0
    pixel_size_um: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        positive = ("width_px", "height_px", "vessel_segment_count", "vessel_segment_steps",
                    "vessel_step_px", "vessel_thickness_px", "nuclei_radius_px",
                    "decay_length_um", "pixel_size_um")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be positive")
        if self.nuclei_count < 0:
            raise InvalidParams("nuclei_count must be >= 0")
        if not 1 <= self.np_peak_intensity <= 255:
            raise InvalidParams("np_peak_intensity must be in [1, 255]")
        for name in ("vessel_intensity", "nuclei_intensity"):
            if not 1 <= getattr(self, name) <= 255:
                raise InvalidParams(f"{name} must be in [1, 255]")
        if self.noise_sigma < 0:
            raise InvalidParams("noise_sigma must be >= 0")

    @property
    def decay_length_px(self) -> float:
        return self.decay_length_um / self.pixel_size_um

    def replace(self, **changes) -> "PhantomParams":
        d = asdict(self)
        d.update(changes)
        return PhantomParams(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParams(f"unknown phantom parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    np_field: np.ndarray        # noiseless s * exp(-d / lambda), float64
    vessel_mask: np.ndarray
    nuclei_mask: np.ndarray
    distance_px: np.ndarray     # distance to the nearest vessel pixel


def _draw_segment(mask, p0, p1):
    n = int(math.ceil(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])))) + 1
    rr = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    cc = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    ok = (rr >= 0) & (rr < mask.shape[0]) & (cc >= 0) & (cc < mask.shape[1])
    mask[rr[ok], cc[ok]] = True


def vessel_centerlines(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    h, w = params.height_px, params.width_px
    lines = np.zeros((h, w), dtype=bool)
    turn = math.radians(params.vessel_turn_deg)
    for _ in range(params.vessel_segment_count):
        pos = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(params.vessel_segment_steps):
            heading += rng.uniform(-turn, turn)
            nxt = pos + params.vessel_step_px * np.array([math.sin(heading), math.cos(heading)])
            _draw_segment(lines, pos, nxt)
            pos = nxt
    return lines


def dilate_disk(mask: np.ndarray, diameter_px: float) -> np.ndarray:
    if not mask.any():
        return mask.copy()
    return ndimage.distance_transform_edt(~mask) <= diameter_px / 2.0


def nuclei_disks(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    h, w = params.height_px, params.width_px
    centers = np.zeros((h, w), dtype=bool)
    if params.nuclei_count:
        rows = rng.integers(0, h, params.nuclei_count)
        cols = rng.integers(0, w, params.nuclei_count)
        centers[rows, cols] = True
    return dilate_disk(centers, 2 * params.nuclei_radius_px)


def decay_field(distance_px: np.ndarray, params: PhantomParams) -> np.ndarray:
    return params.np_peak_intensity * np.exp(-distance_px / params.decay_length_px)


def quantize(field: np.ndarray) -> np.ndarray:
    """clamp(round(v), 0, 255) with halves rounding up."""
    return np.clip(np.floor(field + 0.5), 0, 255).astype(np.uint8)


def generate_phantom(params: PhantomParams, slide_id: str | None = None):
    """Return ``(SlideImage, GroundTruth)``; fully determined by ``params``."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    vessel = dilate_disk(vessel_centerlines(params, rng), params.vessel_thickness_px)
    if not vessel.any():
        raise InvalidParams("phantom has no vessel pixels inside the frame")
    nuclei = nuclei_disks(params, rng)
    distance = ndimage.distance_transform_edt(~vessel)
    field = decay_field(distance, params)
    noisy = field
    if params.noise_sigma > 0:
        noisy = field + rng.normal(0.0, params.noise_sigma, field.shape)

    channels = [
        ChannelPlane(Role.NUCLEI, nuclei.astype(np.uint8) * np.uint8(params.nuclei_intensity)),
        ChannelPlane(Role.VESSEL, vessel.astype(np.uint8) * np.uint8(params.vessel_intensity)),
        ChannelPlane(Role.NP, quantize(noisy)),
    ]
    slide = SlideImage(channels, pixel_size_um=params.pixel_size_um,
                       slide_id=slide_id or f"phantom_{params.seed}",
                       provenance={"phantom_seed": params.seed})
    return slide, GroundTruth(field, vessel, nuclei, distance)


def derive_seeds(master_seed: int, n: int) -> list:
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(n_slides: int, params: PhantomParams, out_dir, n_test: int = 1) -> dict:
    """Write ``n_slides`` phantom TIFFs plus ``dataset.json`` with seeds, hashes and the split.

    The last ``n_test`` slides form the test split. ``params.seed`` is the master seed.
    """
    if n_slides < 2:
        raise InvalidParams("need at least two slides (one is held out)")
    if not 1 <= n_test < n_slides:
        raise InvalidParams("n_test must leave at least one training slide")
    out_dir = Path(out_dir)
    seeds = derive_seeds(params.seed, n_slides)
    entries = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, seed in enumerate(seeds):
            slide_id = f"phantom_{i + 1:02d}"
            slide, _ = generate_phantom(params.replace(seed=seed), slide_id)
            path = out_dir / f"{slide_id}.tif"
            save_slide(slide, path)
            entries.append({"slide_id": slide_id, "file": path.name, "seed": seed,
                            "split": "test" if i >= n_slides - n_test else "train",
                            "sha256": _sha256(path)})
        manifest = {
            "params": asdict(params),
            "master_seed": params.seed,
            "slides": entries,
            "split": {
                "train": [e["slide_id"] for e in entries if e["split"] == "train"],
                "test": [e["slide_id"] for e in entries if e["split"] == "test"],
            },
        }
        (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise IoFailure(f"cannot write phantom dataset to {out_dir}: {exc}") from exc
    return manifest


def analytic_distance_quantiles(params: PhantomParams, ground_truth: GroundTruth,
                                threshold: int = 10, bin_um: float = 2.0) -> DistanceStats:
    """Distance statistics of NP-positive pixels of the noiseless field.

    Distances come from an exact nearest-neighbour query against every vessel
    pixel coordinate, independent of any distance-transform code.
    """
    positive = quantize(ground_truth.np_field) > threshold
    vessel_pts = np.argwhere(ground_truth.vessel_mask)
    pts = np.argwhere(positive)
    if len(pts):
        dist, _ = cKDTree(vessel_pts).query(pts, k=1)
    else:
        dist = np.zeros(0)
    return distance_stats(dist * params.pixel_size_um, bin_um)
