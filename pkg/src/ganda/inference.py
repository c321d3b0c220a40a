"""Whole-slide prediction: tile, run the generator on included tiles, recompose, merge."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ChannelSpecMismatch, ShapeMismatch
from .slide_io import ChannelPlane, Role, SlideImage, SourceMode
from .tiling import decompose, denormalize, filter_empty, normalize, recompose

DEFAULT_BATCH = 8


@dataclass
class PredictionResult:
    predicted_np: np.ndarray
    source_mode: SourceMode
    checkpoint_ref: str
    manifest_ref: str

    def provenance(self) -> dict:
        return {"checkpoint_hash": self.checkpoint_ref, "source_mode": self.source_mode.value,
                "slide_id": self.manifest_ref}

    def write(self, path) -> Path:
        """Save the channel as a grayscale PNG/TIFF with a ``.json`` provenance sidecar."""
        from PIL import Image

        path = Path(path)
        Image.fromarray(self.predicted_np).save(path)
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.provenance(), indent=2, sort_keys=True))
        return sidecar


def predict_tiles(generator, tiles: np.ndarray, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Run ``generator`` on (N, H, W, C) uint8 tiles; returns (N, H, W) uint8."""
    generator.eval()
    dtype = next(generator.parameters()).dtype
    out = []
    with torch.no_grad():
        for lo in range(0, len(tiles), batch_size):
            x = torch.from_numpy(normalize(tiles[lo:lo + batch_size])).permute(0, 3, 1, 2)
            y = generator(x.to(dtype).contiguous())
            out.append(denormalize(y[:, 0].cpu().numpy()))
    if not out:
        return np.zeros((0,) + tiles.shape[1:3], np.uint8)
    return np.concatenate(out)


def predict_slide(ckpt: Checkpoint, slide: SlideImage, source_mode, patch_size_px: int | None = None,
                  batch_size: int = DEFAULT_BATCH, generator=None) -> PredictionResult:
    """Predict the NP channel of ``slide`` at full resolution.

    ``generator`` overrides the checkpoint's network (any callable module on
    NCHW tensors); the checkpoint still supplies provenance.
    """
    mode = SourceMode.parse(source_mode)
    if generator is None:
        if ckpt.generator_spec.input_channels != mode.channels:
            raise ChannelSpecMismatch(
                f"checkpoint expects {ckpt.generator_spec.input_channels} channels, "
                f"source mode {mode.value} gives {mode.channels}"
            )
        generator = ckpt.generator()
    if patch_size_px is None:
        patch_size_px = int(ckpt.training_meta.get("patch_size_px",
                                                   ckpt.discriminator_spec.input_size_px))
    sources = [slide.channel(r) for r in mode.roles]
    # the exclusion rule always looks at both NUCLEI and VESSEL
    exclusion = [slide.channel(Role.NUCLEI), slide.channel(Role.VESSEL)]

    src_slide = slide.with_channels(
        [ChannelPlane(Role.NUCLEI, exclusion[0]), ChannelPlane(Role.VESSEL, exclusion[1])]
    )
    manifest, patches = decompose(src_slide, patch_size_px)
    manifest = filter_empty(manifest, patches)
    idx = [{Role.NUCLEI: 0, Role.VESSEL: 1}[r] for r in mode.roles]
    keep = [i for i, rec in enumerate(manifest.records) if rec.included]
    tiles = np.stack([patches[i][..., idx] for i in keep]) if keep else \
        np.zeros((0, patch_size_px, patch_size_px, len(sources)), np.uint8)
    pred = predict_tiles(generator, tiles, batch_size)
    by_key = {manifest.records[i].key: pred[j] for j, i in enumerate(keep)}
    raster = recompose(manifest, by_key)
    return PredictionResult(raster, mode, ckpt.config_hash if ckpt is not None else "",
                            slide.slide_id)


def merge_channels(slide: SlideImage, prediction: PredictionResult) -> SlideImage:
    """Real NUCLEI and VESSEL plus the predicted NP channel."""
    if prediction.predicted_np.shape != slide.shape:
        raise ShapeMismatch(f"prediction {prediction.predicted_np.shape} vs slide {slide.shape}")
    channels = [
        ChannelPlane(Role.NUCLEI, slide.channel(Role.NUCLEI)),
        ChannelPlane(Role.VESSEL, slide.channel(Role.VESSEL)),
        ChannelPlane(Role.NP, prediction.predicted_np),
    ]
    prov = dict(slide.provenance)
    prov.update({"np_channel": "predicted", **prediction.provenance()})
    return slide.with_channels(channels, provenance=prov)
