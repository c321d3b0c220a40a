import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganda.errors import MissingChannel, MissingPatch, ShapeMismatch
from ganda.slide_io import ChannelPlane, Role, SlideImage
from ganda.tiling import (
    PatchManifest,
    decompose,
    denormalize,
    filter_empty,
    normalize,
    pad_to_multiple,
    recompose,
    write_patch_store,
)

from conftest import make_slide


def test_pad_identity_and_ceiling():
    s = make_slide(512, 512)
    assert pad_to_multiple(s, 512).shape == (512, 512)
    s = make_slide(512, 513, density=1.0)
    p = pad_to_multiple(s, 512)
    assert p.shape == (512, 1024)
    assert not p.channel("NP")[:, 513:].any()
    assert np.array_equal(p.channel("NP")[:, :513], s.channel("NP"))
    assert pad_to_multiple(make_slide(700, 1000), 512).shape == (1024, 1024)


@pytest.mark.parametrize("h,w,count,grid", [(1024, 1024, 4, (2, 2)), (1536, 2048, 12, (3, 4))])
def test_decompose_counts(h, w, count, grid):
    manifest, patches = decompose(make_slide(h, w, roles=(Role.NP,)), 512)
    assert len(patches) == len(manifest.records) == count
    assert manifest.grid_shape == grid
    for rec in manifest.records:
        assert rec.origin_x_px == rec.grid_col * 512 and rec.origin_y_px == rec.grid_row * 512
    assert len({r.key for r in manifest.records}) == count
    assert sum(512 * 512 for _ in manifest.records) == \
        manifest.padded_width_px * manifest.padded_height_px


def test_decompose_row_major_concatenation():
    s = make_slide(100, 130, roles=(Role.VESSEL,))
    manifest, patches = decompose(s, 64)
    rows, cols = manifest.grid_shape
    full = np.concatenate([np.concatenate(patches[r * cols:(r + 1) * cols], axis=1)
                           for r in range(rows)], axis=0)[..., 0]
    assert np.array_equal(full, pad_to_multiple(s, 64).channel("VESSEL"))


def _tile_oracle(slide, p):
    """Independent per-tile summation of NUCLEI + VESSEL over the padded raster."""
    n, v = slide.channel("NUCLEI").astype(np.int64), slide.channel("VESSEL").astype(np.int64)
    H = -(-slide.height_px // p) * p
    W = -(-slide.width_px // p) * p
    out = {}
    for r in range(H // p):
        for c in range(W // p):
            tot = 0
            for y in range(r * p, min((r + 1) * p, slide.height_px)):
                tot += int(n[y, c * p:(c + 1) * p].sum() + v[y, c * p:(c + 1) * p].sum())
            out[(r, c)] = tot != 0
    return out


def test_filter_empty_rules():
    z = np.zeros((64, 64), np.uint8)
    np_ = np.full((64, 64), 9, np.uint8)
    s = SlideImage([ChannelPlane(Role.NUCLEI, z), ChannelPlane(Role.VESSEL, z.copy()),
                    ChannelPlane(Role.NP, np_)])
    m, p = decompose(s, 64)
    assert [r.included for r in filter_empty(m, p).records] == [False]
    v = z.copy()
    v[10, 20] = 1
    s = SlideImage([ChannelPlane(Role.NUCLEI, z), ChannelPlane(Role.VESSEL, v)])
    m, p = decompose(s, 64)
    assert [r.included for r in filter_empty(m, p).records] == [True]


def test_filter_empty_missing_channel():
    m, p = decompose(make_slide(64, 64, roles=(Role.NUCLEI, Role.NP)), 64)
    with pytest.raises(MissingChannel):
        filter_empty(m, p)


def test_filter_empty_matches_oracle_on_sparse_slide():
    s = make_slide(300, 260, density=0.0005, seed=3)
    m, p = decompose(s, 32)
    flt = filter_empty(m, p)
    oracle = _tile_oracle(s, 32)
    assert {r.key: r.included for r in flt.records} == oracle
    assert 0 < sum(not v for v in oracle.values()) < len(oracle)


def test_normalize_examples():
    assert normalize(np.uint8(0)) == -1.0
    assert normalize(np.uint8(255)) == 1.0
    assert normalize(np.uint8(128)) == pytest.approx(128 / 127.5 - 1, rel=1e-7)
    assert denormalize(np.array(-1.0)) == 0 and denormalize(np.array(1.0)) == 255
    assert denormalize(np.array(0.0)) == 128
    assert denormalize(np.array([-3.0, 7.0])).tolist() == [0, 255]


def test_normalize_exhaustive_round_trip():
    v = np.arange(256, dtype=np.uint8)
    n = normalize(v)
    assert n.min() >= -1 and n.max() <= 1
    assert np.array_equal(denormalize(n), v)


def test_recompose_round_trip_and_fill():
    s = make_slide(200, 333, roles=(Role.NP,))
    m, p = decompose(s, 64)
    tiles = {r.key: t[..., 0] for r, t in zip(m.records, p)}
    assert np.array_equal(recompose(m, tiles), s.channel("NP"))
    assert not recompose(m, {}, strict=False).any()


def test_recompose_errors():
    s = make_slide(100, 100, roles=(Role.NP,))
    m, p = decompose(s, 64)
    with pytest.raises(MissingPatch):
        recompose(m, {})
    with pytest.raises(ShapeMismatch):
        recompose(m, {r.key: np.zeros((8, 8), np.uint8) for r in m.records})


def test_recompose_skips_excluded_tiles():
    z = np.zeros((128, 128), np.uint8)
    v = z.copy()
    v[:64, :64] = 5
    s = SlideImage([ChannelPlane(Role.NUCLEI, z), ChannelPlane(Role.VESSEL, v)])
    m, p = decompose(s, 64)
    m = filter_empty(m, p)
    tiles = {r.key: np.full((64, 64), 7, np.uint8) for r in m.included}
    out = recompose(m, tiles)
    assert (out[:64, :64] == 7).all() and not out[64:].any() and not out[:, 64:].any()


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 300), w=st.integers(1, 300), p=st.sampled_from([16, 64]),
       seed=st.integers(0, 10_000))
def test_recompose_decompose_property(h, w, p, seed):
    s = make_slide(h, w, roles=(Role.VESSEL,), seed=seed)
    m, tiles = decompose(s, p)
    out = recompose(m, {r.key: t[..., 0] for r, t in zip(m.records, tiles)})
    assert np.array_equal(out, s.channel("VESSEL"))


def test_manifest_csv_round_trip(tmp_path):
    s = make_slide(130, 70, density=0.001, seed=5)
    m, p = decompose(s, 64)
    m = filter_empty(m, p)
    m.write_csv(tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == "slide_id,grid_row,grid_col,origin_x_px,origin_y_px,included"
    assert PatchManifest.read_csv(tmp_path / "m.csv") == m


def test_patch_store(tmp_path):
    s = make_slide(130, 70, density=0.01, seed=5, slide_id="abc")
    m = write_patch_store(s, tmp_path, 64)
    files = sorted(f.name for f in tmp_path.glob("abc_*_*.png"))
    assert files == sorted(f"{r.name}.png" for r in m.included)
    assert (tmp_path / "abc_manifest.csv").exists()
