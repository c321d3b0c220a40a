import numpy as np
import pytest

from ganda.slide_io import ChannelPlane, Role, SlideImage


def make_slide(h, w, roles=(Role.NUCLEI, Role.VESSEL, Role.NP), seed=0, slide_id="s",
               density=0.5, pixel_size_um=1.0):
    rng = np.random.default_rng(seed)
    chans = []
    for r in roles:
        data = rng.integers(0, 256, (h, w), dtype=np.uint8)
        data[rng.random((h, w)) > density] = 0
        chans.append(ChannelPlane(r, data))
    return SlideImage(chans, pixel_size_um=pixel_size_um, slide_id=slide_id)


@pytest.fixture
def slide_factory():
    return make_slide
