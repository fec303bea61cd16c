import numpy as np
import pytest

from elasto import render
from elasto.types import ValidationError


def test_constant_mid_gray():
    data = render.encode(np.full((4, 5), 0.3), "gray")
    assert data.startswith(b"P5\n5 4\n255\n")
    pix = render.decode(data)
    assert pix.shape == (4, 5) and np.all(pix == 128)


def test_clamping_and_extremes():
    pix = render.decode(render.encode(np.array([[-1.0, 0.0, 0.5, 9.0]]), "gray", (0.0, 0.5)))
    assert pix.tolist() == [[0, 0, 255, 255]]


def test_epr_near_top_of_scale():
    pix = render.decode(render.encode(np.full((3, 3), 0.49), "jet", (0.0, 0.5)))
    assert pix.shape == (3, 3, 3)
    # 0.98 of the jet scale is dark red
    assert np.all(pix[..., 0] > 128) and np.all(pix[..., 1] == 0) and np.all(pix[..., 2] == 0)


def test_colormap_endpoints():
    lo = render.decode(render.encode(np.zeros((1, 1)), "hot", (0.0, 1.0)))
    hi = render.decode(render.encode(np.ones((1, 1)), "hot", (0.0, 1.0)))
    assert lo.tolist() == [[[0, 0, 0]]] and hi.tolist() == [[[255, 255, 255]]]


def test_deterministic(tmp_path):
    f = np.random.default_rng(0).standard_normal((8, 6))
    render.write_image(tmp_path / "a.ppm", f, "jet")
    render.write_image(tmp_path / "b.ppm", f, "jet")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_errors():
    with pytest.raises(ValidationError):
        render.encode(np.zeros(3))
    with pytest.raises(ValidationError):
        render.encode(np.zeros((2, 2)), "viridis")
