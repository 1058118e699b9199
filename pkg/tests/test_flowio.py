import numpy as np
import pytest

from flowsr.flowio import (
    read_flo,
    read_frame,
    read_mask_pgm,
    read_pgm,
    read_ppm,
    write_flo,
    write_frame,
    write_mask_pgm,
    write_pgm,
    write_ppm,
)
from flowsr.motion import FlowField, OcclusionMask


def test_flo_roundtrip(tmp_path, rng):
    flow = FlowField(rng.uniform(-3, 3, (2, 5, 7)).astype(np.float32).astype(np.float64))
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    back = read_flo(path)
    assert np.allclose(back.data, flow.data, atol=1e-6)


def test_flo_binary_layout(tmp_path):
    flow = FlowField(np.zeros((2, 2, 3)))
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    raw = path.read_bytes()
    assert np.frombuffer(raw[:4], dtype="<f4")[0] == np.float32(202021.25)
    w, h = np.frombuffer(raw[4:12], dtype="<i4")
    assert (w, h) == (3, 2)
    assert len(raw) == 12 + 4 * 2 * 2 * 3


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "bad.flo"
    path.write_bytes(b"\x00" * 16)
    with pytest.raises(ValueError):
        read_flo(path)


def test_pgm_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 1, (6, 9))
    path = tmp_path / "g.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (6, 9)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_mask_pgm_exact(tmp_path, rng):
    mask = OcclusionMask((rng.uniform(0, 1, (1, 8, 8)) > 0.4).astype(float))
    path = tmp_path / "m.pgm"
    write_mask_pgm(path, mask)
    back = read_mask_pgm(path)
    assert np.array_equal(back.data, mask.data)


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 1, (3, 4, 5))
    path = tmp_path / "c.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == (3, 4, 5)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_frame_dispatch(tmp_path, rng):
    rgb = rng.uniform(0, 1, (3, 4, 4))
    gray = rng.uniform(0, 1, (1, 4, 4))
    write_frame(tmp_path / "a.ppm", rgb)
    write_frame(tmp_path / "b.pgm", gray)
    assert read_frame(tmp_path / "a.ppm").shape == (3, 4, 4)
    assert read_frame(tmp_path / "b.pgm").shape == (1, 4, 4)
