import numpy as np
import pytest

from spikerecon import io as srio
from spikerecon.errors import ParseError, ShapeError, ValidationError


def test_ppm_roundtrip_grayscale(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(32, 32, 1))
    p = tmp_path / "a.ppm"
    srio.write_ppm(p, img)
    back = srio.read_ppm(p)
    assert back.shape == (32, 32, 3)
    # quantized to 255 levels on disk
    assert np.max(np.abs(back[..., 0] - img[..., 0])) <= 0.5 / 255 + 1e-12
    assert np.allclose(back[..., 0], back[..., 1])


def test_ppm_roundtrip_rgb(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(8, 6, 3))
    p = tmp_path / "b.ppm"
    srio.write_ppm(p, img)
    back = srio.read_ppm(p)
    assert back.shape == (8, 6, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_ppm_rejects_out_of_range(tmp_path):
    with pytest.raises(ValidationError):
        srio.write_ppm(tmp_path / "c.ppm", np.full((4, 4, 1), 1.5))


def test_ppm_bad_magic(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 16)
    with pytest.raises(ParseError):
        srio.read_ppm(p)


def test_matrix_container_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"weights": rng.normal(size=(5, 3)),
              "bias": rng.normal(size=7),
              "empty": np.zeros((0, 4))}
    p = tmp_path / "m.bin"
    srio.save_matrices(p, arrays, sidecar={"lam": 0.5})
    back, meta = srio.load_matrices(p)
    assert meta["lam"] == 0.5
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert np.array_equal(back[k], arrays[k])


def test_matrix_container_rejects_truncation(tmp_path):
    p = tmp_path / "m.bin"
    srio.save_matrices(p, {"w": np.ones((4, 4))})
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(ParseError):
        srio.load_matrices(p)


def test_matrix_container_rejects_bad_magic(tmp_path):
    p = tmp_path / "m.bin"
    srio.save_matrices(p, {"w": np.ones((2, 2))})
    data = bytearray(p.read_bytes())
    data[0] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ParseError):
        srio.load_matrices(p)


def test_movie_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    frames = rng.uniform(size=(5, 8, 8, 1))
    onsets = np.arange(5) * 0.25
    labels = [0, 1, 2, 1, 0]
    d = tmp_path / "movie"
    srio.write_movie(d, frames, onsets, labels)
    back_frames, back_onsets, back_labels = srio.read_movie(d)
    assert back_frames.shape == (5, 8, 8, 3)
    assert np.allclose(back_onsets, onsets)
    assert list(back_labels) == labels
    assert np.max(np.abs(back_frames[..., 0] - frames[..., 0])) <= 0.5 / 255 + 1e-12
