import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texguard.corpus import (HAIR_TINT, NEUTRAL_BAND, ImageFormatError, ToyFaceSpec, from_bytes, gen_corpus,
                             greenness, load_corpus, load_image, make_corpus, render_face, save_image, to_bytes)


def test_byte_conversion():
    assert from_bytes(np.array([255]))[0] == 1.0 and from_bytes(np.array([0]))[0] == 0.0
    assert to_bytes(np.array([0.5]))[0] == 128
    assert to_bytes(np.array([-0.2, 1.3])).tolist() == [0, 255]


@given(arrays(np.uint8, (5, 5, 3)))
def test_bytes_round_trip(data):
    assert (to_bytes(from_bytes(data)) == data).all()


def test_render_is_deterministic():
    spec = ToyFaceSpec.sample(42, 1)
    (a, ma), (b, mb) = render_face(spec), render_face(spec)
    assert a.tobytes() == b.tobytes() and (ma == mb).all()


def test_corpus_structure():
    c = make_corpus(8, 3)
    assert c.images.shape == (8, 64, 64, 3) and c.masks.shape == (8, 64, 64)
    assert c.labels.tolist() == [0, 1] * 4
    cover = c.masks.mean(axis=(1, 2))
    assert ((cover >= 0.15) & (cover <= 0.30)).all()
    with pytest.raises(ValueError):
        make_corpus(0, 3)


def test_start_offset_disjoint():
    a, b = make_corpus(4, 0), make_corpus(4, 0, start=100)
    assert not set(a.ids) & set(b.ids)
    assert make_corpus(2, 0, start=2).images.tobytes() == make_corpus(4, 0).images[2:].tobytes()


def test_hair_is_the_only_tinted_region():
    c = make_corpus(16, 11)
    q = greenness(c.images)
    quant = 1.5 / 255  # 8-bit rounding on up to three channels
    assert np.abs(q[~c.masks]).max() <= NEUTRAL_BAND + quant
    hair = q[c.masks]
    assert np.abs(hair + HAIR_TINT).max() <= NEUTRAL_BAND + quant


def test_gen_corpus_byte_identical(tmp_path):
    gen_corpus(3, 7, tmp_path / "a", size=32)
    gen_corpus(3, 7, tmp_path / "b", size=32)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in files and len(files) == 7
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = load_corpus(tmp_path / "a")
    ref = make_corpus(3, 7, size=32)
    assert c.images.tobytes() == ref.images.tobytes() and (c.masks == ref.masks).all()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([".png", ".ppm"]))
def test_image_round_trip_byte_stable(tmp_path_factory, seed, suffix):
    img, _ = render_face(ToyFaceSpec.sample(seed, seed % 2, 32))
    d = tmp_path_factory.mktemp("img")
    save_image(img, d / f"a{suffix}")
    back = load_image(d / f"a{suffix}")
    assert (to_bytes(back) == to_bytes(img)).all()
    save_image(back, d / f"b{suffix}")
    assert (d / f"a{suffix}").read_bytes() == (d / f"b{suffix}").read_bytes()


def test_gray_pgm(tmp_path):
    g = np.linspace(0, 1, 16).reshape(4, 4)
    save_image(g, tmp_path / "g.pgm")
    assert (to_bytes(load_image(tmp_path / "g.pgm")) == to_bytes(g)).all()
    with pytest.raises(ImageFormatError):
        save_image(np.zeros((4, 4, 3)), tmp_path / "c.pgm")


def test_bad_files(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "junk.png")
    from PIL import Image

    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "deep.png")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nothing")
