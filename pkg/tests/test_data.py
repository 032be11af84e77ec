import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ceemkit.data import (DEFAULT_COUNTS, LabeledDataset, SynthSpec, apply_ops, enhance_preview, load_dir,
                          normalize, parse_ops, save_dir, synth_generate)
from ceemkit.errors import DatasetError, ImageFileError
from ceemkit.imageio import decode, encode, read_image, resize_bilinear, write_image
from oracles import RAMP_PATCH
import struct
import zlib


def _png_rgb(px: np.ndarray, filt: int = 0) -> bytes:
    """Hand-rolled 8-bit RGB PNG using one filter type on every row (types 0 and 1 only)."""
    h, w, _ = px.shape
    rows = []
    for y in range(h):
        line = px[y].reshape(-1).astype(np.int64)
        if filt == 1:
            line = (line - np.concatenate([[0, 0, 0], line[:-3]])) % 256
        rows.append(bytes([filt]) + line.astype(np.uint8).tobytes())

    def chunk(tag, body):
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))

    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
            + chunk(b"tEXt", b"k\x00v") + chunk(b"IDAT", zlib.compress(b"".join(rows))) + chunk(b"IEND", b""))


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_codec_round_trip(px):
    img = px.astype(np.float64)
    pgm = encode(img, "PPM")
    assert pgm.startswith(b"P5")
    assert np.array_equal(decode(pgm), img)
    assert np.array_equal(decode(encode(img, "PNG")), img)


def test_ascii_pgm_with_comment():
    img = decode(b"P2\n# note\n3 2\n15\n0 15 5\n10 0 15\n")
    np.testing.assert_allclose(img, [[0, 255, 85], [170, 0, 255]])


@pytest.mark.parametrize("filt", [0, 1])
def test_png_rgb_to_luma(filt):
    rng = np.random.default_rng(filt)
    px = rng.integers(0, 256, size=(4, 5, 3))
    got = decode(_png_rgb(px, filt))
    np.testing.assert_allclose(got, px @ np.array([0.299, 0.587, 0.114]), atol=1e-9)


def test_sixteen_bit_rejected(tmp_path):
    p = tmp_path / "deep.pgm"
    p.write_bytes(b"P5\n2 1\n65535\n\x00\x01\xff\xff")
    with pytest.raises(ImageFileError, match="deep.pgm"):
        read_image(p)


def test_read_image_errors(tmp_path):
    with pytest.raises(ImageFileError, match="missing.pgm"):
        read_image(tmp_path / "missing.pgm")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\n\x00\x00")
    with pytest.raises(ImageFileError, match="bad.png"):
        read_image(bad)
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"hello")
    with pytest.raises(ImageFileError):
        read_image(junk)


def test_resize_constant_and_checkerboard():
    assert np.array_equal(resize_bilinear(np.full((10, 10), 77.0), 224, 224), np.full((224, 224), 77.0))
    out = resize_bilinear(np.array([[0.0, 255.0], [255.0, 0.0]]), 3, 3)
    assert out[1, 1] == 127.5


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 255)))
def test_resize_identity(img):
    assert np.array_equal(resize_bilinear(img, *img.shape), img)


def _write_tree(root, spec):
    for name, n in spec.items():
        (root / name).mkdir()
        for i in range(n):
            write_image(root / name / f"{i}.pgm", np.full((5, 5), 10.0 * i))


def test_load_dir_layout(tmp_path):
    _write_tree(tmp_path, {"b": 2, "a": 3})
    ds = load_dir(tmp_path, 8)
    assert ds.images.shape == (5, 8, 8, 1)
    assert ds.labels.tolist() == [0, 0, 0, 1, 1]
    assert ds.class_names == ["a", "b"]
    assert ds.provenance[0].endswith("0.pgm")


def test_load_dir_errors(tmp_path):
    _write_tree(tmp_path, {"a": 1, "empty": 0})
    with pytest.raises(DatasetError, match="empty"):
        load_dir(tmp_path, 5)
    (tmp_path / "empty" / "x.pgm").write_bytes(b"P5\n9 9\n255\n")
    with pytest.raises(ImageFileError, match="x.pgm"):
        load_dir(tmp_path, 5)


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 4, 4, 1)), [0], ["a"])
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((1, 4, 4, 1)), [0], ["a", "a"])
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((1, 4, 4, 1)), [2], ["a", "b"])


def test_synth_defaults_and_determinism():
    a = synth_generate(SynthSpec(seed=5))
    b = synth_generate(SynthSpec(seed=5))
    assert a.class_counts() == list(DEFAULT_COUNTS) == [39, 51, 84, 143, 10, 19]
    assert a.class_names == ["BP", "Covid", "LO", "Normal", "TB", "VP"]
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.min() >= 0 and a.images.max() <= 255
    assert a.images.shape[1:] == (64, 64, 1)
    assert not np.array_equal(a.images, synth_generate(SynthSpec(seed=6)).images)


def test_synth_counts_track_source_imbalance():
    source = (1946, 2531, 4209, 7134, 490, 941)  # per-class training images before scaling
    assert tuple(round(n / 50) for n in source) == DEFAULT_COUNTS
    assert max(DEFAULT_COUNTS) / min(DEFAULT_COUNTS) == pytest.approx(max(source) / min(source), rel=0.05)


def test_synth_classes_separable_by_nearest_centroid():
    ds = synth_generate(SynthSpec(seed=0))
    x = normalize(ds.images).reshape(len(ds), -1)
    # leave-one-out nearest centroid on raw pixels
    sums = np.stack([x[ds.labels == k].sum(0) for k in range(6)])
    counts = np.bincount(ds.labels)
    correct = 0
    for i in range(len(ds)):
        c = sums.copy()
        n = counts.astype(float).copy()
        c[ds.labels[i]] -= x[i]
        n[ds.labels[i]] -= 1
        d = ((c / n[:, None] - x[i]) ** 2).sum(1)
        correct += int(d.argmin() == ds.labels[i])
    assert correct / len(ds) > 0.6


def test_save_and_reload(tmp_path):
    ds = synth_generate(SynthSpec(counts=(2, 3, 1, 1, 1, 1), size=12, seed=1))
    save_dir(ds, tmp_path)
    back = load_dir(tmp_path, 12)
    order = np.argsort(back.class_names)  # sorted directory names define labels
    assert back.class_counts() == [ds.class_counts()[ds.class_names.index(n)] for n in back.class_names]
    assert np.array_equal(np.sort(back.images.ravel()), np.sort(np.rint(ds.images).ravel()))
    assert len(order) == 6


def test_preview_ops():
    assert parse_ops("negative, twomaxminpool") == ["negative", "twomaxminpool"]
    with pytest.raises(ValueError):
        parse_ops("negative,blur")
    out = apply_ops(RAMP_PATCH.astype(float), ["twomaxmin"])
    assert out.tolist() == [[129, 130, 191], [169, 167, 202], [198, 191, 187]]
    assert apply_ops(np.zeros((3, 3)), ["negative"]).tolist() == [[255.0] * 3] * 3
    assert np.array_equal(apply_ops(np.full((9, 9), 40.0), ["twomaxmin"]), np.full((4, 4), 40.0))


def test_enhance_preview_files(tmp_path):
    src = tmp_path / "in.pgm"
    write_image(src, RAMP_PATCH.astype(float))
    raw = enhance_preview(src, tmp_path / "out.png", ["twomaxminpool"])
    assert raw.tolist() == [[129, 130, 191], [169, 167, 202], [198, 191, 187]]
    shown = read_image(tmp_path / "out.png")
    assert shown.min() == 0 and shown.max() == 255
    flat = tmp_path / "flat.pgm"
    write_image(flat, np.full((7, 7), 90.0))
    enhance_preview(flat, tmp_path / "flat_out.pgm", "twomaxmin")
    assert np.array_equal(read_image(tmp_path / "flat_out.pgm"), np.full((3, 3), 90.0))
    with pytest.raises(ImageFileError):
        enhance_preview(tmp_path / "nope.pgm", tmp_path / "x.pgm")
