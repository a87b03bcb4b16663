import numpy as np
import pytest
from hypothesis import given, strategies as st

from edof.imaging import (DimensionMismatchError, Image, MalformedHeaderError, StackError,
                          StackManifest, TruncatedPayloadError, UnsupportedFormatError,
                          UnsupportedMaxvalError, ZStack, decode_pgm, load_pgm, load_stack,
                          parse_manifest, quantize, read_manifest, save_pgm, save_stack, to_unit)


def test_load_8bit_bytes_identity(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    raw = load_pgm(path)
    assert raw.maxval == 255
    assert raw.samples.tolist() == [[0, 255], [128, 64]]


def test_load_16bit_is_big_endian():
    raw = decode_pgm(b"P5 1 1 65535\n" + bytes([0x01, 0x00]))
    assert raw.samples[0, 0] == 256


def test_header_comments_are_skipped():
    raw = decode_pgm(b"P5\n# made by hand\n2 1\n# depth\n255\n\x07\x08")
    assert raw.samples.tolist() == [[7, 8]]


@pytest.mark.parametrize("data, err", [
    (b"P2\n2 2\n255\n0 1 2 3", UnsupportedFormatError),
    (b"P5\n2 x\n255\n\x00\x00\x00\x00", MalformedHeaderError),
    (b"P5\n2 2\n", MalformedHeaderError),
    (b"P5\n2 2\n255\n\x00\x01", TruncatedPayloadError),
    (b"P5\n1 1\n1023\n\x00\x00", UnsupportedMaxvalError),
])
def test_decode_errors(data, err):
    with pytest.raises(err):
        decode_pgm(data)


def test_to_unit_values():
    from edof.imaging import RawImage
    assert to_unit(RawImage(np.array([[255]], np.uint8), 255)).pixels[0, 0] == 1.0
    assert to_unit(RawImage(np.array([[0]], np.uint8), 255)).pixels[0, 0] == 0.0
    v = to_unit(RawImage(np.array([[32768]], np.uint16), 65535)).pixels[0, 0]
    assert v == 32768 / 65535
    assert abs(v - 0.50000763) < 1e-8


def test_quantizer_half_up():
    assert quantize(np.array([[1.0]]), 8)[0, 0] == 255
    assert quantize(np.array([[0.5]]), 8)[0, 0] == 128


def test_small_roundtrip(tmp_path):
    img = Image(np.array([[0.0, 0.25], [0.5, 1.0]]))
    save_pgm(img, 8, tmp_path / "x.pgm")
    again = load_pgm(tmp_path / "x.pgm")
    assert again.samples.tolist() == quantize(img.pixels, 8).tolist()


@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([8, 16]), st.integers(0, 2**32 - 1))
def test_save_load_to_unit_is_exact_quantization(h, w, depth, seed):
    import tempfile
    from pathlib import Path
    x = np.random.default_rng(seed).random((h, w))
    maxval = 255 if depth == 8 else 65535
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "p.pgm"
        save_pgm(Image(x), depth, path)
        back = to_unit(load_pgm(path)).pixels
    assert np.array_equal(back, quantize(x, depth) / maxval)


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(np.array([[1.5]]))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2)), pixel_pitch=0)


def test_image_is_read_only():
    img = Image(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0


@given(st.integers(2, 20), st.integers(2, 20), st.integers(1, 3), st.sampled_from([(0, 1), (1, 0), (1, 1)]))
def test_zstack_rejects_heterogeneous_planes(h, w, d, bump):
    planes = [Image(np.zeros((h, w))) for _ in range(d)]
    odd = Image(np.zeros((h + bump[0], w + bump[1])))
    with pytest.raises(DimensionMismatchError):
        ZStack(tuple(planes + [odd]), 0.5)


def test_zstack_rejects_mixed_pitch_and_empty():
    with pytest.raises(DimensionMismatchError):
        ZStack((Image(np.zeros((2, 2)), 0.1), Image(np.zeros((2, 2)), 0.2)))
    with pytest.raises(StackError):
        ZStack(())


def _write_planes(tmp_path, shapes):
    names = []
    for i, shape in enumerate(shapes):
        name = f"p{i:02d}.pgm"
        save_pgm(Image(np.full(shape, i / max(len(shapes), 1))), 8, tmp_path / name)
        names.append(name)
    return names


def test_manifest_with_14_planes(tmp_path):
    names = _write_planes(tmp_path, [(8, 8)] * 14)
    text = "# fov 1\nz_step_um=0.5\npixel_pitch_um=0.065\n" + "".join(f"plane={n}\n" for n in names)
    (tmp_path / "s.manifest").write_text(text)
    stack = load_stack(read_manifest(tmp_path / "s.manifest"))
    assert len(stack) == 14
    assert stack.z_step == 0.5 and stack.pixel_pitch == 0.065
    # manifest order preserved
    assert [round(p.pixels[0, 0] * 255) for p in stack.planes] == [round(i / 14 * 255) for i in range(14)]


def test_manifest_single_plane(tmp_path):
    names = _write_planes(tmp_path, [(4, 4)])
    m = StackManifest(1.0, 0.1, tuple(tmp_path / n for n in names))
    assert len(load_stack(m)) == 1


def test_manifest_dimension_mismatch(tmp_path):
    names = _write_planes(tmp_path, [(512, 512), (256, 256)])
    m = StackManifest(0.5, 0.065, tuple(tmp_path / n for n in names))
    with pytest.raises(DimensionMismatchError):
        load_stack(m)


def test_manifest_missing_file(tmp_path):
    m = StackManifest(0.5, 0.065, (tmp_path / "nope.pgm",))
    with pytest.raises(FileNotFoundError):
        load_stack(m)


def test_manifest_parse_errors():
    with pytest.raises(StackError):
        parse_manifest("z_step_um=0.5\nplane=a.pgm\n")
    with pytest.raises(StackError):
        parse_manifest("z_step_um=0.5\npixel_pitch_um=0.1\n")
    with pytest.raises(StackError):
        parse_manifest("z_step_um=0.5\npixel_pitch_um=0.1\ncolour=rgb\nplane=a.pgm\n")


def test_save_stack_roundtrip(tmp_path, rng):
    stack = ZStack.from_array(rng.random((3, 6, 5)), 0.5, 0.065)
    manifest = save_stack(stack, tmp_path, "fov")
    back = load_stack(read_manifest(manifest))
    assert len(back) == 3 and back.z_step == 0.5
    for a, b in zip(stack.planes, back.planes):
        assert np.array_equal(quantize(a.pixels, 16) / 65535, b.pixels)
