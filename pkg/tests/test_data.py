import numpy as np
import pytest
from PIL import Image

from foresee.data import (DatasetSplit, FrameSequence, _split_sizes, frame_name, gamma_correct,
                          load_dataset, load_frame_directory, normalize_frame, preprocess, quantize,
                          read_manifest, resize_bilinear, save_frames, split_dataset, window_count,
                          window_sequences, write_manifest)
from foresee.errors import ContractError, FormatError, PathError


def _video(n, name="v", shape=(2, 2, 3), rng=None):
    rng = rng or np.random.default_rng(0)
    return FrameSequence(rng.uniform(0, 1, (n, int(np.prod(shape)))), source_id=name, image_shape=shape)


def test_frame_sequence_is_read_only_and_bounded():
    v = _video(3)
    with pytest.raises(ValueError):
        v.frames[0, 0] = 0.5
    with pytest.raises(ContractError):
        FrameSequence(np.full((2, 12), 1.5), image_shape=(2, 2, 3))
    with pytest.raises(ContractError):
        FrameSequence(np.zeros((2, 11)), image_shape=(2, 2, 3))


def test_normalize_and_gamma():
    x = normalize_frame(np.array([0, 51, 255], dtype=np.uint8))
    np.testing.assert_allclose(x, [0.0, 0.2, 1.0], atol=1e-7)
    np.testing.assert_allclose(gamma_correct(np.array([0.25]), 0.5), [0.5])
    np.testing.assert_array_equal(gamma_correct(x, 1.0), x)
    with pytest.raises(ContractError):
        gamma_correct(x, 0.0)


def test_resize_bilinear_identity_and_corners():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (5, 7, 3))
    np.testing.assert_array_equal(resize_bilinear(img, (5, 7)), img)
    out = resize_bilinear(img, (9, 4))
    assert out.shape == (9, 4, 3)
    for (y, x), (Y, X) in [((0, 0), (0, 0)), ((4, 6), (8, 3)), ((0, 6), (0, 3))]:
        np.testing.assert_allclose(out[Y, X], img[y, x], atol=1e-12)


def test_resize_bilinear_midpoint():
    img = np.array([[[0.0], [1.0]]])
    np.testing.assert_allclose(resize_bilinear(img, (1, 3))[0, :, 0], [0.0, 0.5, 1.0])


def test_preprocess_grayscale_and_flatten():
    raw = np.full((4, 4), 255, dtype=np.uint8)
    out = preprocess(raw, gamma=None, size=(2, 2))
    assert out.shape == (12,) and out.dtype == np.float32
    np.testing.assert_array_equal(out, 1.0)


def test_quantize_rounds_half_up():
    np.testing.assert_array_equal(quantize(np.array([0.5 / 255, 1.49 / 255, -1.0, 2.0])), [1, 1, 0, 255])


def test_windows_cover_video():
    v = _video(12)
    wins = window_sequences(v, 4, 2)
    assert len(wins) == window_count(12, 4, 2) == 7
    w = wins[3]
    np.testing.assert_array_equal(w.inputs, v.frames[3:7])
    np.testing.assert_array_equal(w.targets, v.frames[7:9])
    np.testing.assert_array_equal(w.synced_targets, v.frames[4:8])
    assert w.target_index == 8
    with pytest.raises(ContractError):
        window_sequences(v, 11, 2)


@pytest.mark.parametrize("n,ratios,expected", [
    (20, (55, 22, 24), [11, 4, 5]),
    (3, (55, 22, 24), [1, 1, 1]),
    (10, (1, 1, 1), [4, 3, 3]),
    (5, (1, 0, 0), [5, 0, 0]),
])
def test_split_sizes(n, ratios, expected):
    assert _split_sizes(n, ratios) == expected


def test_split_sizes_invalid():
    with pytest.raises(ContractError):
        _split_sizes(2, (1, 1, 1))
    with pytest.raises(ContractError):
        _split_sizes(5, (0, 0, 0))


def test_split_dataset_seeded_and_disjoint():
    vids = [_video(3, f"v{i}") for i in range(9)]
    a = split_dataset(vids, seed=3)
    b = split_dataset(vids, seed=3)
    assert a.assignment() == b.assignment()
    ids = [v for _, v in a.assignment()]
    assert sorted(ids) == sorted(v.source_id for v in vids)
    with pytest.raises(ContractError):
        DatasetSplit(train=[vids[0]], test=[vids[0]])


def test_save_load_roundtrip_within_quantization(tmp_path):
    v = _video(4, "clip", shape=(6, 5, 3))
    save_frames(v, tmp_path / "clip")
    back = load_frame_directory(tmp_path / "clip", gamma=None, size=(6, 5))
    assert back.source_id == "clip" and len(back) == 4
    assert np.abs(back.frames - v.frames).max() <= 0.5 / 255 + 1e-6


def test_quantized_frames_roundtrip_exactly(tmp_path):
    q = quantize(np.random.default_rng(1).uniform(0, 1, (3, 4 * 4 * 3))).astype(np.float32) / 255
    v = FrameSequence(q, source_id="q", image_shape=(4, 4, 3))
    save_frames(v, tmp_path / "q")
    np.testing.assert_array_equal(load_frame_directory(tmp_path / "q", gamma=None, size=(4, 4)).frames, v.frames)


def test_frame_directory_errors(tmp_path):
    with pytest.raises(PathError):
        load_frame_directory(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError, match="no frame_"):
        load_frame_directory(tmp_path / "empty")
    gap = tmp_path / "gap"
    gap.mkdir()
    for i in (0, 2):
        Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(gap / frame_name(i))
    with pytest.raises(FormatError, match="frame_000001"):
        load_frame_directory(gap)
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / frame_name(0)).write_bytes(b"not a png")
    with pytest.raises(FormatError, match="cannot decode"):
        load_frame_directory(bad)


def test_manifest_roundtrip(tmp_path):
    vids = [_video(2, f"v{i}", shape=(4, 4, 3)) for i in range(3)]
    split = DatasetSplit(train=[vids[0]], val=[vids[1]], test=[vids[2]])
    for v in vids:
        save_frames(v, tmp_path / v.source_id)
    write_manifest(tmp_path, split)
    assert read_manifest(tmp_path) == [("train", "v0"), ("val", "v1"), ("test", "v2")]
    loaded = load_dataset(tmp_path, gamma=None, size=(4, 4))
    assert [v.source_id for v in loaded.test] == ["v2"]


def test_manifest_malformed(tmp_path):
    (tmp_path / "manifest.tsv").write_text("train v0\n")
    with pytest.raises(FormatError, match="manifest.tsv:1"):
        read_manifest(tmp_path)
    with pytest.raises(PathError):
        read_manifest(tmp_path / "nowhere")
