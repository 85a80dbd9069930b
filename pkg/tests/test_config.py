import pytest

from foresee.config import convert, parse_bool, parse_kv_text, read_kv_file, typed_values, write_kv_file
from foresee.errors import ParseError, PathError
from foresee.synthetic import SyntheticSceneConfig
from foresee.training import TrainConfig


def test_parse_kv_text_comments_and_dashes():
    entries = parse_kv_text("# header\nnum-videos = 4\n\nseed=2  # trailing\n")
    assert entries == {"num_videos": ("4", 2), "seed": ("2", 4)}


def test_parse_error_reports_line():
    with pytest.raises(ParseError, match="line 2"):
        parse_kv_text("a = 1\nnot a pair\n")


def test_typed_values_and_unknown_key():
    cfg = typed_values(SyntheticSceneConfig, parse_kv_text("num_videos = 3\nshapes = rect\nsplit_ratios = 1:1:2\n"))
    assert cfg == {"num_videos": 3, "shapes": ("rect",), "split_ratios": (1.0, 1.0, 2.0)}
    with pytest.raises(ParseError, match="line 1.*unknown key 'bogus'"):
        typed_values(SyntheticSceneConfig, parse_kv_text("bogus = 1\n"))
    with pytest.raises(ParseError, match="line 2.*num_videos"):
        typed_values(SyntheticSceneConfig, parse_kv_text("seed = 1\nnum_videos = many\n"))


def test_optional_and_bool_conversion():
    vals = typed_values(TrainConfig, parse_kv_text("max_steps = none\nonline_input_averaging = off\n"))
    assert vals == {"max_steps": None, "online_input_averaging": False}
    assert convert("7", "int | None") == 7
    assert parse_bool("YES") is True
    with pytest.raises(ValueError):
        parse_bool("maybe")


def test_write_read_roundtrip(tmp_path):
    path = write_kv_file(tmp_path / "c.cfg", {"a": 1, "b": True, "c": (1.0, 2.0), "d": None})
    assert {k: v for k, (v, _) in read_kv_file(path).items()} == {"a": "1", "b": "true", "c": "1.0:2.0", "d": "none"}
    with pytest.raises(PathError):
        read_kv_file(tmp_path / "missing.cfg")
