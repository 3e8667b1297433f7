import pytest

from petseg.errors import ContractError
from petseg.kvconfig import format_kv, parse_kv, read_kv


def test_parse_kv():
    text = "# header\na = 1\n\nb=two  # trailing comment\nc=x=y\n"
    assert parse_kv(text) == {"a": "1", "b": "two", "c": "x=y"}


def test_parse_kv_errors():
    with pytest.raises(ContractError, match="expected key=value"):
        parse_kv("novalue\n")
    with pytest.raises(ContractError, match="unknown key 'z'"):
        parse_kv("a=1\nz=2\n", allowed={"a"})


def test_round_trip(tmp_path):
    values = {"window": 192, "overlap": 0.5}
    path = tmp_path / "c.cfg"
    path.write_text(format_kv(values))
    assert read_kv(path) == {"window": "192", "overlap": "0.5"}
