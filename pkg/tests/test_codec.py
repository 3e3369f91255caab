from enum import Enum

import pytest

from pvtn.codec import decode, encode


class Color(str, Enum):
    RED = "red"


def test_nested_value_survives_encoding():
    value = {"a": 1, "b": [b"\x00\x01", "text", None, True, False], "c": {"d": -5}}
    assert decode(encode(value)) == value


def test_mapping_order_changes_bytes():
    assert encode({"a": 1, "b": 2}) != encode({"b": 2, "a": 1})


def test_enum_encodes_as_value():
    assert encode(Color.RED) == encode("red")


def test_bool_is_not_int():
    assert encode(True) != encode(1)


@pytest.mark.parametrize("value", [1.5, {1: "x"}, object()])
def test_unsupported_values(value):
    with pytest.raises(TypeError):
        encode(value)


@pytest.mark.parametrize("data", [b"", b"I\x00\x00", encode(1)[:-1], encode(1) + b"\x00", b"Z\x00\x00\x00\x00"])
def test_malformed_input(data):
    with pytest.raises(ValueError):
        decode(data)
