import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspn.baseline import PatchNetConfig, build_patchnet
from mspn.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from mspn.errors import CheckpointError
from mspn.graph import MSPNConfig, build_mspn, build_variant

SMALL = MSPNConfig(channels=(3, 4, 5, 6), fc=(8, 7), n_classes=4)
NAMES = ["arabic", "latin", "thai", "hangul"]


def small_net():
    return build_mspn(SMALL, seed=5, class_names=NAMES)


def test_round_trip_is_bit_identical(tmp_path):
    net = small_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    x = np.random.default_rng(0).random((3, 32, 41))
    assert back.forward(x).logits.tobytes() == net.forward(x).logits.tobytes()
    assert back.class_names == NAMES
    assert back.config == net.config
    assert dumps(back) == path.read_bytes()


def test_round_trip_preserves_variant_and_mode():
    net = build_variant("Variant-4", SMALL.replace(ssp_mode="average", input_norm=False), seed=1)
    back = loads(dumps(net))
    assert back.config.ssp == ("ssp-2", "ssp-3")
    assert back.config.ssp_mode == "average"
    assert back.config.input_norm is False


def test_patchnet_round_trip():
    net = build_patchnet(PatchNetConfig(channels=(2, 3, 4, 5), fc=(6, 6), n_classes=3), seed=2)
    blob = dumps(net)
    assert blob[4] == 2
    back = loads(blob)
    assert back.kind == "patchnet"
    x = np.random.default_rng(1).random((2, 32, 32))
    np.testing.assert_array_equal(back.forward(x).logits, net.forward(x).logits)


def test_header_layout():
    blob = dumps(small_net())
    assert blob[:4] == MAGIC and blob[4] == 1
    assert struct.unpack("<8I", blob[5:37]) == (32, 4, 3, 4, 5, 6, 8, 7)


def test_bad_magic():
    blob = bytearray(dumps(small_net()))
    blob[0] = ord("X")
    with pytest.raises(CheckpointError, match="offset 0"):
        loads(bytes(blob))


def test_unknown_version():
    blob = bytearray(dumps(small_net()))
    blob[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        loads(bytes(blob))


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        loads(dumps(small_net()) + b"\0")


def test_header_disagreeing_with_layer_counts():
    blob = bytearray(dumps(small_net()))
    blob[13:17] = struct.pack("<I", 5)  # c1: 3 -> 5
    with pytest.raises(CheckpointError, match="conv1"):
        loads(bytes(blob))


def test_invalid_config_in_header():
    blob = bytearray(dumps(small_net()))
    blob[41:45] = struct.pack("<I", 0)  # empty ssp mask
    with pytest.raises(CheckpointError, match="configuration"):
        loads(bytes(blob))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_every_truncation_is_rejected(data):
    blob = dumps(small_net())
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(CheckpointError):
        loads(blob[:cut])


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")
