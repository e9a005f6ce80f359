import struct

import numpy as np
import pytest

from codanets import tensor as tn
from codanets.errors import ParseError
from codanets.serialization import MAGIC, dumps, load_model, loads, save_model

from test_net import randomise_bias, tiny_net


@pytest.mark.parametrize("encoding,stem", [("six", 0), ("embed", 0), ("six", 1)])
@pytest.mark.parametrize("kind", ["L2", "WB"])
def test_round_trip_is_bit_identical(kind, encoding, stem, rng, tmp_path):
    net = tiny_net(kind, encoding, stem, seed=3)
    randomise_bias(net, rng)
    if encoding == "embed":
        net.encoding.running_mean = rng.normal(size=net.encoding.running_mean.shape)
        net.encoding.running_var = rng.uniform(0.5, 2, size=net.encoding.running_var.shape)
    images = rng.uniform(size=(3, 1, 6, 6))
    back = load_model(save_model(net, tmp_path / "m.coda"))
    assert np.array_equal(back.predict(images), net.predict(images))
    assert dumps(back) == dumps(net)
    assert back.config() == net.config()


def test_float32_tensors_keep_their_dtype(rng):
    with tn.precision("f32"):
        net = tiny_net(seed=1)
        back = loads(dumps(net))
    assert back.layers[0].bank.A.data.dtype == np.float32


def test_header_fields():
    raw = dumps(tiny_net())
    assert raw[:8] == MAGIC
    version, reserved, arch_len = struct.unpack("<HHI", raw[8:16])
    assert (version, reserved) == (1, 0)
    assert raw[16:16 + arch_len].startswith(b"{")


def test_malformed_files():
    raw = dumps(tiny_net())
    with pytest.raises(ParseError, match="magic") as err:
        loads(b"NOTCODA\x00" + raw[8:])
    assert err.value.offset == 0
    with pytest.raises(ParseError, match="version"):
        loads(raw[:8] + struct.pack("<H", 9) + raw[10:])
    with pytest.raises(ParseError) as err:
        loads(raw[:-3])
    assert err.value.offset is not None
    with pytest.raises(ParseError, match="trailing"):
        loads(raw + b"\x00")


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "absent.coda")
