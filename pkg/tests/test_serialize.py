import json
import struct

import numpy as np
import pytest

from lmnet.errors import ContainerError, ShapeError
from lmnet.model import LmNet, tiny_config
from lmnet.reparam import fuse_model
from lmnet.serialize import (
    MAGIC,
    decode,
    encode,
    load_weights,
    read_container,
    save_weights,
)
from lmnet.tensor import Tensor

CFG = tiny_config(input_size=(16, 16))


@pytest.fixture
def saved(tmp_path):
    net = LmNet(CFG, rng=1).eval()
    path = tmp_path / "w.lmw"
    save_weights(net, path)
    return net, path


def test_round_trip_is_byte_identical(saved, tmp_path):
    net, path = saved
    again = tmp_path / "again.lmw"
    save_weights(load_weights(path), again)
    assert path.read_bytes() == again.read_bytes()


def test_loaded_model_matches(saved):
    net, path = saved
    loaded = load_weights(path)
    a, b = net.state_dict(), loaded.state_dict()
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.config == CFG and not loaded.training


def test_layout(saved):
    _, path = saved
    buf = path.read_bytes()
    assert buf[:4] == MAGIC
    (hlen,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12 : 12 + hlen])
    assert header["fused"] is False and header["dtype"] == "f32" and header["version"] == 1
    ent = header["tensors"]["head.weight"]
    body = buf[12 + hlen :]
    arr = np.frombuffer(body[ent["offset"] : ent["offset"] + ent["nbytes"]], "<f4").reshape(ent["shape"])
    assert np.array_equal(arr, load_weights(path).head.weight.data)


def test_fused_flag_round_trips(saved, tmp_path):
    net, _ = saved
    p = tmp_path / "f.lmw"
    save_weights(fuse_model(net), p)
    header, _ = read_container(p)
    assert header["fused"] is True
    m = load_weights(p)
    assert m.fused
    p2 = tmp_path / "f2.lmw"
    save_weights(m, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_f64_round_trip(tmp_path):
    net = LmNet(CFG, rng=2).to(np.float64).eval()
    p = tmp_path / "d.lmw"
    save_weights(net, p)
    m = load_weights(p)
    assert m.dtype == np.float64
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)))
    assert np.array_equal(net(x).data, m(x).data)


def test_wrong_num_classes_names_tensor(saved):
    _, path = saved
    with pytest.raises(ShapeError, match="head.weight"):
        load_weights(path, config=tiny_config(input_size=(16, 16), num_classes=3))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b[:10],
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:12] + b"{" * 5 + b[17:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
    ],
    ids=["truncated-header", "magic", "corrupt-json", "truncated-blob", "trailing"],
)
def test_corrupt_containers_rejected(saved, mutate):
    _, path = saved
    with pytest.raises(ContainerError):
        decode(mutate(path.read_bytes()))


def test_header_field_checks():
    state = {"a": np.zeros(2, np.float32)}
    good = encode(state, {}, False, np.float32)
    (hlen,) = struct.unpack("<Q", good[4:12])
    header = json.loads(good[12 : 12 + hlen])
    for change in ({"version": 2}, {"dtype": "f16"}, {"tensors": {"a": {"shape": [3], "offset": 0, "nbytes": 8}}}):
        h = dict(header, **change)
        hb = json.dumps(h).encode()
        with pytest.raises(ContainerError):
            decode(MAGIC + struct.pack("<Q", len(hb)) + hb + good[12 + hlen :])
    h = {k: v for k, v in header.items() if k != "config"}
    hb = json.dumps(h).encode()
    with pytest.raises(ContainerError, match="missing"):
        decode(MAGIC + struct.pack("<Q", len(hb)) + hb + good[12 + hlen :])


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_weights(tmp_path / "nope.lmw")
