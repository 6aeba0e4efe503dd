import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planfl import codec
from planfl.aggregation import AggregatorParams, init_aggregator
from planfl.codec import MsgType
from planfl.encoder import PromptSet
from planfl.errors import ProtocolError
from planfl.tensor import Tensor


def _random_promptset(r, blocks, m, dt, dv):
    return PromptSet([Tensor(r.normal(size=(m, dt))) for _ in range(blocks)],
                     [Tensor(r.normal(size=(m, dv))) for _ in range(blocks)])


def _bits(tensors):
    return {k: (v.data if isinstance(v, Tensor) else v).tobytes() for k, v in tensors.items()}


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(0, 5), st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_promptset_round_trip(blocks, m, dt, dv, seed):
    ps = _random_promptset(np.random.default_rng(seed), blocks, m, dt, dv)
    kind, out = codec.decode(codec.encode(MsgType.GLOBAL_PROMPTS, ps.tensors()))
    assert kind == MsgType.GLOBAL_PROMPTS
    assert _bits(out) == _bits(ps.tensors())
    assert PromptSet.from_tensors(out).content_hash() == ps.content_hash()


def test_empty_prompt_rows_round_trip():
    ps = PromptSet([Tensor(np.zeros((0, 8)))], [Tensor(np.zeros((0, 12)))])
    _, out = codec.decode(codec.encode(MsgType.GLOBAL_PROMPTS, ps.tensors()))
    assert out["text.0"].shape == (0, 8) and out["visual.0"].shape == (0, 12)


def test_special_values_survive():
    x = np.array([np.inf, -np.inf, -0.0, 5e-324, np.nan])
    _, out = codec.decode(codec.encode(MsgType.CHECKPOINT, {"x": x}))
    assert out["x"].tobytes() == x.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_aggregator_round_trip(blocks, m, d, seed):
    agg = init_aggregator("visual", blocks, m, d, seed, fa_out_std=0.1)
    _, out = codec.decode(codec.encode(MsgType.AGGREGATORS, agg.tensors()))
    assert _bits(out) == _bits(agg.tensors())
    assert AggregatorParams.from_tensors(out, "visual").content_hash() == agg.content_hash()


def test_frame_size_arithmetic():
    tensors = {"text.0": np.zeros((2, 8)), "ab": np.zeros(3), "s": np.zeros(())}
    frame = codec.encode(MsgType.LOCAL_PROMPTS, tensors)
    records = (2 + 6 + 1 + 4 * 2 + 8 * 16) + (2 + 2 + 1 + 4 + 8 * 3) + (2 + 1 + 1 + 0 + 8)
    assert len(frame) == 4 + 1 + 4 + records == codec.frame_size(tensors)
    assert codec.data_bytes(tensors) == 8 * (16 + 3 + 1)


def test_frame_layout():
    frame = codec.encode(MsgType.AGGREGATORS, {"w": np.array([[1.5, -2.0]])})
    assert frame[:4] == b"PLN1" and frame[4] == MsgType.AGGREGATORS
    (body_len,) = struct.unpack_from("<I", frame, 5)
    assert body_len == len(frame) - 9
    assert struct.unpack_from("<H", frame, 9) == (1,)
    assert frame[11:12] == b"w" and frame[12] == 2
    assert struct.unpack_from("<II", frame, 13) == (1, 2)
    assert struct.unpack_from("<2d", frame, 21) == (1.5, -2.0)


def test_every_truncation_is_rejected():
    frame = codec.encode(MsgType.GLOBAL_PROMPTS, {"text.0": np.arange(6.0).reshape(2, 3), "visual.0": np.ones(4)})
    for cut in range(len(frame)):
        with pytest.raises(ProtocolError, match="offset"):
            codec.decode(frame[:cut])


def test_bad_magic_and_trailing_bytes():
    frame = codec.encode(MsgType.GLOBAL_PROMPTS, {"x": np.ones(2)})
    with pytest.raises(ProtocolError, match="magic.*offset 0"):
        codec.decode(b"XXXX" + frame[4:])
    with pytest.raises(ProtocolError, match="trailing"):
        codec.decode(frame + b"\0")


def test_unknown_type_and_duplicate_names():
    frame = bytearray(codec.encode(MsgType.GLOBAL_PROMPTS, {"x": np.ones(1)}))
    frame[4] = 200
    with pytest.raises(ProtocolError, match="type"):
        codec.decode(bytes(frame))
    body = codec.encode(MsgType.GLOBAL_PROMPTS, {"x": np.ones(1)})[9:]
    doubled = b"PLN1" + bytes([1]) + struct.pack("<I", 2 * len(body)) + body + body
    with pytest.raises(ProtocolError, match="duplicate"):
        codec.decode(doubled)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.arange(4.0), "b.c": np.eye(2)}
    path = tmp_path / "x.plnc"
    n = codec.save_checkpoint(path, tensors, {"kind": "test", "round": 3})
    assert path.stat().st_size == n
    meta, out = codec.load_checkpoint(path)
    assert meta == {"kind": "test", "round": 3}
    assert _bits(out) == _bits(tensors)


def test_corrupt_checkpoints(tmp_path):
    path = tmp_path / "x.plnc"
    codec.save_checkpoint(path, {"a": np.ones(3)}, {"kind": "t"})
    blob = path.read_bytes()
    bad = tmp_path / "bad.plnc"
    for payload in (b"nope", blob[:-3], b"PLNC" + struct.pack("<HI", 99, 0), blob[:12]):
        bad.write_bytes(payload)
        with pytest.raises(ProtocolError):
            codec.load_checkpoint(bad)
    with pytest.raises(ProtocolError):
        codec.load_checkpoint(tmp_path / "missing.plnc")
