import struct

import numpy as np
import pytest
import torch

from ufem import tensorio


def _tensors():
    g = torch.Generator().manual_seed(0)
    return {"a.weight": torch.randn(3, 4, generator=g), "a.bias": torch.randn(4, generator=g),
            "scalar": torch.tensor(2.5)}


def test_roundtrip_bitwise(tmp_path):
    t = _tensors()
    p = tensorio.save(tmp_path / "x.ufnt", t, "toy", meta={"k": [1, 2]})
    back, manifest = tensorio.load(p)
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == torch.float32
        assert torch.equal(back[k], t[k])
    assert manifest["architecture_id"] == "toy"
    assert manifest["meta"] == {"k": [1, 2]}


def test_encode_is_deterministic():
    assert tensorio.encode(_tensors(), "toy") == tensorio.encode(_tensors(), "toy")


@pytest.mark.parametrize("cut", [4, 12, 40, -1])
def test_truncated_file_rejected(cut):
    blob = tensorio.encode(_tensors(), "toy")
    with pytest.raises(tensorio.ContainerError):
        tensorio.decode(blob[:cut])


def test_payload_corruption_detected():
    blob = bytearray(tensorio.encode(_tensors(), "toy"))
    blob[-3] ^= 0xFF
    with pytest.raises(tensorio.ContainerError, match="digest"):
        tensorio.decode(bytes(blob))


def test_bad_magic():
    blob = tensorio.encode(_tensors(), "toy")
    with pytest.raises(tensorio.ContainerError):
        tensorio.decode(b"NOTMAGIC" + blob[8:])


def test_big_endian_layout_reads_back_identically():
    t = _tensors()
    little = tensorio.decode(tensorio.encode(t, "toy", byteorder="little"))[0]
    big_blob = tensorio.encode(t, "toy", byteorder="big")
    big, manifest = tensorio.decode(big_blob)
    assert manifest["byteorder"] == "big"
    for k in t:
        assert torch.equal(big[k], little[k])
        assert big[k].numpy().dtype.byteorder in ("=", "<", "|")


def test_layout_matches_documentation():
    blob = tensorio.encode({"w": torch.arange(3, dtype=torch.float32)}, "toy")
    magic, n = struct.unpack_from("<8sQ", blob)
    assert magic == tensorio.MAGIC
    payload = blob[16 + n:]
    assert np.frombuffer(payload, "<f4").tolist() == [0.0, 1.0, 2.0]


def test_state_digest_sensitive_to_values_and_names():
    t = _tensors()
    d = tensorio.state_digest(t)
    t2 = dict(t)
    t2["scalar"] = torch.tensor(2.5000002)
    assert tensorio.state_digest(t2) != d
    t3 = {("b" + k[1:] if k.startswith("a") else k): v for k, v in t.items()}
    assert tensorio.state_digest(t3) != d
    assert tensorio.state_digest(_tensors()) == d
