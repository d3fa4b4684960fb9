import json

import numpy as np
import pytest

from dgd.checkpoint import (FORMAT_VERSION, ModelBundle, load_checkpoint, save_checkpoint)
from dgd.data import CountMatrix
from dgd.decoder import DecoderNet, NegativeBinomialHead
from dgd.errors import CheckpointError, ProfileMismatchError
from dgd.gmm import GaussianMixture
from dgd.metrics import evaluate


def make_bundle(rng, profile="counts"):
    dec = DecoderNet([2, 5, 4], rng)
    gmm = GaussianMixture(3, 2, rng, sigma=0.3)
    gmm.coefficients.values[...] = rng.normal(size=3)
    head = NegativeBinomialHead(4, 0.7) if profile == "counts" else None
    return ModelBundle(profile, dec, gmm, head, representations=rng.normal(size=(6, 2)),
                       feature_mask=np.array([True, True, False, True, True]),
                       label_names=["a", "b"], config={"epochs": 3})


def test_round_trip_is_bitwise(tmp_path, rng):
    b = make_bundle(rng)
    save_checkpoint(b, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    for (k, v), (k2, v2) in zip(b.parameter_blocks().items(), back.parameter_blocks().items()):
        assert k == k2
        assert v.tobytes() == v2.tobytes()
    assert back.label_names == ["a", "b"] and back.config == {"epochs": 3}
    assert back.gmm.config() == b.gmm.config()


def test_round_trip_preserves_evaluate(tmp_path, rng):
    b = make_bundle(rng)
    counts = rng.integers(1, 9, size=(6, 5))
    counts[:, 2] = 0
    ds = CountMatrix(counts, labels=[0, 1, 0, 1, 1, 0])
    save_checkpoint(b, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    r1 = evaluate(b, ds, b.representations, seconds=0.0)
    r2 = evaluate(back, ds, back.representations, seconds=0.0)
    assert r1 == r2


def test_binary_bundle_has_no_head(tmp_path, rng):
    save_checkpoint(make_bundle(rng, "binary"), tmp_path / "ck")
    assert load_checkpoint(tmp_path / "ck").head is None


def test_profile_mismatch(tmp_path, rng):
    save_checkpoint(make_bundle(rng), tmp_path / "ck")
    with pytest.raises(ProfileMismatchError):
        load_checkpoint(tmp_path / "ck", expect_profile="binary")


def test_truncated_params(tmp_path, rng):
    save_checkpoint(make_bundle(rng), tmp_path / "ck")
    p = tmp_path / "ck" / "params.bin"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "ck")


def test_corrupted_name_length(tmp_path, rng):
    save_checkpoint(make_bundle(rng), tmp_path / "ck")
    p = tmp_path / "ck" / "params.bin"
    data = bytearray(p.read_bytes())
    data[0:2] = (60000).to_bytes(2, "little")
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_version_mismatch(tmp_path, rng):
    save_checkpoint(make_bundle(rng), tmp_path / "ck")
    m = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(m.read_text())
    manifest["version"] = FORMAT_VERSION + 1
    m.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_shape_mismatch(tmp_path, rng):
    save_checkpoint(make_bundle(rng), tmp_path / "ck")
    m = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(m.read_text())
    manifest["blocks"][0]["shape"] = [9, 9]
    m.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "ck")


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_block_layout(tmp_path, rng):
    b = make_bundle(rng)
    save_checkpoint(b, tmp_path / "ck")
    data = (tmp_path / "ck" / "params.bin").read_bytes()
    name_len = int.from_bytes(data[:2], "little")
    assert data[2:2 + name_len] == b"decoder.w0"
    assert data[2 + name_len] == 2
    pos = 3 + name_len
    assert int.from_bytes(data[pos:pos + 8], "little") == 2
    assert int.from_bytes(data[pos + 8:pos + 16], "little") == 5
    first = np.frombuffer(data, "<f8", count=10, offset=pos + 16)
    np.testing.assert_array_equal(first, b.decoder.weights[0].values.ravel())
