"""Checkpoint directory format.

A checkpoint is a directory holding ``manifest.json`` (UTF-8 JSON: format
version, profile, model dimensions, config echo) and ``params.bin``, a
sequence of named blocks::

    u16 name length | name (UTF-8) | u8 ndim | u64 shape[ndim] | f64 data (LE, row-major)
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dgd.decoder import DecoderNet, NegativeBinomialHead
from dgd.errors import CheckpointError, ProfileMismatchError
from dgd.gmm import GaussianMixture

FORMAT_NAME = "dgd-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


@dataclass
class ModelBundle:
    profile: str
    decoder: DecoderNet
    gmm: GaussianMixture
    head: NegativeBinomialHead = None
    representations: np.ndarray = None
    feature_mask: np.ndarray = None
    label_names: list = None
    config: dict = field(default_factory=dict)

    def parameter_blocks(self):
        blocks = {}
        for i, (w, b) in enumerate(zip(self.decoder.weights, self.decoder.biases)):
            blocks[f"decoder.w{i}"] = w.values
            blocks[f"decoder.b{i}"] = b.values
        blocks["gmm.means"] = self.gmm.means.values
        blocks["gmm.neg_log_var"] = self.gmm.neg_log_var.values
        blocks["gmm.coefficients"] = self.gmm.coefficients.values
        if self.head is not None:
            blocks["nb.log_dispersion"] = self.head.log_dispersion.values
        if self.representations is not None:
            blocks["representations"] = np.asarray(self.representations, dtype=np.float64)
        if self.feature_mask is not None:
            blocks["feature_mask"] = np.asarray(self.feature_mask, dtype=np.float64)
        return blocks


def _manifest(bundle, blocks):
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "profile": bundle.profile,
        "layer_sizes": bundle.decoder.layer_sizes,
        "hidden_activation": bundle.decoder.hidden_activation,
        "latent_dim": bundle.gmm.dim,
        "n_components": bundle.gmm.n_components,
        "gmm": bundle.gmm.config(),
        "label_names": bundle.label_names,
        "config": bundle.config,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
    }


def save_checkpoint(bundle, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blocks = bundle.parameter_blocks()
    manifest = _manifest(bundle, blocks)
    with open(path / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path / PARAMS, "wb") as fh:
        for name, arr in blocks.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blocks(data):
    blocks = {}
    pos = 0
    n = len(data)

    def need(k):
        if pos + k > n:
            raise CheckpointError(f"truncated parameter block at byte {pos}")

    while pos < n:
        need(2)
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(name_len + 1)
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = data[pos]
        pos += 1
        need(8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        need(8 * count)
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        blocks[name] = arr.astype(np.float64)
        pos += 8 * count
    return blocks


def load_checkpoint(path, expect_profile=None):
    path = Path(path)
    try:
        with open(path / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
        data = (path / PARAMS).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format')!r} "
            f"version {manifest.get('version')!r} (expected {FORMAT_VERSION})")
    profile = manifest["profile"]
    if expect_profile is not None and profile != expect_profile:
        raise ProfileMismatchError(
            f"checkpoint profile is {profile!r}, expected {expect_profile!r}")
    blocks = _read_blocks(data)
    declared = {b["name"]: tuple(b["shape"]) for b in manifest["blocks"]}
    if set(declared) != set(blocks):
        raise CheckpointError(
            f"block mismatch: manifest {sorted(declared)} vs file {sorted(blocks)}")
    for name, shape in declared.items():
        if blocks[name].shape != shape:
            raise CheckpointError(f"block {name}: shape {blocks[name].shape} != {shape}")

    sizes = manifest["layer_sizes"]
    decoder = DecoderNet(sizes, np.random.default_rng(0), manifest["hidden_activation"])
    for i, (w, b) in enumerate(zip(decoder.weights, decoder.biases)):
        for leaf, key in ((w, f"decoder.w{i}"), (b, f"decoder.b{i}")):
            if key not in blocks or blocks[key].shape != leaf.shape:
                raise CheckpointError(f"block {key} missing or wrong shape")
            leaf.values[...] = blocks[key]
    g = manifest["gmm"]
    gmm = GaussianMixture(g["n_components"], g["dim"], scale=g["scale"],
                          sharpness=g["sharpness"], dirichlet_alpha=g["dirichlet_alpha"],
                          sigma=g["sigma"], logvar_prior_sd=g["logvar_prior_sd"],
                          means=np.zeros((g["n_components"], g["dim"])))
    for leaf, key in ((gmm.means, "gmm.means"), (gmm.neg_log_var, "gmm.neg_log_var"),
                      (gmm.coefficients, "gmm.coefficients")):
        if key not in blocks or blocks[key].shape != leaf.shape:
            raise CheckpointError(f"block {key} missing or wrong shape")
        leaf.values[...] = blocks[key]
    head = None
    if profile == "counts":
        if "nb.log_dispersion" not in blocks:
            raise CheckpointError("counts checkpoint without nb.log_dispersion")
        head = NegativeBinomialHead(sizes[-1])
        if blocks["nb.log_dispersion"].shape != head.log_dispersion.shape:
            raise CheckpointError("nb.log_dispersion has the wrong shape")
        head.log_dispersion.values[...] = blocks["nb.log_dispersion"]
    mask = blocks.get("feature_mask")
    return ModelBundle(
        profile=profile,
        decoder=decoder,
        gmm=gmm,
        head=head,
        representations=blocks.get("representations"),
        feature_mask=None if mask is None else mask.astype(bool),
        label_names=manifest.get("label_names"),
        config=manifest.get("config", {}),
    )
