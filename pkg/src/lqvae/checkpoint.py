"""Checkpoint container: JSON header followed by raw little-endian
arrays.  The header records kind, rebuild metadata, and per-array byte
offsets/shapes. Round trips are bit-exact."""

import json
import struct

import numpy as np

MAGIC = b"LQVC"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_container(path, kind, meta, arrays):
    """arrays: ordered dict of name -> ndarray."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)  # ascontiguousarray promotes 0-d to (1,)
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": shape,
                "dtype": dt.str,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": VERSION, "kind": kind, "meta": meta, "arrays": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path, expect_kind=None):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"not a checkpoint container: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported container version in {path}")
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected '{expect_kind}' checkpoint, found '{kind}'")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated checkpoint: {path}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return kind, header["meta"], arrays


# model / classifier round trips --------------------------------------


def save_model(path, model):
    arrays = {f"p{i:04d}": p.data for i, p in enumerate(model.all_params())}
    save_container(path, "lqvae", model.config, arrays)


def load_model(path):
    from .model.vae import build_model

    _, meta, arrays = load_container(path, expect_kind="lqvae")
    model = build_model(
        arch=meta["arch"],
        input_shape=tuple(meta["input_shape"]),
        latent_dim=meta["latent_dim"],
        eta=meta["eta"],
        lipschitz_k=meta["lipschitz_k"],
        soft_c=meta["soft_c"],
        seed=meta["seed"],
        hidden=tuple(meta["hidden"]),
    )
    params = model.all_params()
    if len(params) != len(arrays):
        raise CheckpointError("parameter count mismatch in model checkpoint")
    for i, p in enumerate(params):
        p.data[:] = arrays[f"p{i:04d}"]
    return model


def save_classifier(path, clf):
    meta = {
        "architecture": clf.spec.architecture,
        "input_shape": list(clf.spec.input_shape),
        "n_classes": clf.spec.n_classes,
        "scale": clf.spec.scale,
        "seed": clf.seed,
    }
    arrays = {f"p{i:04d}": p.data for i, p in enumerate(clf.params())}
    save_container(path, "classifier", meta, arrays)


def load_classifier(path):
    from .classifiers import ClassifierSpec, build_classifier

    _, meta, arrays = load_container(path, expect_kind="classifier")
    spec = ClassifierSpec(
        architecture=meta["architecture"],
        input_shape=tuple(meta["input_shape"]),
        n_classes=meta["n_classes"],
        scale=meta["scale"],
    )
    clf = build_classifier(spec, seed=meta["seed"])
    params = clf.params()
    if len(params) != len(arrays):
        raise CheckpointError("parameter count mismatch in classifier checkpoint")
    for i, p in enumerate(params):
        p.data[:] = arrays[f"p{i:04d}"]
    return clf


def save_adversarial_batch(path, batch, meta=None):
    from dataclasses import asdict

    meta = dict(meta or {})
    meta["config"] = batch.config
    arrays = {
        "originals": batch.originals,
        "adversarials": batch.adversarials,
        "true_labels": batch.true_labels,
        "perturbation_norms": batch.perturbation_norms,
        "attack_success": batch.attack_success.astype(np.uint8),
    }
    save_container(path, "adversarial_batch", meta, arrays)


def load_adversarial_batch(path):
    from .attacks import AdversarialBatch

    _, meta, arrays = load_container(path, expect_kind="adversarial_batch")
    return AdversarialBatch(
        originals=arrays["originals"],
        adversarials=arrays["adversarials"],
        true_labels=arrays["true_labels"].astype(np.int64),
        perturbation_norms=arrays["perturbation_norms"],
        attack_success=arrays["attack_success"].astype(bool),
        config=meta.get("config", {}),
    )
