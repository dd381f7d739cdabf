"""Checksummed containers: checkpoints, day-partitioned dataset files, manifests.

Checkpoints are JSON with float64 arrays base64-packed little-endian, so
round-trips are bit-exact. Every container carries a sha256 over its payload
and refuses to load if a byte was tampered with.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os

import numpy as np

CHECKPOINT_FORMAT = "confrank-checkpoint"
MANIFEST_NAME = "manifest.json"


class CheckpointError(ValueError):
    """Corrupt container, checksum mismatch, or wrong config/schema hash."""


def pack_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    kind = {"f": "f8", "i": "i8"}[a.dtype.kind]
    a = a.astype("<" + kind, copy=False)
    return {
        "shape": list(a.shape),
        "dtype": kind,
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def unpack_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<" + d["dtype"]).reshape(d["shape"])
    return a.astype(d["dtype"])


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_container(path, payload: dict, fmt: str = CHECKPOINT_FORMAT):
    canon = _canonical(payload)
    doc = {
        "format": fmt,
        "version": 1,
        "sha256": hashlib.sha256(canon.encode()).hexdigest(),
        "payload": payload,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_container(path, fmt: str = CHECKPOINT_FORMAT) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read container {path}: {e}") from e
    if doc.get("format") != fmt or doc.get("version") != 1:
        raise CheckpointError(f"{path} is not a {fmt} v1 container")
    canon = _canonical(doc["payload"])
    if hashlib.sha256(canon.encode()).hexdigest() != doc.get("sha256"):
        raise CheckpointError(f"checksum mismatch in {path}")
    return doc["payload"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- dataset files ------------------------------------------------------


def day_filename(day: int) -> str:
    return f"day_{day:03d}.tsv"


def write_day_file(path, log, schema_hash: str):
    """One event per line: day, user, item, features (schema order), X,
    labels, then the logged generative conformity/relevance terms."""
    n_feat = log.features.shape[1]
    n_tasks = log.labels.shape[1]
    with open(path, "w") as fh:
        fh.write(f"# schema_hash={schema_hash}\tn_features={n_feat}\tn_tasks={n_tasks}\n")
        for i in range(log.n_events):
            row = [str(log.day), str(log.user_ids[i]), str(log.item_ids[i])]
            row += [f"{v:.17g}" for v in log.features[i]]
            row.append(f"{log.x_scalar[i]:.17g}")
            row += [str(v) for v in log.labels[i]]
            row.append(f"{log.conformity_component[i]:.17g}")
            row.append(f"{log.relevance_component[i]:.17g}")
            fh.write("\t".join(row) + "\n")


def read_day_file(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip()
        meta = dict(kv.split("=") for kv in header.lstrip("# ").split("\t"))
        n_feat, n_tasks = int(meta["n_features"]), int(meta["n_tasks"])
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    if rows:
        mat = np.array(rows, dtype=np.float64)
    else:
        mat = np.zeros((0, 3 + n_feat + 1 + n_tasks + 2))
    f0 = 3
    return {
        "schema_hash": meta["schema_hash"],
        "day": int(mat[0, 0]) if len(rows) else None,
        "user_ids": mat[:, 1].astype(np.int64),
        "item_ids": mat[:, 2].astype(np.int64),
        "features": mat[:, f0 : f0 + n_feat],
        "x": mat[:, f0 + n_feat],
        "labels": mat[:, f0 + n_feat + 1 : f0 + n_feat + 1 + n_tasks].astype(np.int64),
        "conformity_component": mat[:, -2],
        "relevance_component": mat[:, -1],
    }


def write_manifest(out_dir, config_hash: str, schema_hash: str, filenames):
    payload = {
        "config_hash": config_hash,
        "schema_hash": schema_hash,
        "files": {name: file_sha256(os.path.join(out_dir, name)) for name in filenames},
    }
    save_container(os.path.join(out_dir, MANIFEST_NAME), payload, fmt="confrank-manifest")


def load_manifest(out_dir, verify: bool = True) -> dict:
    payload = load_container(os.path.join(out_dir, MANIFEST_NAME), fmt="confrank-manifest")
    if verify:
        for name, digest in payload["files"].items():
            path = os.path.join(out_dir, name)
            if not os.path.exists(path) or file_sha256(path) != digest:
                raise CheckpointError(f"dataset file {name} missing or tampered")
    return payload


def pack_world(world) -> dict:
    arrays = {
        "conformity": world.conformity, "interests": world.interests,
        "activity": world.activity, "age_bucket": world.age_bucket,
        "popularity": world.popularity, "topics": world.topics,
        "quality": world.quality, "birth_day": world.birth_day,
        "content_type": world.content_type, "z_log_pop": world.z_log_pop,
        "top_decile": world.top_decile.astype(np.int64),
    }
    return {name: pack_array(a) for name, a in arrays.items()}
