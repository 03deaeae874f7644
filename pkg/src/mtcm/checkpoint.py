"""Checkpoints: a JSON manifest plus a raw little-endian float64 payload."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import model as mm
from . import pipeline as pl
from . import synth

FORMAT = "mtcm-checkpoint"
VERSION = 1


def _group_of(name: str) -> str:
    return name.split(".", 1)[0]


def _stem(path) -> Path:
    """``run/final``, ``run/final.json`` and ``run/final.bin`` all name one checkpoint."""
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def _with(path, suffix) -> Path:
    stem = _stem(path)
    return stem.parent / (stem.name + suffix)


def manifest_for(model: pl.Model, provenance=None, payload="weights.bin") -> dict:
    provenance = provenance or {}
    params = []
    for name, t in model.named_parameters().items():
        group = _group_of(name)
        params.append({"name": name, "module": group, "shape": list(t.shape),
                       "stage": provenance.get(group)})
    cfg = dataclasses.asdict(model.cfg)
    return {
        "format": FORMAT, "version": VERSION,
        "model_config": cfg,
        "codebook_config": dataclasses.asdict(model.codebook.cfg),
        "params": params,
        "payload": payload,
        "payload_bytes": 8 * sum(int(np.prod(p["shape"])) for p in params),
    }


def save_checkpoint(model: pl.Model, path, provenance=None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = _stem(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _with(path, ".bin")
    manifest = manifest_for(model, provenance, payload.name)
    with open(payload, "wb") as f:
        for t in model.named_parameters().values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    mpath = _with(path, ".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def read_manifest(path) -> dict:
    m = json.loads(_with(path, ".json").read_text())
    if m.get("format") != FORMAT:
        raise ValueError(f"{path} is not a checkpoint manifest")
    return m


def load_checkpoint(path) -> tuple:
    """Returns (model, manifest)."""
    m = read_manifest(path)
    raw = _with(path, ".json").parent.joinpath(m["payload"]).read_bytes()
    if len(raw) != m["payload_bytes"]:
        raise ValueError(f"payload has {len(raw)} bytes, manifest says {m['payload_bytes']}")
    cfg = dict(m["model_config"])
    cfg["mtcm"] = mm.MtcmConfig(**cfg["mtcm"])
    model = pl.Model(pl.ModelConfig(**cfg), synth.Codebook(synth.CodebookConfig(**m["codebook_config"])))
    named = model.named_parameters()
    expected = [p["name"] for p in m["params"]]
    if list(named) != expected:
        raise ValueError("checkpoint parameter list does not match the model layout")
    values = np.frombuffer(raw, dtype="<f8")
    pos = 0
    for p in m["params"]:
        n = int(np.prod(p["shape"]))
        named[p["name"]].data = values[pos:pos + n].reshape(p["shape"]).astype(np.float64)
        pos += n
    return model, m
