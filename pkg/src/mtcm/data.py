"""Scene datasets and their on-disk format.

A split file is a sequence of records, each prefixed by its byte length as a
little-endian uint32. A record holds:

    uint32 header length, header JSON (utf-8)
    per object: uint32 run count, then that many uint32 run lengths
        (run-length code of the object's [T*G*G] bitmap, starting with a run of zeros)
    identity map, int32 [T*N]

All integers are little-endian. ``manifest.json`` next to the split files
records the seed, configs and counts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import synth

FORMAT = "mtcm-scenes"
VERSION = 1
EVAL_SEED_OFFSET = 1_000_000


def rle_encode(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(bits.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [bits.size]])
    runs = np.diff(bounds)
    if bits.size and bits[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype("<u4")


def rle_decode(runs, size) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    values = np.arange(len(runs)) % 2 == 1
    out = np.repeat(values, runs)
    if out.size != size:
        raise ValueError(f"run lengths cover {out.size} cells, expected {size}")
    return out


def encode_scene(scene: synth.Scene) -> bytes:
    header = json.dumps(scene.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(header)), header]
    for mask in scene.object_masks():
        runs = rle_encode(mask)
        parts.append(struct.pack("<I", len(runs)))
        parts.append(runs.tobytes())
    parts.append(np.ascontiguousarray(scene.identity, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_scene(buf: bytes) -> synth.Scene:
    (hlen,) = struct.unpack_from("<I", buf, 0)
    h = json.loads(buf[4:4 + hlen].decode())
    pos = 4 + hlen
    k, t_len, g, n = h["K"], h["T"], h["G"], h["N"]
    labels = np.zeros((t_len, g, g), dtype=np.int8)
    for i in range(k):
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        runs = np.frombuffer(buf, dtype="<u4", count=count, offset=pos)
        pos += 4 * count
        labels[rle_decode(runs, t_len * g * g).reshape(t_len, g, g)] = i + 1
    identity = np.frombuffer(buf, dtype="<i4", count=t_len * n, offset=pos).reshape(t_len, n)
    if pos + 4 * t_len * n != len(buf):
        raise ValueError("trailing bytes in scene record")
    return synth.Scene(
        seed=h["seed"], grid=g, frames=t_len, queries=n, target=h["target"],
        appearance=h["appearance"], motion=h["motion"], radius=h["radius"],
        centers=np.array(h["centers"], dtype=np.float64).reshape(k, t_len, 2),
        present=np.array(h["present"], dtype=bool).reshape(k, t_len),
        labels=labels, identity=identity.astype(np.int64),
    )


def write_scenes(path, scenes) -> str:
    """Write a split file; returns its sha256."""
    h = hashlib.sha256()
    with open(path, "wb") as f:
        for sc in scenes:
            rec = encode_scene(sc)
            chunk = struct.pack("<I", len(rec)) + rec
            h.update(chunk)
            f.write(chunk)
    return h.hexdigest()


def read_scenes(path) -> list:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        out.append(decode_scene(buf[pos + 4:pos + 4 + n]))
        pos += 4 + n
    return out


@dataclass
class Dataset:
    scene_cfg: synth.SceneConfig
    codebook_cfg: synth.CodebookConfig
    seed: int
    train: list
    eval: list

    def codebook(self) -> synth.Codebook:
        return synth.Codebook(self.codebook_cfg)

    def arrays(self, split="train", codebook=None):
        cb = codebook or self.codebook()
        return [synth.scene_arrays(s, cb) for s in getattr(self, split)]


def generate_dataset(scene_cfg, codebook_cfg, seed=0, n_train=500, n_eval=100) -> Dataset:
    """Per-scene seed = base seed + index; the eval split starts far past the train split."""
    train = [synth.generate_scene(scene_cfg, seed + i) for i in range(n_train)]
    ev = [synth.generate_scene(scene_cfg, seed + EVAL_SEED_OFFSET + i) for i in range(n_eval)]
    return Dataset(scene_cfg, codebook_cfg, seed, train, ev)


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name in ("train", "eval"):
        scenes = getattr(ds, name)
        digest = write_scenes(d / f"{name}.bin", scenes)
        splits[name] = {"file": f"{name}.bin", "count": len(scenes), "sha256": digest,
                        "first_seed": scenes[0].seed if scenes else None}
    manifest = {
        "format": FORMAT, "version": VERSION, "seed": ds.seed,
        "scene_config": ds.scene_cfg.to_dict(),
        "codebook_config": dataclasses.asdict(ds.codebook_cfg),
        "splits": splits,
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    if m.get("format") != FORMAT:
        raise ValueError(f"{d} is not a scene dataset")
    return Dataset(
        scene_cfg=synth.SceneConfig(**m["scene_config"]),
        codebook_cfg=synth.CodebookConfig(**m["codebook_config"]),
        seed=m["seed"],
        train=read_scenes(d / m["splits"]["train"]["file"]),
        eval=read_scenes(d / m["splits"]["eval"]["file"]),
    )
