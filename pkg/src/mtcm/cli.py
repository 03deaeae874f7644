"""Command-line entry point: gen, train, eval, ablate, inspect.

Every run reads a JSON config (defaults below, optionally replaced by
``--config FILE``) and accepts ``--section.key=value`` overrides. Values are
parsed as JSON when possible, so ``--train.epochs=[5,5,5]`` works.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import data
from . import evaluate as ev
from . import model as mm
from . import pipeline as pl
from . import synth
from . import train as tr

RUNS_ENV = "MTCM_RUNS_DIR"

DEFAULTS = {
    "seed": 0,
    "n_train": 500,
    "n_eval": 100,
    "scene": synth.SceneConfig().to_dict(),
    "codebook": dataclasses.asdict(synth.CodebookConfig()),
    "model": {**dataclasses.asdict(mm.MtcmConfig()), "noise": 0.05},
    "train": {"aligner": True, "mce": True, "strategy": True,
              "epochs": list(tr.DEFAULT_EPOCHS), "lr": list(tr.DEFAULT_LR), "batch_size": 2},
}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise SystemExit(f"bad override {item!r}; expected --key=value")
        key, value = item[2:].split("=", 1)
        node, parts = cfg, key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise SystemExit(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise SystemExit(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        user = json.loads(Path(path).read_text())
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    return apply_overrides(cfg, overrides)


def scene_config(cfg) -> synth.SceneConfig:
    return synth.SceneConfig(**cfg["scene"])


def codebook_config(cfg) -> synth.CodebookConfig:
    return synth.CodebookConfig(**cfg["codebook"])


def model_config(cfg, aligner=True, mce=True) -> pl.ModelConfig:
    m = dict(cfg["model"])
    noise = m.pop("noise")
    return pl.ModelConfig(mtcm=mm.MtcmConfig(**m), use_aligner=aligner, use_mce=mce,
                          noise=noise, seed=cfg["seed"])


def output_dir(explicit=None) -> Path:
    if explicit:
        out = Path(explicit)
    elif os.environ.get(RUNS_ENV):
        out = Path(os.environ[RUNS_ENV])
    else:
        out = Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, cfg):
    out = output_dir(args.out)
    ds = data.generate_dataset(scene_config(cfg), codebook_config(cfg), cfg["seed"],
                               cfg["n_train"], cfg["n_eval"])
    path = data.save_dataset(ds, out / "data")
    print(f"wrote {len(ds.train)} train / {len(ds.eval)} eval scenes to {path.parent}")
    return 0


def _plan(cfg, aligner, mce):
    t = cfg["train"]
    build = tr.StagePlan.staged if t["strategy"] else tr.StagePlan.joint
    return build(aligner, mce, tuple(t["epochs"]), t["lr"], t["batch_size"])


def cmd_train(args, cfg):
    out = output_dir(args.out)
    ds = data.load_dataset(args.data)
    codebook = ds.codebook()
    a, m = bool(cfg["train"]["aligner"]), bool(cfg["train"]["mce"])
    model = pl.Model(model_config(cfg, a, m), codebook)
    plan = _plan(cfg, a, m)
    arrays = ds.arrays("train", codebook)
    provenance = {}
    with open(out / "loss.jsonl", "w") as log:
        for k, stage in enumerate(plan.stages):
            tr.train_stagewise(plan, model, arrays, cfg["seed"], log=log,
                               resume_from=k, stop_after=k + 1)
            for g in stage.train:
                provenance[g] = stage.name
            ck.save_checkpoint(model, out / "checkpoints" / f"stage{k + 1}-{stage.name}", provenance)
            if not args.quiet:
                print(f"stage {stage.name} done", file=sys.stderr)
    ck.save_checkpoint(model, out / "checkpoints" / "final", provenance)
    _write_json(out / "train_config.json", cfg)
    print(f"checkpoint: {out / 'checkpoints' / 'final.json'}")
    return 0


def _report_exit(report: ev.EvalReport) -> int:
    if report.has_nan():
        print("error: NaN metric in report", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args, cfg):
    out = output_dir(args.out)
    model, manifest = ck.load_checkpoint(args.checkpoint)
    ds = data.load_dataset(args.data)
    if dataclasses.asdict(ds.codebook_cfg) != manifest["codebook_config"]:
        raise SystemExit("dataset and checkpoint use different codebooks")
    arrays = ds.arrays(args.split, model.codebook)
    fp = ev.config_fingerprint({"model": manifest["model_config"], "params": manifest["params"],
                                "data_seed": ds.seed, "split": args.split})
    report = ev.evaluate_model(model, arrays, fingerprint=fp)
    (out / "report.jsonl").write_text(report.to_jsonl())
    if args.dump_masks:
        _dump_masks(model, arrays, out / "masks")
    print(json.dumps(report.aggregate(), sort_keys=True))
    return _report_exit(report)


def _dump_masks(model, arrays, directory):
    """Per-frame predicted target masks, one .npy [T, G, G] per scene."""
    directory.mkdir(parents=True, exist_ok=True)
    for a in arrays:
        batch = pl.Batch([a])
        logits, q_hat, _ = pl.infer(model, batch)
        sel = ev.select_slot(logits[0])
        t_len = logits.shape[1]
        slots = np.full((1, t_len), sel)
        probs = 1.0 / (1.0 + np.exp(-pl.mask_logits_for(model, batch, q_hat, slots).data[0]))
        g = int(round(math.sqrt(probs.shape[-1])))
        np.save(directory / f"scene{a.seed}.npy", (probs > 0.5).reshape(t_len, g, g))


def cmd_ablate(args, cfg):
    out = output_dir(args.out)
    ds = data.load_dataset(args.data)
    codebook = ds.codebook()
    t = cfg["train"]
    progress = None if args.quiet else (lambda row: print(json.dumps(row.as_dict()), file=sys.stderr))
    rows = ev.run_ablation(ev.ABLATION_GRID, ds.arrays("train", codebook), ds.arrays("eval", codebook),
                           model_config(cfg), codebook, seed=cfg["seed"], epochs=tuple(t["epochs"]),
                           lr=t["lr"], batch_size=t["batch_size"], progress=progress)
    with open(out / "ablation.jsonl", "w") as f:
        for r in rows:
            d = r.as_dict()
            d.pop("train_seconds")
            f.write(json.dumps(d, sort_keys=True) + "\n")
    table = ev.format_table(rows)
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    return max(_report_exit(r.report) for r in rows)


def cmd_inspect(args, cfg):
    p = Path(args.path)
    if p.is_dir():
        p = p / "manifest.json"
    elif p.suffix == ".bin":
        p = p.with_suffix(".json")
    elif p.suffix != ".json":
        p = p.parent / (p.name + ".json")
    m = json.loads(p.read_text())
    if m.get("format") == ck.FORMAT:
        print(f"checkpoint v{m['version']}: {len(m['params'])} tensors, {m['payload_bytes']} bytes")
        by_group = {}
        for q in m["params"]:
            by_group.setdefault(q["module"], []).append(q)
        for g, qs in by_group.items():
            count = sum(int(np.prod(q["shape"])) for q in qs)
            print(f"  {g:8s} {len(qs):3d} tensors {count:8d} values  stage={qs[0]['stage']}")
    elif m.get("format") == data.FORMAT:
        print(f"dataset v{m['version']}: seed {m['seed']}")
        for name, s in m["splits"].items():
            print(f"  {name:5s} {s['count']:5d} scenes  {s['sha256'][:16]}")
    else:
        raise SystemExit(f"{p}: unrecognised manifest")
    if args.json:
        print(json.dumps(m, indent=2, sort_keys=True))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mtcm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help=f"output directory (default ${RUNS_ENV} or ./runs/<timestamp>)")
        p.add_argument("--quiet", action="store_true")
        return p

    common(sub.add_parser("gen", help="generate a dataset"))
    p = common(sub.add_parser("train", help="train a model, writing per-stage checkpoints"))
    p.add_argument("--data", required=True, help="dataset directory")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--dump-masks", action="store_true", help="save predicted masks as .npy")
    p = common(sub.add_parser("ablate", help="run the module/strategy ablation grid"))
    p.add_argument("--data", required=True)
    p = sub.add_parser("inspect", help="print a checkpoint or dataset manifest")
    p.add_argument("path")
    p.add_argument("--json", action="store_true", help="also dump the raw manifest")
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args, rest = build_parser().parse_known_args(argv)
    cfg = load_config(getattr(args, "config", None), rest)
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
