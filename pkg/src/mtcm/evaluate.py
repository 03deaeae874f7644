"""Model evaluation (J, F, J&F, target selection, query consistency) and the ablation grid."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as pl
from . import train as tr
from .head import _sigmoid_np
from .metrics import boundary_f, presence_table, query_consistency, region_j


@dataclass
class EvalReport:
    scenes: list  # one dict per scene
    J: float
    F: float
    JF: float
    accuracy: float
    consistency: float
    fingerprint: str = ""

    def aggregate(self):
        return {"J": self.J, "F": self.F, "JF": self.JF, "accuracy": self.accuracy,
                "consistency": self.consistency, "scenes": len(self.scenes),
                "fingerprint": self.fingerprint}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "scene", **s}, sort_keys=True) for s in self.scenes]
        lines.append(json.dumps({"kind": "aggregate", **self.aggregate()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def has_nan(self):
        vals = [self.J, self.F, self.JF, self.accuracy, self.consistency]
        vals += [v for s in self.scenes for v in s.values() if isinstance(v, float)]
        return any(np.isnan(v) for v in vals)


def score_masks(pred, gt):
    """Frame-averaged J and F for boolean [T, G, G] masks; J&F is their mean."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    j = float(np.mean([region_j(p, g) for p, g in zip(pred, gt)]))
    f = float(np.mean([boundary_f(p, g) for p, g in zip(pred, gt)]))
    return j, f, (j + f) / 2


def summarize(scenes: list, fingerprint="") -> EvalReport:
    mean = lambda key: float(np.mean([s[key] for s in scenes])) if scenes else float("nan")
    j, f = mean("J"), mean("F")
    return EvalReport(scenes=scenes, J=j, F=f, JF=(j + f) / 2, accuracy=mean("accuracy"),
                      consistency=mean("consistency"), fingerprint=fingerprint)


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def select_slot(logits):
    """Video-level choice: argmax over queries of the time-averaged logits."""
    return int(np.argmax(np.asarray(logits).mean(axis=0)))


def evaluate_model(model: pl.Model, dataset, batch_size=8, fingerprint="") -> EvalReport:
    """Evaluate on a sequence of SceneArrays (scenes unseen in training)."""
    arrays = list(dataset)
    rows = []
    for start in range(0, len(arrays), batch_size):
        batch = pl.Batch(arrays[start:start + batch_size])
        logits, q_hat, perms = pl.infer(model, batch)
        t_len = logits.shape[1]
        sel = np.array([select_slot(l) for l in logits])
        slots = np.repeat(sel[:, None], t_len, axis=1)
        probs = _sigmoid_np(pl.mask_logits_for(model, batch, q_hat, slots).data)
        objs = pl.slot_objects(batch.stack("identity"), perms)
        for b, a in enumerate(batch.arrays):
            g = int(round(np.sqrt(a.gt.shape[1])))
            pred = (probs[b] > 0.5).reshape(t_len, g, g)
            gt = a.gt.reshape(t_len, g, g) > 0.5
            j, f, jf = score_masks(pred, gt)
            hits = objs[b, :, sel[b]] == a.target
            acc = float(hits[a.visible].mean()) if a.visible.any() else 1.0
            cons = query_consistency(perms[b], a.identity, presence_table(a.present, a.identity.shape[1]))
            rows.append({"seed": int(a.seed), "J": j, "F": f, "JF": jf, "accuracy": acc,
                         "consistency": float(cons), "slot": int(sel[b])})
    return summarize(rows, fingerprint)


def evaluate_predictions(pred_masks, dataset, fingerprint="") -> EvalReport:
    """Score externally supplied boolean masks [T, G, G] per scene (no model)."""
    rows = []
    for pred, a in zip(pred_masks, dataset):
        t_len = a.gt.shape[0]
        g = int(round(np.sqrt(a.gt.shape[1])))
        j, f, jf = score_masks(pred, a.gt.reshape(t_len, g, g) > 0.5)
        rows.append({"seed": int(a.seed), "J": j, "F": f, "JF": jf,
                     "accuracy": float("nan"), "consistency": float("nan"), "slot": -1})
    rep = summarize(rows, fingerprint)
    return rep


# --------------------------------------------------------------------- ablation

ABLATION_GRID = [
    dict(aligner=a, mce=m, strategy=s)
    for s, a, m in itertools.product((False, True), (False, True), (False, True))
]


@dataclass
class AblationRow:
    aligner: bool
    mce: bool
    strategy: bool
    report: EvalReport
    train_seconds: float
    checksum: str

    def as_dict(self):
        return {"aligner": self.aligner, "mce": self.mce, "strategy": self.strategy,
                **{k: v for k, v in self.report.aggregate().items() if k != "fingerprint"},
                "train_seconds": round(self.train_seconds, 2), "checksum": self.checksum[:12]}


def _clone(model: pl.Model, aligner: bool, mce: bool) -> pl.Model:
    out = copy.deepcopy(model, memo={id(model.codebook): model.codebook})
    out.cfg = dataclasses.replace(model.cfg, use_aligner=aligner, use_mce=mce)
    return out


def run_ablation(grid, train_set, eval_set, model_cfg: pl.ModelConfig, codebook,
                 seed=0, epochs=tr.DEFAULT_EPOCHS, lr=tr.DEFAULT_LR, batch_size=2, progress=None):
    """Train and evaluate each configuration in ``grid`` with shared seeds.

    Staged runs share their common prefix (e.g. the stage-1 model) instead of
    retraining it; training is deterministic, so the result is the same as
    training each configuration from scratch. ``train_seconds`` counts the
    full chain for each row, shared prefixes included.
    """
    train_set, eval_set = list(train_set), list(eval_set)
    base = pl.Model(dataclasses.replace(model_cfg, use_aligner=False, use_mce=False), codebook)
    memo = {(): (base, 0.0)}
    rows = []
    for spec in grid:
        a, m, s = bool(spec["aligner"]), bool(spec["mce"]), bool(spec["strategy"])
        if s or not (a or m):
            plan = tr.StagePlan.staged(a, m, epochs, lr, batch_size)
            names = tuple(st.name for st in plan.stages)
            done = max(k for k in range(len(names) + 1) if names[:k] in memo)
            model, seconds = memo[names[:done]]
            model = _clone(model, a, m)
            for k in range(done, len(names)):
                t0 = time.perf_counter()
                tr.train_stagewise(plan, model, train_set, seed, resume_from=k, stop_after=k + 1)
                seconds += time.perf_counter() - t0
                memo[names[:k + 1]] = (_clone(model, a, m), seconds)
        else:
            plan = tr.StagePlan.joint(a, m, epochs, lr, batch_size)
            model = _clone(base, a, m)
            t0 = time.perf_counter()
            tr.train_stagewise(plan, model, train_set, seed)
            seconds = time.perf_counter() - t0
        report = evaluate_model(model, eval_set,
                                fingerprint=config_fingerprint({"aligner": a, "mce": m, "strategy": s,
                                                                "seed": seed, "epochs": list(epochs)}))
        row = AblationRow(a, m, s, report, seconds, tr.parameter_checksum(model.named_parameters()))
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def format_table(rows) -> str:
    """Markdown table shaped like the usual module/strategy ablation."""
    mark = lambda b: "x" if b else ""
    lines = ["| Aligner | MCE | Strategy | J&F | J | F | Acc | QC |",
             "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        rep = r.report
        lines.append(f"| {mark(r.aligner)} | {mark(r.mce)} | {mark(r.strategy)} | "
                     f"{100 * rep.JF:.1f} | {100 * rep.J:.1f} | {100 * rep.F:.1f} | "
                     f"{100 * rep.accuracy:.1f} | {100 * rep.consistency:.1f} |")
    return "\n".join(lines)
