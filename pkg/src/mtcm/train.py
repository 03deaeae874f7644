"""Adam and module-wise (staged) training."""
from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline as pl
from . import tensor as tn

STAGE_GROUPS = {
    "proxy": ("proxy", "head"),
    "aligner": ("aligner",),
    "mce": ("mce",),
}
STAGE_ORDER = ("proxy", "aligner", "mce")
# the aligner stage is kept short: run longer it memorises which twin is the
# target on the training scenes, leaving the MCE nothing to learn from
DEFAULT_EPOCHS = (30, 6, 30)
DEFAULT_LR = (1e-3, 1e-3, 3e-4)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, in place. Missing gradients count as zero.

    Raises FloatingPointError before touching anything if a gradient is not finite.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class Stage:
    name: str  # "proxy", "aligner", "mce" or "joint"
    epochs: int
    lr: float = 1e-3
    train: tuple = ()

    def __post_init__(self):
        if not self.train:
            self.train = STAGE_GROUPS.get(self.name, ())
        self.train = tuple(self.train)


def _stage_lrs(lr):
    """A single learning rate or one per stage (proxy, aligner, mce)."""
    if np.ndim(lr) == 0:
        return (float(lr),) * 3
    lr = tuple(float(v) for v in lr)
    if len(lr) != 3:
        raise ValueError(f"expected one learning rate or three, got {len(lr)}")
    return lr


@dataclass
class StagePlan:
    stages: list
    batch_size: int = 2

    @classmethod
    def staged(cls, aligner=True, mce=True, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LR, batch_size=2):
        lrs = _stage_lrs(lr)
        stages = [Stage("proxy", epochs[0], lrs[0])]
        if aligner:
            stages.append(Stage("aligner", epochs[1], lrs[1]))
        if mce:
            stages.append(Stage("mce", epochs[2], lrs[2]))
        return cls(stages, batch_size)

    @classmethod
    def joint(cls, aligner=True, mce=True, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LR, batch_size=2):
        """All enabled modules trained together for the summed epoch budget,
        at the first stage's learning rate."""
        lr = _stage_lrs(lr)[0]
        groups = ["proxy", "head"] + (["aligner"] if aligner else []) + (["mce"] if mce else [])
        total = epochs[0] + (epochs[1] if aligner else 0) + (epochs[2] if mce else 0)
        if groups == ["proxy", "head"]:
            return cls([Stage("proxy", total, lr)], batch_size)
        return cls([Stage("joint", total, lr, tuple(groups))], batch_size)

    @property
    def is_joint(self):
        return any(s.name == "joint" for s in self.stages)

    def validate(self, model: pl.Model):
        enabled = {"proxy", "head"}
        if model.use_aligner:
            enabled.add("aligner")
        if model.use_mce:
            enabled.add("mce")
        seen = set()
        last = -1
        for st in self.stages:
            if st.epochs < 0:
                raise ValueError(f"stage {st.name}: negative epoch count")
            if st.name != "joint":
                if st.name not in STAGE_ORDER:
                    raise ValueError(f"unknown stage {st.name!r}")
                pos = STAGE_ORDER.index(st.name)
                if pos <= last:
                    raise ValueError(f"stage {st.name!r} out of order; expected proxy -> aligner -> mce")
                last = pos
            elif len(self.stages) != 1:
                raise ValueError("a joint stage must be the only stage")
            groups = set(st.train)
            if groups - enabled:
                raise ValueError(f"stage {st.name!r} trains disabled groups {sorted(groups - enabled)}")
            if groups & seen:
                raise ValueError(f"stage {st.name!r} retrains frozen groups {sorted(groups & seen)}")
            seen |= groups
        if seen != enabled:
            raise ValueError(f"groups never trained: {sorted(enabled - seen)}")


def _view(model: pl.Model, aligner: bool, mce: bool) -> pl.Model:
    """Shallow copy sharing parameters, with different module switches."""
    view = copy.copy(model)
    view.cfg = dataclasses.replace(model.cfg, use_aligner=aligner, use_mce=mce)
    return view


def _stage_modules(plan: StagePlan, index: int, model: pl.Model):
    if plan.is_joint:
        return model.use_aligner, model.use_mce
    names = [s.name for s in plan.stages[: index + 1]]
    return "aligner" in names, "mce" in names


def _build_cache(view: pl.Model, arrays, stage: Stage):
    """Frozen upstream outputs per scene, or None when nothing upstream is frozen."""
    if stage.name == "aligner":
        start = "tokens"
    elif stage.name == "mce":
        start = "aligned" if view.use_aligner else "tokens"
    else:
        return None
    cache = []
    frozen = _view(view, view.use_aligner and start == "aligned", False)
    for a in arrays:
        batch = pl.Batch([a])
        tokens, s_e = pl.encode_batch(frozen, batch)
        if start == "aligned":
            x, perms = pl.run_temporal(frozen, tokens, s_e)
        else:
            x = tokens
            perms = None
            if view.use_aligner:
                perms = pl.mm.align_tokens(tokens.data[0])[1][None]
        cache.append((start, x.data[0], s_e.data[0], None if perms is None else perms[0]))
    return cache


def _batch_cache(cache, idx):
    start = cache[idx[0]][0]
    x = np.stack([cache[i][1] for i in idx])
    s_e = np.stack([cache[i][2] for i in idx])
    perms = None if cache[idx[0]][3] is None else np.stack([cache[i][3] for i in idx])
    return start, x, s_e, perms


def train_stagewise(plan: StagePlan, model: pl.Model, dataset, seed: int = 0, log=None,
                    progress=None, resume_from=0, stop_after=None):
    """Train ``model`` in place following ``plan``.

    ``dataset`` is a sequence of SceneArrays. ``log`` is an optional writable
    stream that receives one JSON object per epoch. Returns the list of those
    records and the Adam state of each stage.

    ``resume_from``/``stop_after`` run only stages ``[resume_from, stop_after)``
    of the plan, for a model already trained through the earlier stages.
    Shuffling depends on the stage's index in the full plan, so split runs
    match a single uninterrupted run.
    """
    plan.validate(model)
    arrays = list(dataset)
    records, states = [], {}
    stop = len(plan.stages) if stop_after is None else stop_after
    for si, stage in enumerate(plan.stages):
        if si < resume_from or si >= stop:
            continue
        aligner_on, mce_on = _stage_modules(plan, si, model)
        view = _view(model, aligner_on, mce_on)
        model.set_trainable(stage.train)
        params = {}
        for g in stage.train:
            params.update(model.groups()[g])
        cache = _build_cache(view, arrays, stage)
        state = AdamState(lr=stage.lr)
        states[stage.name] = state
        for epoch in range(1, stage.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([seed, si, epoch]).permutation(len(arrays))
            sums = np.zeros(4)
            n_batches = 0
            for start in range(0, len(order), plan.batch_size):
                idx = order[start:start + plan.batch_size]
                batch = pl.Batch([arrays[i] for i in idx])
                cached = None if cache is None else _batch_cache(cache, idx)
                with tn.Graph() as graph:
                    parts = pl.forward_loss(view, batch, cached)
                got = tn.backward(graph, parts.total)
                grads = {name: got.get(p) for name, p in params.items()}
                adam_step(params, grads, state)
                sums += (parts.total.item(), parts.ce, parts.bce, parts.dice)
                n_batches += 1
            mean = sums / max(n_batches, 1)
            rec = {"stage": stage.name, "epoch": epoch, "loss": float(mean[0]),
                   "ce": float(mean[1]), "bce": float(mean[2]), "dice": float(mean[3])}
            records.append(rec)
            if log is not None:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if progress is not None:
                progress(rec, time.perf_counter() - t0)
    model.set_trainable(pl.Model.GROUPS)
    return records, states


def parameter_checksum(params: dict) -> str:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()
