"""Synthetic referring-tracking scenes and the proxy token encoder.

A scene is a handful of discs moving on a small grid. One of them is the
referred target; by default another disc shares its appearance and differs
only in how it moves, so the target can only be told apart over time. The
proxy encoder turns a scene into per-frame instance tokens whose slot order
is reshuffled every frame, plus language rows and per-pixel features.

Tokens carry appearance and *position*; velocity is never written into a
single frame's token, it has to be recovered from several frames.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor
from . import tensor as tn

MOTIONS = ("left", "right", "up", "down", "static", "appears-midway")
_DIRECTIONS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "static": (0.0, 0.0),
    "appears-midway": (0.0, 0.0),
}


class SceneError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    grid: int = 32
    frames: int = 8
    objects: int = 4
    queries: int = 8
    n_appearances: int = 8
    radius: tuple = (3, 3)
    speed: tuple = (1.0, 2.0)
    motions: tuple = MOTIONS
    distractor: str = "motion"  # "motion": a same-appearance twin; "none": all distinct
    layout: str = "cells"  # "cells": one grid cell per object; "free": rejection sampling
    max_retries: int = 500

    def __post_init__(self):
        self.radius = tuple(self.radius)
        self.speed = tuple(self.speed)
        self.motions = tuple(self.motions)
        if self.objects > self.queries:
            raise ValueError(f"objects ({self.objects}) must not exceed queries ({self.queries})")
        if self.grid < 8:
            raise ValueError("grid must be at least 8")
        if self.layout not in ("cells", "free"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.distractor not in ("motion", "none"):
            raise ValueError(f"unknown distractor mode {self.distractor!r}")
        if self.distractor == "motion" and len(self.motions) < 2:
            raise ValueError("motion distractors need at least two motion patterns")
        bad = set(self.motions) - set(MOTIONS)
        if bad:
            raise ValueError(f"unknown motion patterns {sorted(bad)}")

    def to_dict(self):
        d = asdict(self)
        d["radius"] = list(self.radius)
        d["speed"] = list(self.speed)
        d["motions"] = list(self.motions)
        return d


@dataclass
class CodebookConfig:
    channels: int = 64
    n_appearances: int = 8
    grid: int = 32
    rff_features: int = 16
    rff_width: float = 4.0
    rff_scale: float = 0.2
    lin_scale: float = 4.0
    seed: int = 7


class Codebook:
    """Fixed code vectors that define the synthetic world."""

    def __init__(self, cfg: CodebookConfig):
        self.cfg = cfg
        c = cfg.channels
        if 2 * cfg.rff_features > c:
            raise ValueError(f"{cfg.rff_features} Fourier features need at least {2 * cfg.rff_features} channels, got {c}")
        rng = np.random.default_rng(cfg.seed)
        unit = lambda n: _unit_rows(rng.normal(size=(n, c)))
        self.appearance = unit(cfg.n_appearances)
        self.background = unit(1)[0]
        self.motion = unit(len(MOTIONS))
        self.templates = unit(2)
        self.null = unit(1)[0]
        f = cfg.rff_features
        self.rff_freq = rng.normal(0.0, 1.0 / cfg.rff_width, size=(f, 2))
        self.rff_phase = rng.uniform(0.0, 2 * np.pi, size=f)
        basis = np.linalg.qr(rng.normal(size=(c, c)))[0]
        self.rff_proj = basis[: 2 * f] * cfg.rff_scale
        self.lin_proj = _unit_rows(rng.normal(size=(2, c))) * cfg.lin_scale
        g = cfg.grid
        yy, xx = np.mgrid[0:g, 0:g]
        self.pixel_xy = np.stack([xx.ravel(), yy.ravel()], axis=-1).astype(np.float64)
        self.pixel_pos = self.pos_code(self.pixel_xy)  # [G*G, C]
        sample = self.appearance[:, None, :] + self.pixel_pos[None, :: 7, :]
        self.code_norm = float(np.linalg.norm(sample, axis=-1).mean())

    def pos_code(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        arg = xy @ self.rff_freq.T + self.rff_phase
        f = self.cfg.rff_features
        feats = np.concatenate([np.cos(arg), np.sin(arg)], axis=-1) / np.sqrt(f)
        centered = (xy - self.cfg.grid / 2.0) / self.cfg.grid
        return feats @ self.rff_proj + centered @ self.lin_proj


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


@dataclass
class Scene:
    seed: int
    grid: int
    frames: int
    queries: int
    target: int
    appearance: list  # appearance id per object
    motion: list  # motion label per object
    radius: list
    centers: np.ndarray  # [K, T, 2] (x, y)
    present: np.ndarray  # [K, T] bool
    labels: np.ndarray  # [T, G, G] int8; 0 background, k+1 object k
    identity: np.ndarray  # [T, N]; slot j holds identity[t, j], values >= K are empty slots

    @property
    def n_objects(self):
        return len(self.appearance)

    def object_masks(self):
        """[K, T, G, G] boolean masks."""
        return np.stack([self.labels == k + 1 for k in range(self.n_objects)])

    def target_masks(self):
        return self.labels == self.target + 1

    def header(self):
        return {
            "seed": self.seed, "G": self.grid, "T": self.frames, "K": self.n_objects,
            "N": self.queries, "target": self.target, "appearance": list(map(int, self.appearance)),
            "motion": list(self.motion), "radius": [float(r) for r in self.radius],
            "centers": self.centers.tolist(), "present": self.present.astype(int).tolist(),
        }


def _simulate(start, vel, frames, lo, hi):
    pos = np.array(start, dtype=np.float64)
    v = np.array(vel, dtype=np.float64)
    out = np.empty((frames, 2))
    for t in range(frames):
        out[t] = pos
        pos = pos + v
        for a in range(2):
            if pos[a] < lo:
                pos[a] = 2 * lo - pos[a]
                v[a] = -v[a]
            elif pos[a] > hi:
                pos[a] = 2 * hi - pos[a]
                v[a] = -v[a]
    return out


def _start_range(lo, hi, travel):
    # keep the straight path on the grid when it fits
    if travel >= 0:
        a, b = lo, hi - travel
    else:
        a, b = lo - travel, hi
    return (a, b) if a <= b else (lo, hi)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Deterministic scene for ``seed``; raises SceneError if the discs cannot be placed."""
    rng = np.random.default_rng(seed)
    k, g, t_len = cfg.objects, cfg.grid, cfg.frames
    motions = list(cfg.motions)

    target_app = int(rng.integers(cfg.n_appearances))
    target_motion = motions[rng.integers(len(motions))]
    others = [a for a in range(cfg.n_appearances) if a != target_app]
    apps, mots = [target_app], [target_motion]
    n_rest = k - 1
    if cfg.distractor == "motion" and k >= 2:
        alt = [m for m in motions if m != target_motion]
        apps.append(target_app)
        mots.append(alt[rng.integers(len(alt))])
        n_rest -= 1
    if n_rest > len(others):
        raise ValueError("not enough distinct appearances for the requested object count")
    apps += [int(a) for a in rng.choice(others, size=n_rest, replace=False)]
    mots += [motions[i] for i in rng.integers(len(motions), size=n_rest)]
    order = rng.permutation(k)
    apps = [apps[i] for i in order]
    mots = [mots[i] for i in order]
    target = int(np.flatnonzero(order == 0)[0])

    radii = [float(rng.integers(cfg.radius[0], cfg.radius[1] + 1)) for _ in range(k)]
    if cfg.layout == "cells":
        centers, present = _place_in_cells(cfg, rng, mots, radii)
    else:
        centers, present = _place_free(cfg, rng, mots, radii, seed)

    labels = _rasterize(centers, present, radii, g)
    identity = np.stack([rng.permutation(cfg.queries) for _ in range(t_len)]).astype(np.int64)
    return Scene(seed=int(seed), grid=g, frames=t_len, queries=cfg.queries, target=target,
                 appearance=apps, motion=mots, radius=radii, centers=centers,
                 present=present, labels=labels, identity=identity)


def _entry(rng, t_len, present_row):
    entry = int(rng.integers(1, max(2, t_len // 2 + 1)))
    present_row[:entry] = False


def _place_in_cells(cfg, rng, mots, radii):
    """Each object bounces inside its own cell, so objects never interact and
    a uniform start stays uniform at every frame whatever the motion."""
    k, t_len = len(radii), cfg.frames
    m = int(np.ceil(np.sqrt(k)))
    cell = cfg.grid // m
    if cell < 2 * max(radii) + 2:
        raise SceneError(f"{k} objects of radius {max(radii):g} do not fit in {m}x{m} cells "
                         f"of a {cfg.grid} grid")
    slots = rng.permutation(m * m)[:k]
    centers = np.empty((k, t_len, 2))
    present = np.ones((k, t_len), dtype=bool)
    for i in range(k):
        r = radii[i]
        lo, hi = r, cell - 1 - r
        vel = np.array(_DIRECTIONS[mots[i]]) * rng.uniform(*cfg.speed)
        start = rng.uniform(lo, hi, size=2)
        cy, cx = divmod(int(slots[i]), m)
        centers[i] = _simulate(start, vel, t_len, lo, hi) + np.array([cx * cell, cy * cell])
        if mots[i] == "appears-midway":
            _entry(rng, t_len, present[i])
    return centers, present


def _place_free(cfg, rng, mots, radii, seed):
    k, g, t_len = len(radii), cfg.grid, cfg.frames
    for _ in range(cfg.max_retries):
        centers = np.empty((k, t_len, 2))
        present = np.ones((k, t_len), dtype=bool)
        for i in range(k):
            r = radii[i]
            lo, hi = r, g - 1 - r
            vel = np.array(_DIRECTIONS[mots[i]]) * rng.uniform(*cfg.speed)
            start = [rng.uniform(*_start_range(lo, hi, vel[a] * (t_len - 1))) for a in range(2)]
            centers[i] = _simulate(start, vel, t_len, lo, hi)
            if mots[i] == "appears-midway":
                _entry(rng, t_len, present[i])
        if _disjoint(centers, present, radii):
            return centers, present
    raise SceneError(f"could not place {k} disjoint objects after {cfg.max_retries} tries (seed {seed})")


def _disjoint(centers, present, radii):
    k = len(radii)
    for i in range(k):
        for j in range(i + 1, k):
            both = present[i] & present[j]
            d = np.linalg.norm(centers[i] - centers[j], axis=-1)
            if np.any(both & (d <= radii[i] + radii[j] + 1.0)):
                return False
    return True


def _rasterize(centers, present, radii, g):
    t_len = centers.shape[1]
    yy, xx = np.mgrid[0:g, 0:g]
    labels = np.zeros((t_len, g, g), dtype=np.int8)
    for i, r in enumerate(radii):
        for t in range(t_len):
            if present[i, t]:
                x, y = centers[i, t]
                labels[t][(xx - x) ** 2 + (yy - y) ** 2 <= r * r] = i + 1
    return labels


# -------------------------------------------------------------- proxy encoder

@dataclass
class ProxyEncoderParams:
    """Trainable projections from world codes to C channels.

    The code tables themselves live in the :class:`Codebook` and stay fixed;
    ``noise`` is the token noise level relative to the codebook's typical
    token norm.
    """

    w_tok: Tensor
    b_tok: Tensor
    null_token: Tensor
    w_lang: Tensor
    b_lang: Tensor
    w_pix: Tensor
    b_pix: Tensor
    noise: float = 0.05

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    def named(self):
        return dict(w_tok=self.w_tok, b_tok=self.b_tok, null_token=self.null_token,
                    w_lang=self.w_lang, b_lang=self.b_lang, w_pix=self.w_pix, b_pix=self.b_pix)


def init_proxy(codebook: Codebook, noise=0.05) -> ProxyEncoderParams:
    c = codebook.cfg.channels
    p = lambda a: Tensor(np.array(a, dtype=np.float64), requires_grad=True)
    return ProxyEncoderParams(
        w_tok=p(np.eye(c)), b_tok=p(np.zeros(c)), null_token=p(codebook.null),
        w_lang=p(np.eye(c)), b_lang=p(np.zeros(c)),
        w_pix=p(np.eye(c)), b_pix=p(np.zeros(c)), noise=noise,
    )


@dataclass
class SceneArrays:
    """Parameter-free arrays derived from one scene, reused every epoch."""

    raw_tokens: np.ndarray  # [T, N, C], zero on empty slots
    null_mask: np.ndarray  # [T, N, C] 1.0 where the slot holds no visible object
    noise: np.ndarray  # [T, N, C] standard normal draws
    lang_raw: np.ndarray  # [L, C]
    cover: np.ndarray  # [T, G*G] index into ``codes``; N is background
    codes: np.ndarray  # [N+1, C] appearance code per object, background last
    gt: np.ndarray  # [T, G*G] target mask as float
    visible: np.ndarray  # [T] bool
    identity: np.ndarray  # [T, N]
    target: int
    n_objects: int
    present: np.ndarray  # [K, T]
    seed: int = 0


def scene_arrays(scene: Scene, codebook: Codebook, seed=None) -> SceneArrays:
    t_len, n, c = scene.frames, scene.queries, codebook.cfg.channels
    k = scene.n_objects
    obj_codes = codebook.appearance[scene.appearance]  # [K, C]
    raw = np.zeros((t_len, n, c))
    null = np.ones((t_len, n, 1))
    for t in range(t_len):
        for j, ident in enumerate(scene.identity[t]):
            if ident < k and scene.present[ident, t]:
                raw[t, j] = obj_codes[ident] + codebook.pos_code(scene.centers[ident, t])
                null[t, j] = 0.0
    noise_seed = scene.seed if seed is None else seed
    noise = np.random.default_rng([noise_seed, 1]).standard_normal((t_len, n, c))
    lang = np.stack([
        codebook.appearance[scene.appearance[scene.target]],
        codebook.motion[MOTIONS.index(scene.motion[scene.target])],
        codebook.templates[0],
        codebook.templates[1],
    ])
    codes = np.zeros((n + 1, c))
    codes[:k] = obj_codes
    codes[n] = codebook.background
    lab = scene.labels.reshape(t_len, -1).astype(np.int64)
    cover = np.where(lab > 0, lab - 1, n)
    gt = (lab == scene.target + 1).astype(np.float64)
    return SceneArrays(raw_tokens=raw, null_mask=np.broadcast_to(null, raw.shape).copy(),
                       noise=noise, lang_raw=lang, cover=cover, codes=codes, gt=gt,
                       visible=scene.present[scene.target].copy(), identity=scene.identity.copy(),
                       target=scene.target, n_objects=k, present=scene.present.copy(),
                       seed=scene.seed)


def _noise_scale(p: ProxyEncoderParams, codebook: Codebook):
    return p.noise * codebook.code_norm / np.sqrt(codebook.cfg.channels)


def tokens_from_arrays(raw, null_mask, noise, p: ProxyEncoderParams, codebook: Codebook) -> Tensor:
    """Project raw codes; works on [T, N, C] or stacked [B, T, N, C] inputs."""
    real = tn.Tensor(raw) @ p.w_tok + p.b_tok
    nulls = tn.broadcast_to(p.null_token, raw.shape)
    keep = tn.Tensor(1.0 - null_mask)
    return real * keep + nulls * tn.Tensor(null_mask) + tn.Tensor(noise * _noise_scale(p, codebook))


def encode_tokens(scene: Scene, p: ProxyEncoderParams, codebook: Codebook, seed=None) -> Tensor:
    """Instance tokens O [T, N, C] in the scene's shuffled slot order."""
    a = scene_arrays(scene, codebook, seed)
    return tokens_from_arrays(a.raw_tokens, a.null_mask, a.noise, p, codebook)


def language_from_arrays(lang_raw, p: ProxyEncoderParams) -> Tensor:
    return tn.Tensor(lang_raw) @ p.w_lang + p.b_lang


def encode_language(scene: Scene, p: ProxyEncoderParams, codebook: Codebook) -> Tensor:
    """Language rows [appearance word, motion word, template, template] projected to C."""
    a = scene_arrays(scene, codebook)
    return language_from_arrays(a.lang_raw, p)


def raw_pixel_codes(scene: Scene, codebook: Codebook) -> np.ndarray:
    a = scene_arrays(scene, codebook)
    g = scene.grid
    raw = a.codes[a.cover] + codebook.pixel_pos[None]
    return raw.reshape(scene.frames, g, g, -1)


def render_pixel_features(scene: Scene, p: ProxyEncoderParams, codebook: Codebook) -> Tensor:
    """Per-pixel features [T, G, G, C]: covering object's (or background) code
    plus the coordinate code, projected to C."""
    return tn.Tensor(raw_pixel_codes(scene, codebook)) @ p.w_pix + p.b_pix
