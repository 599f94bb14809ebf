"""Procedural compositional-action clips.

Every clip has three object slots: a hand (id 0), the noun object (id 1) and a
lid (id 2, only present for cover/uncover). Verbs are motion scripts that never
look at the noun; nouns only change shape, colour and size. ``cover`` and
``uncover`` share one box script and differ only in depth order, so their box
tracks are identically distributed and only pixels tell them apart.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from ..errors import RegistryError

DEFAULT_DIMS = (16, 64, 64)
NUM_SLOTS = 3
HAND, OBJECT, LID = 0, 1, 2

VERBS = ("approach", "retreat", "pick-up", "put-down", "cover", "uncover", "push-left", "push-right")
SHAPES = ("disk", "square", "triangle", "diamond", "ring", "cross")


@dataclass(frozen=True)
class Noun:
    name: str
    shape: str
    color: tuple[float, float, float]
    half_size: float  # in pixels at 64x64


def _build_nouns() -> tuple[Noun, ...]:
    nouns = []
    for i in range(12):
        # the two halves of the registry interleave around the hue wheel
        hue = ((i % 6) * 2 + i // 6) / 12.0
        shape = SHAPES[(i % 6 + 3 * (i // 6)) % 6]
        color = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
        half = 4.8 + 0.4 * ((i * 5) % 5)
        nouns.append(Noun(f"{shape}-{int(hue * 360):03d}", shape, tuple(round(c, 4) for c in color), half))
    return tuple(nouns)


NOUNS = _build_nouns()

HAND_COLOR = (0.78, 0.76, 0.72)
LID_COLOR = (0.42, 0.42, 0.45)


@dataclass
class ClipRecord:
    """One rendered clip.

    ``frames`` is ``[T, H, W, 3]`` float32 in [0, 1] (quantized to k/255);
    ``tracks`` is ``[T, N, 6]`` rows of ``x1, y1, x2, y2, object_id, present``.
    """

    frames: np.ndarray
    tracks: np.ndarray
    verb_id: int
    noun_id: int
    seed: int

    @property
    def dims(self) -> tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return (t, h, w)

    def __eq__(self, other):
        if not isinstance(other, ClipRecord):
            return NotImplemented
        return (
            self.verb_id == other.verb_id
            and self.noun_id == other.noun_id
            and self.seed == other.seed
            and self.frames.dtype == other.frames.dtype
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
            and self.tracks.shape == other.tracks.shape
            and self.tracks.tobytes() == other.tracks.tobytes()
        )


def verb_id(name: str) -> int:
    try:
        return VERBS.index(name)
    except ValueError:
        raise RegistryError(f"unknown verb {name!r}") from None


def _check_ids(v: int, n: int) -> None:
    if not 0 <= v < len(VERBS):
        raise RegistryError(f"unknown verb id {v} (registry has {len(VERBS)})")
    if not 0 <= n < len(NOUNS):
        raise RegistryError(f"unknown noun id {n} (registry has {len(NOUNS)})")


# --------------------------------------------------------------------------
# motion scripts: each returns hand, object and lid centers ([T, 2]; lid may be None)


def _progress(rng, t_count):
    t0 = rng.uniform(0.0, 2.5)
    t1 = rng.uniform(t_count - 3.5, t_count - 1.0)
    t = np.arange(t_count, dtype=np.float64)
    return np.clip((t - t0) / max(t1 - t0, 1.0), 0.0, 1.0)


def _phase(tau, lo, hi):
    return np.clip((tau - lo) / (hi - lo), 0.0, 1.0)


def _approach_like(rng, tau, geo, reverse):
    h, w, r, rh = geo["h"], geo["w"], geo["r"], geo["rh"]
    m = min(h, w)
    for _ in range(100):
        c = np.array([rng.uniform(0.35, 0.65) * w, rng.uniform(0.35, 0.65) * h])
        d_far = rng.uniform(0.34, 0.42) * m
        d_near = d_far * rng.uniform(0.3, 0.45)
        theta = rng.uniform(0, 2 * np.pi)
        far = c + d_far * np.array([np.cos(theta), np.sin(theta)])
        if rh <= far[0] <= w - rh and rh <= far[1] <= h - rh:
            break
    d = d_far + (d_near - d_far) * tau if not reverse else d_near + (d_far - d_near) * tau
    hand = c + d[:, None] * np.array([np.cos(theta), np.sin(theta)])
    obj = np.repeat(c[None], len(tau), axis=0)
    return hand, obj, None


def _lift_like(rng, tau, geo, down):
    h, w, r, rh = geo["h"], geo["w"], geo["r"], geo["rh"]
    lift = rng.uniform(0.25, 0.32) * h
    low_y = rng.uniform(0.62, 0.72) * h
    cx = rng.uniform(0.35, 0.65) * w
    side = rng.uniform(-0.15, 0.15) * w
    away = np.array([cx + side, low_y - lift - rng.uniform(0.05, 0.12) * h])
    n = len(tau)
    obj = np.zeros((n, 2))
    obj[:, 0] = cx
    grip = r + rh
    if not down:
        reach, carry = _phase(tau, 0.0, 0.45), _phase(tau, 0.5, 1.0)
        obj[:, 1] = low_y - lift * carry
        contact = np.stack([obj[:, 0], obj[:, 1] - grip], axis=1)
        hand = away + (contact - away) * reach[:, None]
    else:
        carry, leave = _phase(tau, 0.0, 0.5), _phase(tau, 0.55, 1.0)
        obj[:, 1] = low_y - lift + lift * carry
        contact = np.stack([obj[:, 0], obj[:, 1] - grip], axis=1)
        hand = contact + (away - contact) * leave[:, None]
    return hand, obj, None


def _push(rng, tau, geo, direction):
    h, w, r, rh = geo["h"], geo["w"], geo["r"], geo["rh"]
    travel = rng.uniform(0.2, 0.26) * w
    gap = rng.uniform(0.1, 0.16) * w
    cy = rng.uniform(0.35, 0.65) * h
    # start so that the pushed object and the trailing hand stay inside
    if direction < 0:
        cx = rng.uniform(max(0.5 * w, r + travel + 1), w - (r + 2 * rh + gap) - 1)
    else:
        cx = rng.uniform(r + 2 * rh + gap + 1, min(0.5 * w, w - r - travel - 1))
    contact_at = 0.4
    move = _phase(tau, contact_at, 1.0)
    reach = _phase(tau, 0.0, contact_at)
    obj = np.stack([cx + direction * travel * move, np.full(len(tau), cy)], axis=1)
    offset = -direction * (r + rh + gap * (1.0 - reach))
    hand = np.stack([obj[:, 0] + offset, obj[:, 1]], axis=1)
    return hand, obj, None


def _cover_script(rng, tau, geo):
    h, w, r, rh, lid = geo["h"], geo["w"], geo["r"], geo["rh"], geo["lid"]
    lw, lh = lid
    for _ in range(100):
        c = np.array([rng.uniform(0.35, 0.65) * w, rng.uniform(0.42, 0.68) * h])
        side = rng.choice([-1.0, 1.0])
        start_x = c[0] + side * rng.uniform(0.34, 0.4) * w
        if lw <= start_x <= w - lw:
            break
    slide = _phase(tau, 0.0, 0.8)
    end = c + np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)])
    lid_c = np.stack([start_x + (end[0] - start_x) * slide, np.full(len(tau), end[1])], axis=1)
    hand = lid_c + np.array([0.0, -(lh + rh)])
    obj = np.repeat(c[None], len(tau), axis=0)
    return hand, obj, lid_c


def _script(verb: str, rng, tau, geo):
    if verb == "approach":
        return _approach_like(rng, tau, geo, reverse=False)
    if verb == "retreat":
        return _approach_like(rng, tau, geo, reverse=True)
    if verb == "pick-up":
        return _lift_like(rng, tau, geo, down=False)
    if verb == "put-down":
        return _lift_like(rng, tau, geo, down=True)
    if verb in ("cover", "uncover"):
        return _cover_script(rng, tau, geo)
    if verb == "push-left":
        return _push(rng, tau, geo, -1.0)
    if verb == "push-right":
        return _push(rng, tau, geo, 1.0)
    raise RegistryError(f"no motion script for verb {verb!r}")


# --------------------------------------------------------------------------
# rendering


def _sdf(shape, dx, dy, r):
    if shape == "disk":
        return np.hypot(dx, dy) - r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - r
    if shape == "diamond":
        return (np.abs(dx) + np.abs(dy) - r) / np.sqrt(2.0)
    if shape == "triangle":
        # apex up at (0, -r), base at y = r spanning [-r, r]
        edge = (2.0 * np.abs(dx) - dy - r) / np.sqrt(5.0)
        return np.maximum(edge, dy - r)
    if shape == "ring":
        return np.abs(np.hypot(dx, dy) - 0.68 * r) - 0.32 * r
    if shape == "cross":
        a = np.maximum(np.abs(dx) - r, np.abs(dy) - 0.36 * r)
        b = np.maximum(np.abs(dx) - 0.36 * r, np.abs(dy) - r)
        return np.minimum(a, b)
    if shape == "hand":
        corner = 0.4 * r
        qx = np.maximum(np.abs(dx) - (r - corner), 0.0)
        qy = np.maximum(np.abs(dy) - (r - corner), 0.0)
        return np.hypot(qx, qy) - corner
    raise RegistryError(f"unknown shape {shape!r}")


def _coverage(sdf):
    return np.clip(0.5 - sdf, 0.0, 1.0)


def _background(rng, h, w):
    coarse = rng.uniform(0.0, 1.0, size=(5, 5))
    yi = np.linspace(0, 4, h)
    xi = np.linspace(0, 4, w)
    y0 = np.minimum(yi.astype(int), 3)
    x0 = np.minimum(xi.astype(int), 3)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    smooth = (
        coarse[y0][:, x0] * (1 - fy) * (1 - fx)
        + coarse[y0 + 1][:, x0] * fy * (1 - fx)
        + coarse[y0][:, x0 + 1] * (1 - fy) * fx
        + coarse[y0 + 1][:, x0 + 1] * fy * fx
    )
    tint = rng.uniform(-0.03, 0.03, size=3)
    base = 0.18 + 0.12 * smooth[..., None] + tint
    grain = rng.normal(0.0, 0.015, size=(h, w, 1))
    return base + grain


def generate_clip(verb_id: int, noun_id: int, seed: int, dims=DEFAULT_DIMS) -> ClipRecord:
    """Render one clip; a pure function of its arguments."""
    _check_ids(verb_id, noun_id)
    t_count, h, w = (int(d) for d in dims)
    if t_count < 2 or h < 8 or w < 8:
        raise ValueError(f"clip dims too small: {dims}")
    verb = VERBS[verb_id]
    noun = NOUNS[noun_id]
    # uncover draws from cover's stream, so the two share byte-identical tracks
    stream = VERBS.index("cover") if verb == "uncover" else verb_id
    rng = np.random.default_rng([int(seed), stream, noun_id])

    scale = min(h, w) / 64.0
    r = noun.half_size * rng.uniform(0.85, 1.15) * scale
    rh = 4.5 * rng.uniform(0.9, 1.1) * scale
    lw = max(1.7 * r, 10.0 * scale)
    geo = {"h": h, "w": w, "r": r, "rh": rh, "lid": (lw, 0.8 * lw)}
    color = np.clip(np.array(noun.color) * rng.uniform(0.9, 1.05) + rng.uniform(-0.04, 0.04, 3), 0, 1)

    tau = _progress(rng, t_count)
    hand, obj, lid = _script(verb, rng, tau, geo)

    halves = {HAND: (rh, rh), OBJECT: (r, r), LID: geo["lid"]}
    centers = {HAND: hand, OBJECT: obj}
    if lid is not None:
        centers[LID] = lid
    for slot, c in centers.items():
        hx, hy = halves[slot]
        c[:, 0] = np.clip(c[:, 0], hx, w - hx)
        c[:, 1] = np.clip(c[:, 1], hy, h - hy)

    tracks = np.zeros((t_count, NUM_SLOTS, 6))
    for slot in range(NUM_SLOTS):
        tracks[:, slot, 4] = slot
        if slot in centers:
            hx, hy = halves[slot]
            c = centers[slot]
            tracks[:, slot, 0] = c[:, 0] - hx
            tracks[:, slot, 1] = c[:, 1] - hy
            tracks[:, slot, 2] = c[:, 0] + hx
            tracks[:, slot, 3] = c[:, 1] + hy
            tracks[:, slot, 5] = 1.0
    tracks[:, :, :4] = np.clip(tracks[:, :, :4], 0.0, [w, h, w, h])

    bg = _background(rng, h, w)
    ys = np.arange(h)[None, :, None] + 0.5
    xs = np.arange(w)[None, None, :] + 0.5
    layers = {}
    d = lambda c: (xs - c[:, 0, None, None], ys - c[:, 1, None, None])  # noqa: E731
    dx, dy = d(obj)
    layers[OBJECT] = (_coverage(_sdf(noun.shape, dx, dy, r)), color[None, None, None, :])
    dx, dy = d(hand)
    layers[HAND] = (_coverage(_sdf("hand", dx, dy, rh)), np.array(HAND_COLOR)[None, None, None, :])
    if lid is not None:
        dx, dy = d(lid)
        lid_w, lid_h = geo["lid"]
        alpha = _coverage(np.maximum(np.abs(dx) - lid_w, np.abs(dy) - lid_h))
        stripes = 1.0 + 0.18 * np.sign(np.sin((dy + lid_h) * (np.pi / (2.0 * scale))))
        layers[LID] = (alpha, np.array(LID_COLOR) * stripes[..., None])

    # depth order: cover puts the lid over the object, uncover slides it beneath
    order = [LID, OBJECT, HAND] if verb == "uncover" else [OBJECT, LID, HAND]
    img = np.broadcast_to(bg, (t_count, h, w, 3)).copy()
    img += rng.normal(0.0, 0.01, size=(t_count, h, w, 1))
    for slot in order:
        if slot in layers:
            alpha, col = layers[slot]
            a = alpha[..., None]
            img = img * (1.0 - a) + col * a
    frames = (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)
    return ClipRecord(frames=frames, tracks=tracks, verb_id=verb_id, noun_id=noun_id, seed=int(seed))


# --------------------------------------------------------------------------
# per-verb kinematic predicates, evaluated on emitted tracks only


def _centers(tracks, slot):
    b = tracks[:, slot, :4]
    return np.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2], axis=1)


def _coverage_of(tracks, top, bottom):
    a, b = tracks[:, top, :4], tracks[:, bottom, :4]
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return iw * ih / area


def verb_property_holds(clip: ClipRecord, tol: float = 1e-9) -> bool:
    """Check the defining kinematics of ``clip``'s verb from its tracks."""
    tr = clip.tracks
    _, h, w = clip.dims
    verb = VERBS[clip.verb_id]
    obj = _centers(tr, OBJECT)
    if verb in ("approach", "retreat"):
        dist = np.linalg.norm(_centers(tr, HAND) - obj, axis=1)
        steps = np.diff(dist)
        if verb == "approach":
            return bool(np.all(steps <= tol) and dist[-1] <= 0.75 * dist[0])
        return bool(np.all(steps >= -tol) and dist[0] <= 0.75 * dist[-1])
    if verb in ("pick-up", "put-down"):
        sign = -1.0 if verb == "pick-up" else 1.0
        dy = sign * np.diff(obj[:, 1])
        return bool(np.all(dy >= -tol) and sign * (obj[-1, 1] - obj[0, 1]) >= 0.15 * h)
    if verb in ("push-left", "push-right"):
        sign = -1.0 if verb == "push-left" else 1.0
        dx = sign * np.diff(obj[:, 0])
        return bool(np.all(dx >= -tol) and sign * (obj[-1, 0] - obj[0, 0]) >= 0.15 * w)
    if verb in ("cover", "uncover"):
        cov = _coverage_of(tr, LID, OBJECT)
        return bool(tr[0, LID, 5] == 1 and cov[0] == 0.0 and cov[-1] >= 0.9)
    return False
