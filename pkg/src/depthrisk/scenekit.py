"""Synthetic dashcam scenes, the on-disk dataset format, and archive ingestion.

Objects move on straight tracks parametrized in image space plus depth
``(u, v, z)``; world coordinates follow from a pinhole camera. Three kinds
of clip are generated:

* ``positive`` - two objects come within the collision radius of each
  other in the world at the accident frame and stay there;
* ``trap`` - two objects meet in the image (centers a few pixels apart)
  while staying far apart in depth, then stop, so the image alone looks
  like a crash;
* ``negative`` - independent traffic with no close approach.

Depth maps are painted back to front over a constant background, so nearer
boxes hide farther ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1
DATASET_FORMAT = "depthrisk-dataset"
KINDS = ("negative", "trap", "positive")
SENTINEL_BOX = (-1.0, -1.0, -1.0, -1.0)
_HEADER_FIELDS = ("label", "accident_frame", "kind", "has_depth", "has_world", "key_a", "key_b")
# state -> feature maps are shared by every dataset so models transfer across seeds
_FEATURE_MAP_SEED = 20240611


class DatasetError(Exception):
    """Malformed dataset directory, record or archive."""


@dataclass
class FrameObservation:
    context_feature: np.ndarray  # (D,)
    object_features: np.ndarray  # (N, D)
    boxes: np.ndarray  # (N, 4), sentinel rows for padding
    presence_mask: np.ndarray  # (N,)
    depth: Optional[np.ndarray]  # (Y, X) or None for depth-free samples


@dataclass(eq=False)
class VideoSample:
    """One labeled clip, stored as stacked per-frame arrays."""

    sample_id: str
    context: np.ndarray  # (T, D)
    objects: np.ndarray  # (T, N, D)
    boxes: np.ndarray  # (T, N, 4)
    mask: np.ndarray  # (T, N) bool
    depth: Optional[np.ndarray]  # (T, Y, X)
    label: int
    accident_frame: int
    world: Optional[np.ndarray] = None  # (T, N, 3) ground-truth positions
    kind: str = ""
    key_pair: tuple = (-1, -1)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.label = int(self.label)
        self.accident_frame = int(self.accident_frame)
        T = self.context.shape[0]
        if T == 0:
            raise DatasetError(f"{self.sample_id}: empty clip")
        if self.label not in (0, 1):
            raise DatasetError(f"{self.sample_id}: label must be 0 or 1, got {self.label}")
        if self.label == 1 and not 0 < self.accident_frame <= T:
            raise DatasetError(f"{self.sample_id}: accident frame {self.accident_frame} outside 1..{T}")
        if self.label == 0 and self.accident_frame != 0:
            raise DatasetError(f"{self.sample_id}: negative clip must have accident frame 0")
        if self.objects.shape[:2] != self.mask.shape or self.boxes.shape[:2] != self.mask.shape:
            raise DatasetError(f"{self.sample_id}: inconsistent object/box/mask shapes")

    @property
    def num_frames(self) -> int:
        return self.context.shape[0]

    @property
    def num_slots(self) -> int:
        return self.objects.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.context.shape[1]

    @property
    def has_depth(self) -> bool:
        return self.depth is not None

    def frame(self, t: int) -> FrameObservation:
        """Frame ``t`` (0-based array index)."""
        return FrameObservation(
            context_feature=self.context[t],
            object_features=self.objects[t],
            boxes=self.boxes[t],
            presence_mask=self.mask[t],
            depth=None if self.depth is None else self.depth[t],
        )

    def equals(self, other: "VideoSample", atol: float = 1e-12) -> bool:
        if (self.sample_id, self.label, self.accident_frame, self.kind, tuple(self.key_pair)) != \
                (other.sample_id, other.label, other.accident_frame, other.kind, tuple(other.key_pair)):
            return False
        if not np.array_equal(self.mask, other.mask):
            return False
        for name in ("context", "objects", "boxes", "depth", "world"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.allclose(a, b, rtol=0, atol=atol)):
                return False
        return True


@dataclass
class ScenarioConfig:
    num_videos: int = 100
    num_frames: int = 50
    image_width: int = 64
    image_height: int = 48
    num_slots: int = 8
    min_objects: int = 4
    max_objects: int = 7
    accident_fraction: float = 0.4
    trap_fraction: float = 0.5  # share of the negatives that are parallax traps
    feature_dim: int = 16
    noise: float = 0.05
    seed: int = 0
    collision_radius: float = 2.0
    depth_near: float = 40.0
    depth_far: float = 200.0
    focal: float = 40.0
    frame_rate: float = 10.0
    trap_separation: float = 0.3  # minimum depth gap of a trap pair, as a share of the depth range
    id_prefix: str = "vid"

    def validate(self) -> None:
        for name in ("accident_fraction", "trap_fraction", "trap_separation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.num_videos < 1 or self.num_frames < 2:
            raise ValueError("need at least one video of at least two frames")
        if self.feature_dim < 1 or self.noise < 0:
            raise ValueError("feature_dim must be positive and noise nonnegative")
        if not 2 <= self.min_objects <= self.max_objects <= self.num_slots:
            raise ValueError("need 2 <= min_objects <= max_objects <= num_slots")
        if not 0 < self.depth_near < self.depth_far:
            raise ValueError("need 0 < depth_near < depth_far")
        if self.collision_radius <= 0 or self.focal <= 0 or self.frame_rate <= 0:
            raise ValueError("collision_radius, focal and frame_rate must be positive")
        # a box is at most 2 * _MAX_HALF wide; objects need room to move and pass each other
        side = 2 * _MAX_HALF
        if self.image_width < 6 * side or self.image_height < 4 * side:
            raise ValueError(f"image {self.image_width}x{self.image_height} too small for "
                             f"{side:g}px objects (need at least {6 * side:g}x{4 * side:g})")
        if self.max_objects * side * side > 0.25 * self.image_width * self.image_height:
            raise ValueError(f"{self.max_objects} objects do not fit in a "
                             f"{self.image_width}x{self.image_height} image")

    @property
    def depth_range(self) -> float:
        return self.depth_far - self.depth_near


_KEY_HALF = (1.5, 2.5)
_MAX_HALF = 3.5
_KEY_SPEED = (20.0, 50.0)  # pixels travelled over a whole clip
_MAX_ATTEMPTS = 500


@dataclass
class _Track:
    start: int  # first present frame
    anchor: int  # frame at which (u, v, z) == (u0, v0, z0)
    u0: float
    v0: float
    z0: float
    du: float
    dv: float
    dz: float
    half_w: float
    half_h: float
    stop: Optional[int] = None  # frame after which the object stays put

    def positions(self, T: int) -> np.ndarray:
        t = np.arange(T, dtype=np.float64)
        if self.stop is not None:
            t = np.minimum(t, self.stop)
        dt = t - self.anchor
        return np.stack([self.u0 + self.du * dt, self.v0 + self.dv * dt, self.z0 + self.dz * dt], axis=1)


def _feature_maps(D: int):
    rng = np.random.default_rng(_FEATURE_MAP_SEED + D)
    obj = rng.normal(size=(D, 8))
    ctx = rng.normal(size=(D, 4))
    return obj, ctx


def generate_dataset(config: ScenarioConfig) -> list:
    """Deterministic list of synthetic clips for ``config``."""
    config.validate()
    n_pos = int(round(config.num_videos * config.accident_fraction))
    n_neg = config.num_videos - n_pos
    n_trap = int(round(n_neg * config.trap_fraction))
    kinds = ["positive"] * n_pos + ["trap"] * n_trap + ["negative"] * (n_neg - n_trap)
    root = np.random.SeedSequence(config.seed)
    order = np.random.default_rng(root.spawn(1)[0]).permutation(len(kinds))
    children = root.spawn(len(kinds))
    return [_generate_one(config, kinds[k], np.random.default_rng(children[i]),
                          f"{config.id_prefix}{i:05d}")
            for i, k in enumerate(order)]


def _generate_one(cfg: ScenarioConfig, kind: str, rng, sample_id: str) -> VideoSample:
    # the object count is drawn once so that rejections cannot skew it per kind
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(_MAX_ATTEMPTS):
        tracks, event = _sample_tracks(cfg, kind, rng, n_obj)
        if tracks is None:
            continue
        sample = _render(cfg, kind, tracks, event, rng, sample_id)
        if sample is not None:
            return sample
    raise RuntimeError(f"could not place a valid {kind} scene after {_MAX_ATTEMPTS} attempts; "
                       "enlarge the image or reduce the object count")


def _sample_tracks(cfg, kind, rng, n_obj):
    T = cfg.num_frames
    X, Y = cfg.image_width, cfg.image_height
    R = cfg.depth_range
    tracks = []
    event = 0

    pace = 1.0 / T  # speeds are given as displacement over the whole clip

    def key_motion():
        ang = rng.uniform(0, 2 * math.pi)
        sp = rng.uniform(*_KEY_SPEED) * pace
        ang_b = ang + math.pi + rng.uniform(-math.pi / 3, math.pi / 3)
        sp_b = rng.uniform(*_KEY_SPEED) * pace
        return (sp * math.cos(ang), sp * math.sin(ang)), (sp_b * math.cos(ang_b), sp_b * math.sin(ang_b))

    def half():
        return rng.uniform(*_KEY_HALF), rng.uniform(*_KEY_HALF)

    if kind in ("positive", "trap"):
        event = int(rng.integers(int(0.6 * T), int(0.9 * T) + 1))
        event = min(max(event, 2), T)
        anchor = event - 1  # array index of the meeting frame
        u_star = rng.uniform(0.25 * X, 0.75 * X)
        v_star = rng.uniform(0.25 * Y, 0.75 * Y)
        (dua, dva), (dub, dvb) = key_motion()
        if kind == "positive":
            z_star = rng.uniform(cfg.depth_near + 0.05 * R, cfg.depth_near + 0.45 * R)
            za = z_star + rng.uniform(-0.15, 0.15) * R
            zb = z_star + rng.uniform(-0.15, 0.15) * R
            dza, dzb = (z_star - za) / max(anchor, 1), (z_star - zb) / max(anchor, 1)
            a = _Track(0, anchor, u_star, v_star, z_star, dua, dva, dza, *half(), stop=anchor)
            # the pair meets inside the collision radius but not on the very same pixel
            reach = rng.uniform(0.3, 0.8) * cfg.collision_radius * cfg.focal / z_star
            phi = rng.uniform(0, 2 * math.pi)
            b = _Track(0, anchor, u_star + reach * math.cos(phi), v_star + reach * math.sin(phi), z_star,
                       dub, dvb, dzb, *half(), stop=anchor)
        else:
            gap_floor = cfg.trap_separation * R
            za = rng.uniform(cfg.depth_near + 0.05 * R, cfg.depth_near + 0.45 * R)
            zb = za + gap_floor + rng.uniform(0.05, 0.25) * R
            if zb > cfg.depth_far:
                return None, 0
            drift = rng.uniform(-0.03, 0.03, size=2) * R / max(anchor, 1)
            offset = rng.uniform(3.0, 4.5) * rng.choice([-1.0, 1.0])
            a = _Track(0, anchor, u_star, v_star, za, dua, dva, drift[0], *half(), stop=anchor)
            b = _Track(0, anchor, u_star + offset, v_star + rng.uniform(-1.0, 1.0), zb,
                       dub, dvb, drift[1], *half(), stop=anchor)
            if rng.random() < 0.5:
                a, b = b, a  # the nearer object is not always listed first
        tracks += [a, b]
    elif n_obj >= 2:
        # two movers on non-converging courses
        ang = rng.uniform(0, 2 * math.pi)
        for k in range(2):
            sp = rng.uniform(*_KEY_SPEED) * pace
            a2 = ang + rng.uniform(-0.3, 0.3)
            tracks.append(_Track(0, 0, rng.uniform(0.15 * X, 0.85 * X), rng.uniform(0.15 * Y, 0.85 * Y),
                                 rng.uniform(cfg.depth_near + 0.05 * R, cfg.depth_near + 0.6 * R),
                                 sp * math.cos(a2), sp * math.sin(a2),
                                 rng.uniform(-0.1, 0.1) * R * pace, *half()))

    while len(tracks) < n_obj:
        start = int(rng.integers(1, T // 2)) if rng.random() < 0.3 and T > 4 else 0
        sp = rng.uniform(0.0, 5.0) * pace
        ang = rng.uniform(0, 2 * math.pi)
        tracks.append(_Track(start, start, rng.uniform(0.1 * X, 0.9 * X), rng.uniform(0.1 * Y, 0.9 * Y),
                             rng.uniform(cfg.depth_near, cfg.depth_near + 0.5 * R),
                             sp * math.cos(ang), sp * math.sin(ang), rng.uniform(-0.1, 0.1) * R * pace,
                             rng.uniform(1.5, _MAX_HALF), rng.uniform(1.5, _MAX_HALF)))
    return tracks, event


def _render(cfg, kind, tracks, event, rng, sample_id):
    T, N, D = cfg.num_frames, cfg.num_slots, cfg.feature_dim
    X, Y = cfg.image_width, cfg.image_height
    n = len(tracks)

    pos = np.stack([tr.positions(T) for tr in tracks], axis=1)  # (T, n, 3) in (u, v, z)
    present = np.stack([np.arange(T) >= tr.start for tr in tracks], axis=1)
    halves = np.array([[tr.half_w, tr.half_h] for tr in tracks])

    # everything stays inside the image and the depth range
    u, v, z = pos[..., 0], pos[..., 1], pos[..., 2]
    if np.any(present & ((u - halves[:, 0] < 0) | (u + halves[:, 0] > X)
                         | (v - halves[:, 1] < 0) | (v + halves[:, 1] > Y))):
        return None
    if np.any(present & ((z < cfg.depth_near) | (z > cfg.depth_far))):
        return None

    world = np.stack([(u - X / 2) * z / cfg.focal, (v - Y / 2) * z / cfg.focal, z], axis=-1)
    for i in range(n):
        for j in range(i + 1, n):
            both = present[:, i] & present[:, j]
            dist = np.linalg.norm(world[:, i] - world[:, j], axis=-1)
            if kind == "positive" and (i, j) == (0, 1):
                continue
            if np.any(both & (dist < cfg.collision_radius)):
                return None
    if kind == "trap":
        d2 = np.linalg.norm(pos[:, 0, :2] - pos[:, 1, :2], axis=-1)
        if d2.min() > 5.0 or np.abs(z[:, 0] - z[:, 1]).min() < cfg.trap_separation * cfg.depth_range:
            return None

    slot_of = rng.permutation(n)  # objects fill the leading slots in random order

    boxes = np.tile(np.array(SENTINEL_BOX, dtype=np.float64), (T, N, 1))
    mask = np.zeros((T, N), dtype=bool)
    world_out = np.zeros((T, N, 3))
    objects = np.zeros((T, N, D))
    obj_map, ctx_map = _feature_maps(D)

    vel = np.zeros_like(pos)
    vel[1:] = pos[1:] - pos[:-1]
    for k, tr in enumerate(tracks):
        s = slot_of[k]
        pk = present[:, k]
        vk = vel[:, k].copy()
        vk[tr.start] = 0.0
        vk[~pk] = 0.0
        mask[:, s] = pk
        boxes[pk, s] = np.stack([u[pk, k] - tr.half_w, v[pk, k] - tr.half_h,
                                 u[pk, k] + tr.half_w, v[pk, k] + tr.half_h], axis=1)
        world_out[pk, s] = world[pk, k]
        vel_u, vel_v = vk[:, 0] * T / X, vk[:, 1] * T / Y
        state = np.stack([u[:, k] / X - 0.5, v[:, k] / Y - 0.5, vel_u, vel_v, np.hypot(vel_u, vel_v),
                          np.full(T, tr.half_w / 4), np.full(T, tr.half_h / 4), np.ones(T)], axis=1)
        feats = state @ obj_map.T + rng.normal(scale=cfg.noise, size=(T, D))
        objects[pk, s] = feats[pk]

    count = mask.sum(axis=1)
    safe = np.maximum(count, 1)
    mean_u = np.where(mask, (boxes[..., 0] + boxes[..., 2]) / 2, 0).sum(axis=1) / safe / X - 0.5
    mean_v = np.where(mask, (boxes[..., 1] + boxes[..., 3]) / 2, 0).sum(axis=1) / safe / Y - 0.5
    ctx_state = np.stack([mean_u, mean_v, count / N, np.ones(T)], axis=1)
    context = ctx_state @ ctx_map.T + rng.normal(scale=cfg.noise, size=(T, D))

    depth = render_depth(boxes, mask, world_out[..., 2], X, Y, background=cfg.depth_far * 1.1)

    key = (int(slot_of[0]), int(slot_of[1])) if kind in ("positive", "trap") else (-1, -1)
    # no other object may cover the centers of the two leading objects, whatever
    # its depth, so the pair's surroundings look alike for every kind; a trap
    # additionally needs each of its two objects to keep its own depth
    lead = [int(slot_of[0]), int(slot_of[1])]
    others = mask.copy()
    others[:, lead] = False
    clutter = render_depth(boxes, others, world_out[..., 2], X, Y, background=np.inf)
    t = np.arange(T)
    for s in lead:
        cx = np.floor((boxes[:, s, 0] + boxes[:, s, 2]) / 2 + 0.5).astype(int)
        cy = np.floor((boxes[:, s, 1] + boxes[:, s, 3]) / 2 + 0.5).astype(int)
        on = mask[:, s]
        if np.any(np.isfinite(clutter[t[on], cy[on], cx[on]])):
            return None
        if kind == "trap" and np.any(np.abs(depth[t, cy, cx] - world_out[:, s, 2]) > 1e-3 * cfg.depth_range):
            return None

    label = 1 if kind == "positive" else 0
    return VideoSample(
        sample_id=sample_id,
        context=context.astype(np.float32),
        objects=objects.astype(np.float32),
        boxes=boxes.astype(np.float32),
        mask=mask,
        depth=depth.astype(np.float32),
        label=label,
        accident_frame=event if label else 0,
        world=world_out.astype(np.float32),
        kind=kind,
        key_pair=key,
    )


def render_depth(boxes, mask, depths, width, height, background) -> np.ndarray:
    """Painter's algorithm over axis-aligned boxes on a constant background.

    A pixel ``(ix, iy)`` belongs to a box when ``x1 <= ix <= x2`` and
    ``y1 <= iy <= y2``.
    """
    T = boxes.shape[0]
    out = np.full((T, height, width), background, dtype=np.float64)
    xs = np.arange(width)
    ys = np.arange(height)
    for t in range(T):
        idx = np.flatnonzero(mask[t])
        for i in idx[np.argsort(-depths[t, idx], kind="stable")]:
            x1, y1, x2, y2 = boxes[t, i]
            cols = (xs >= x1) & (xs <= x2)
            rows = (ys >= y1) & (ys <= y2)
            out[t][np.ix_(rows, cols)] = depths[t, i]
    return out


def make_splits(samples, test_fraction: float = 0.3, seed: int = 0) -> dict:
    """Stratified (by label) train/test split of sample ids."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in (0, 1):
        ids = [s.sample_id for s in samples if s.label == label]
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = int(round(len(ids) * test_fraction))
        test += ids[:n_test]
        train += ids[n_test:]
    return {"train": sorted(train), "test": sorted(test)}


# ---------------------------------------------------------------------------
# on-disk format

def _record_fields(T, N, D, X, Y, has_depth, has_world):
    fields = [("header", (len(_HEADER_FIELDS),)), ("context", (T, D)), ("objects", (T, N, D)),
              ("boxes", (T, N, 4)), ("mask", (T, N))]
    if has_world:
        fields.append(("world", (T, N, 3)))
    if has_depth:
        fields.append(("depth", (T, Y, X)))
    return fields


def _layout_doc(T, N, D, X, Y):
    return {
        "dtype": "<f4",
        "order": "row-major",
        "header": list(_HEADER_FIELDS),
        "fields": [{"name": n, "shape": list(s)} for n, s in
                   _record_fields(T, N, D, X, Y, True, True)],
        "notes": "world is present when has_world=1, depth when has_depth=1; "
                 "kind codes: 0 negative, 1 trap, 2 positive, -1 unknown",
    }


def save_dataset(samples, directory, splits: Optional[dict] = None,
                 frame_rate: float = 20.0, config: Optional[ScenarioConfig] = None) -> Path:
    """Write ``samples`` as manifest.json + one .bin record each + splits.json."""
    samples = list(samples)
    if not samples:
        raise DatasetError("refusing to save an empty dataset")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = samples[0]
    T, N, D = first.num_frames, first.num_slots, first.feature_dim
    depth_shape = next((s.depth.shape[1:] for s in samples if s.depth is not None), (0, 0))
    Y, X = depth_shape
    entries = []
    counts = {k: 0 for k in KINDS}
    for s in samples:
        if (s.num_frames, s.num_slots, s.feature_dim) != (T, N, D):
            raise DatasetError(f"{s.sample_id}: shape differs from the rest of the dataset")
        if s.depth is not None and s.depth.shape[1:] != depth_shape:
            raise DatasetError(f"{s.sample_id}: depth map size differs from the rest of the dataset")
        fname = f"{s.sample_id}.bin"
        _write_record(directory / fname, s)
        entries.append({"id": s.sample_id, "file": fname, "has_depth": s.has_depth,
                        "has_world": s.world is not None})
        if s.kind in counts:
            counts[s.kind] += 1
    manifest = {
        "format": DATASET_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "T": T, "N": N, "D": D,
        "image_width": int(X), "image_height": int(Y),
        "frame_rate": frame_rate,
        "count": len(samples),
        "counts": counts,
        "layout": _layout_doc(T, N, D, X, Y),
        "samples": entries,
    }
    if config is not None:
        manifest["generator"] = asdict(config)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    if splits is None:
        splits = make_splits(samples)
    (directory / "splits.json").write_text(json.dumps(splits, indent=2))
    return path


def _write_record(path: Path, s: VideoSample) -> None:
    kind_code = KINDS.index(s.kind) if s.kind in KINDS else -1
    header = np.array([s.label, s.accident_frame, kind_code, s.has_depth, s.world is not None,
                       s.key_pair[0], s.key_pair[1]], dtype="<f4")
    parts = [header, s.context, s.objects, s.boxes, s.mask.astype("<f4")]
    if s.world is not None:
        parts.append(s.world)
    if s.depth is not None:
        parts.append(s.depth)
    with open(path, "wb") as fh:
        for p in parts:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_manifest(directory) -> dict:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path} does not exist")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    for key in ("T", "N", "D", "samples"):
        if key not in manifest:
            raise DatasetError(f"manifest {path} lacks required key {key!r}")
    if manifest.get("schema_version", SCHEMA_VERSION) > SCHEMA_VERSION:
        raise DatasetError(f"manifest {path} has schema version {manifest['schema_version']}, "
                           f"newer than supported {SCHEMA_VERSION}")
    return manifest


def load_dataset(directory) -> list:
    """Read every record listed in ``directory``/manifest.json."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    T, N, D = manifest["T"], manifest["N"], manifest["D"]
    X, Y = manifest.get("image_width", 0), manifest.get("image_height", 0)
    return [_read_record(directory / e["file"], e["id"], T, N, D, X, Y)
            for e in manifest["samples"]]


def load_splits(directory) -> dict:
    path = Path(directory) / "splits.json"
    if not path.is_file():
        raise DatasetError(f"missing split file: {path} does not exist")
    return json.loads(path.read_text())


def _read_record(path: Path, sample_id: str, T, N, D, X, Y) -> VideoSample:
    if not path.is_file():
        raise DatasetError(f"record {path} listed in the manifest does not exist")
    raw = np.fromfile(path, dtype="<f4")
    n_head = len(_HEADER_FIELDS)
    if raw.size < n_head:
        raise DatasetError(f"corrupt record {path}: too short for a header")
    header = raw[:n_head]
    has_depth, has_world = bool(header[3]), bool(header[4])
    fields = _record_fields(T, N, D, X, Y, has_depth, has_world)
    expected = sum(int(np.prod(shape)) for _, shape in fields)
    if raw.size != expected:
        raise DatasetError(
            f"shape mismatch in {path}: manifest declares T={T}, N={N}, D={D}, image {X}x{Y} "
            f"({expected} values) but the record holds {raw.size}")
    arrays = {}
    offset = 0
    for name, shape in fields:
        size = int(np.prod(shape))
        arrays[name] = raw[offset:offset + size].reshape(shape)
        offset += size
    if not np.all(np.isfinite(raw)):
        raise DatasetError(f"corrupt record {path}: non-finite values")
    mask = arrays["mask"]
    if not np.all((mask == 0) | (mask == 1)):
        raise DatasetError(f"corrupt record {path}: presence mask is not 0/1")
    kind_code = int(header[2])
    try:
        return VideoSample(
            sample_id=sample_id,
            context=arrays["context"].copy(),
            objects=arrays["objects"].copy(),
            boxes=arrays["boxes"].copy(),
            mask=mask.astype(bool),
            depth=arrays["depth"].copy() if has_depth else None,
            label=int(header[0]),
            accident_frame=int(header[1]),
            world=arrays["world"].copy() if has_world else None,
            kind=KINDS[kind_code] if 0 <= kind_code < len(KINDS) else "",
            key_pair=(int(header[5]), int(header[6])),
        )
    except DatasetError as exc:
        raise DatasetError(f"corrupt record {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# precomputed-feature archives

@dataclass
class ArchiveSchema:
    """Shapes an archive must have. DAD-style defaults: 100 frames, 19 objects, 4096 features."""

    num_frames: int = 100
    num_slots: int = 19
    feature_dim: int = 4096
    has_depth: bool = False
    accident_frame: Optional[int] = 90
    image_width: int = 0
    image_height: int = 0


def ingest_precomputed(archive, schema: ArchiveSchema = ArchiveSchema()) -> list:
    """Load an archive of precomputed features.

    ``archive`` is either a dataset directory in this package's format or
    an ``.npz`` file / directory of ``.npz`` files laid out like the public
    DAD feature dumps: ``data`` (B, T, N+1, D) with the frame feature in
    slot 0, ``det`` (B, T, N, >=4) boxes, ``labels`` (B, 2) one-hot
    [negative, positive], optional ``toa`` (B,) accident frames, ``ID``
    (B,) names and ``depth`` (B, T, Y, X). Object rows whose features are
    all zero are treated as absent. Samples without depth come back with
    ``depth=None``.
    """
    archive = Path(archive)
    if archive.is_dir() and (archive / "manifest.json").exists():
        manifest = read_manifest(archive)
        found = (manifest["T"], manifest["N"], manifest["D"])
        _check_schema(schema, found, archive)
        samples = load_dataset(archive)
        if schema.has_depth and any(s.depth is None for s in samples):
            raise DatasetError(f"schema requires depth but {archive} has depth-free records")
        return samples
    if archive.is_dir():
        files = sorted(archive.glob("*.npz"))
        if not files:
            raise DatasetError(f"no manifest.json or .npz files found in {archive}")
    elif archive.is_file():
        files = [archive]
    else:
        raise DatasetError(f"archive {archive} does not exist")
    out = []
    for f in files:
        out += _ingest_npz(f, schema)
    return out


def _check_schema(schema, found, where):
    expected = (schema.num_frames, schema.num_slots, schema.feature_dim)
    if tuple(found) != expected:
        raise DatasetError(f"schema mismatch in {where}: expected (T, N, D) = {expected}, "
                           f"found {tuple(found)}")


def _ingest_npz(path: Path, schema: ArchiveSchema) -> list:
    with np.load(path, allow_pickle=False) as z:
        missing = [k for k in ("data", "det", "labels") if k not in z]
        if missing:
            raise DatasetError(f"archive {path} lacks arrays {missing}")
        data, det, labels = z["data"], z["det"], z["labels"]
        toa = z["toa"] if "toa" in z else None
        ids = z["ID"] if "ID" in z else None
        depth = z["depth"] if "depth" in z else None
    if data.ndim == 3:
        data, det, labels = data[None], det[None], labels[None]
        depth = None if depth is None else depth[None]
        toa = None if toa is None else np.atleast_1d(toa)
        ids = None if ids is None else np.atleast_1d(ids)
    if data.ndim != 4:
        raise DatasetError(f"schema mismatch in {path}: data must be (B, T, N+1, D), found {data.shape}")
    B, T, n0, D = data.shape
    _check_schema(schema, (T, n0 - 1, D), path)
    if det.shape[:3] != (B, T, n0 - 1) or det.shape[3] < 4:
        raise DatasetError(f"schema mismatch in {path}: expected det shape ({B}, {T}, {n0 - 1}, >=4), "
                           f"found {det.shape}")
    if schema.has_depth and depth is None:
        raise DatasetError(f"schema mismatch in {path}: expected depth maps, found none")
    if depth is not None and depth.shape[:2] != (B, T):
        raise DatasetError(f"schema mismatch in {path}: depth shape {depth.shape} vs {B} clips of {T} frames")
    labels = np.asarray(labels)
    pos = labels[:, 1] > 0.5 if labels.ndim == 2 else labels.reshape(B) > 0.5

    out = []
    for b in range(B):
        objects = data[b, :, 1:].astype(np.float32)
        mask = np.any(objects != 0, axis=-1)
        boxes = det[b, :, :, :4].astype(np.float32).copy()
        boxes[~mask] = SENTINEL_BOX
        if pos[b]:
            tau = int(toa[b]) if toa is not None else schema.accident_frame
            if tau is None:
                raise DatasetError(f"{path}: positive clip {b} without an accident frame")
        else:
            tau = 0
        name = ids[b] if ids is not None else f"{path.stem}_{b:04d}"
        out.append(VideoSample(
            sample_id=str(name.item() if hasattr(name, "item") else name),
            context=data[b, :, 0].astype(np.float32),
            objects=objects,
            boxes=boxes,
            mask=mask,
            depth=None if depth is None else depth[b].astype(np.float32),
            label=int(pos[b]),
            accident_frame=tau,
        ))
    return out
