"""Seeded synthetic scenes with interaction-dependent layouts, appearance and pose.

Every scene holds one or two interacting (human, object) groups plus idle
people and objects. Layout archetypes tie each interaction to a spatial rule,
appearance rows come from per-(object, interaction) Gaussian prototypes and
skeletons from per-interaction keypoint templates. Detections are jittered
ground-truth boxes with high scores, a few uniform distractors with low
scores, and occasional low-score detections of a real region under a wrong
object class.

The generator also returns its latent bookkeeping (which entity produced
each detection), which :func:`oracle_entry_scores` uses to score pairs with
the generating rules themselves.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import NUM_KEYPOINTS, Dataset, Detection, GtPair, ImageRecord, PoseSkeleton
from .geometry import Box, iou
from .taxonomy import Taxonomy

# interaction name -> layout archetype
LAYOUTS = {
    "ride": "ride",
    "hold": "hand",
    "inspect": "hand",
    "feed": "side",
    "kick": "foot",
    "hug": "beside",
}
REQUIRED_INTERACTIONS = ("ride", "hold")
IDLE = "idle"
RIGHT_WRIST = 4
RIGHT_ANKLE = 10

# standing skeleton, (x, y) as fractions of the human box
_BASE_POSE = np.array([
    [0.50, 0.08], [0.50, 0.18], [0.35, 0.20], [0.30, 0.33], [0.28, 0.45],
    [0.65, 0.20], [0.70, 0.33], [0.72, 0.45], [0.42, 0.52], [0.42, 0.74],
    [0.42, 0.95], [0.58, 0.52], [0.58, 0.74], [0.58, 0.95], [0.47, 0.06],
    [0.53, 0.06], [0.44, 0.07], [0.56, 0.07],
])

_POSE_EDITS = {
    IDLE: {},
    "ride": {9: (0.25, 0.70), 10: (0.30, 0.90), 12: (0.75, 0.70), 13: (0.70, 0.90), 4: (0.40, 0.55)},
    "hand": {3: (0.70, 0.35), 4: (0.92, 0.45)},
    "inspect": {3: (0.70, 0.35), 4: (0.92, 0.45), 0: (0.58, 0.13), 14: (0.56, 0.10), 15: (0.62, 0.10)},
    "side": {3: (0.75, 0.25), 4: (0.95, 0.25)},
    "foot": {9: (0.60, 0.75), 10: (0.85, 0.95)},
    "beside": {3: (0.75, 0.32), 4: (0.95, 0.35), 6: (0.80, 0.30), 7: (0.95, 0.30)},
}

# (width range, height range) as fractions of the image size
OBJECT_SIZES = {
    "person": ((0.20, 0.26), (0.50, 0.65)),
    "horse": ((0.38, 0.45), (0.32, 0.42)),
    "bicycle": ((0.32, 0.40), (0.26, 0.34)),
    "cup": ((0.20, 0.23), (0.22, 0.27)),
    "ball": ((0.20, 0.24), (0.26, 0.30)),
}
DEFAULT_OBJECT_SIZE = ((0.20, 0.30), (0.22, 0.32))


def synthetic_taxonomy() -> Taxonomy:
    """Five objects, six interactions, twelve HOI classes."""
    objects = ("person", "horse", "bicycle", "cup", "ball")
    interactions = ("ride", "hold", "inspect", "feed", "kick", "hug")
    names = [("person", "hug"),
             ("horse", "ride"), ("horse", "feed"), ("horse", "hug"),
             ("bicycle", "ride"), ("bicycle", "hold"), ("bicycle", "inspect"),
             ("cup", "hold"), ("cup", "inspect"),
             ("ball", "hold"), ("ball", "inspect"), ("ball", "kick")]
    hoi = tuple((objects.index(o), interactions.index(i)) for o, i in names)
    return Taxonomy(objects, interactions, hoi, tuple([0] * len(hoi)), human_object=0)


# relative frequency of each class of the default taxonomy; two classes are rare
DEFAULT_CLASS_WEIGHTS = (0.004, 0.14, 0.08, 0.05, 0.13, 0.05, 0.07, 0.14, 0.09, 0.07, 0.004, 0.12)


@dataclass(frozen=True)
class SynthConfig:
    num_images: int = 100
    width: float = 640.0
    height: float = 480.0
    app_dim: int = 64
    max_groups: int = 2
    two_group_prob: float = 0.4
    idle_human_prob: float = 0.5
    max_idle_objects: int = 2
    distractors: int = 5
    confusion_prob: float = 0.3
    jitter: float = 0.02
    no_pose_prob: float = 0.1
    missing_keypoint_prob: float = 0.1
    keypoint_noise: float = 0.02
    object_scale: float = 1.0
    act_scale: float = 0.3
    app_noise: float = 1.0
    class_weights: tuple[float, ...] | None = None
    world_seed: int = 7

    def __post_init__(self):
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if self.app_dim < 1:
            raise ValueError("app_dim must be positive")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(float(w) for w in d["class_weights"])
        return cls(**d)


@dataclass
class Entity:
    role: str                 # "human" or "object"
    object: int
    box: Box
    group: int                # -1 for idle entities
    interaction: int          # -1 for idle
    keypoints: np.ndarray | None = None


@dataclass
class SceneLatent:
    entities: list[Entity] = field(default_factory=list)
    groups: list[tuple[int, int, int]] = field(default_factory=list)   # (human entity, object entity, hoi)
    det_origin: list[int] = field(default_factory=list)                # entity index or -1
    det_true_class: list[bool] = field(default_factory=list)


@dataclass
class SynthOutput:
    records: list[ImageRecord]
    features: np.ndarray
    latent: list[SceneLatent]

    def dataset(self, taxonomy: Taxonomy) -> Dataset:
        return Dataset(self.records, self.features, taxonomy)


class _World:
    """Prototypes shared by every scene generated under one world seed."""

    def __init__(self, taxonomy: Taxonomy, cfg: SynthConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.world_seed, 0xA99]))
        D = cfg.app_dim
        n_int = taxonomy.num_interactions
        self.obj_proto = rng.standard_normal((taxonomy.num_objects, D)) * cfg.object_scale
        # last row = idle
        self.act_human = rng.standard_normal((n_int + 1, D)) * cfg.act_scale
        self.act_object = rng.standard_normal((n_int + 1, D)) * cfg.act_scale
        self.background = rng.standard_normal(D) * cfg.object_scale


def _check_taxonomy(taxonomy: Taxonomy) -> None:
    names = set(taxonomy.interactions)
    missing = [n for n in REQUIRED_INTERACTIONS if n not in names]
    if missing:
        raise ValueError(f"taxonomy lacks the designated interactions {missing}; "
                         f"it needs at least {list(REQUIRED_INTERACTIONS)}")
    unknown = sorted(names - set(LAYOUTS))
    if unknown:
        raise ValueError(f"no layout rule for interactions {unknown}")


def _template(interaction: str) -> np.ndarray:
    t = _BASE_POSE.copy()
    key = interaction if interaction in _POSE_EDITS else LAYOUTS.get(interaction, IDLE)
    for k, xy in _POSE_EDITS[key].items():
        t[k] = xy
    return t


def _skeleton(rng, human: Box, interaction: str, cfg: SynthConfig) -> np.ndarray:
    t = _template(interaction) + rng.normal(0.0, cfg.keypoint_noise, size=(NUM_KEYPOINTS, 2))
    kp = np.zeros((NUM_KEYPOINTS, 3))
    kp[:, 0] = human.x1 + t[:, 0] * human.width
    kp[:, 1] = human.y1 + t[:, 1] * human.height
    kp[:, 2] = rng.uniform(0.5, 1.0, size=NUM_KEYPOINTS)
    miss = rng.random(NUM_KEYPOINTS) < cfg.missing_keypoint_prob
    kp[miss] = 0.0
    return kp


def _size(rng, name: str, cfg: SynthConfig) -> tuple[float, float]:
    (w0, w1), (h0, h1) = OBJECT_SIZES.get(name, DEFAULT_OBJECT_SIZE)
    return rng.uniform(w0, w1) * cfg.width, rng.uniform(h0, h1) * cfg.height


def _box_at(cx, cy, w, h) -> tuple[float, float, float, float]:
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def _inside(b, cfg) -> bool:
    return b[0] >= 0 and b[1] >= 0 and b[2] <= cfg.width and b[3] <= cfg.height


def _place_group(rng, taxonomy: Taxonomy, hoi: int, cfg: SynthConfig):
    """One attempt at a (human box, keypoints, object box) for an HOI class, or None."""
    o, i = taxonomy.hoi_classes[hoi]
    iname = taxonomy.interactions[i]
    layout = LAYOUTS[iname]
    hw, hh = _size(rng, "person", cfg)
    hx1 = rng.uniform(0, cfg.width - hw)
    hy1 = rng.uniform(0, cfg.height - hh)
    human = Box(hx1, hy1, hx1 + hw, hy1 + hh)
    kp = _skeleton(rng, human, iname, cfg)
    ow, oh = _size(rng, taxonomy.objects[o], cfg)
    hcx, hcy = human.center
    if layout == "ride":
        ocx = hcx + rng.uniform(-0.1, 0.1) * hw
        oy1 = hy1 + rng.uniform(0.45, 0.6) * hh
        ob = (ocx - ow / 2, oy1, ocx + ow / 2, oy1 + oh)
    elif layout == "hand":
        # anchor on the emitted wrist when visible, else on the template wrist
        t = _template(iname)
        wx, wy = (kp[RIGHT_WRIST, 0], kp[RIGHT_WRIST, 1]) if kp[RIGHT_WRIST, 2] > 0 else \
            (hx1 + t[RIGHT_WRIST, 0] * hw, hy1 + t[RIGHT_WRIST, 1] * hh)
        r = 0.1 * hw * np.sqrt(rng.random())
        a = rng.uniform(0, 2 * np.pi)
        ob = _box_at(wx + r * np.cos(a), wy + r * np.sin(a), ow, oh)
    elif layout == "side":
        ox1 = human.x2 + rng.uniform(-0.1, 0.1) * hw
        ocy = hy1 + rng.uniform(0.25, 0.4) * hh
        ob = (ox1, ocy - oh / 2, ox1 + ow, ocy + oh / 2)
    elif layout == "foot":
        t = _template(iname)
        ax, ay = hx1 + t[RIGHT_ANKLE, 0] * hw, hy1 + t[RIGHT_ANKLE, 1] * hh
        ob = _box_at(ax + rng.uniform(0.3, 0.5) * ow, ay - rng.uniform(0.2, 0.4) * oh, ow, oh)
    elif layout == "beside":
        ox1 = human.x2 - rng.uniform(0.1, 0.25) * hw
        ocy = hcy + rng.uniform(-0.1, 0.1) * hh
        ob = (ox1, ocy - oh / 2, ox1 + ow, ocy + oh / 2)
    else:  # pragma: no cover - guarded by _check_taxonomy
        raise ValueError(layout)
    if not _inside(ob, cfg):
        return None
    obj = Box(*ob)
    if layout == "ride" and not (iou(human, obj) > 0.2 and hcy < obj.center[1]):
        return None
    if layout == "beside" and iou(human, obj) > 0.25:
        return None
    return human, kp, obj


def _clear(box: Box, taken: list[Box], limit: float) -> bool:
    return all(iou(box, t) <= limit for t in taken)


def _jitter(rng, box: Box, cfg: SynthConfig) -> Box | None:
    sx, sy = cfg.jitter * cfg.width, cfg.jitter * cfg.height
    x1, y1, x2, y2 = np.array(box.to_list()) + rng.normal(0, 1, 4) * [sx, sy, sx, sy]
    x1, x2 = np.clip([x1, x2], 0, cfg.width)
    y1, y2 = np.clip([y1, y2], 0, cfg.height)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    return Box(float(x1), float(y1), float(x2), float(y2))


def _scene(rng, image_id: str, taxonomy: Taxonomy, cfg: SynthConfig, world: _World,
           weights: np.ndarray, rows: list):
    lat = SceneLatent()
    taken: list[Box] = []
    person = taxonomy.human_object
    n_int = taxonomy.num_interactions
    n_groups = 1 if cfg.max_groups <= 1 or rng.random() >= cfg.two_group_prob else cfg.max_groups
    for g in range(n_groups):
        hoi = int(rng.choice(len(weights), p=weights))
        for _ in range(200 if g == 0 else 50):
            placed = _place_group(rng, taxonomy, hoi, cfg)
            if placed is None:
                continue
            human, kp, obj = placed
            if _clear(human, taken, 0.1) and _clear(obj, taken, 0.1):
                break
        else:
            continue
        o, i = taxonomy.hoi_classes[hoi]
        gid = len(lat.groups)
        lat.entities.append(Entity("human", person, human, gid, i, kp))
        okp = _skeleton(rng, obj, IDLE, cfg) if o == person else None
        lat.entities.append(Entity("object", o, obj, gid, i, okp))
        lat.groups.append((len(lat.entities) - 2, len(lat.entities) - 1, hoi))
        taken += [human, obj]
    n_idle_h = int(rng.random() < cfg.idle_human_prob)
    n_idle_o = int(rng.integers(0, cfg.max_idle_objects + 1))
    idle_objs = [person] * n_idle_h + [int(x) for x in rng.integers(1, taxonomy.num_objects, size=n_idle_o)] \
        if taxonomy.num_objects > 1 else [person] * n_idle_h
    for o in idle_objs:
        for _ in range(50):
            w, h = _size(rng, taxonomy.objects[o], cfg)
            x1, y1 = rng.uniform(0, cfg.width - w), rng.uniform(0, cfg.height - h)
            b = Box(x1, y1, x1 + w, y1 + h)
            if _clear(b, taken, 0.05):
                break
        else:
            continue
        kp = _skeleton(rng, b, IDLE, cfg) if o == person else None
        lat.entities.append(Entity("human" if o == person else "object", o, b, -1, -1, kp))
        taken.append(b)

    D = cfg.app_dim

    def feature(o: int, role: str, inter: int) -> int:
        act = (world.act_human if role == "human" else world.act_object)[inter if inter >= 0 else n_int]
        rows.append(world.obj_proto[o] + act + rng.standard_normal(D) * cfg.app_noise)
        return len(rows) - 1

    dets: list[Detection] = []
    poses: list[PoseSkeleton] = []
    for e_idx, ent in enumerate(lat.entities):
        jb = _jitter(rng, ent.box, cfg)
        if jb is None:
            continue
        # a person targeted by an interaction is detected as a person but looks like a target
        dets.append(Detection(jb, ent.object, float(rng.uniform(0.4, 1.0)),
                              feature(ent.object, ent.role, ent.interaction)))
        lat.det_origin.append(e_idx)
        lat.det_true_class.append(True)
        if ent.keypoints is not None and rng.random() >= cfg.no_pose_prob:
            poses.append(PoseSkeleton(ent.keypoints, ent.box))
        if ent.object != person and taxonomy.num_objects > 2 and rng.random() < cfg.confusion_prob:
            wrong = int(rng.choice([k for k in range(taxonomy.num_objects) if k not in (person, ent.object)]))
            cb = _jitter(rng, ent.box, cfg)
            if cb is not None:
                dets.append(Detection(cb, wrong, float(rng.uniform(0.01, 0.3)),
                                      feature(ent.object, ent.role, ent.interaction)))
                lat.det_origin.append(e_idx)
                lat.det_true_class.append(False)
    for _ in range(cfg.distractors):
        w = rng.uniform(0.1, 0.4) * cfg.width
        h = rng.uniform(0.1, 0.4) * cfg.height
        x1, y1 = rng.uniform(0, cfg.width - w), rng.uniform(0, cfg.height - h)
        o = int(rng.integers(0, taxonomy.num_objects))
        rows.append(world.background + rng.standard_normal(D) * cfg.app_noise)
        dets.append(Detection(Box(x1, y1, x1 + w, y1 + h), o, float(rng.uniform(0.01, 0.4)), len(rows) - 1))
        lat.det_origin.append(-1)
        lat.det_true_class.append(False)
    gts = tuple(GtPair(lat.entities[h].box, lat.entities[ob].box, hoi) for h, ob, hoi in lat.groups)
    rec = ImageRecord(image_id, cfg.width, cfg.height, tuple(dets), tuple(poses), gts)
    return rec, lat


def generate_synthetic(config: SynthConfig, taxonomy: Taxonomy, seed: int,
                       id_prefix: str = "syn") -> SynthOutput:
    """Pure function of ``(config, taxonomy, seed)``.

    Raises:
      ValueError: the taxonomy lacks the designated ride-like and hold-like
        interactions, or names an interaction without a layout rule.
    """
    _check_taxonomy(taxonomy)
    if config.class_weights is not None:
        w = np.asarray(config.class_weights, dtype=np.float64)
    elif taxonomy.num_hoi == len(DEFAULT_CLASS_WEIGHTS) and taxonomy == synthetic_taxonomy().with_counts(taxonomy.train_counts):
        w = np.asarray(DEFAULT_CLASS_WEIGHTS)
    else:
        w = np.ones(taxonomy.num_hoi)
    if len(w) != taxonomy.num_hoi or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("class_weights must be non-negative with one weight per HOI class")
    w = w / w.sum()
    world = _World(taxonomy, config)
    children = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), 0x5CE]).spawn(config.num_images)
    rows: list[np.ndarray] = []
    records, latent = [], []
    width = len(str(max(config.num_images - 1, 0)))
    for k, ss in enumerate(children):
        rec, lat = _scene(np.random.default_rng(ss), f"{id_prefix}{k:0{width}d}", taxonomy, config, world, w, rows)
        records.append(rec)
        latent.append(lat)
    feats = np.array(rows, dtype=np.float32).reshape(len(rows), config.app_dim)
    return SynthOutput(records, feats, latent)


def count_instances(records, num_hoi: int) -> tuple[int, ...]:
    counts = [0] * num_hoi
    for r in records:
        for g in r.gt_pairs:
            counts[g.hoi] += 1
    return tuple(counts)


def split_output(out: SynthOutput, parts: dict[str, list[int]]) -> dict[str, SynthOutput]:
    """Split a generated set by image index; feature rows are re-packed per split."""
    res = {}
    for name, idx in parts.items():
        rows, recs = [], []
        for k in idx:
            r = out.records[k]
            remap = {}
            dets = []
            for d in r.detections:
                if d.feature_row not in remap:
                    remap[d.feature_row] = len(rows)
                    rows.append(out.features[d.feature_row])
                dets.append(Detection(d.box, d.object, d.score, remap[d.feature_row]))
            recs.append(ImageRecord(r.image_id, r.width, r.height, tuple(dets), r.poses, r.gt_pairs))
        feats = np.array(rows, dtype=np.float32).reshape(len(rows), out.features.shape[1])
        res[name] = SynthOutput(recs, feats, [out.latent[k] for k in idx])
    return res


def oracle_entry_scores(pairs, latent: SceneLatent, taxonomy: Taxonomy) -> np.ndarray:
    """Scores from the generating rules: 1 for entries whose detections come from
    the entities of a GT group of that class under their true classes, else 0;
    detector products break ties."""
    positive = {(h, o, hoi) for h, o, hoi in latent.groups}
    out = np.zeros(pairs.num_entries)
    for e in range(pairs.num_entries):
        k = int(pairs.entry_pair[e])
        hd, od = int(pairs.human_det[k]), int(pairs.object_det[k])
        he, oe = latent.det_origin[hd], latent.det_origin[od]
        hit = (latent.det_true_class[hd] and latent.det_true_class[od]
               and (he, oe, int(pairs.entry_class[e])) in positive)
        out[e] = (1.0 if hit else 0.0) + 1e-3 * pairs.p_det_human[k] * pairs.p_det_object[k]
    return out
