"""Factored HOI scoring.

For a human candidate b1, an object candidate b2 of class o and an HOI class
(o, i)::

    p_final = p_det(b1 | human) * p_det(b2 | o) * sigmoid(sum of enabled factor logits[i])

The detector terms are zero for boxes outside the class candidate sets; pairs
that fail the indicator are never materialized. Factor logits are computed
once per distinct candidate pair and shared by every HOI class on that pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import encoders
from .candidates import CandidateSet
from .dataio import ImageRecord, NUM_KEYPOINTS
from .neuralnet import Mlp, mlp_optimizer, sigmoid
from .taxonomy import Taxonomy

FACTORS = ("human_app", "object_app", "boxes", "pose")
FACTOR_ALIASES = {
    "app": ("human_app", "object_app"),
    "human_app": ("human_app",),
    "object_app": ("object_app",),
    "box": ("boxes",),
    "boxes": ("boxes",),
    "pose": ("pose",),
    "det": (),
}


def parse_factors(spec: str | Sequence[str]) -> tuple[str, ...]:
    """``"det,app,box"`` -> ``("human_app", "object_app", "boxes")``."""
    items = spec.split(",") if isinstance(spec, str) else list(spec)
    out = set()
    for it in items:
        it = it.strip().lower().replace("-", "_")
        if not it:
            continue
        if it not in FACTOR_ALIASES:
            raise ValueError(f"unknown factor {it!r}; choose from {sorted(FACTOR_ALIASES)}")
        out.update(FACTOR_ALIASES[it])
    return tuple(f for f in FACTORS if f in out)


def factors_label(factors: Iterable[str]) -> str:
    f = set(factors)
    parts = ["Det"]
    if {"human_app", "object_app"} <= f:
        parts.append("App")
    elif "human_app" in f:
        parts.append("Human App")
    elif "object_app" in f:
        parts.append("Object App")
    if "boxes" in f:
        parts.append("Box")
    if "pose" in f:
        parts.append("Pose")
    return " + ".join(parts)


def detector_term(score: float, in_candidate_set: bool) -> float:
    return float(score) if in_candidate_set else 0.0


@dataclass(frozen=True)
class ModelConfig:
    factors: tuple[str, ...] = ("human_app", "object_app", "boxes")
    app_dim: int = 2048
    object_one_hot: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return {"factors": list(self.factors), "app_dim": self.app_dim,
                "object_one_hot": self.object_one_hot, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["factors"]), int(d["app_dim"]), bool(d["object_one_hot"]), int(d["seed"]))


@dataclass
class PairFeatures:
    """Per-row factor inputs; only the enabled factors are filled."""

    human_app: np.ndarray | None = None
    object_app: np.ndarray | None = None
    boxes: np.ndarray | None = None
    pose: np.ndarray | None = None
    count: int | None = None     # row count, needed when no factor is enabled

    def take(self, idx: np.ndarray) -> "PairFeatures":
        idx = np.asarray(idx)
        return PairFeatures(*(None if a is None else a[idx] for a in
                              (self.human_app, self.object_app, self.boxes, self.pose)), count=len(idx))

    def __len__(self) -> int:
        if self.count is not None:
            return self.count
        for a in (self.human_app, self.object_app, self.boxes, self.pose):
            if a is not None:
                return len(a)
        return 0


class FactorModel:
    def __init__(self, taxonomy: Taxonomy, config: ModelConfig = ModelConfig(), dtype=np.float32):
        for f in config.factors:
            if f not in FACTORS:
                raise ValueError(f"unknown factor {f!r}")
        self.taxonomy = taxonomy
        self.config = config
        self.dtype = np.dtype(dtype)
        n_int = taxonomy.num_interactions
        box_in = encoders.box_aug_dim(taxonomy.num_objects, config.object_one_hot)
        pose_in = encoders.pose_aug_dim(taxonomy.num_objects, config.object_one_hot)
        D = config.app_dim
        archs = {
            "human_app": [D, D, n_int],
            "object_app": [D, D, n_int],
            "boxes": [box_in, box_in, box_in, n_int],
            "pose": [pose_in, pose_in, pose_in, n_int],
        }
        # one child seed per factor slot, so a factor initializes identically
        # regardless of which other factors are enabled
        seeds = np.random.SeedSequence(config.seed).spawn(len(FACTORS))
        self.mlps: dict[str, Mlp] = {}
        for f, ss in zip(FACTORS, seeds):
            if f in config.factors:
                self.mlps[f] = Mlp(archs[f], np.random.default_rng(ss), dtype=self.dtype)
        self.architectures = {f: archs[f] for f in config.factors}

    @property
    def factors(self) -> tuple[str, ...]:
        return self.config.factors

    def train(self) -> "FactorModel":
        for m in self.mlps.values():
            m.train()
        return self

    def eval(self) -> "FactorModel":
        for m in self.mlps.values():
            m.eval()
        return self

    def factor_logits(self, feats: PairFeatures) -> dict[str, np.ndarray]:
        out = {}
        for f, mlp in self.mlps.items():
            x = getattr(feats, f)
            if x is None:
                raise ValueError(f"missing features for enabled factor {f}")
            out[f] = mlp.forward(x)
        return out

    def interaction_logits(self, feats: PairFeatures) -> np.ndarray:
        n = len(feats)
        total = np.zeros((n, self.taxonomy.num_interactions), dtype=np.float64)
        for v in self.factor_logits(feats).values():
            total += v
        return total

    def interaction_term(self, feats: PairFeatures) -> np.ndarray:
        """``[P, |I|]`` interaction probabilities."""
        return sigmoid(self.interaction_logits(feats))

    def backward(self, dlogits: np.ndarray) -> dict:
        return {f: mlp.backward(dlogits) for f, mlp in self.mlps.items()}

    def optimizers(self, lr: float) -> dict:
        return {f: mlp_optimizer(m, lr=lr) for f, m in self.mlps.items()}

    @property
    def num_params(self) -> int:
        return sum(m.num_params for m in self.mlps.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for f in FACTORS:
            if f in self.mlps:
                out.update(self.mlps[f].state_dict(prefix=f + "."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for f, m in self.mlps.items():
            m.load_state_dict(state, prefix=f + ".")

    def snapshot(self):
        return {f: m.copy_params() for f, m in self.mlps.items()}

    def restore(self, snap) -> None:
        for f, s in snap.items():
            self.mlps[f].restore_params(s)


# ---------------------------------------------------------------------------
# candidate pairs of one image

@dataclass
class ImagePairs:
    """Distinct candidate pairs of an image and the (pair, HOI class) entries on them."""

    image_id: str
    human_box: np.ndarray        # [P, 4]
    object_box: np.ndarray       # [P, 4]
    human_det: np.ndarray        # [P] index into record.detections
    object_det: np.ndarray       # [P]
    p_det_human: np.ndarray      # [P]
    p_det_object: np.ndarray     # [P]
    object_class: np.ndarray     # [P]
    features: PairFeatures
    entry_pair: np.ndarray       # [E]
    entry_class: np.ndarray      # [E]

    @property
    def num_pairs(self) -> int:
        return len(self.human_box)

    @property
    def num_entries(self) -> int:
        return len(self.entry_pair)


def build_pair_features(record: ImageRecord, hbox, obox, hrows, orows, poses, has_pose,
                        objs, features: np.ndarray, taxonomy: Taxonomy, factors: Iterable[str],
                        one_hot: bool = True) -> PairFeatures:
    factors = set(factors)
    pf = PairFeatures(count=len(hbox))
    n_obj = taxonomy.num_objects
    if "human_app" in factors:
        pf.human_app = features[hrows]
    if "object_app" in factors:
        pf.object_app = features[orows]
    if "boxes" in factors:
        raw = encoders.encode_box_pairs(hbox, obox, record.width, record.height)
        pf.boxes = encoders.augment(raw, objs, n_obj, one_hot).astype(np.float32)
    if "pose" in factors:
        a, r = encoders.encode_poses(poses, has_pose, hbox, obox)
        pf.pose = encoders.augment(np.concatenate([a, r], axis=1), objs, n_obj, one_hot).astype(np.float32)
    return pf


def build_image_pairs(record: ImageRecord, candidates: CandidateSet, features: np.ndarray,
                      taxonomy: Taxonomy, factors: Iterable[str], one_hot: bool = True) -> ImagePairs:
    """Enumerate B_h x B_o for every object class with at least one HOI class.

    When the object class is the human class itself, a candidate is never
    paired with itself.
    """
    humans = candidates.humans
    rows = []
    for o in range(taxonomy.num_objects):
        if not taxonomy.classes_for_object(o):
            continue
        for oc in candidates[o]:
            for hc in humans:
                if o == taxonomy.human_object and hc.det_index == oc.det_index:
                    continue
                rows.append((hc, oc, o))
    P = len(rows)
    hbox = np.array([h.box.to_list() for h, _, _ in rows]).reshape(P, 4)
    obox = np.array([c.box.to_list() for _, c, _ in rows]).reshape(P, 4)
    poses = np.zeros((P, NUM_KEYPOINTS, 3))
    has_pose = np.zeros(P, dtype=bool)
    for k, (h, _, _) in enumerate(rows):
        if h.pose is not None:
            poses[k] = h.pose.keypoints
            has_pose[k] = True
    objs = np.array([o for _, _, o in rows], dtype=np.int64)
    hrows = np.array([h.feature_row for h, _, _ in rows], dtype=np.int64)
    orows = np.array([c.feature_row for _, c, _ in rows], dtype=np.int64)
    feats = build_pair_features(record, hbox, obox, hrows, orows, poses, has_pose, objs,
                                features, taxonomy, factors, one_hot)
    e_pair, e_cls = [], []
    for k, o in enumerate(objs):
        for l in taxonomy.classes_for_object(int(o)):
            e_pair.append(k)
            e_cls.append(l)
    return ImagePairs(
        image_id=record.image_id,
        human_box=hbox, object_box=obox,
        human_det=np.array([h.det_index for h, _, _ in rows], dtype=np.int64),
        object_det=np.array([c.det_index for _, c, _ in rows], dtype=np.int64),
        p_det_human=np.array([h.score for h, _, _ in rows], dtype=np.float64),
        p_det_object=np.array([c.score for _, c, _ in rows], dtype=np.float64),
        object_class=objs,
        features=feats,
        entry_pair=np.array(e_pair, dtype=np.int64),
        entry_class=np.array(e_cls, dtype=np.int64),
    )


@dataclass(frozen=True)
class PairScore:
    image_id: str
    hoi: int
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    human_det: int
    object_det: int
    p_det_human: float
    p_det_object: float
    p_interaction: float
    p_final: float

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id, "hoi": self.hoi,
            "human_box": list(self.human_box), "object_box": list(self.object_box),
            "human_det": self.human_det, "object_det": self.object_det,
            "p_det_human": self.p_det_human, "p_det_object": self.p_det_object,
            "p_interaction": self.p_interaction, "p_final": self.p_final,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairScore":
        return cls(d["image_id"], int(d["hoi"]), tuple(d["human_box"]), tuple(d["object_box"]),
                   int(d["human_det"]), int(d["object_det"]), float(d["p_det_human"]),
                   float(d["p_det_object"]), float(d["p_interaction"]), float(d["p_final"]))


def entry_probabilities(model: FactorModel, pairs: ImagePairs) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(p_interaction, p_final)`` per entry, running each factor once per pair."""
    if pairs.num_pairs == 0:
        return np.zeros(0), np.zeros(0)
    p_int_pairs = model.interaction_term(pairs.features)
    inter = model.taxonomy.interaction_of()[pairs.entry_class]
    p_int = p_int_pairs[pairs.entry_pair, inter].astype(np.float64)
    p_final = pairs.p_det_human[pairs.entry_pair] * pairs.p_det_object[pairs.entry_pair] * p_int
    return p_int, p_final


def score_pairs(model: FactorModel, pairs: ImagePairs) -> list[PairScore]:
    p_int, p_final = entry_probabilities(model, pairs)
    out = []
    for e in range(pairs.num_entries):
        k = int(pairs.entry_pair[e])
        out.append(PairScore(
            pairs.image_id, int(pairs.entry_class[e]),
            tuple(float(v) for v in pairs.human_box[k]), tuple(float(v) for v in pairs.object_box[k]),
            int(pairs.human_det[k]), int(pairs.object_det[k]),
            float(pairs.p_det_human[k]), float(pairs.p_det_object[k]),
            float(p_int[e]), float(p_final[e]),
        ))
    return out


def score_image(model: FactorModel, record: ImageRecord, candidates: CandidateSet,
                features: np.ndarray) -> list[PairScore]:
    """Score every (HOI class, candidate pair) of one image with an eval-mode model."""
    was_training = [m.training for m in model.mlps.values()]
    model.eval()
    try:
        pairs = build_image_pairs(record, candidates, features, model.taxonomy,
                                  model.factors, model.config.object_one_hot)
        return score_pairs(model, pairs)
    finally:
        for m, t in zip(model.mlps.values(), was_training):
            m.training = t


def dense_probabilities(model: FactorModel, record: ImageRecord, candidates: CandidateSet,
                        features: np.ndarray) -> np.ndarray:
    """Occurrence probability for every ``(human det, object det, HOI class)`` of an image.

    Evaluates the factorized product over all detection pairs, gating each
    detector term by candidate-set membership, instead of enumerating
    candidates only. Returns ``[D, D, |H|]``; a detection scores for object
    class o only if the detector labelled it o. Self-pairs are 0, as in
    ``build_image_pairs``. Intended for checking the sparse scoring path.
    """
    tax = model.taxonomy
    dets = record.detections
    D = len(dets)
    out = np.zeros((D, D, tax.num_hoi))
    if D == 0:
        return out
    member = [{c.det_index for c in candidates[o]} for o in range(tax.num_objects)]
    pose_of = {c.det_index: c.pose for c in candidates.humans}
    ii, jj = np.meshgrid(np.arange(D), np.arange(D), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    hbox = np.array([d.box.to_list() for d in dets])[ii]
    obox = np.array([d.box.to_list() for d in dets])[jj]
    poses = np.zeros((len(ii), NUM_KEYPOINTS, 3))
    has_pose = np.zeros(len(ii), dtype=bool)
    for k, i in enumerate(ii):
        sk = pose_of.get(int(i))
        if sk is not None:
            poses[k] = sk.keypoints
            has_pose[k] = True
    objs = np.array([dets[j].object for j in jj], dtype=np.int64)
    hrows = np.array([dets[i].feature_row for i in ii], dtype=np.int64)
    orows = np.array([dets[j].feature_row for j in jj], dtype=np.int64)
    was_training = [m.training for m in model.mlps.values()]
    model.eval()
    try:
        pf = build_pair_features(record, hbox, obox, hrows, orows, poses, has_pose, objs, features,
                                 tax, model.factors, model.config.object_one_hot)
        p_int = model.interaction_term(pf).astype(np.float64).reshape(D, D, -1)
    finally:
        for m, t in zip(model.mlps.values(), was_training):
            m.training = t
    h_obj = tax.human_object
    inter = tax.interaction_of()
    for hoi, (o, i) in enumerate(tax.hoi_classes):
        for a, da in enumerate(dets):
            p_h = detector_term(da.score if da.object == h_obj else 0.0, a in member[h_obj])
            if p_h == 0.0:
                continue
            for b, db in enumerate(dets):
                if o == h_obj and a == b:
                    continue
                p_o = detector_term(db.score if db.object == o else 0.0, b in member[o])
                out[a, b, hoi] = p_h * p_o * p_int[a, b, inter[hoi]]
    return out


# ---------------------------------------------------------------------------
# interaction confusions

def confusion_sums(model: FactorModel, pairs: ImagePairs, record: ImageRecord, match_iou: float = 0.5):
    """Per-image ``(sum of p_int rows, count)`` keyed by GT interaction.

    Each GT pair is represented by the candidate pair of its object class with
    both IoUs above ``match_iou`` and the largest ``min`` of the two (ties:
    lowest pair index). Unmatched GT pairs are skipped.
    """
    from .geometry import iou_matrix

    n_int = model.taxonomy.num_interactions
    sums = np.zeros((n_int, n_int))
    counts = np.zeros(n_int, dtype=np.int64)
    if pairs.num_pairs == 0 or not record.gt_pairs:
        return sums, counts
    p_int = model.interaction_term(pairs.features).astype(np.float64)
    gh = np.array([g.human_box.to_list() for g in record.gt_pairs])
    go = np.array([g.object_box.to_list() for g in record.gt_pairs])
    ih = iou_matrix(pairs.human_box, gh)
    io = iou_matrix(pairs.object_box, go)
    for g, gt in enumerate(record.gt_pairs):
        o, i = model.taxonomy.hoi_classes[gt.hoi]
        ok = (pairs.object_class == o) & (ih[:, g] > match_iou) & (io[:, g] > match_iou)
        if not ok.any():
            continue
        mins = np.where(ok, np.minimum(ih[:, g], io[:, g]), -np.inf)
        k = int(np.argmax(mins))
        sums[:, i] += p_int[k]
        counts[i] += 1
    return sums, counts


def interaction_confusion(model: FactorModel, dataset, cand_params=None) -> np.ndarray:
    """``|I| x |I|`` matrix: entry (m, n) is the mean probability of interaction m
    over GT box pairs whose interaction is n. Columns without matched GT are NaN."""
    from .candidates import CandidateParams, build_candidates

    cand_params = cand_params or CandidateParams()
    n_int = model.taxonomy.num_interactions
    sums = np.zeros((n_int, n_int))
    counts = np.zeros(n_int, dtype=np.int64)
    was_training = [m.training for m in model.mlps.values()]
    model.eval()
    try:
        for rec in dataset.records:
            cs = build_candidates(rec, dataset.taxonomy, cand_params)
            pairs = build_image_pairs(rec, cs, dataset.features, model.taxonomy,
                                      model.factors, model.config.object_one_hot)
            s, c = confusion_sums(model, pairs, rec)
            sums += s
            counts += c
    finally:
        for m, t in zip(model.mlps.values(), was_training):
            m.training = t
    with np.errstate(invalid="ignore", divide="ignore"):
        out = sums / counts[None, :]
    out[:, counts == 0] = np.nan
    return out


def row_softmax(matrix: np.ndarray) -> np.ndarray:
    """Softmax along each row, ignoring NaN entries (which stay NaN)."""
    m = np.asarray(matrix, dtype=np.float64)
    out = np.full_like(m, np.nan)
    for r in range(m.shape[0]):
        ok = ~np.isnan(m[r])
        if not ok.any():
            continue
        e = np.exp(m[r, ok] - m[r, ok].max())
        out[r, ok] = e / e.sum()
    return out


# ---------------------------------------------------------------------------
# persistence

def save_model(model: FactorModel, path, extra: dict | None = None) -> None:
    from .dataio import save_checkpoint

    meta = {
        "model": model.config.to_dict(),
        "architectures": {f: list(a) for f, a in model.architectures.items()},
        "taxonomy": model.taxonomy.to_dict(),
        "taxonomy_hash": model.taxonomy.content_hash(),
    }
    meta.update(extra or {})
    save_checkpoint(model.state_dict(), path, meta)


def load_model(path, taxonomy: Taxonomy | None = None) -> tuple[FactorModel, dict]:
    """Rebuild an eval-mode model from a checkpoint directory.

    With ``taxonomy`` given, parameter shapes are checked against it, which
    catches a checkpoint trained for a different number of interactions.
    """
    from .dataio import CheckpointError, load_checkpoint

    params, manifest = load_checkpoint(path)
    if taxonomy is None:
        taxonomy = Taxonomy.from_dict(manifest["taxonomy"])
    config = ModelConfig.from_dict(manifest["model"])
    model = FactorModel(taxonomy, config)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from None
    return model.eval(), manifest
