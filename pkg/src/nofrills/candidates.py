"""Per-object candidate box sets and pose-to-human assignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataio import ImageRecord, PoseSkeleton
from .geometry import Box, intersection, nms
from .taxonomy import Taxonomy

POSE_INSIDE_FRACTION = 0.70


@dataclass(frozen=True)
class CandidateParams:
    nms_thresh: float = 0.3
    score_thresh: float = 0.01
    max_per_class: int = 10


@dataclass(frozen=True)
class Candidate:
    box: Box
    score: float
    feature_row: int
    det_index: int
    pose: PoseSkeleton | None = None


@dataclass(frozen=True)
class CandidateSet:
    """``by_object[o]`` is the descending-score candidate list B_o."""

    by_object: tuple[tuple[Candidate, ...], ...]
    human_object: int

    def __getitem__(self, o: int) -> tuple[Candidate, ...]:
        return self.by_object[o]

    @property
    def humans(self) -> tuple[Candidate, ...]:
        return self.by_object[self.human_object]

    def __len__(self) -> int:
        return sum(len(c) for c in self.by_object)


def pose_inside_ratio(human_box: Box, skeleton: PoseSkeleton) -> float | None:
    tight = skeleton.tight_box()
    if tight is None:
        return None
    return intersection(tight, human_box) / tight.area


def assign_pose(human_box: Box, skeletons: Sequence[PoseSkeleton]) -> PoseSkeleton | None:
    """Pick the skeleton whose keypoint box lies most inside ``human_box``.

    Eligible iff at least 70% of the tight keypoint box area is inside.
    Ties on the ratio go to the larger summed confidence; exact ties after
    that are settled on the raw keypoint bytes so input order never matters.
    """
    best = None
    best_key = None
    for sk in skeletons:
        ratio = pose_inside_ratio(human_box, sk)
        if ratio is None or ratio < POSE_INSIDE_FRACTION:
            continue
        key = (ratio, sk.total_confidence(), sk.keypoints.tobytes())
        if best_key is None or key > best_key:
            best, best_key = sk, key
    return best


def build_candidates(record: ImageRecord, taxonomy: Taxonomy,
                     params: CandidateParams = CandidateParams()) -> CandidateSet:
    """NMS, then score threshold, then top-k, independently for every object class."""
    per_class: list[list[int]] = [[] for _ in range(taxonomy.num_objects)]
    for k, d in enumerate(record.detections):
        per_class[d.object].append(k)
    out = []
    for o, idx in enumerate(per_class):
        dets = [(record.detections[k].box, record.detections[k].score) for k in idx]
        kept = [idx[j] for j in nms(dets, params.nms_thresh)]
        kept = [k for k in kept if record.detections[k].score > params.score_thresh]
        kept = kept[: params.max_per_class]
        cands = []
        for k in kept:
            d = record.detections[k]
            pose = assign_pose(d.box, record.poses) if o == taxonomy.human_object else None
            cands.append(Candidate(d.box, d.score, d.feature_row, k, pose))
        out.append(tuple(cands))
    return CandidateSet(tuple(out), taxonomy.human_object)


def candidates_to_dict(record: ImageRecord, cs: CandidateSet, taxonomy: Taxonomy) -> dict:
    """JSON form used by the candidate cache: detection indices plus assigned pose index."""
    pose_index = {id(p): k for k, p in enumerate(record.poses)}
    return {
        "image_id": record.image_id,
        "candidates": {
            taxonomy.objects[o]: [
                {"det": c.det_index, "score": c.score,
                 "pose": pose_index.get(id(c.pose)) if c.pose is not None else None}
                for c in cands
            ]
            for o, cands in enumerate(cs.by_object) if cands
        },
    }
