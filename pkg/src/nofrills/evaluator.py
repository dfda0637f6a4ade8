"""Per-class average precision over box pairs and Full / Rare / Non-Rare mAP.

A detection of class l is a true positive iff both of its boxes have IoU
strictly greater than 0.5 with a not-yet-matched ground-truth pair of l in
the same image. Among eligible GT pairs the one with the largest
``min(iou_human, iou_object)`` is taken (ties: GT order). AP is the area
under the all-point interpolated precision envelope.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio import Dataset
from .factormodel import ImagePairs, PairScore
from .geometry import iou_matrix
from .taxonomy import Taxonomy

MATCH_IOU = 0.5


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from TP flags in ranked order."""
    tp = np.asarray(tp, dtype=bool)
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[tp].sum() / n_gt)


def pair_candidates(det_h: np.ndarray, det_o: np.ndarray, gt_h: np.ndarray, gt_o: np.ndarray):
    """For each detection, GT indices it may match, best first.

    Returns a list of int arrays sorted by descending min-IoU, then GT index.
    """
    if len(gt_h) == 0 or len(det_h) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(len(det_h))]
    ih = iou_matrix(det_h, gt_h)
    io = iou_matrix(det_o, gt_o)
    ok = (ih > MATCH_IOU) & (io > MATCH_IOU)
    mins = np.minimum(ih, io)
    out = []
    for d in range(len(det_h)):
        g = np.flatnonzero(ok[d])
        if len(g) > 1:
            g = g[np.lexsort((g, -mins[d, g]))]
        out.append(g)
    return out


def _greedy_tp(order: np.ndarray, cands: Sequence[np.ndarray], gt_offset: np.ndarray, n_gt: int) -> np.ndarray:
    matched = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, d in enumerate(order):
        c = cands[d]
        if len(c) == 0:
            continue
        for g in c:
            gg = gt_offset[d] + g
            if not matched[gg]:
                matched[gg] = True
                tp[rank] = True
                break
    return tp


def match_and_ap(detections: Sequence[tuple], gt_pairs: Mapping[str, Sequence[tuple]]) -> float | None:
    """AP for one class.

    Args:
      detections: ``(image_id, human_box, object_box, score)`` tuples, boxes as
        ``[x1, y1, x2, y2]``. Equal scores rank by image_id, then input order.
      gt_pairs: image_id -> list of ``(human_box, object_box)``.

    Returns:
      AP in [0, 1], or None if the class has no ground truth.
    """
    n_gt = sum(len(v) for v in gt_pairs.values())
    if n_gt == 0:
        return None
    if len(detections) == 0:
        return 0.0
    ids = [d[0] for d in detections]
    scores = np.array([d[3] for d in detections], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    img_order = {k: r for r, k in enumerate(sorted(set(ids) | set(gt_pairs)))}
    img_rank = np.array([img_order[k] for k in ids])
    order = np.lexsort((np.arange(len(detections)), img_rank, -scores))
    offsets = {}
    off = 0
    for k in sorted(gt_pairs):
        offsets[k] = off
        off += len(gt_pairs[k])
    by_img = defaultdict(list)
    for d, k in enumerate(ids):
        by_img[k].append(d)
    cands: list = [None] * len(detections)
    gt_offset = np.zeros(len(detections), dtype=np.int64)
    for k, ds in by_img.items():
        gts = gt_pairs.get(k, ())
        gh = np.array([g[0] for g in gts], dtype=np.float64).reshape(-1, 4)
        go = np.array([g[1] for g in gts], dtype=np.float64).reshape(-1, 4)
        dh = np.array([detections[d][1] for d in ds], dtype=np.float64).reshape(-1, 4)
        do = np.array([detections[d][2] for d in ds], dtype=np.float64).reshape(-1, 4)
        for d, c in zip(ds, pair_candidates(dh, do, gh, go)):
            cands[d] = c
            gt_offset[d] = offsets.get(k, 0)
    tp = _greedy_tp(order, cands, gt_offset, n_gt)
    return average_precision(tp, n_gt)


@dataclass
class EvalResult:
    ap: np.ndarray            # [|H|], NaN where the class has no GT
    n_gt: np.ndarray          # [|H|]
    map_full: float
    map_rare: float
    map_nonrare: float

    def summary(self) -> dict:
        return {"full": self.map_full, "rare": self.map_rare, "non_rare": self.map_nonrare}


def _mean(ap: np.ndarray, classes: Iterable[int]) -> float:
    vals = [ap[c] for c in classes if not math.isnan(ap[c])]
    return float(np.mean(vals)) if vals else float("nan")


def aggregate(ap: np.ndarray, n_gt: np.ndarray, taxonomy: Taxonomy) -> EvalResult:
    full, rare, non_rare = taxonomy.split()
    return EvalResult(ap, n_gt, _mean(ap, sorted(full)), _mean(ap, sorted(rare)), _mean(ap, sorted(non_rare)))


class EvalIndex:
    """Static matching structure for a fixed set of candidate entries.

    Which GT pairs each (pair, class) entry could match depends only on the
    boxes, not on model scores, so it is computed once; evaluation then only
    sorts scores and runs the greedy pass.
    """

    def __init__(self, images: Sequence[ImagePairs], dataset: Dataset):
        tax = dataset.taxonomy
        self.taxonomy = tax
        H = tax.num_hoi
        self.n_gt = np.zeros(H, dtype=np.int64)
        gt_lists = []  # per image: class -> (hboxes, oboxes)
        for rec in dataset.records:
            per = defaultdict(lambda: ([], []))
            for g in rec.gt_pairs:
                per[g.hoi][0].append(g.human_box.to_list())
                per[g.hoi][1].append(g.object_box.to_list())
                self.n_gt[g.hoi] += 1
            gt_lists.append(per)
        id_to_rec = {r.image_id: k for k, r in enumerate(dataset.records)}
        self.image_rank = {}
        for r, k in enumerate(sorted(id_to_rec)):
            self.image_rank[k] = r
        # per class: concatenated entries over images
        cls_img, cls_entry, cls_gtoff, cls_cands = ([[] for _ in range(H)] for _ in range(4))
        gt_base = np.zeros(H, dtype=np.int64)
        offsets_per_image = []
        for rec in dataset.records:
            offs = gt_base.copy()
            offsets_per_image.append(offs)
            for g in rec.gt_pairs:
                gt_base[g.hoi] += 1
        self.images = list(images)
        for im_idx, ip in enumerate(self.images):
            ri = id_to_rec[ip.image_id]
            per = gt_lists[ri]
            for l in np.unique(ip.entry_class):
                l = int(l)
                es = np.flatnonzero(ip.entry_class == l)
                prs = ip.entry_pair[es]
                gh, go = per.get(l, ([], []))
                cands = pair_candidates(ip.human_box[prs], ip.object_box[prs],
                                        np.array(gh).reshape(-1, 4), np.array(go).reshape(-1, 4))
                cls_img[l].append(np.full(len(es), im_idx))
                cls_entry[l].append(es)
                cls_gtoff[l].append(np.full(len(es), offsets_per_image[ri][l]))
                cls_cands[l].extend(cands)
        self.cls_img = [np.concatenate(x) if x else np.zeros(0, np.int64) for x in cls_img]
        self.cls_entry = [np.concatenate(x) if x else np.zeros(0, np.int64) for x in cls_entry]
        self.cls_gtoff = [np.concatenate(x) if x else np.zeros(0, np.int64) for x in cls_gtoff]
        self.cls_cands = cls_cands
        rank_of_img = np.array([self.image_rank[ip.image_id] for ip in self.images], dtype=np.int64)
        self.cls_imgrank = [rank_of_img[x] if len(x) else x for x in self.cls_img]

    def evaluate(self, entry_scores: Sequence[np.ndarray]) -> EvalResult:
        """``entry_scores[k]`` holds p_final for every entry of ``images[k]``."""
        H = self.taxonomy.num_hoi
        ap = np.full(H, np.nan)
        for l in range(H):
            if self.n_gt[l] == 0:
                continue
            imgs = self.cls_img[l]
            if len(imgs) == 0:
                ap[l] = 0.0
                continue
            s = np.array([entry_scores[i][e] for i, e in zip(imgs, self.cls_entry[l])], dtype=np.float64) \
                if len(imgs) < 64 else _gather(entry_scores, imgs, self.cls_entry[l])
            # insertion order within an image = entry order, which cls_entry preserves
            order = np.lexsort((np.arange(len(s)), self.cls_imgrank[l], -s))
            tp = _greedy_tp(order, self.cls_cands[l], self.cls_gtoff[l], int(self.n_gt[l]))
            ap[l] = average_precision(tp, int(self.n_gt[l]))
        return aggregate(ap, self.n_gt, self.taxonomy)


def _gather(entry_scores, imgs, entries):
    out = np.empty(len(imgs))
    # imgs is grouped by image in ascending order of appearance
    bounds = np.flatnonzero(np.diff(imgs)) + 1
    start = 0
    for end in list(bounds) + [len(imgs)]:
        i = imgs[start]
        out[start:end] = entry_scores[i][entries[start:end]]
        start = end
    return out


def evaluate_scores(scores: Iterable[PairScore], dataset: Dataset) -> EvalResult:
    """Evaluate a score dump (e.g. read back from JSON Lines) against a dataset."""
    tax = dataset.taxonomy
    H = tax.num_hoi
    dets: list[list[tuple]] = [[] for _ in range(H)]
    known = {r.image_id for r in dataset.records}
    for s in scores:
        if not 0 <= s.hoi < H:
            raise ValueError(f"score references hoi class {s.hoi} outside taxonomy of {H} classes")
        if s.image_id not in known:
            raise ValueError(f"score references unknown image {s.image_id!r}")
        dets[s.hoi].append((s.image_id, s.human_box, s.object_box, s.p_final))
    gts: list[dict] = [defaultdict(list) for _ in range(H)]
    n_gt = np.zeros(H, dtype=np.int64)
    for r in dataset.records:
        for g in r.gt_pairs:
            gts[g.hoi][r.image_id].append((g.human_box.to_list(), g.object_box.to_list()))
            n_gt[g.hoi] += 1
    ap = np.full(H, np.nan)
    for l in range(H):
        res = match_and_ap(dets[l], gts[l])
        if res is not None:
            ap[l] = res
    return aggregate(ap, n_gt, tax)


def write_report(result: EvalResult, taxonomy: Taxonomy, path) -> None:
    """Per-class AP CSV plus Full / Rare / Non-Rare summary rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "object", "interaction", "ap", "n_gt"])
        for h, (o, i) in enumerate(taxonomy.hoi_classes):
            ap = result.ap[h]
            w.writerow([taxonomy.class_name(h), taxonomy.objects[o], taxonomy.interactions[i],
                        "NA" if math.isnan(ap) else f"{ap:.6f}", int(result.n_gt[h])])
        for name, v in (("mAP_full", result.map_full), ("mAP_rare", result.map_rare),
                        ("mAP_nonrare", result.map_nonrare)):
            w.writerow([name, "", "", "NA" if math.isnan(v) else f"{v:.6f}", ""])
