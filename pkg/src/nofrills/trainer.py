"""Pair labeling, positive/negative sampling, masked multi-label BCE, training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .candidates import CandidateParams, CandidateSet, build_candidates
from .dataio import Dataset, ImageRecord
from .evaluator import EvalIndex, EvalResult
from .factormodel import (FactorModel, ImagePairs, ModelConfig, PairFeatures, build_image_pairs,
                          entry_probabilities)
from .geometry import Box, iou_matrix
from .neuralnet import bce_terms, sigmoid
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

LABEL_IOU = 0.5
LOSS_MODES = ("hoi", "interaction")
METRIC_COLUMNS = ("epoch", "train_loss", "val_map_full", "val_map_rare", "val_map_nonrare", "wall_seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, model: FactorModel, history: list):
        super().__init__(msg)
        self.model = model
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    neg_per_pos: int = 1000
    loss_mode: str = "hoi"
    use_indicators: bool = True
    lr: float = 1e-3
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.2
    select_best: bool = True

    def __post_init__(self):
        if self.neg_per_pos < 1:
            raise ValueError("neg_per_pos must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TrainSample:
    human_box: Box
    object_box: Box
    hoi: int
    label: bool
    p_det_human: float
    p_det_object: float
    pair_index: int


def label_entries(pairs: ImagePairs, record: ImageRecord, taxonomy: Taxonomy) -> tuple[np.ndarray, np.ndarray]:
    """Labels for the image's entries and the full pair-by-class match matrix.

    ``match[p, l]`` is True iff pair p overlaps (IoU > 0.5 on both boxes) a
    GT pair of class l; entry labels read ``match`` at their own class.
    """
    P = pairs.num_pairs
    match = np.zeros((P, taxonomy.num_hoi), dtype=bool)
    if P and record.gt_pairs:
        gh = np.array([g.human_box.to_list() for g in record.gt_pairs])
        go = np.array([g.object_box.to_list() for g in record.gt_pairs])
        cls = np.array([g.hoi for g in record.gt_pairs])
        ok = (iou_matrix(pairs.human_box, gh) > LABEL_IOU) & (iou_matrix(pairs.object_box, go) > LABEL_IOU)
        for g in range(len(cls)):
            match[:, cls[g]] |= ok[:, g]
    labels = match[pairs.entry_pair, pairs.entry_class]
    return labels, match


def label_pairs(record: ImageRecord, candidates: CandidateSet, taxonomy: Taxonomy) -> list[TrainSample]:
    """One sample per (candidate pair, HOI class the pair is a candidate for)."""
    pairs = build_image_pairs(record, candidates, np.zeros((0, 0), np.float32), taxonomy, ())
    labels, _ = label_entries(pairs, record, taxonomy)
    out = []
    for e in range(pairs.num_entries):
        k = int(pairs.entry_pair[e])
        out.append(TrainSample(Box(*pairs.human_box[k]), Box(*pairs.object_box[k]), int(pairs.entry_class[e]),
                               bool(labels[e]), float(pairs.p_det_human[k]), float(pairs.p_det_object[k]), k))
    return out


def sample_minibatch(labels: np.ndarray, neg_per_pos: int, rng: np.random.Generator) -> np.ndarray:
    """All positives plus ``min(P * neg_per_pos, available)`` uniformly drawn negatives.

    Returns entry indices (positives first, then negatives in ascending order);
    empty when there is no positive.
    """
    labels = np.asarray(labels, dtype=bool)
    pos = np.flatnonzero(labels)
    if len(pos) == 0:
        return pos
    neg = np.flatnonzero(~labels)
    k = min(len(pos) * neg_per_pos, len(neg))
    if k < len(neg):
        neg = np.sort(rng.choice(neg, size=k, replace=False))
    return np.concatenate([pos, neg])


@dataclass
class MiniBatch:
    features: PairFeatures
    hoi: np.ndarray          # [N] assigned class per sample
    labels: np.ndarray       # [N] bool
    det_product: np.ndarray  # [N] p_det_human * p_det_object
    match: np.ndarray        # [N, |H|] labels for every class (used without indicators)

    def __len__(self) -> int:
        return len(self.hoi)


def make_minibatch(pairs: ImagePairs, labels: np.ndarray, match: np.ndarray, entries: np.ndarray) -> MiniBatch:
    pr = pairs.entry_pair[entries]
    return MiniBatch(
        features=pairs.features.take(pr),
        hoi=pairs.entry_class[entries],
        labels=labels[entries],
        det_product=pairs.p_det_human[pr] * pairs.p_det_object[pr],
        match=match[pr],
    )


def loss_and_logit_grad(logits: np.ndarray, batch: MiniBatch, taxonomy: Taxonomy,
                        loss_mode: str = "hoi", use_indicators: bool = True) -> tuple[float, np.ndarray]:
    """Masked multi-label BCE over a mini-batch and its gradient w.r.t. interaction logits.

    ``hoi`` mode scores ``p = p_det_h * p_det_o * sigmoid(logit)``; ``interaction``
    mode scores ``sigmoid(logit)`` alone. With indicators each sample only reads
    its own class; without them every class contributes, labelled by ``match``.
    The sum is normalized by ``N * |H|``.
    """
    N = len(batch)
    H = taxonomy.num_hoi
    inter = taxonomy.interaction_of()
    logits = np.asarray(logits, dtype=np.float64)
    if use_indicators:
        cols = inter[batch.hoi]
        s = logits[np.arange(N), cols]
        sig = sigmoid(s)
        q = batch.det_product if loss_mode == "hoi" else np.ones(N)
        p = q * sig
        terms, dp = bce_terms(p, batch.labels)
        ds = dp * q * sig * (1 - sig) / (N * H)
        dlogits = np.zeros_like(logits)
        np.add.at(dlogits, (np.arange(N), cols), ds)
    else:
        s = logits[:, inter]                       # [N, H]
        sig = sigmoid(s)
        q = batch.det_product[:, None] if loss_mode == "hoi" else np.ones((N, 1))
        p = q * sig
        terms, dp = bce_terms(p, batch.match)
        ds = dp * q * sig * (1 - sig) / (N * H)
        onehot = np.zeros((H, logits.shape[1]))
        onehot[np.arange(H), inter] = 1.0
        dlogits = ds @ onehot
    loss = float(terms.sum() / (N * H))
    return loss, dlogits


def minibatch_loss(model: FactorModel, batch: MiniBatch, config: TrainConfig) -> tuple[float, dict]:
    """Training-mode forward, masked loss, and backward into every enabled factor."""
    if len(batch) == 0:
        raise ValueError("empty mini-batch")
    model.train()
    logits = model.interaction_logits(batch.features)
    loss, dlogits = loss_and_logit_grad(logits, batch, model.taxonomy, config.loss_mode, config.use_indicators)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite mini-batch loss")
    grads = model.backward(dlogits) if model.mlps else {}
    return loss, grads


# ---------------------------------------------------------------------------

@dataclass
class PreparedImage:
    pairs: ImagePairs
    labels: np.ndarray
    match: np.ndarray


def prepare_images(dataset: Dataset, factors: Sequence[str], one_hot: bool = True,
                   cand_params: CandidateParams = CandidateParams()) -> list[PreparedImage]:
    out = []
    for rec in dataset.records:
        cs = build_candidates(rec, dataset.taxonomy, cand_params)
        pairs = build_image_pairs(rec, cs, dataset.features, dataset.taxonomy, factors, one_hot)
        labels, match = label_entries(pairs, rec, dataset.taxonomy)
        out.append(PreparedImage(pairs, labels, match))
    return out


class Validator:
    """Scores a fixed dataset with an eval-mode model and computes mAP."""

    def __init__(self, dataset: Dataset, factors: Sequence[str], one_hot: bool = True,
                 cand_params: CandidateParams = CandidateParams()):
        self.dataset = dataset
        self.images = [p.pairs for p in prepare_images(dataset, factors, one_hot, cand_params)]
        self.index = EvalIndex(self.images, dataset)

    def scores(self, model: FactorModel) -> list[np.ndarray]:
        model.eval()
        return [entry_probabilities(model, ip)[1] for ip in self.images]

    def evaluate(self, model: FactorModel) -> EvalResult:
        return self.index.evaluate(self.scores(model))


def split_train_val(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded image-level split; ``fraction`` of the images go to validation."""
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A1]))
    perm = rng.permutation(n)
    n_val = int(round(n * fraction))
    val = sorted(perm[:n_val].tolist())
    tr = sorted(perm[n_val:].tolist())
    return dataset.subset(tr), dataset.subset(val)


@dataclass
class TrainResult:
    model: FactorModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), model_config: ModelConfig | None = None,
          val_dataset: Dataset | None = None, cand_params: CandidateParams = CandidateParams(),
          on_epoch=None) -> TrainResult:
    """Train the interaction factors; one optimizer step per positive-bearing image.

    Without ``val_dataset`` a ``val_fraction`` share of the images is held out.
    The returned model carries the parameters of the epoch with the best
    validation Full mAP when ``select_best`` is set.
    """
    tax = dataset.taxonomy
    mc = model_config or ModelConfig(app_dim=dataset.feature_dim)
    mc = replace(mc, seed=config.seed)
    model = FactorModel(tax, mc)
    if ("human_app" in mc.factors or "object_app" in mc.factors) and dataset.feature_dim != mc.app_dim:
        raise ValueError(f"feature dim {dataset.feature_dim} != model appearance dim {mc.app_dim}")
    if val_dataset is None and config.val_fraction > 0 and len(dataset) > 1:
        dataset, val_dataset = split_train_val(dataset, config.val_fraction, config.seed)
    history: list[dict] = []
    if config.epochs == 0:
        return TrainResult(model, history, 0)

    t0 = time.perf_counter()
    prepared = [p for p in prepare_images(dataset, mc.factors, mc.object_one_hot, cand_params)
                if p.labels.any() and p.pairs.num_entries >= 2]
    validator = (Validator(val_dataset, mc.factors, mc.object_one_hot, cand_params)
                 if val_dataset is not None and len(val_dataset) else None)
    log.info("training %s on %d images (%d skipped without positives)", list(mc.factors),
             len(prepared), len(dataset) - len(prepared))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    opts = model.optimizers(config.lr)
    best = (-np.inf, None, 0)
    last_good = model.snapshot()
    epochs = config.epochs if model.mlps else 1
    for epoch in range(1, epochs + 1):
        losses = []
        if model.mlps:
            for k in rng.permutation(len(prepared)):
                im = prepared[k]
                entries = sample_minibatch(im.labels, config.neg_per_pos, rng)
                if len(entries) < 2:
                    continue
                batch = make_minibatch(im.pairs, im.labels, im.match, entries)
                try:
                    loss, _ = minibatch_loss(model, batch, config)
                except FloatingPointError as e:
                    model.restore(last_good)
                    raise TrainingDiverged(f"epoch {epoch}: {e}", model, history) from e
                for f, opt in opts.items():
                    try:
                        opt.step(model.mlps[f].grads.flat)
                    except FloatingPointError as e:
                        model.restore(last_good)
                        raise TrainingDiverged(f"epoch {epoch}: {f}: {e}", model, history) from e
                losses.append(loss)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if validator is not None:
            res = validator.evaluate(model)
            row.update(val_map_full=res.map_full, val_map_rare=res.map_rare, val_map_nonrare=res.map_nonrare)
            score = res.map_full if np.isfinite(res.map_full) else -np.inf
        else:
            row.update(val_map_full=float("nan"), val_map_rare=float("nan"), val_map_nonrare=float("nan"))
            score = -np.inf
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        last_good = model.snapshot()
        if best[1] is None or score > best[0]:
            best = (score, last_good, epoch)
        log.info("epoch %d loss %.6f val mAP %.4f", epoch, row["train_loss"], row["val_map_full"])
        if on_epoch is not None:
            on_epoch(model, row)
    if config.select_best and validator is not None and best[1] is not None:
        model.restore(best[1])
        best_epoch = best[2]
    else:
        best_epoch = epochs
    model.eval()
    return TrainResult(model, history, best_epoch)


def write_metrics(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS[1:]])
