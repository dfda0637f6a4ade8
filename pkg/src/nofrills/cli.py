"""Command-line entry point: ``nofrills <command> ...``.

Commands: gen-synth, prep-candidates, train, score, eval, ablate, confusion.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training
divergence. ``NOFRILLS_THREADS`` caps numeric threads and ablation workers.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .candidates import CandidateParams, build_candidates, candidates_to_dict
from .encoders import box_aug_dim, pose_aug_dim
from .dataio import DataError, Dataset, load_dataset, save_dataset
from .evaluator import evaluate_scores, write_report
from .factormodel import (ModelConfig, PairScore, build_image_pairs, factors_label,
                          interaction_confusion, load_model, parse_factors, row_softmax, save_model,
                          score_pairs)
from .synthetic import SynthConfig, count_instances, generate_synthetic, split_output, synthetic_taxonomy
from .taxonomy import Taxonomy, TaxonomyError, load_taxonomy, save_taxonomy
from .trainer import TrainConfig, TrainingDiverged, train, write_metrics

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("nofrills")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers

def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_files(paths) -> dict[str, str]:
    return {str(p): git_blob_hash(Path(p).read_bytes()) for p in paths if p is not None and Path(p).is_file()}


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: dict | None = None) -> None:
    """Resolved run description; everything outside ``volatile`` is reproducible."""
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "outputs": outputs or {},
        "volatile": {"created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    return dict(sec)


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{what}]: {e}") from None
    except ValueError as e:
        raise ConfigError(f"[{what}]: {e}") from None


def _threads() -> int:
    raw = os.environ.get("NOFRILLS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NOFRILLS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _limit_threads(n: int) -> None:
    threadpool_limits(n)


def split_paths(data_dir: Path, split: str) -> tuple[Path, Path]:
    return data_dir / f"{split}.jsonl", data_dir / f"{split}.nfhf"


def load_split(data_dir, split: str, taxonomy: Taxonomy | None = None) -> Dataset:
    data_dir = Path(data_dir)
    tax = taxonomy or load_taxonomy(data_dir / "taxonomy.json")
    rec, feat = split_paths(data_dir, split)
    if not rec.exists() or not feat.exists():
        raise DataError(f"{data_dir}: split {split!r} not found (expected {rec.name} and {feat.name})")
    return load_dataset(rec, feat, tax)


def candidate_params(cfg: dict) -> CandidateParams:
    return _build(CandidateParams, _section(cfg, "candidates"), "candidates")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synth(args) -> int:
    cfg = load_config_file(args.config)
    synth = _section(cfg, "synth")
    synth["num_images"] = args.images
    sc = _build(SynthConfig, synth, "synth")
    tax = load_taxonomy(args.taxonomy) if args.taxonomy else synthetic_taxonomy()
    try:
        out = generate_synthetic(sc, tax, args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    n = sc.num_images
    perm = np.random.default_rng(np.random.SeedSequence([args.seed, 0x5B1])).permutation(n)
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    parts = {"train": sorted(perm[:n_train].tolist()),
             "val": sorted(perm[n_train:n_train + n_val].tolist()),
             "test": sorted(perm[n_train + n_val:].tolist())}
    splits = split_output(out, parts)
    tax = tax.with_counts(count_instances(splits["train"].records, tax.num_hoi))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_taxonomy(tax, outdir / "taxonomy.json")
    files = [outdir / "taxonomy.json"]
    for s in SPLITS:
        rec, feat = split_paths(outdir, s)
        save_dataset(splits[s].dataset(tax), rec, feat)
        files += [rec, feat]
    inputs = _hash_files([args.taxonomy, args.config])
    outputs = {p.name: git_blob_hash(p.read_bytes()) for p in files}
    write_manifest(outdir / "manifest.json", "gen-synth",
                   {"synth": sc.to_dict(), "seed": args.seed, "splits": list(SPLIT_FRACTIONS)}, inputs, outputs)
    print(f"wrote {n} images ({', '.join(f'{s}={len(parts[s])}' for s in SPLITS)}) to {outdir}")
    return EXIT_OK


def cmd_prep_candidates(args) -> int:
    cfg = load_config_file(args.config)
    ds = load_split(args.data, args.split)
    params = candidate_params(cfg)
    with open(args.out, "w") as f:
        for rec in ds.records:
            cs = build_candidates(rec, ds.taxonomy, params)
            f.write(json.dumps(candidates_to_dict(rec, cs, ds.taxonomy), separators=(",", ":")) + "\n")
    print(f"wrote candidates for {len(ds)} images to {args.out}")
    return EXIT_OK


def resolve_train_config(cfg: dict, args) -> tuple[TrainConfig, ModelConfig]:
    tr = _section(cfg, "train")
    md = _section(cfg, "model")
    if getattr(args, "loss", None) is not None:
        tr["loss_mode"] = args.loss
    if getattr(args, "indicators", None) is not None:
        tr["use_indicators"] = args.indicators == "on"
    if getattr(args, "neg_per_pos", None) is not None:
        tr["neg_per_pos"] = args.neg_per_pos
    if getattr(args, "seed", None) is not None:
        tr["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    if getattr(args, "factors", None) is not None:
        md["factors"] = args.factors
    try:
        if "factors" in md:
            md["factors"] = parse_factors(md["factors"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    tc = _build(TrainConfig, tr, "train")
    md.setdefault("seed", tc.seed)
    mc = _build(ModelConfig, md, "model")
    return tc, replace(mc, seed=tc.seed)


def run_training(data_dir: Path, out: Path, tc: TrainConfig, mc: ModelConfig, cand: CandidateParams,
                 inputs: dict, config_doc: dict) -> dict:
    train_ds = load_split(data_dir, "train")
    val_ds = None
    rec, feat = split_paths(data_dir, "val")
    if rec.exists() and feat.exists():
        val_ds = load_split(data_dir, "val", train_ds.taxonomy)
        if len(val_ds) == 0:
            val_ds = None
    mc = replace(mc, app_dim=train_ds.feature_dim) if train_ds.feature_dim else mc
    out.mkdir(parents=True, exist_ok=True)
    log.info("factor input widths: %s", factor_input_widths(train_ds.taxonomy, mc))
    try:
        res = train(train_ds, tc, mc, val_dataset=val_ds, cand_params=cand)
    except TrainingDiverged as e:
        save_model(e.model, out / "checkpoint", {"train": tc.to_dict(), "diverged": True})
        write_metrics(e.history, out / "metrics.csv")
        raise
    save_model(res.model, out / "checkpoint", {"train": tc.to_dict(), "best_epoch": res.best_epoch})
    write_metrics(res.history, out / "metrics.csv")
    outputs = _hash_files([out / "checkpoint" / "manifest.json", out / "checkpoint" / "params.nfhf"])
    doc = dict(config_doc, train=tc.to_dict(), model=mc.to_dict(), candidates=cand.__dict__)
    write_manifest(out / "manifest.json", "train", doc, inputs, {Path(k).name: v for k, v in outputs.items()})
    return {"model": res.model, "history": res.history, "best_epoch": res.best_epoch, "model_config": mc}


def factor_input_widths(tax: Taxonomy, mc: ModelConfig) -> dict[str, int]:
    widths = {"human_app": mc.app_dim, "object_app": mc.app_dim,
              "boxes": box_aug_dim(tax.num_objects, mc.object_one_hot),
              "pose": pose_aug_dim(tax.num_objects, mc.object_one_hot)}
    return {f: widths[f] for f in mc.factors}


def cmd_train(args) -> int:
    cfg = load_config_file(args.config)
    tc, mc = resolve_train_config(cfg, args)
    cand = candidate_params(cfg)
    data = Path(args.data)
    inputs = _hash_files([data / "taxonomy.json", *split_paths(data, "train"), *split_paths(data, "val")]
                         + ([args.config] if args.config else []))
    res = run_training(data, Path(args.out), tc, mc, cand, inputs, {"data": str(data)})
    h = res["history"]
    last = h[res["best_epoch"] - 1] if h and res["best_epoch"] else None
    msg = f"trained {factors_label(res['model_config'].factors)} for {len(h)} epochs"
    if last is not None and not math.isnan(last["val_map_full"]):
        msg += f"; best epoch {res['best_epoch']} val mAP {last['val_map_full']:.4f}"
    print(msg)
    return EXIT_OK


def _check_hash(manifest: dict, tax: Taxonomy, where: str) -> None:
    want = manifest.get("taxonomy_hash")
    got = tax.content_hash()
    if want != got:
        raise DataError(f"{where}: checkpoint taxonomy hash {want} does not match dataset taxonomy {got}; "
                        "the model was trained on a different vocabulary")


def live_scores(model, ds: Dataset, cand: CandidateParams) -> list[PairScore]:
    out = []
    model.eval()
    for rec in ds.records:
        cs = build_candidates(rec, ds.taxonomy, cand)
        pairs = build_image_pairs(rec, cs, ds.features, model.taxonomy, model.factors, model.config.object_one_hot)
        out.extend(score_pairs(model, pairs))
    return out


def write_scores(scores, path) -> None:
    with open(path, "w") as f:
        for s in scores:
            f.write(json.dumps(s.to_dict(), separators=(",", ":")) + "\n")


def read_scores(path) -> list[PairScore]:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(PairScore.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{n}: bad score line: {e}") from None
    return out


def _load_model_for(path, ds: Dataset):
    model, manifest = load_model(path)
    _check_hash(manifest, ds.taxonomy, str(path))
    return model, manifest


def cmd_score(args) -> int:
    cfg = load_config_file(args.config)
    ds = load_split(args.data, args.split)
    model, _ = _load_model_for(args.model, ds)
    scores = live_scores(model, ds, candidate_params(cfg))
    write_scores(scores, args.out)
    print(f"wrote {len(scores)} pair scores to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config_file(args.config)
    ds = load_split(args.data, args.split)
    if (args.model is None) == (args.scores is None):
        raise ConfigError("give exactly one of --model or --scores")
    if args.model is not None:
        model, _ = _load_model_for(args.model, ds)
        scores = live_scores(model, ds, candidate_params(cfg))
    else:
        scores = read_scores(args.scores)
    try:
        result = evaluate_scores(scores, ds)
    except ValueError as e:
        raise DataError(str(e)) from None
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        write_report(result, ds.taxonomy, args.report)
    if int(result.n_gt.sum()) == 0:
        print(f"warning: split {args.split!r} has no ground-truth pairs; every AP is NA", file=sys.stderr)

    def fmt(v):
        return "NA" if math.isnan(v) else f"{100 * v:.2f}"
    print(f"Full {fmt(result.map_full)}  Rare {fmt(result.map_rare)}  Non-Rare {fmt(result.map_nonrare)}")
    return EXIT_OK


def cmd_confusion(args) -> int:
    cfg = load_config_file(args.config)
    ds = load_split(args.data, args.split)
    model, _ = _load_model_for(args.model, ds)
    raw = interaction_confusion(model, ds, candidate_params(cfg))
    soft = row_softmax(raw)
    names = list(ds.taxonomy.interactions)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["matrix", "interaction"] + names)
        for label, m in (("raw", raw), ("softmax", soft)):
            for r, name in enumerate(names):
                w.writerow([label, name] + ["NA" if math.isnan(v) else f"{v:.6f}" for v in m[r]])
    print(f"wrote {len(names)}x{len(names)} confusion matrices to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation grid

ABLATE_COLUMNS = ("cell", "label", "factors", "loss", "indicators", "neg_per_pos", "seeds",
                  "map_full", "map_rare", "map_nonrare", "status")


def _cell_settings(cell: dict, base: dict) -> dict:
    allowed = {"name", "factors", "loss", "indicators", "neg_per_pos", "epochs"}
    unknown = sorted(set(cell) - allowed)
    if unknown:
        raise ConfigError(f"grid cell {cell.get('name', '?')!r}: unknown keys {unknown}")
    s = dict(base)
    s.update(cell)
    if "name" not in s:
        raise ConfigError("every grid cell needs a name")
    return s


def _run_cell(data_dir: str, out_dir: str, settings: dict, seed: int, cfg: dict) -> dict:
    """Train and test-evaluate one grid cell for one seed."""
    ns = argparse.Namespace(
        factors=settings.get("factors"), loss=settings.get("loss"),
        indicators=None if settings.get("indicators") is None else ("on" if settings["indicators"] else "off"),
        neg_per_pos=settings.get("neg_per_pos"), seed=seed, epochs=settings.get("epochs"))
    tc, mc = resolve_train_config(cfg, ns)
    cand = candidate_params(cfg)
    data = Path(data_dir)
    res = run_training(data, Path(out_dir), tc, mc, cand, {}, {"cell": settings["name"]})
    test = load_split(data, "test")
    result = evaluate_scores(live_scores(res["model"], test, cand), test)
    write_report(result, test.taxonomy, Path(out_dir) / "report.csv")
    return {"map_full": result.map_full, "map_rare": result.map_rare, "map_nonrare": result.map_nonrare,
            "factors": mc.factors, "loss": tc.loss_mode, "indicators": tc.use_indicators,
            "neg_per_pos": tc.neg_per_pos}


def _run_cell_safe(*a):
    try:
        return _run_cell(*a), None
    except TrainingDiverged as e:
        return None, f"diverged: {e}"
    except (ConfigError, DataError, TaxonomyError, ValueError) as e:
        return None, f"error: {e}"


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def cmd_ablate(args) -> int:
    grid = load_config_file(args.grid)
    cells = grid.get("cell")
    if not isinstance(cells, list) or not cells:
        raise ConfigError(f"{args.grid}: the grid needs at least one [[cell]] table")
    seeds = grid.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    base = _section(grid, "defaults")
    cfg = {k: v for k, v in grid.items() if k in ("train", "model", "candidates")}
    settings = [_cell_settings(c, base) for c in cells]
    names = [s["name"] for s in settings]
    if len(set(names)) != len(names):
        raise ConfigError("grid cell names must be unique")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(args.data), str(out / s["name"] / f"seed{seed}"), s, int(seed), cfg)
            for s in settings for seed in seeds]
    workers = min(args.parallel, _threads()) if args.parallel > 1 else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell_safe, *zip(*jobs)))
    else:
        results = [_run_cell_safe(*j) for j in jobs]
    rows, per_seed = [], []
    k = 0
    for s in settings:
        got, errs = [], []
        for seed in seeds:
            res, err = results[k]
            k += 1
            if err is None:
                got.append(res)
                per_seed.append([s["name"], seed, f"{res['map_full']:.6f}", f"{res['map_rare']:.6f}",
                                 f"{res['map_nonrare']:.6f}", "ok"])
            else:
                errs.append(f"seed {seed}: {err}")
                per_seed.append([s["name"], seed, "NA", "NA", "NA", err])
        ref = got[0] if got else None
        row = {
            "cell": s["name"],
            "label": factors_label(ref["factors"]) if ref else "",
            "factors": "+".join(ref["factors"]) if ref else "",
            "loss": ref["loss"] if ref else "",
            "indicators": ("on" if ref["indicators"] else "off") if ref else "",
            "neg_per_pos": ref["neg_per_pos"] if ref else "",
            "seeds": " ".join(str(x) for x in seeds),
        }
        for m in ("map_full", "map_rare", "map_nonrare"):
            v = _nanmean([g[m] for g in got]) if got else float("nan")
            row[m] = "NA" if math.isnan(v) else f"{v:.6f}"
        row["status"] = "ok" if not errs else ("; ".join(errs) if not got else "partial: " + "; ".join(errs))
        rows.append(row)
        print(f"{s['name']:<24} Full {row['map_full']}  Rare {row['map_rare']}  Non-Rare {row['map_nonrare']}"
              f"  [{row['status']}]")
    with open(out / "table.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    with open(out / "per_seed.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "seed", "map_full", "map_rare", "map_nonrare", "status"])
        w.writerows(per_seed)
    write_manifest(out / "manifest.json", "ablate", {"grid": grid}, _hash_files([args.grid]),
                   _hash_files([out / "table.csv"]))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nofrills", description="Factored human-object interaction detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--taxonomy")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_synth)

    c = sub.add_parser("prep-candidates", help="write the per-image candidate sets")
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="train", choices=SPLITS)
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.set_defaults(func=cmd_prep_candidates)

    t = sub.add_parser("train", help="train the interaction factors")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--factors", help="comma list from det, app, human_app, object_app, box, pose")
    t.add_argument("--loss", choices=("hoi", "interaction"))
    t.add_argument("--indicators", choices=("on", "off"))
    t.add_argument("--neg-per-pos", type=int, dest="neg_per_pos")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="dump pair scores as JSON Lines")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="per-class AP and Full / Rare / Non-Rare mAP")
    e.add_argument("--model")
    e.add_argument("--scores", help="evaluate a score dump instead of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--report")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every cell of a grid")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--parallel", type=int, default=1, help="worker processes (capped by NOFRILLS_THREADS)")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("confusion", help="export interaction confusion matrices")
    m.add_argument("--model", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test", choices=SPLITS)
    m.add_argument("--out", required=True)
    m.add_argument("--config")
    m.set_defaults(func=cmd_confusion)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(_threads())
        return args.func(args)
    except ConfigError as e:
        print(f"nofrills: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TaxonomyError as e:
        print(f"nofrills: taxonomy error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        print(f"nofrills: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"nofrills: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as e:
        print(f"nofrills: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
