"""The pipeline commands behind the CLI, usable directly from Python.

Each ``cmd_*`` writes only under its output directory and returns a small
dict describing what it produced. Every command also writes a
``<command>.meta.json`` with the config hash that produced its outputs.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import (ClassIndexMap, SplitAssignment, DEFAULT_FRACTIONS, apportion_counts, format_split_table,
                      make_index, read_json, scan_dataset, stratified_kfold, stratified_split, write_json)
from .densenet import DEFAULT_CAM_LAYER, STAGE_NAMES, build_model, predict_proba
from .errors import DataError
from .gradcam import compute_gradcam, heatmap_gray, overlay_heatmap
from .imageprep import PrepConfig, integer_stages, load_rgb, preprocess_pipeline, save_png, to_chw
from .training import FitState, TrainHistory, evaluate, fit

log = logging.getLogger(__name__)

PREP_MANIFEST = "prep.json"


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name.lower()).strip("_")


# -- data loading -------------------------------------------------------------

def load_arrays(root, paths, prep: PrepConfig, dtype=np.float32) -> np.ndarray:
    """Load and preprocess images into an (N, 3, S, S) array.

    When ``root`` holds a prep manifest made with the same config the
    integer stages are skipped (they were applied by ``prep``); a manifest
    from a different config is an error.
    """
    root = Path(root)
    cfg = prep
    manifest = root / PREP_MANIFEST
    if manifest.is_file():
        recorded = read_json(manifest)["config_hash"]
        if recorded != prep.digest():
            raise DataError(f"{root} was preprocessed with config {recorded}, current config is {prep.digest()}")
        cfg = prep.float_only()
    out = []
    for rel in paths:
        try:
            img = load_rgb(root / rel)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {root / rel}: {exc}") from exc
        out.append(to_chw(preprocess_pipeline(img, cfg), dtype))
    if not out:
        return np.zeros((0, 3, prep.target_size, prep.target_size), dtype=dtype)
    return np.stack(out)


def split_arrays(split: SplitAssignment, name: str, prep: PrepConfig):
    idx = split.members(name)
    samples = [split.index.samples[i] for i in idx]
    x = load_arrays(split.index.root, [s.path for s in samples], prep)
    y = np.array([s.index for s in samples], dtype=np.int64)
    return x, y


# -- prep ---------------------------------------------------------------------

def cmd_prep(cfg: RunConfig, in_dir, out_dir, force: bool = False) -> dict:
    """Mirror ``in_dir`` into ``out_dir`` with the integer preprocessing stages applied."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    prep = cfg.prep
    digest = prep.digest()
    manifest_path = out_dir / PREP_MANIFEST
    if manifest_path.is_file() and not force:
        existing = read_json(manifest_path).get("config_hash")
        if existing != digest:
            raise DataError(f"{out_dir} holds outputs of config {existing}, not {digest}; use --force to overwrite")
    if not in_dir.is_dir():
        raise DataError(f"input directory {in_dir} does not exist")
    class_dirs = sorted(p for p in in_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no classes found under {in_dir}")
    files, failed = [], []
    for d in class_dirs:
        images = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not images:
            log.warning("class directory %s is empty", d)
            continue
        for f in images:
            dst = out_dir / d.name / (f.stem + ".png")
            try:
                save_png(integer_stages(load_rgb(f), prep), dst)
            except (OSError, ValueError) as exc:
                log.error("skipping %s: %s", f, exc)
                failed.append(f"{d.name}/{f.name}")
                continue
            files.append({"source": f"{d.name}/{f.name}", "output": f"{d.name}/{dst.name}",
                          "config_hash": digest, "sha256": _sha(dst)})
    write_json({"config_hash": digest, "prep": prep.to_dict(), "files": files, "failed": failed}, manifest_path)
    return {"written": len(files), "failed": failed, "manifest": str(manifest_path)}


# -- split --------------------------------------------------------------------

def cmd_split(cfg: RunConfig, root, out_dir, seed: int | None = None) -> dict:
    seed = cfg.split_seed if seed is None else seed
    index = scan_dataset(Path(root).resolve())
    split = stratified_split(index, cfg.fractions, seed)
    out_dir = Path(out_dir)
    path = out_dir / "split.json"
    write_json(split.to_json(), path)
    write_json({"command": "split", "config_hash": cfg.digest(), "outputs": ["split.json"]},
               out_dir / "split.meta.json")
    table = format_split_table(split)
    return {"manifest": str(path), "table": table, "counts": split.counts(), "split": split}


def table_from_totals(totals: dict[str, int], fractions=DEFAULT_FRACTIONS) -> dict[str, dict[str, int]]:
    names = list(totals)
    cells = apportion_counts([totals[n] for n in names], fractions)
    return {n: {"train": cells[0][i], "val": cells[1][i], "test": cells[2][i]} for i, n in enumerate(names)}


# -- train --------------------------------------------------------------------

def _load_split(manifest) -> SplitAssignment:
    return SplitAssignment.from_json(read_json(manifest))


def cmd_train(cfg: RunConfig, manifest, out_dir, resume=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = _load_split(manifest)
    classes = list(split.index.classes.names)
    x_tr, y_tr = split_arrays(split, "train", cfg.prep)
    x_va, y_va = split_arrays(split, "val", cfg.prep)
    digest = cfg.digest()
    header = {"classes": classes, "prep": cfg.prep.to_dict()}

    state = None
    if resume is not None:
        ck = load_checkpoint(resume, num_classes=len(classes))
        if ck.classes != classes:
            raise DataError(f"checkpoint classes {ck.classes} do not match manifest classes {classes}")
        fit_meta = ck.extra.get("fit_state")
        if fit_meta is None:
            raise DataError(f"{resume} is not a resumable checkpoint")
        best_path = Path(resume).with_name("best.ckpt")
        best = load_checkpoint(best_path).model if best_path.is_file() else None
        model = ck.model
        state = FitState.from_meta(fit_meta, ck.state, best, cfg.train)
    else:
        model = build_model(cfg.model_for(len(classes)), seed=cfg.train.seed)

    def on_improve(best_model, epoch, val_loss):
        save_checkpoint(best_model, out_dir / "best.ckpt", metrics={"epoch": epoch, "val_loss": val_loss},
                        extra={"config_hash": digest}, **header)

    def on_epoch(current, st: FitState):
        last = st.history.rows[-1]
        save_checkpoint(current, out_dir / "last.ckpt",
                        metrics={"epoch": st.epoch, "val_loss": last["val_loss"], "val_acc": last["val_acc"]},
                        extra={"config_hash": digest, "fit_state": st.meta()}, state=st.adam.arrays(), **header)

    result = fit(model, (x_tr, y_tr), (x_va, y_va), cfg.train, resume=state,
                 on_improve=on_improve, on_epoch=on_epoch)
    result.history.write_csv(out_dir / "history.csv")
    result.history.write_timing_csv(out_dir / "timing.csv")
    from .plotting import plot_curves
    plot_curves(result.history, out_dir / "curves.png")
    meta = {"command": "train", "config_hash": digest, "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss, "epochs": len(result.history), "classes": classes,
            "outputs": ["best.ckpt", "last.ckpt", "history.csv", "timing.csv", "curves.png"]}
    write_json(meta, out_dir / "train.meta.json")
    return {"checkpoint": str(out_dir / "best.ckpt"), "history": result.history, "result": result}


# -- eval ---------------------------------------------------------------------

def evaluate_arrays(model, x, y, classes, batch_size: int = 64):
    t0 = time.perf_counter()
    _, _, probs = evaluate(model, x, y, batch_size)
    seconds = time.perf_counter() - t0
    cm = M.confusion_matrix(y, probs.argmax(axis=1), len(classes), classes)
    return M.build_report(cm, probs, y), cm, probs, seconds


def cmd_eval(checkpoint, manifest, split_name: str, out_dir, average: str = "macro") -> dict:
    out_dir = Path(out_dir)
    split = _load_split(manifest)
    ck = load_checkpoint(checkpoint)
    classes = list(split.index.classes.names)
    if ck.classes != classes:
        raise DataError(f"checkpoint classes {ck.classes} do not match manifest classes {classes}")
    prep = PrepConfig.from_dict(ck.prep) if ck.prep else PrepConfig(target_size=ck.model.cfg.input_size)
    x, y = split_arrays(split, split_name, prep)
    if len(y) == 0:
        raise DataError(f"split {split_name!r} is empty")
    report, cm, probs, seconds = evaluate_arrays(ck.model, x, y, classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(M.report_json(report), encoding="utf-8")
    cm.to_csv(out_dir / "confusion.csv")
    curves = out_dir / "pr_curves"
    curves.mkdir(exist_ok=True)
    for k, name in enumerate(classes):
        if np.any(y == k):
            M.pr_curve(probs[:, k], y == k).to_csv(curves / f"{_slug(name)}.csv")
    outputs = ["metrics.json", "confusion.csv", "confusion.png", "pr_curves/"]
    if average != "macro":
        write_json(M.averaged_scores(cm, probs, y, average), out_dir / f"metrics_{average}.json")
        outputs.append(f"metrics_{average}.json")
    from .plotting import plot_confusion
    plot_confusion(cm, out_dir / "confusion.png")
    write_json({"command": "eval", "config_hash": ck.extra.get("config_hash"), "checkpoint": str(checkpoint),
                "split": split_name, "samples": int(len(y)), "inference_seconds": round(seconds, 4),
                "outputs": outputs}, out_dir / "eval.meta.json")
    return {"report": report, "confusion": cm, "seconds": seconds}


# -- cross-validation -----------------------------------------------------------

def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args):
    cfg, fold, x, y, folds, classes, out_dir = args
    seed = fold_seed(cfg.train.seed, fold)
    held = folds == fold
    train_pos = np.flatnonzero(~held)
    # carve a stratified validation subset out of the training folds
    names = [classes[i] for i in y[train_pos]]
    sub_index = make_index([(str(i), n) for i, n in zip(train_pos, names)], ClassIndexMap(tuple(classes)))
    f_tr, f_va = cfg.fractions[0], cfg.fractions[1]
    inner = stratified_split(sub_index, (f_tr / (f_tr + f_va), f_va / (f_tr + f_va), 0.0), seed)
    tr = train_pos[inner.members("train")]
    va = train_pos[inner.members("val")]
    settings = replace(cfg.train, seed=seed)
    model = build_model(cfg.model_for(len(classes)), seed=seed)
    result = fit(model, (x[tr], y[tr]), (x[va], y[va]), settings)
    report, cm, _, seconds = evaluate_arrays(result.best_model, x[held], y[held], classes)
    fold_dir = Path(out_dir) / f"fold{fold + 1}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    (fold_dir / "metrics.json").write_text(M.report_json(report), encoding="utf-8")
    cm.to_csv(fold_dir / "confusion.csv")
    result.history.write_csv(fold_dir / "history.csv")
    result.history.write_timing_csv(fold_dir / "timing.csv")
    return report


SUMMARY_METRICS = ("accuracy", "recall_macro", "precision_macro", "f1_macro", "mcc", "pr_auc_macro",
                   "kappa", "specificity_macro")


def summarize_folds(reports: list[dict]) -> dict:
    k = len(reports)
    summary = {"k": k, "fold_accuracies": [r["accuracy"] for r in reports]}
    accs = summary["fold_accuracies"]
    summary["mean_accuracy"] = sum(accs) / k
    summary["metrics"] = {}
    for name in SUMMARY_METRICS:
        vals = [r[name] for r in reports]
        summary["metrics"][name] = {"folds": vals, "mean": sum(vals) / k, "min": min(vals), "max": max(vals)}
    return summary


def cmd_cv(cfg: RunConfig, root, out_dir, k: int = 5, seed: int | None = None, parallel: int = 1) -> dict:
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out_dir = Path(out_dir)
    index = scan_dataset(Path(root).resolve())
    plan = stratified_kfold(index, k, cfg.split_seed)
    write_json(plan.to_json(), out_dir / "folds.json")
    classes = list(index.classes.names)
    x = load_arrays(index.root, [s.path for s in index.samples], cfg.prep)
    y = np.array([s.index for s in index.samples], dtype=np.int64)
    folds = np.asarray(plan.folds)
    jobs = [(cfg, f, x, y, folds, classes, out_dir) for f in range(k)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(_run_fold, jobs))
    else:
        reports = [_run_fold(j) for j in jobs]
    summary = summarize_folds(reports)
    summary["fold_sizes"] = plan.sizes()
    write_json(summary, out_dir / "cv_summary.json")
    from .plotting import plot_folds
    plot_folds(summary["fold_accuracies"], out_dir / "cv_accuracy.png")
    write_json({"command": "cv", "config_hash": cfg.digest(), "k": k,
                "outputs": ["folds.json", "cv_summary.json", "cv_accuracy.png"]
                + [f"fold{i + 1}/" for i in range(k)]}, out_dir / "cv.meta.json")
    return summary


# -- grad-cam -----------------------------------------------------------------

def cmd_gradcam(checkpoint, image, out_dir, target="predicted", layer: str = DEFAULT_CAM_LAYER,
                alpha: float = 0.5) -> dict:
    ck = load_checkpoint(checkpoint)
    if layer not in STAGE_NAMES:
        raise ValueError(f"unknown layer {layer!r}; available stages: {', '.join(STAGE_NAMES)}")
    image = Path(image)
    if not image.is_file():
        raise DataError(f"image {image} not found")
    prep = PrepConfig.from_dict(ck.prep) if ck.prep else PrepConfig(target_size=ck.model.cfg.input_size)
    src = load_rgb(image)
    x = to_chw(preprocess_pipeline(src, prep))[None]
    probs = predict_proba(ck.model, x)[0]
    classes = ck.classes or [str(i) for i in range(len(probs))]
    if target == "predicted":
        cls = int(np.argmax(probs))
    elif isinstance(target, str) and target in classes:
        cls = classes.index(target)
    else:
        try:
            cls = int(target)
        except ValueError:
            raise ValueError(f"target must be 'predicted', a class name or an index; got {target!r}") from None
    heat = compute_gradcam(ck.model, x, cls, layer)
    out_dir = Path(out_dir)
    name = image.stem
    save_png(heatmap_gray(heat), out_dir / f"{name}.heatmap.png")
    save_png(overlay_heatmap(src, heat, alpha), out_dir / f"{name}.overlay.png")
    pred = int(np.argmax(probs))
    return {"predicted": classes[pred], "probability": float(probs[pred]), "target": classes[cls],
            "heatmap": str(out_dir / f"{name}.heatmap.png"), "overlay": str(out_dir / f"{name}.overlay.png")}


# -- report -------------------------------------------------------------------

_TABLE_COLUMNS = (("Accuracy", "accuracy"), ("Recall", "recall_macro"), ("Precision", "precision_macro"),
                  ("F1 Score", "f1_macro"), ("MCC", "mcc"), ("PR AUC", "pr_auc_macro"), ("Kappa", "kappa"),
                  ("Specificity", "specificity_macro"))


def _pct(v) -> str:
    return f"{100 * v:.2f}%"


def cmd_report(run_dir, out_dir=None) -> dict:
    """Collect every artifact under ``run_dir`` into report.md / report.json."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    found = {"history": [], "metrics": [], "cv": [], "timing": [], "eval_meta": []}
    if run_dir.is_dir():
        for p in sorted(run_dir.rglob("*")):
            rel = p.relative_to(run_dir).as_posix()
            if p.name == "history.csv":
                found["history"].append(rel)
            elif p.name == "metrics.json" and "/fold" not in f"/{rel}":
                found["metrics"].append(rel)
            elif p.name == "cv_summary.json":
                found["cv"].append(rel)
            elif p.name == "timing.csv":
                found["timing"].append(rel)
            elif p.name == "eval.meta.json":
                found["eval_meta"].append(rel)
    missing = [k for k in ("history", "metrics", "cv") if not found[k]]
    doc = {"run_dir": str(run_dir), "missing": missing, "metrics": {}, "cv": {}, "history": {}, "timing": {}}
    lines = [f"# Run report: {run_dir}", ""]

    lines += ["## Test metrics", ""]
    if found["metrics"]:
        lines.append("| Source | " + " | ".join(c for c, _ in _TABLE_COLUMNS) + " |")
        lines.append("|---" * (len(_TABLE_COLUMNS) + 1) + "|")
        for rel in found["metrics"]:
            rep = read_json(run_dir / rel)
            doc["metrics"][rel] = {k: rep.get(k) for _, k in _TABLE_COLUMNS}
            lines.append(f"| {rel} | " + " | ".join(_pct(rep[k]) for _, k in _TABLE_COLUMNS) + " |")
    else:
        lines.append("_no metrics.json found_")
    lines.append("")

    lines += ["## Cross-validation", ""]
    if found["cv"]:
        for rel in found["cv"]:
            cv = read_json(run_dir / rel)
            doc["cv"][rel] = {"fold_accuracies": cv["fold_accuracies"], "mean_accuracy": cv["mean_accuracy"]}
            lines.append(f"{rel}:")
            lines.append("")
            lines.append("| Fold | Accuracy |")
            lines.append("|---|---|")
            for i, a in enumerate(cv["fold_accuracies"], start=1):
                lines.append(f"| {i} | {_pct(a)} |")
            lines.append(f"| mean | {_pct(cv['mean_accuracy'])} |")
            lines.append("")
    else:
        lines += ["_no cv_summary.json found_", ""]

    lines += ["## Training history", ""]
    if found["history"]:
        for rel in found["history"]:
            h = TrainHistory.read_csv(run_dir / rel)
            if not len(h):
                continue
            best = min(h.rows, key=lambda r: r["val_loss"])
            doc["history"][rel] = {"epochs": len(h), "best_epoch": best["epoch"], "best_val_loss": best["val_loss"],
                                   "best_val_acc": best["val_acc"]}
            lines.append(f"- {rel}: {len(h)} epochs, best val loss {best['val_loss']:.4f} "
                         f"(epoch {best['epoch']}, val acc {_pct(best['val_acc'])})")
    else:
        lines.append("_no history.csv found_")
    lines.append("")

    lines += ["## Timing (informational)", ""]
    for rel in found["timing"]:
        with open(run_dir / rel, newline="", encoding="utf-8") as fh:
            total = sum(float(r["seconds"]) for r in csv.DictReader(fh))
        doc["timing"][rel] = {"training_seconds": total}
        lines.append(f"- {rel}: training {total:.1f} s")
    for rel in found["eval_meta"]:
        meta = read_json(run_dir / rel)
        doc["timing"][rel] = {"inference_seconds": meta.get("inference_seconds"), "samples": meta.get("samples")}
        lines.append(f"- {rel}: inference {meta.get('inference_seconds')} s over {meta.get('samples')} samples")
    if not found["timing"] and not found["eval_meta"]:
        lines.append("_no timing records found_")
    lines.append("")

    if missing:
        lines += ["## Missing artifacts", ""] + [f"- {m}" for m in missing] + [""]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    write_json(doc, out_dir / "report.json")
    return doc
