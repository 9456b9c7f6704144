"""Scoring prediction directories against ground truth and writing reports."""
import csv
import json
from pathlib import Path

from imcnet.data.datasets import IMAGE_EXTS, read_mask
from imcnet.errors import DatasetError
from imcnet.eval.metrics import aggregate, score_sequence


def _mask_files(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS}


def _sequence_dirs(root):
    """Mapping name -> directory. A directory holding masks directly is one sequence."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    if (root / "Annotations").is_dir():
        root = root / "Annotations"
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if subdirs:
        return {p.name: p for p in subdirs}
    if _mask_files(root):
        return {root.name: root}
    raise DatasetError(f"no masks found under {root}")


def evaluate_dirs(pred_dir, gt_dir, tolerance=None):
    """Score every sequence; frame sets must match exactly."""
    preds, gts = _sequence_dirs(pred_dir), _sequence_dirs(gt_dir)
    if len(preds) == 1 and len(gts) == 1:
        pairs = [(next(iter(gts)), next(iter(preds.values())), next(iter(gts.values())))]
    else:
        if set(preds) != set(gts):
            raise DatasetError(f"sequence sets differ: only in predictions {sorted(set(preds) - set(gts))}, "
                               f"only in ground truth {sorted(set(gts) - set(preds))}")
        pairs = [(name, preds[name], gts[name]) for name in sorted(gts)]
    scores = []
    for name, pdir, gdir in pairs:
        pf, gf = _mask_files(pdir), _mask_files(gdir)
        if set(pf) != set(gf):
            raise DatasetError(f"sequence {name}: frame sets differ "
                               f"(only predicted {sorted(set(pf) - set(gf))}, only ground truth {sorted(set(gf) - set(pf))})")
        frames = sorted(gf)
        scores.append(score_sequence(name, [read_mask(pf[k]) for k in frames],
                                     [read_mask(gf[k]) for k in frames], tolerance))
    return scores, aggregate(scores)


def write_reports(out, scores, summary):
    """JSON lines (one record per sequence, then a summary record) and a CSV table."""
    out = Path(out)
    jsonl = out if out.suffix == ".jsonl" else out.with_suffix(".jsonl")
    jsonl.parent.mkdir(parents=True, exist_ok=True)
    with open(jsonl, "w") as fh:
        for s in scores:
            fh.write(json.dumps({"type": "sequence", **s.record()}) + "\n")
        fh.write(json.dumps({"type": "summary", **summary}) + "\n")
    csv_path = jsonl.with_suffix(".csv")
    cols = ["sequence", "frames", "J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay", "JF_mean"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s in scores:
            rec = s.record()
            w.writerow([rec[c] for c in cols])
        w.writerow(["ALL", sum(len(s.j) for s in scores)] + [summary[c] for c in cols[2:]])
    return jsonl, csv_path
