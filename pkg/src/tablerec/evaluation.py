"""Evaluation metrics: TEDS, TEDS-struct and single-class detection mAP.

Tree edit distance runs the classic ordered-tree dynamic program
(postorder + leftmost-descendants + keyroots) with all costs precomputed
into arrays so the inner loops can run through the jitted kernel.  TEDS
normalizes by the larger tree's node count (root included):

    teds = 1 - TED(pred, gt) / max(|pred|, |gt|)

Substitution cost follows the metric's published definition: 1 when tags or
(for td nodes) spans differ; for matching td nodes the normalized character
edit distance of the contents; 0 for other matching tags.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .vocab import TableAnnotation, TableTree, assemble_html, parse_table_tree


# ---------------------------------------------------------------------------
# tree edit distance


@dataclass
class _Annotated:
    nodes: list[TableTree]
    lmds: np.ndarray
    keyroots: np.ndarray


def _annotate(root: TableTree) -> _Annotated:
    """Postorder enumeration with leftmost descendants and keyroots."""
    nodes: list[TableTree] = []
    lmds: list[int] = []

    def walk(node) -> int:
        first = None
        for child in node.children:
            l = walk(child)
            if first is None:
                first = l
        nodes.append(node)
        lmd = first if first is not None else len(nodes) - 1
        lmds.append(lmd)
        return lmd

    walk(root)
    keyroot_of: dict[int, int] = {}
    for i, l in enumerate(lmds):
        keyroot_of[l] = i  # last postorder index wins
    return _Annotated(nodes=nodes,
                      lmds=np.asarray(lmds, dtype=np.int64),
                      keyroots=np.asarray(sorted(keyroot_of.values()), dtype=np.int64))


class UnitCostModel:
    """Insert/delete cost 1; substitution 1 when labels differ."""

    def delete(self, node: TableTree) -> float:
        return 1.0

    def insert(self, node: TableTree) -> float:
        return 1.0

    def substitute(self, a: TableTree, b: TableTree) -> float:
        return 0.0 if a.tag == b.tag else 1.0


def _codes(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-32-le"), dtype=np.int32).copy()


def normalized_edit_distance(a: str, b: str) -> float:
    """Levenshtein over characters scaled into [0, 1]; 0 for two empties."""
    if not a and not b:
        return 0.0
    return kernels.levenshtein(_codes(a), _codes(b)) / max(len(a), len(b))


class TedsCostModel(UnitCostModel):
    """Content-aware substitution on td nodes, per the TEDS definition."""

    def substitute(self, a: TableTree, b: TableTree) -> float:
        if a.tag != b.tag:
            return 1.0
        if a.tag == "td":
            if a.colspan != b.colspan or a.rowspan != b.rowspan:
                return 1.0
            if a.content or b.content:
                return normalized_edit_distance(a.content, b.content)
        return 0.0


def tree_edit_distance(a: TableTree, b: TableTree, cost_model=None) -> float:
    """Minimal-cost ordered tree edit distance (insert/delete/substitute)."""
    if cost_model is None:
        cost_model = UnitCostModel()
    ta, tb = _annotate(a), _annotate(b)
    n1, n2 = len(ta.nodes), len(tb.nodes)
    del_cost = np.array([cost_model.delete(n) for n in ta.nodes], dtype=np.float64)
    ins_cost = np.array([cost_model.insert(n) for n in tb.nodes], dtype=np.float64)
    sub_cost = np.empty((n1, n2), dtype=np.float64)
    for i, na in enumerate(ta.nodes):
        for j, nb in enumerate(tb.nodes):
            sub_cost[i, j] = cost_model.substitute(na, nb)
    return float(kernels.ted_dp(ta.lmds, ta.keyroots, tb.lmds, tb.keyroots,
                                del_cost, ins_cost, sub_cost))


def teds(pred_html: str, gt_html: str, structure_only: bool = False) -> float:
    """Tree-edit-distance similarity in [0, 1]; unparseable prediction -> 0.

    For wildly dissimilar trees the raw 1 - TED/max(|a|, |b|) can dip below
    zero (TED may exceed the larger size when almost nothing maps); the
    score floors at 0 so the metric stays in [0, 1].
    """
    gt_tree = parse_table_tree(gt_html)
    try:
        pred_tree = parse_table_tree(pred_html)
    except ValueError:
        return 0.0
    if structure_only:
        gt_tree = gt_tree.blank_contents()
        pred_tree = pred_tree.blank_contents()
    distance = tree_edit_distance(pred_tree, gt_tree, TedsCostModel())
    return max(0.0, 1.0 - distance / max(pred_tree.size(), gt_tree.size()))


def teds_struct(pred_html: str, gt_html: str) -> float:
    return teds(pred_html, gt_html, structure_only=True)


# ---------------------------------------------------------------------------
# detection mAP


def iou(box_a, box_b) -> float:
    """Intersection over union of [x0, y0, x1, y1] boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def map_cell_detection(predictions: list[list[tuple]], ground_truths: list[list],
                       iou_threshold: float = 0.5) -> float | None:
    """Single-class average precision with all-point interpolation.

    ``predictions[i]`` is a list of (bbox, confidence) for image i and
    ``ground_truths[i]`` the gt boxes.  Detections rank globally by
    confidence; each can match one still-unmatched gt in its image at
    IoU >= threshold.  Returns None when there are no gt boxes at all
    (the metric is undefined).
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must cover the same images")
    n_gt = sum(len(g) for g in ground_truths)
    if n_gt == 0:
        return None
    dets = []
    for img, preds in enumerate(predictions):
        for box, conf in preds:
            dets.append((-float(conf), len(dets), img, box))
    dets.sort(key=lambda d: (d[0], d[1]))  # confidence desc, insertion order tie-break
    matched = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, (_, _, img, box) in enumerate(dets):
        gts = ground_truths[img]
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gts):
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold and not matched[img][best_j]:
            matched[img][best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


# ---------------------------------------------------------------------------
# batch reports


def annotation_html(ann: TableAnnotation) -> str:
    return assemble_html(ann.structure_tokens, [c.text for c in ann.cells])


def is_complex(ann: TableAnnotation) -> bool:
    """Complex tables contain at least one multi-row or multi-column cell."""
    return "<td" in ann.structure_tokens


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def evaluate_batch(pred_records: dict[str, dict], gt_annotations: dict[str, TableAnnotation],
                   iou_threshold: float = 0.5) -> dict:
    """Score predictions against ground truth, keyed by filename.

    Returns a JSON-ready report with mean TEDS / TEDS-struct (plus the
    simple/complex breakdown), detection mAP, and per-sample scores.
    Missing or unparseable predictions score 0 and are counted.
    """
    per_sample: dict[str, dict] = {}
    teds_all: list[float] = []
    struct_all: list[float] = []
    split_scores = {True: {"teds": [], "struct": []}, False: {"teds": [], "struct": []}}
    parse_failures = 0
    det_preds: list[list[tuple]] = []
    det_gts: list[list] = []
    for filename in sorted(gt_annotations):
        ann = gt_annotations[filename]
        gt_html = annotation_html(ann)
        rec = pred_records.get(filename)
        complex_table = is_complex(ann)
        if rec is None:
            t = ts = 0.0
            parse_failures += 1
            det_preds.append([])
        else:
            pred_html = rec.get("html", "")
            t = teds(pred_html, gt_html)
            ts = teds_struct(pred_html, gt_html)
            try:
                parse_table_tree(pred_html)
            except ValueError:
                parse_failures += 1
            det_preds.append([(c["bbox"], c["confidence"]) for c in rec.get("cells", [])])
        det_gts.append([c.bbox for c in ann.cells if c.bbox is not None])
        teds_all.append(t)
        struct_all.append(ts)
        split_scores[complex_table]["teds"].append(t)
        split_scores[complex_table]["struct"].append(ts)
        per_sample[filename] = {"teds": t, "teds_struct": ts, "complex": complex_table}
    ap = map_cell_detection(det_preds, det_gts, iou_threshold)
    return {
        "n_samples": len(gt_annotations),
        "parse_failures": parse_failures,
        "iou_threshold": iou_threshold,
        "teds": {"mean": _mean(teds_all),
                 "simple": _mean(split_scores[False]["teds"]),
                 "complex": _mean(split_scores[True]["teds"])},
        "teds_struct": {"mean": _mean(struct_all),
                        "simple": _mean(split_scores[False]["struct"]),
                        "complex": _mean(split_scores[True]["struct"])},
        "map": ap,
        "map_defined": ap is not None,
        "per_sample": per_sample,
    }


def evaluate_model(model, samples, svocab, cvocab, iou_threshold: float = 0.5):
    """Run the real inference path over samples and score it.

    This is the single scoring routine shared by the training validation
    hook and the CLI eval composition, so both report identical numbers.
    Returns (report, results).
    """
    from .decoding import recognize_table

    records = {}
    results = []
    gts = {}
    for sample in samples:
        ann = sample.annotation
        result = recognize_table(model, sample.image, svocab, cvocab, filename=ann.filename)
        records[ann.filename] = result.to_record()
        gts[ann.filename] = ann
        results.append(result)
    return evaluate_batch(records, gts, iou_threshold), results
