"""Synthetic table generation and PubTabNet-format dataset IO.

Generation is a pure function of (seed, config): table layout, spans and
texts come from a seeded numpy Generator and rasterization uses the embedded
bitmap font, so datasets are byte-identical across runs and platforms.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import fonts
from .vocab import (
    PAD_ID, SOS_ID, EOS_ID, UNK_ID,
    CellAnnotation, ContentVocab, StructVocab, TableAnnotation, count_triggers,
)

log = logging.getLogger(__name__)

LINE_STYLES = ("solid", "light")
_LINE_VALUE = {"solid": 0, "light": 110}


@dataclass
class GeneratorConfig:
    """Bounds and probabilities for the synthetic table sampler."""

    image_size: tuple[int, int, int] = (160, 160, 1)
    min_rows: int = 2
    max_rows: int = 6
    min_cols: int = 2
    max_cols: int = 6
    header_rows: int = 1
    span_prob: float = 0.15
    empty_prob: float = 0.10
    max_span: int = 3
    max_text_len: int = 8
    glyph_scale: int = 1
    margin: int = 6
    cell_pad: int = 3

    def validate(self) -> None:
        h, w, c = self.image_size
        if c not in (1, 3):
            raise ValueError(f"image channels must be 1 or 3, got {c}")
        if not (1 <= self.min_rows <= self.max_rows and 1 <= self.min_cols <= self.max_cols):
            raise ValueError("invalid row/col bounds")
        if not (0 <= self.span_prob <= 1 and 0 <= self.empty_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        cell_h = (h - 2 * self.margin) // self.max_rows
        cell_w = (w - 2 * self.margin) // self.max_cols
        if cell_h < fonts.GLYPH_H * self.glyph_scale + 2 or cell_w < fonts.ADVANCE * self.glyph_scale + 2 * self.cell_pad:
            raise ValueError(f"grid {self.max_rows}x{self.max_cols} does not fit a "
                             f"{h}x{w} image at glyph scale {self.glyph_scale}")


PROFILES = {
    "desk": GeneratorConfig(),
    "paper-geometry": GeneratorConfig(image_size=(480, 480, 3), max_rows=8, max_cols=8,
                                      glyph_scale=2, margin=14, cell_pad=5, max_text_len=10),
}


@dataclass
class TableSpec:
    """Logical description of one table; rendering derives everything else."""

    rows: int
    cols: int
    spans: dict[int, tuple[int, int]]  # anchor slot (r*cols+c) -> (rowspan, colspan)
    texts: list[str]                   # per cell, anchor order (row-major)
    header_rows: int = 1
    line_style: str = "solid"
    seed: int = 0


@dataclass
class GridCell:
    row: int
    col: int
    rowspan: int
    colspan: int


def enumerate_cells(spec: TableSpec) -> list[GridCell]:
    """Walk the grid row-major, yielding anchor cells; checks exact tiling."""
    occupied = np.zeros((spec.rows, spec.cols), dtype=bool)
    cells = []
    for r in range(spec.rows):
        for c in range(spec.cols):
            if occupied[r, c]:
                continue
            rs, cs = spec.spans.get(r * spec.cols + c, (1, 1))
            if r + rs > spec.rows or c + cs > spec.cols:
                raise ValueError(f"span at ({r},{c}) exceeds the grid")
            if occupied[r : r + rs, c : c + cs].any():
                raise ValueError(f"span at ({r},{c}) overlaps another cell")
            occupied[r : r + rs, c : c + cs] = True
            cells.append(GridCell(r, c, rs, cs))
    if not occupied.all():
        raise ValueError("cells do not tile the grid")
    return cells


_DIGITS = "0123456789"
_UPPER = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
_LOWER = "abcdefghijklmnopqrstuvwxyz"


def _random_text(rng: np.random.Generator, max_len: int, header: bool) -> str:
    if header:
        n = int(rng.integers(2, max(3, max_len) + 1))
        first = _UPPER[rng.integers(0, 26)]
        rest = "".join(_LOWER[i] for i in rng.integers(0, 26, size=n - 1))
        return (first + rest)[:max_len]
    kind = rng.random()
    if kind < 0.35:
        text = "".join(_DIGITS[i] for i in rng.integers(0, 10, size=rng.integers(1, 5)))
    elif kind < 0.60:
        text = f"{rng.integers(0, 100)}.{rng.integers(0, 10)}"
    elif kind < 0.72:
        text = f"{rng.integers(0, 100)}.{rng.integers(0, 10)}%"
    elif kind < 0.82:
        text = f"-{rng.integers(0, 50)}.{rng.integers(0, 10)}"
    elif kind < 0.90:
        text = f"({rng.integers(1, 100)})"
    else:
        n = int(rng.integers(2, 7))
        text = "".join(_LOWER[i] for i in rng.integers(0, 26, size=n))
    return text[:max_len]


def sample_table_spec(rng: np.random.Generator, config: GeneratorConfig) -> TableSpec:
    """Draw a valid TableSpec; span placement uses bounded rejection."""
    config.validate()
    rows = int(rng.integers(config.min_rows, config.max_rows + 1))
    cols = int(rng.integers(config.min_cols, config.max_cols + 1))
    header_rows = min(config.header_rows, rows - 1) if rows > 1 else 0
    occupied = np.zeros((rows, cols), dtype=bool)
    spans: dict[int, tuple[int, int]] = {}
    for r in range(rows):
        for c in range(cols):
            if occupied[r, c]:
                continue
            placed = False
            if config.span_prob > 0 and rng.random() < config.span_prob:
                for _ in range(3):  # bounded rejection, falls back to a 1x1 cell
                    rs = int(rng.integers(1, min(config.max_span, rows - r) + 1))
                    cs = int(rng.integers(1, min(config.max_span, cols - c) + 1))
                    if rs == 1 and cs == 1:
                        continue
                    if not occupied[r : r + rs, c : c + cs].any():
                        spans[r * cols + c] = (rs, cs)
                        occupied[r : r + rs, c : c + cs] = True
                        placed = True
                        break
            if not placed:
                occupied[r, c] = True
    spec = TableSpec(rows=rows, cols=cols, spans=spans, texts=[],
                     header_rows=header_rows,
                     line_style=LINE_STYLES[int(rng.integers(0, len(LINE_STYLES)))],
                     seed=int(rng.integers(0, 2**31 - 1)))
    for cell in enumerate_cells(spec):
        if rng.random() < config.empty_prob:
            spec.texts.append("")
        else:
            spec.texts.append(_random_text(rng, config.max_text_len, cell.row < header_rows))
    return spec


def structure_tokens_for(spec: TableSpec) -> list[str]:
    """Emit the structural token stream from the generation grammar."""
    cells = enumerate_cells(spec)
    by_row: dict[int, list[GridCell]] = {}
    for cell in cells:
        by_row.setdefault(cell.row, []).append(cell)

    def cell_tokens(cell: GridCell) -> list[str]:
        if cell.rowspan == 1 and cell.colspan == 1:
            return ["<td></td>"]
        toks = ["<td"]
        if cell.rowspan > 1:
            toks.append(f' rowspan="{cell.rowspan}"')
        if cell.colspan > 1:
            toks.append(f' colspan="{cell.colspan}"')
        toks += [">", "</td>"]
        return toks

    tokens: list[str] = []
    sections = []
    if spec.header_rows > 0:
        sections.append(("thead", range(0, spec.header_rows)))
    sections.append(("tbody", range(spec.header_rows, spec.rows)))
    for tag, row_range in sections:
        tokens.append(f"<{tag}>")
        for r in row_range:
            tokens.append("<tr>")
            for cell in by_row.get(r, []):
                tokens.extend(cell_tokens(cell))
            tokens.append("</tr>")
        tokens.append(f"</{tag}>")
    return tokens


@dataclass
class Sample:
    image: np.ndarray  # (h, w, c) float32 in [0, 1]
    annotation: TableAnnotation


def render(spec: TableSpec, image_size: tuple[int, int, int],
           glyph_scale: int = 1, margin: int = 6, cell_pad: int = 3) -> Sample:
    """Rasterize a spec: ruled cell borders plus bitmap-font text.

    Text that does not fit its cell is truncated and the annotation records
    the truncated text.  Bounding boxes are the tight pixel boxes of each
    cell's rendered ink (upper edges exclusive).
    """
    h, w, channels = image_size
    canvas = np.full((h, w), 255, dtype=np.uint8)
    cells = enumerate_cells(spec)
    if len(spec.texts) != len(cells):
        raise ValueError(f"{len(spec.texts)} texts for {len(cells)} cells")
    x_edges = margin + (np.arange(spec.cols + 1) * (w - 2 * margin)) // spec.cols
    y_edges = margin + (np.arange(spec.rows + 1) * (h - 2 * margin)) // spec.rows
    line_value = _LINE_VALUE.get(spec.line_style, 0)
    s = glyph_scale

    rendered_texts: list[str] = []
    bboxes: list[list[float] | None] = []
    for cell, text in zip(cells, spec.texts):
        x0, x1 = int(x_edges[cell.col]), int(x_edges[cell.col + cell.colspan])
        y0, y1 = int(y_edges[cell.row]), int(y_edges[cell.row + cell.rowspan])
        canvas[y0, x0:x1 + 1] = line_value
        canvas[y1, x0:x1 + 1] = line_value
        canvas[y0:y1 + 1, x0] = line_value
        canvas[y0:y1 + 1, x1] = line_value
        inner_w = x1 - x0 - 2 * cell_pad
        max_chars = max(0, inner_w // (fonts.ADVANCE * s))
        text = text[:max_chars].rstrip()
        tx = x0 + cell_pad
        ty = (y0 + y1) // 2 - (fonts.GLYPH_H * s) // 2
        fonts.draw_text(canvas, text, tx, ty, scale=s)
        bbox = fonts.text_ink_bbox(text, tx, ty, scale=s)
        if bbox is None:
            text = ""
        rendered_texts.append(text)
        bboxes.append(bbox)

    annotation = TableAnnotation(
        structure_tokens=structure_tokens_for(spec),
        cells=[CellAnnotation(content_tokens=list(t), bbox=b)
               for t, b in zip(rendered_texts, bboxes)],
        image_size=(h, w, channels),
    )
    annotation.validate()
    image = (canvas.astype(np.float32) / 255.0)[:, :, None]
    if channels == 3:
        image = np.repeat(image, 3, axis=2)
    return Sample(image=image, annotation=annotation)


def generate_samples(count: int, seed: int, config: GeneratorConfig,
                     split: str = "train", name_prefix: str = "table") -> list[Sample]:
    """Deterministically generate ``count`` samples from one seeded stream."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        spec = sample_table_spec(rng, config)
        sample = render(spec, config.image_size, glyph_scale=config.glyph_scale,
                        margin=config.margin, cell_pad=config.cell_pad)
        sample.annotation.filename = f"{name_prefix}_{i:06d}.png"
        sample.annotation.split = split
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# dataset files


def annotation_to_record(ann: TableAnnotation) -> dict:
    cells = []
    for cell in ann.cells:
        rec: dict = {"tokens": list(cell.content_tokens)}
        if cell.bbox is not None:
            rec["bbox"] = [float(v) for v in cell.bbox]
        cells.append(rec)
    return {
        "filename": ann.filename,
        "split": ann.split,
        "html": {"structure": {"tokens": list(ann.structure_tokens)}, "cells": cells},
    }


def _merge_plain_td(tokens: list[str]) -> list[str]:
    """Normalize raw PubTabNet two-token plain cells ('<td>', '</td>') into
    the single-token class this vocabulary uses."""
    out = []
    i = 0
    while i < len(tokens):
        if tokens[i] == "<td>" and i + 1 < len(tokens) and tokens[i + 1] == "</td>":
            out.append("<td></td>")
            i += 2
        else:
            out.append(tokens[i])
            i += 1
    return out


def record_to_annotation(rec: dict, image_size: tuple[int, int, int] | None = None) -> TableAnnotation:
    html = rec["html"]
    structure = _merge_plain_td(list(html["structure"]["tokens"]))
    cells = []
    for c in html["cells"]:
        tokens = list(c.get("tokens", []))
        bbox = c.get("bbox")
        if bbox is not None:
            bbox = [float(v) for v in bbox]
        if not tokens:
            bbox = None  # some sources carry degenerate boxes on empty cells
        cells.append(CellAnnotation(content_tokens=tokens, bbox=bbox))
    ann = TableAnnotation(
        structure_tokens=structure,
        cells=cells,
        image_size=image_size if image_size is not None else (0, 0, 0),
        filename=rec.get("filename", ""),
        split=rec.get("split", "train"),
    )
    return ann


def write_dataset(samples: list[Sample], out_dir: str | Path) -> Path:
    """Write images/*.png plus annotations.jsonl in PubTabNet layout."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jsonl = out / "annotations.jsonl"
    with open(jsonl, "w", encoding="utf-8") as fh:
        for sample in samples:
            ann = sample.annotation
            arr = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
            if arr.shape[2] == 1:
                img = Image.fromarray(arr[:, :, 0], mode="L")
            else:
                img = Image.fromarray(arr, mode="RGB")
            img.save(out / "images" / ann.filename)
            fh.write(json.dumps(annotation_to_record(ann)) + "\n")
    return jsonl


def _load_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_dataset(path: str | Path) -> tuple[list[Sample], int]:
    """Load a dataset directory (or its annotations.jsonl); returns
    (samples, skipped_count).  Malformed lines are logged with their line
    number and skipped."""
    path = Path(path)
    if path.is_dir():
        jsonl = path / "annotations.jsonl"
        image_dir = path / "images"
    else:
        jsonl = path
        image_dir = path.parent / "images"
    if not jsonl.exists():
        raise FileNotFoundError(f"no annotation file at {jsonl}")
    samples: list[Sample] = []
    skipped = 0
    with open(jsonl, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image = _load_image(image_dir / rec["filename"])
                ann = record_to_annotation(rec, image_size=image.shape)
                ann.validate()
            except Exception as exc:
                log.warning("skipping malformed sample at line %d: %s", line_no, exc)
                skipped += 1
                continue
            samples.append(Sample(image=image, annotation=ann))
    if skipped:
        log.warning("skipped %d malformed samples in %s", skipped, jsonl)
    return samples, skipped


def load_annotations(jsonl_path: str | Path) -> tuple[dict[str, TableAnnotation], int]:
    """Load annotations keyed by filename (no images); for evaluation."""
    result: dict[str, TableAnnotation] = {}
    skipped = 0
    with open(jsonl_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ann = record_to_annotation(rec)
                if count_triggers(ann.structure_tokens) != len(ann.cells):
                    raise ValueError("trigger/cell count mismatch")
            except Exception as exc:
                log.warning("skipping malformed annotation at line %d: %s", line_no, exc)
                skipped += 1
                continue
            result[ann.filename] = ann
    return result, skipped


# ---------------------------------------------------------------------------
# training batches


@dataclass
class SamplePack:
    """One sample's supervision arrays, aligned to trigger positions."""

    image: np.ndarray          # (h, w, c)
    struct_in: np.ndarray      # (T,) shifted ids, starts with SOS
    struct_tgt: np.ndarray     # (T,) target ids, ends with EOS then PAD
    trigger_pos: np.ndarray    # (N,) indices into the struct sequence
    content_in: np.ndarray     # (N, L)
    content_tgt: np.ndarray    # (N, L)
    bbox_tgt: np.ndarray       # (N, 4) normalized to [0, 1]
    bbox_mask: np.ndarray      # (N,) 1.0 for non-empty cells
    annotation: TableAnnotation


@dataclass
class Batch:
    packs: list[SamplePack]

    def __len__(self) -> int:
        return len(self.packs)


def pack_sample(sample: Sample, svocab: StructVocab, cvocab: ContentVocab,
                max_struct_len: int, max_cell_len: int) -> SamplePack:
    """Build one sample's arrays; raises ValueError when length caps are hit."""
    ann = sample.annotation
    h, w, _ = ann.image_size
    ids = svocab.encode(ann.structure_tokens)
    if len(ids) + 1 > max_struct_len:
        raise ValueError(f"structure length {len(ids) + 1} exceeds cap {max_struct_len}")
    struct_in = np.array([SOS_ID] + ids, dtype=np.int64)
    struct_tgt = np.array(ids + [EOS_ID], dtype=np.int64)
    trigger_pos = np.array([i for i, t in enumerate(ids) if t in svocab.trigger_ids],
                           dtype=np.int64)
    if len(trigger_pos) != len(ann.cells):
        raise ValueError("trigger/cell count mismatch")

    content_in_rows, content_tgt_rows = [], []
    bbox_tgt = np.zeros((len(ann.cells), 4), dtype=np.float32)
    bbox_mask = np.zeros(len(ann.cells), dtype=np.float32)
    for i, cell in enumerate(ann.cells):
        char_ids = cvocab.encode(cell.content_tokens)
        if len(char_ids) + 1 > max_cell_len:
            raise ValueError(f"cell length {len(char_ids) + 1} exceeds cap {max_cell_len}")
        content_in_rows.append([SOS_ID] + char_ids)
        content_tgt_rows.append(char_ids + [EOS_ID])
        if cell.bbox is not None:
            x0, y0, x1, y1 = cell.bbox
            bbox_tgt[i] = [x0 / w, y0 / h, x1 / w, y1 / h]
            bbox_mask[i] = 1.0
    n_cells = len(ann.cells)
    max_l = max((len(r) for r in content_in_rows), default=1)
    content_in = np.full((n_cells, max_l), PAD_ID, dtype=np.int64)
    content_tgt = np.full((n_cells, max_l), PAD_ID, dtype=np.int64)
    for i, (ci, ct) in enumerate(zip(content_in_rows, content_tgt_rows)):
        content_in[i, : len(ci)] = ci
        content_tgt[i, : len(ct)] = ct
    return SamplePack(image=sample.image, struct_in=struct_in, struct_tgt=struct_tgt,
                      trigger_pos=trigger_pos, content_in=content_in,
                      content_tgt=content_tgt, bbox_tgt=bbox_tgt, bbox_mask=bbox_mask,
                      annotation=ann)


def batchify(samples: list[Sample], batch_size: int, svocab: StructVocab,
             cvocab: ContentVocab, max_struct_len: int, max_cell_len: int) -> list[Batch]:
    """Pack samples into batches, padding sequences with PAD (ignored by the
    losses).  Samples exceeding the length caps are skipped with a warning."""
    if not samples:
        raise ValueError("batchify needs at least one sample")
    packs = []
    for sample in samples:
        try:
            packs.append(pack_sample(sample, svocab, cvocab, max_struct_len, max_cell_len))
        except ValueError as exc:
            log.warning("skipping sample %s: %s", sample.annotation.filename, exc)
    if not packs:
        raise ValueError("no samples fit within the sequence length caps")
    batches = []
    for start in range(0, len(packs), batch_size):
        group = packs[start : start + batch_size]
        max_t = max(p.struct_in.shape[0] for p in group)
        max_l = max(p.content_in.shape[1] for p in group)
        padded = []
        for p in group:
            t, l = p.struct_in.shape[0], p.content_in.shape[1]
            if t < max_t:
                p = replace(
                    p,
                    struct_in=np.concatenate([p.struct_in, np.full(max_t - t, PAD_ID, np.int64)]),
                    struct_tgt=np.concatenate([p.struct_tgt, np.full(max_t - t, PAD_ID, np.int64)]),
                )
            if l < max_l:
                padc = np.full((p.content_in.shape[0], max_l - l), PAD_ID, np.int64)
                p = replace(p, content_in=np.concatenate([p.content_in, padc], axis=1),
                            content_tgt=np.concatenate([p.content_tgt, padc], axis=1))
            padded.append(p)
        batches.append(Batch(packs=padded))
    return batches
