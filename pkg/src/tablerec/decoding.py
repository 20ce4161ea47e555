"""Greedy autoregressive inference.

Structure tokens are decoded one at a time from SOS; whenever the emitted
token opens a new cell (``<td></td>`` or ``<td``), the shared-decoder hidden
state at that step is kept, and after the structure pass every kept state
drives one bounding-box prediction and one greedy character decode.  Cell
contents are finally inserted into the structure tags to produce HTML.

Weak or untrained models can emit token streams that do not form balanced
HTML; those are repaired before assembly (orphans dropped, unclosed tags
closed) so every decode yields a parseable result, with the repair count
surfaced on the TableResult.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import EncoderMemory, TableModel
from .tensor import Tensor
from .vocab import (
    EOS_ID, PAD_ID, SOS_ID, SPECIALS,
    StructVocab, ContentVocab, assemble_html, detokenize_content, is_cell_trigger,
)


@dataclass
class CellResult:
    content: str
    bbox: list[float]          # [x0, y0, x1, y1] in pixels
    confidence: float          # structure softmax probability of the trigger token


@dataclass
class TableResult:
    structure_tokens: list[str]
    cells: list[CellResult]
    html: str
    token_probs: list[float]
    truncated: bool = False
    repairs: int = 0
    filename: str = ""

    def to_record(self) -> dict:
        return {
            "filename": self.filename,
            "html": self.html,
            "structure_tokens": list(self.structure_tokens),
            "cells": [{"content": c.content, "bbox": [float(v) for v in c.bbox],
                       "confidence": float(c.confidence)} for c in self.cells],
            "token_probs": [float(p) for p in self.token_probs],
            "truncated": bool(self.truncated),
            "repairs": int(self.repairs),
        }

    @staticmethod
    def from_record(rec: dict) -> "TableResult":
        cells = [CellResult(content=c["content"], bbox=list(c["bbox"]),
                            confidence=float(c["confidence"])) for c in rec.get("cells", [])]
        return TableResult(structure_tokens=list(rec.get("structure_tokens", [])),
                           cells=cells, html=rec.get("html", ""),
                           token_probs=list(rec.get("token_probs", [])),
                           truncated=bool(rec.get("truncated", False)),
                           repairs=int(rec.get("repairs", 0)),
                           filename=rec.get("filename", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def decode_structure(model: TableModel, memory: EncoderMemory, svocab: StructVocab,
                     max_len: int | None = None, beam_width: int = 1):
    """Greedy structure decoding.

    Returns (tokens, hidden_states, probs, truncated): one shared-decoder
    hidden row and one softmax probability per emitted token.  Decoding
    stops at EOS or after max_struct_len steps (truncation is flagged, not
    an error).  ``beam_width`` is an interface hook; only width 1 (greedy)
    is implemented.
    """
    if beam_width != 1:
        raise ValueError(f"only greedy decoding (beam_width=1) is implemented, got {beam_width}")
    cap = model.config.max_struct_len if max_len is None else min(max_len, model.config.max_struct_len)
    ids = [SOS_ID]
    tokens: list[str] = []
    hiddens: list[np.ndarray] = []
    probs: list[float] = []
    truncated = True
    while len(ids) <= cap - 1:
        hidden = model.shared_decode(memory, np.asarray(ids, dtype=np.int64))
        logits = model.structure_head(hidden, memory)
        row = logits.data[-1]
        e = np.exp(row - row.max())
        p = e / e.sum()
        tok_id = int(np.argmax(row))
        if tok_id == EOS_ID:
            truncated = False
            break
        tokens.append(svocab.token_of(tok_id))
        hiddens.append(hidden.data[-1].copy())
        probs.append(float(p[tok_id]))
        ids.append(tok_id)
    return tokens, hiddens, probs, truncated


def repair_structure(tokens: list[str]):
    """Make a raw emission assemblable and canonical: drop orphan cell
    fragments and mismatched closers, close whatever remains open, and
    rewrite attribute-less spanning-form cells as the plain ``<td></td>``
    token class (otherwise assembled HTML would not re-tokenize to the
    emitted stream).

    Returns (repaired_tokens, source_index_per_token, n_repairs); synthesized
    tokens carry source index None.  Cell triggers always survive with their
    source index, so downstream hidden-state alignment holds.
    """
    out: list[str] = []
    src: list[int | None] = []
    repairs = 0
    stack: list[str] = []
    # buffered open cell: index of '<td', its attribute tokens, '>' seen flag
    td_idx: int | None = None
    attrs: list[tuple[str, int]] = []
    gt_idx: int | None = None

    def emit(tok: str, idx: int | None):
        out.append(tok)
        src.append(idx)

    def finish_cell(close_idx: int | None):
        """Flush the buffered cell; synthesized pieces count as repairs."""
        nonlocal td_idx, attrs, gt_idx, repairs
        if td_idx is None:
            return
        if not attrs:
            # plain cell in spanning form: normalize to the one-token class
            emit("<td></td>", td_idx)
            repairs += 1
        else:
            emit("<td", td_idx)
            for tok, idx in attrs:
                emit(tok, idx)
            if gt_idx is None:
                emit(">", None)
                repairs += 1
            else:
                emit(">", gt_idx)
            if close_idx is None:
                emit("</td>", None)
                repairs += 1
            else:
                emit("</td>", close_idx)
        td_idx = None
        attrs = []
        gt_idx = None

    for i, tok in enumerate(tokens):
        if tok in SPECIALS:
            repairs += 1
            continue
        if td_idx is not None:
            if tok.startswith(" rowspan") or tok.startswith(" colspan"):
                dup = any(a.split("=")[0] == tok.split("=")[0] for a, _ in attrs)
                if gt_idx is not None or dup:
                    repairs += 1  # attribute after '>' or duplicate: dropped
                else:
                    attrs.append((tok, i))
                continue
            if tok == ">":
                if gt_idx is None:
                    gt_idx = i
                else:
                    repairs += 1
                continue
            if tok == "</td>":
                finish_cell(i)
                continue
            repairs += 1  # interrupted cell: force-close, then handle tok
            finish_cell(None)
        if tok == "<td></td>":
            emit(tok, i)
        elif tok == "<td":
            td_idx = i
            attrs = []
            gt_idx = None
        elif tok in ("<thead>", "<tbody>", "<tr>"):
            emit(tok, i)
            stack.append(tok[1:-1])
        elif tok in ("</thead>", "</tbody>", "</tr>"):
            name = tok[2:-1]
            if stack and stack[-1] == name:
                stack.pop()
                emit(tok, i)
            else:
                repairs += 1  # orphan closer
        else:
            repairs += 1  # orphan cell fragment or non-structural token
    if td_idx is not None:
        finish_cell(None)
    while stack:
        emit(f"</{stack.pop()}>", None)
        repairs += 1
    return out, src, repairs


def decode_cells(model: TableModel, memory: EncoderMemory, trigger_hiddens: np.ndarray,
                 cvocab: ContentVocab, max_len: int | None = None):
    """Per-trigger bbox regression plus greedy character decoding.

    ``trigger_hiddens`` is (n, d_model) in trigger order; returns
    (contents, bboxes) with order preserved.  Char decoding for all cells
    advances in lockstep and stops at EOS or the length cap.
    """
    n = trigger_hiddens.shape[0]
    if n == 0:
        return [], np.zeros((0, 4), dtype=np.float64)
    cap = model.config.max_cell_len if max_len is None else min(max_len, model.config.max_cell_len)
    hidden_t = Tensor(trigger_hiddens.astype(model.dtype))
    boxes = model.bbox_head(hidden_t, memory).data.astype(np.float64)
    # canonical corner ordering
    x0 = np.minimum(boxes[:, 0], boxes[:, 2])
    x1 = np.maximum(boxes[:, 0], boxes[:, 2])
    y0 = np.minimum(boxes[:, 1], boxes[:, 3])
    y1 = np.maximum(boxes[:, 1], boxes[:, 3])
    boxes = np.stack([x0, y0, x1, y1], axis=1)

    ids = np.full((n, 1), SOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    while ids.shape[1] <= cap - 1 and not done.all():
        logits = model.content_decode(memory, hidden_t, ids)
        nxt = np.argmax(logits.data[:, -1, :], axis=-1).astype(np.int64)
        nxt[done] = PAD_ID
        done |= nxt == EOS_ID
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    contents = []
    for row in ids[:, 1:]:
        chars = []
        for tid in row:
            if tid in (EOS_ID, PAD_ID):
                break
            chars.append(cvocab.token_of(int(tid)))
        # a literal '</td>' inside cell text cannot be represented in the
        # assembled HTML, so it is stripped from weak-model emissions
        contents.append(detokenize_content(chars).replace("</td>", ""))
    return contents, boxes


def recognize_table(model: TableModel, image: np.ndarray, svocab: StructVocab,
                    cvocab: ContentVocab, filename: str = "",
                    beam_width: int = 1) -> TableResult:
    """Full pipeline: encode, decode structure, decode cells, assemble HTML."""
    memory = model.encode(image)
    raw_tokens, hiddens, probs, truncated = decode_structure(model, memory, svocab,
                                                             beam_width=beam_width)
    tokens, src_idx, repairs = repair_structure(raw_tokens)
    trig_rows = [(tok, src_idx[j]) for j, tok in enumerate(tokens) if is_cell_trigger(tok)]
    trigger_hidden = np.stack([hiddens[i] for _, i in trig_rows], axis=0) \
        if trig_rows else np.zeros((0, model.config.d_model))
    contents, boxes = decode_cells(model, memory, trigger_hidden, cvocab)
    h, w, _ = model.config.image_size
    cells = []
    for i, (tok, src) in enumerate(trig_rows):
        px = [boxes[i, 0] * w, boxes[i, 1] * h, boxes[i, 2] * w, boxes[i, 3] * h]
        cells.append(CellResult(content=contents[i], bbox=[float(v) for v in px],
                                confidence=probs[src]))
    html = assemble_html(tokens, [c.content for c in cells])
    token_probs = [probs[s] if s is not None else 1.0 for s in src_idx]
    return TableResult(structure_tokens=tokens, cells=cells, html=html,
                       token_probs=token_probs, truncated=truncated,
                       repairs=repairs, filename=filename)


def draw_overlay(image: np.ndarray, result: TableResult):
    """Input image with predicted cell boxes drawn; returns a PIL image."""
    from PIL import Image, ImageDraw

    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    img = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(img)
    h, w = arr.shape[0], arr.shape[1]
    for cell in result.cells:
        x0, y0, x1, y1 = cell.bbox
        x0 = min(max(x0, 0), w - 1)
        x1 = min(max(x1, x0), w - 1)
        y0 = min(max(y0, 0), h - 1)
        y1 = min(max(y1, y0), h - 1)
        draw.rectangle([x0, y0, x1, y1], outline=(0, 170, 0))
    return img
