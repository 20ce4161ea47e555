"""Synthetic generator, renderer, dataset IO and batching tests."""

import json

import numpy as np
import pytest

from tablerec import data as D
from tablerec import fonts
from tablerec.data import (
    GeneratorConfig, Sample, TableSpec, batchify, enumerate_cells,
    generate_samples, load_annotations, load_dataset, render,
    sample_table_spec, structure_tokens_for, write_dataset,
)
from tablerec.vocab import (
    EOS_ID, PAD_ID, SOS_ID, ContentVocab, StructVocab, count_triggers,
    detokenize_structure, tokenize_structure,
)


def small_config(**kw):
    base = dict(image_size=(96, 96, 1), max_rows=4, max_cols=4, margin=4, cell_pad=2)
    base.update(kw)
    return GeneratorConfig(**base)


class TestSpecSampling:
    def test_zero_span_prob_gives_all_unit_cells(self):
        rng = np.random.default_rng(0)
        cfg = small_config(span_prob=0.0)
        for _ in range(20):
            spec = sample_table_spec(rng, cfg)
            assert spec.spans == {}

    def test_same_seed_same_spec(self):
        cfg = small_config()
        a = sample_table_spec(np.random.default_rng(7), cfg)
        b = sample_table_spec(np.random.default_rng(7), cfg)
        assert a == b

    def test_tiling_invariant_over_many_specs(self):
        # enumerate_cells raises on any overlap or gap
        rng = np.random.default_rng(1)
        cfg = small_config(span_prob=0.35)
        for _ in range(10_000):
            spec = sample_table_spec(rng, cfg)
            cells = enumerate_cells(spec)
            covered = sum(c.rowspan * c.colspan for c in cells)
            assert covered == spec.rows * spec.cols


class TestRender:
    def test_empty_cell_has_no_bbox(self):
        spec = TableSpec(rows=1, cols=2, spans={}, texts=["", "ab"], header_rows=0)
        sample = render(spec, (96, 96, 1))
        assert sample.annotation.cells[0].bbox is None
        assert sample.annotation.cells[1].bbox is not None

    def test_single_char_bbox_matches_font_metrics(self):
        # oracle: ink bounds of the glyph bitmap itself
        spec = TableSpec(rows=1, cols=1, spans={}, texts=["M"], header_rows=0)
        sample = render(spec, (64, 64, 1), glyph_scale=2)
        x0, y0, x1, y1 = sample.annotation.cells[0].bbox
        gx0, gy0, gx1, gy1 = fonts.INK_BOUNDS["M"]
        assert x1 - x0 == (gx1 - gx0) * 2
        assert y1 - y0 == (gy1 - gy0) * 2
        assert x1 - x0 == fonts.GLYPH_W * 2  # 'M' spans the full glyph width

    def test_bbox_tightly_contains_ink(self):
        cfg = small_config()
        for sample in generate_samples(15, seed=3, config=cfg):
            img = sample.image[:, :, 0]
            for cell in sample.annotation.cells:
                if cell.bbox is None:
                    continue
                x0, y0, x1, y1 = (int(v) for v in cell.bbox)
                region = img[y0:y1, x0:x1]
                assert (region < 0.5).any()
                # tightness: every edge row/column of the box touches ink
                assert (region[0] < 0.5).any() and (region[-1] < 0.5).any()
                assert (region[:, 0] < 0.5).any() and (region[:, -1] < 0.5).any()

    def test_structure_tokens_match_tokenized_html(self):
        rng = np.random.default_rng(5)
        cfg = small_config(span_prob=0.3)
        for _ in range(50):
            spec = sample_table_spec(rng, cfg)
            sample = render(spec, cfg.image_size)
            html = detokenize_structure(sample.annotation.structure_tokens)
            assert tokenize_structure(html) == sample.annotation.structure_tokens

    def test_assembled_html_with_contents_round_trips(self):
        from tablerec.evaluation import annotation_html

        for sample in generate_samples(25, seed=13, config=small_config(span_prob=0.3)):
            ann = sample.annotation
            html = annotation_html(ann)  # contents inserted into the structure
            assert tokenize_structure(html) == ann.structure_tokens

    def test_rendered_bboxes_self_iou(self):
        from tablerec.evaluation import iou

        for sample in generate_samples(10, seed=14, config=small_config()):
            for cell in sample.annotation.cells:
                if cell.bbox is not None:
                    assert iou(cell.bbox, cell.bbox) == 1.0

    def test_truncation_updates_annotation(self):
        spec = TableSpec(rows=1, cols=1, spans={}, texts=["abcdefghijklmnop"], header_rows=0)
        sample = render(spec, (48, 48, 1))
        text = sample.annotation.cells[0].text
        assert 0 < len(text) < 16

    def test_annotations_validate(self):
        for sample in generate_samples(30, seed=11, config=small_config(span_prob=0.3)):
            sample.annotation.validate()
            assert count_triggers(sample.annotation.structure_tokens) == len(sample.annotation.cells)


class TestDatasetIO:
    def test_write_load_round_trip(self, tmp_path):
        samples = generate_samples(8, seed=2, config=small_config())
        write_dataset(samples, tmp_path)
        loaded, skipped = load_dataset(tmp_path)
        assert skipped == 0 and len(loaded) == 8
        for a, b in zip(samples, loaded):
            assert a.annotation == b.annotation
            np.testing.assert_array_equal(a.image, b.image)

    def test_deterministic_bytes(self, tmp_path):
        for sub in ("a", "b"):
            write_dataset(generate_samples(5, seed=9, config=small_config()), tmp_path / sub)
        a = (tmp_path / "a" / "annotations.jsonl").read_bytes()
        b = (tmp_path / "b" / "annotations.jsonl").read_bytes()
        assert a == b
        for img in sorted((tmp_path / "a" / "images").iterdir()):
            other = tmp_path / "b" / "images" / img.name
            assert img.read_bytes() == other.read_bytes()

    def test_handcrafted_pubtabnet_line(self, tmp_path):
        # raw PubTabNet uses two-token plain cells; the loader normalizes them
        rec = {
            "filename": "x.png",
            "split": "val",
            "html": {
                "cells": [
                    {"tokens": ["9", ".", "5"], "bbox": [1, 2, 10, 12]},
                    {"tokens": []},
                    {"tokens": ["a", "b"], "bbox": [12, 2, 20, 12]},
                ],
                "structure": {"tokens": ["<tbody>", "<tr>", "<td", ' rowspan="2"', ">",
                                         "</td>", "<td>", "</td>", "<td>", "</td>",
                                         "</tr>", "</tbody>"]},
            },
        }
        path = tmp_path / "gt.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        anns, skipped = load_annotations(path)
        assert skipped == 0
        ann = anns["x.png"]
        assert count_triggers(ann.structure_tokens) == 3 == len(ann.cells)
        assert ann.cells[1].bbox is None  # absent bbox on the empty cell

    def test_malformed_line_skipped_with_count(self, tmp_path):
        samples = generate_samples(3, seed=4, config=small_config())
        jsonl = write_dataset(samples, tmp_path)
        lines = jsonl.read_text().splitlines()
        lines.insert(1, "{not json")
        jsonl.write_text("\n".join(lines) + "\n")
        loaded, skipped = load_dataset(tmp_path)
        assert skipped == 1 and len(loaded) == 3


class TestBatchify:
    def _vocabs(self):
        return StructVocab(), ContentVocab()

    def test_batch_of_one_is_padding_free(self):
        sv, cv = self._vocabs()
        samples = generate_samples(1, seed=6, config=small_config())
        [batch] = batchify(samples, 1, sv, cv, max_struct_len=140, max_cell_len=16)
        pack = batch.packs[0]
        assert pack.struct_in[0] == SOS_ID
        assert PAD_ID not in pack.struct_tgt
        assert pack.struct_tgt[-1] == EOS_ID

    def test_alignment_is_bijective(self):
        sv, cv = self._vocabs()
        samples = generate_samples(20, seed=8, config=small_config(span_prob=0.3))
        batches = batchify(samples, 4, sv, cv, 140, 16)
        for batch in batches:
            for pack in batch.packs:
                n_cells = len(pack.annotation.cells)
                assert len(set(pack.trigger_pos.tolist())) == n_cells
                assert pack.content_in.shape[0] == n_cells == pack.bbox_tgt.shape[0]
                for pos in pack.trigger_pos:
                    assert pack.struct_tgt[pos] in sv.trigger_ids

    def test_empty_cells_supervise_immediate_eos(self):
        sv, cv = self._vocabs()
        spec = TableSpec(rows=1, cols=2, spans={}, texts=["", "ab"], header_rows=0)
        sample = render(spec, (96, 96, 1))
        [batch] = batchify([sample], 1, sv, cv, 140, 16)
        pack = batch.packs[0]
        assert pack.content_in[0, 0] == SOS_ID and pack.content_tgt[0, 0] == EOS_ID
        assert pack.bbox_mask.tolist() == [0.0, 1.0]

    def test_overlong_sample_skipped(self):
        sv, cv = self._vocabs()
        samples = generate_samples(12, seed=10, config=small_config())
        lengths = sorted(len(s.annotation.structure_tokens) + 1 for s in samples)
        cap = lengths[len(lengths) // 2]  # skips the longer half, keeps the rest
        batches = batchify(samples, 4, sv, cv, max_struct_len=cap, max_cell_len=16)
        total = sum(len(b.packs) for b in batches)
        assert 0 < total < 12

    def test_all_samples_overlong_is_an_error(self):
        sv, cv = self._vocabs()
        samples = generate_samples(3, seed=10, config=small_config())
        with pytest.raises(ValueError, match="length caps"):
            batchify(samples, 4, sv, cv, max_struct_len=5, max_cell_len=16)

    def test_normalized_bbox_targets(self):
        sv, cv = self._vocabs()
        samples = generate_samples(5, seed=12, config=small_config())
        for batch in batchify(samples, 2, sv, cv, 140, 16):
            for pack in batch.packs:
                masked = pack.bbox_tgt[pack.bbox_mask > 0]
                assert np.all(masked >= 0.0) and np.all(masked <= 1.0)
