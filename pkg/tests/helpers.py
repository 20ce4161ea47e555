"""Shared fixtures/builders for model-level tests."""

import numpy as np

from tablerec.data import SamplePack
from tablerec.model import ModelConfig, TINY_CONFIG, TableModel
from tablerec.vocab import EOS_ID, PAD_ID, SOS_ID, StructVocab, TableAnnotation


def tiny_config(dtype="float64", **kw) -> ModelConfig:
    cfg = ModelConfig(**{**TINY_CONFIG.__dict__, "dtype": dtype, **kw})
    cfg.validate()
    return cfg


def make_pack(rng: np.random.Generator, config: ModelConfig,
              n_struct: int = 6, n_cells: int = 2, cell_len: int = 3,
              pad_tail: int = 0) -> SamplePack:
    """Hand-built supervision arrays consistent with the pack invariants."""
    sv = StructVocab()
    h, w, c = config.image_size
    image = rng.random((h, w, c))
    trigger_id = sv.id_of("<td></td>")
    plain_ids = [sv.id_of(t) for t in ("<tbody>", "<tr>", "</tr>", "</tbody>")]
    ids = [plain_ids[0], plain_ids[1]]
    while sum(1 for i in ids if i == trigger_id) < n_cells:
        ids.append(trigger_id)
    ids += [plain_ids[2], plain_ids[3]]
    ids = ids[:n_struct] if len(ids) >= n_struct else ids
    trigger_pos = np.array([i for i, t in enumerate(ids) if t == trigger_id], dtype=np.int64)
    n_cells = len(trigger_pos)
    struct_in = np.array([SOS_ID] + ids + [PAD_ID] * pad_tail, dtype=np.int64)
    struct_tgt = np.array(ids + [EOS_ID] + [PAD_ID] * pad_tail, dtype=np.int64)

    length = cell_len + 1
    content_in = np.full((n_cells, length), PAD_ID, dtype=np.int64)
    content_tgt = np.full((n_cells, length), PAD_ID, dtype=np.int64)
    for i in range(n_cells):
        chars = rng.integers(4, config.content_vocab_size, size=cell_len)
        content_in[i] = [SOS_ID] + list(chars)
        content_tgt[i] = list(chars) + [EOS_ID]
    raw = rng.random((n_cells, 4))
    bbox_tgt = np.stack([np.minimum(raw[:, 0], raw[:, 2]), np.minimum(raw[:, 1], raw[:, 3]),
                         np.maximum(raw[:, 0], raw[:, 2]), np.maximum(raw[:, 1], raw[:, 3])],
                        axis=1).astype(np.float32)
    bbox_mask = np.ones(n_cells, dtype=np.float32)
    ann = TableAnnotation(structure_tokens=[], cells=[], image_size=(h, w, c))
    return SamplePack(image=image, struct_in=struct_in, struct_tgt=struct_tgt,
                      trigger_pos=trigger_pos, content_in=content_in,
                      content_tgt=content_tgt, bbox_tgt=bbox_tgt, bbox_mask=bbox_mask,
                      annotation=ann)


def make_model(seed: int = 0, dtype: str = "float64", **kw) -> TableModel:
    cfg = tiny_config(dtype=dtype, **kw)
    return TableModel(cfg, rng=np.random.default_rng(seed))
