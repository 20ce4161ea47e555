"""Training loop: epochs over shuffled batches, step-level JSONL logging,
per-epoch checkpoints, and a validation hook that shares the exact
inference+metric path used by the CLI."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Sample, batchify
from .evaluation import evaluate_model
from .model import TableModel, save_checkpoint, train_step
from .tensor import Adam
from .vocab import ContentVocab, StructVocab

log = logging.getLogger(__name__)


def lr_for_epoch(cfg, epoch: int) -> float:
    """Constant learning rate, scaled once at lr_drop_epoch (if set)."""
    lr = cfg.lr
    if cfg.lr_drop_epoch >= 0 and epoch >= cfg.lr_drop_epoch:
        lr *= cfg.lr_drop_factor
    return lr


def train(run: RunConfig, train_samples: list[Sample], val_samples: list[Sample],
          out_path: str | Path, quiet: bool = False) -> dict:
    """Train from scratch and write checkpoints alongside ``out_path``.

    Writes: the rolling/final checkpoint at out_path, out_path + '.best'
    on best validation TEDS-struct, a per-step JSONL log at
    out_path + '.log.jsonl', and a final validation report at
    out_path + '.final_eval.json' (when a validation set exists).
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tcfg = run.training
    svocab, cvocab = StructVocab(), ContentVocab()
    if len(svocab) != run.model.struct_vocab_size or len(cvocab) != run.model.content_vocab_size:
        raise ValueError(
            f"model vocab sizes ({run.model.struct_vocab_size}, {run.model.content_vocab_size}) "
            f"do not match the built vocabularies ({len(svocab)}, {len(cvocab)})")
    model = TableModel(run.model, rng=np.random.default_rng(tcfg.seed))
    optimizer = Adam(model.params, lr=tcfg.lr)
    shuffle_rng = np.random.default_rng(tcfg.seed + 1)

    step = 0
    best_struct = -1.0
    t0 = time.time()
    log_path = out_path.with_name(out_path.name + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for epoch in range(tcfg.epochs):
            lr = lr_for_epoch(tcfg, epoch)
            order = shuffle_rng.permutation(len(train_samples))
            shuffled = [train_samples[i] for i in order]
            batches = batchify(shuffled, tcfg.batch_size, svocab, cvocab,
                               run.model.max_struct_len, run.model.max_cell_len)
            for batch in batches:
                rec = train_step(model, batch, optimizer, lr=lr)
                step += 1
                entry = {"step": step, "epoch": epoch, "lr": lr, **rec}
                log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()
            if not quiet:
                log.info("epoch %d done: step=%d loss=%.4f (%.1fs)",
                         epoch, step, rec["loss"], time.time() - t0)
            if tcfg.checkpoint_every_epoch:
                save_checkpoint(out_path, model, optimizer=optimizer, seed=tcfg.seed)
            if val_samples and tcfg.val_every_epoch:
                subset = val_samples[: tcfg.val_max_samples]
                report, _ = evaluate_model(model, subset, svocab, cvocab,
                                           run.eval.iou_threshold)
                score = report["teds_struct"]["mean"]
                entry = {"step": step, "epoch": epoch, "val_teds_struct": score,
                         "val_teds": report["teds"]["mean"], "val_map": report["map"]}
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
                if not quiet:
                    log.info("epoch %d val: teds_struct=%.4f teds=%.4f", epoch,
                             score, report["teds"]["mean"])
                if score is not None and score > best_struct:
                    best_struct = score
                    save_checkpoint(out_path.with_name(out_path.name + ".best"),
                                    model, optimizer=optimizer, seed=tcfg.seed)

    # final checkpoint first, then the final validation hook on the frozen
    # parameters: composing `infer` + `eval` on this checkpoint must exactly
    # reproduce the report below.
    save_checkpoint(out_path, model, optimizer=optimizer, seed=tcfg.seed)
    final_report = None
    if val_samples:
        svocab2, cvocab2 = StructVocab(), ContentVocab()
        final_report, _ = evaluate_model(model, val_samples, svocab2, cvocab2,
                                         run.eval.iou_threshold)
        out_path.with_name(out_path.name + ".final_eval.json").write_text(
            json.dumps(final_report, indent=2, sort_keys=True) + "\n")
    return {"steps": step, "best_val_teds_struct": best_struct,
            "final_eval": final_report, "checkpoint": str(out_path),
            "log": str(log_path)}
