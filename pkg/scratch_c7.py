"""Validate the exact criterion-7 configuration. Not shipped."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from tablerec.data import GeneratorConfig, generate_samples, batchify
from tablerec.model import ModelConfig, TableModel, train_step
from tablerec.evaluation import evaluate_model
from tablerec.tensor import Adam
from tablerec.vocab import StructVocab, ContentVocab

t0 = time.time()
samples = generate_samples(32, seed=42, config=GeneratorConfig())
model = TableModel(ModelConfig(), rng=np.random.default_rng(0))
sv, cv = StructVocab(), ContentVocab()
opt = Adam(model.params, lr=2e-3)
rng = np.random.default_rng(1)
cfg = model.config
step = 0
while step < 2400:
    order = rng.permutation(len(samples))
    for batch in batchify([samples[i] for i in order], 4, sv, cv, cfg.max_struct_len, cfg.max_cell_len):
        lr = 2e-3 * (0.1 if step >= 1900 else 1.0)
        rec = train_step(model, batch, opt, lr=lr)
        step += 1
        if step % 200 == 0:
            print(f"step {step}: loss {rec['loss']:.4f} struct {rec['loss_struct']:.4f} "
                  f"cont {rec['loss_cont']:.4f} bbox {rec['loss_bbox']:.4f} [{time.time()-t0:.0f}s]", flush=True)
        if step in (1200, 1800, 2400):
            r, _ = evaluate_model(model, samples, sv, cv)
            print(f"  eval@{step}: teds {r['teds']['mean']:.4f} struct {r['teds_struct']['mean']:.4f} "
                  f"map {r['map']:.4f} [{time.time()-t0:.0f}s]", flush=True)
        if step >= 2400:
            break
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
