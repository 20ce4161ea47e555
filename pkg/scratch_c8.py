"""Validate the exact criterion-8 configuration. Not shipped."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from tablerec.data import GeneratorConfig, generate_samples, batchify
from tablerec.model import ModelConfig, TableModel, train_step
from tablerec.evaluation import evaluate_model
from tablerec.tensor import Adam
from tablerec.vocab import StructVocab, ContentVocab

t0 = time.time()
gen = GeneratorConfig()
train_samples = generate_samples(2000, seed=1000, config=gen)
held_out = generate_samples(200, seed=2000, config=gen, split="val")
print(f"generated in {time.time()-t0:.0f}s", flush=True)
model = TableModel(ModelConfig(), rng=np.random.default_rng(0))
sv, cv = StructVocab(), ContentVocab()
opt = Adam(model.params, lr=2e-3)
rng = np.random.default_rng(2)
cfg = model.config
step = 0
while step < 5000:
    order = rng.permutation(len(train_samples))
    for batch in batchify([train_samples[i] for i in order], 4, sv, cv, cfg.max_struct_len, cfg.max_cell_len):
        lr = 2e-3 * (0.1 if step >= 4200 else 1.0)
        rec = train_step(model, batch, opt, lr=lr)
        step += 1
        if step % 500 == 0:
            print(f"step {step}: loss {rec['loss']:.4f} struct {rec['loss_struct']:.4f} "
                  f"cont {rec['loss_cont']:.4f} bbox {rec['loss_bbox']:.4f} [{time.time()-t0:.0f}s]", flush=True)
        if step in (2500, 5000):
            r, _ = evaluate_model(model, held_out[:50], sv, cv)
            print(f"  eval50@{step}: teds {r['teds']['mean']:.4f} struct {r['teds_struct']['mean']:.4f} "
                  f"map {r['map']:.4f} [{time.time()-t0:.0f}s]", flush=True)
        if step >= 5000:
            break
r, _ = evaluate_model(model, held_out, sv, cv)
print(f"FINAL held-out 200: teds {r['teds']['mean']:.4f} struct {r['teds_struct']['mean']:.4f} "
      f"map {r['map']:.4f} simple/complex struct {r['teds_struct']['simple']:.4f}/{r['teds_struct']['complex']:.4f} "
      f"[{time.time()-t0:.0f}s]", flush=True)
