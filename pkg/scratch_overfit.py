"""Ad-hoc experiment: overfit 32 desk-profile tables, track TEDS. Not shipped."""
import sys, time, json
sys.path.insert(0, "src")
import numpy as np
from tablerec.data import GeneratorConfig, generate_samples, batchify
from tablerec.model import ModelConfig, TableModel, train_step
from tablerec.evaluation import evaluate_model
from tablerec.tensor import Adam
from tablerec.vocab import StructVocab, ContentVocab

t_start = time.time()
cfg = ModelConfig()
samples = generate_samples(32, seed=42, config=GeneratorConfig())
sv, cv = StructVocab(), ContentVocab()
model = TableModel(cfg, rng=np.random.default_rng(0))
opt = Adam(model.params, lr=1e-3)
step = 0
rng = np.random.default_rng(1)
for epoch in range(180):
    lr = 1e-3 if epoch < 120 else 1e-4
    order = rng.permutation(32)
    batches = batchify([samples[i] for i in order], 8, sv, cv, cfg.max_struct_len, cfg.max_cell_len)
    for b in batches:
        rec = train_step(model, b, opt, lr=lr)
        step += 1
    if epoch % 20 == 19 or epoch == 0:
        el = time.time() - t_start
        print(f"epoch {epoch} step {step} loss {rec['loss']:.4f} struct {rec['loss_struct']:.4f} "
              f"cont {rec['loss_cont']:.4f} bbox {rec['loss_bbox']:.4f} [{el:.0f}s]", flush=True)
    if epoch % 40 == 39:
        report, _ = evaluate_model(model, samples, sv, cv)
        print(f"  eval @ epoch {epoch}: teds {report['teds']['mean']:.4f} "
              f"struct {report['teds_struct']['mean']:.4f} map {report['map']:.4f} "
              f"[{time.time()-t_start:.0f}s]", flush=True)
        if report['teds']['mean'] >= 0.995 and report['teds_struct']['mean'] == 1.0:
            print("converged early"); break
print(f"total {time.time()-t_start:.0f}s")
