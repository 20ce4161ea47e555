"""Ad-hoc lr/batch probe on the 32-sample overfit task. Not shipped."""
import sys, time
sys.path.insert(0, "src")
import numpy as np
from tablerec.data import GeneratorConfig, generate_samples, batchify
from tablerec.model import ModelConfig, TableModel, train_step
from tablerec.evaluation import evaluate_model
from tablerec.tensor import Adam
from tablerec.vocab import StructVocab, ContentVocab

lr = float(sys.argv[1])
batch = int(sys.argv[2])
steps_budget = int(sys.argv[3])

cfg = ModelConfig()
samples = generate_samples(32, seed=42, config=GeneratorConfig())
sv, cv = StructVocab(), ContentVocab()
model = TableModel(cfg, rng=np.random.default_rng(0))
opt = Adam(model.params, lr=lr)
rng = np.random.default_rng(1)
step = 0
t0 = time.time()
while step < steps_budget:
    order = rng.permutation(32)
    for b in batchify([samples[i] for i in order], batch, sv, cv, cfg.max_struct_len, cfg.max_cell_len):
        rec = train_step(model, b, opt, lr=lr)
        step += 1
        if step % 100 == 0:
            print(f"lr={lr} b={batch} step {step}: loss {rec['loss']:.4f} struct {rec['loss_struct']:.4f} "
                  f"cont {rec['loss_cont']:.4f} bbox {rec['loss_bbox']:.4f} [{time.time()-t0:.0f}s]", flush=True)
        if step >= steps_budget:
            break
report, _ = evaluate_model(model, samples[:16], sv, cv)
print(f"FINAL lr={lr} b={batch} steps={step}: teds {report['teds']['mean']:.4f} "
      f"struct {report['teds_struct']['mean']:.4f} map {report['map']:.4f} [{time.time()-t0:.0f}s]", flush=True)
