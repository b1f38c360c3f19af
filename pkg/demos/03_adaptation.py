# Unsupervised adaptation: only the source is labeled.  A fresh linear probe
# measures how much domain identity the latent still carries.
import sys
from pathlib import Path

import numpy as np

from gradrev.data import generate_synthetic
from gradrev.model import ModelConfig, init_params
from gradrev.training import TrainConfig, domain_probe_accuracy, project_latent, run_protocol, write_text

cfg = ModelConfig(input_size=16, conv_channels=(8, 16))
data = generate_synthetic(per_class=(40, 24, 24, 24), image_size=16, seed=0)

before = domain_probe_accuracy(init_params(cfg, 0), data, cfg)
run = run_protocol(TrainConfig(protocol="da", epochs=20, lr=0.1, clamp=5000, alpha=10, eval_every=5,
                               model=cfg), data)
after = domain_probe_accuracy(run.checkpoint.params, data, cfg)
print(f"domain probe accuracy: {before:.2f} at init, {after:.2f} after adaptation (chance 0.25)")

for epoch in sorted({r.epoch for r in run.history}):
    rows = [r for r in run.history if r.epoch == epoch]
    print(f"epoch {epoch:2d}  lambda {rows[0].lam:.4f}  accuracy", [round(r.accuracy, 2) for r in rows])

# 2-D PCA of the latent, ready for any plotting tool
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("latent_pca.csv")
images = np.concatenate([d.images for d in data])
proj = project_latent(run.checkpoint.params, images, cfg, np.concatenate([d.class_labels for d in data]),
                      np.concatenate([np.full(len(d), d.domain_label) for d in data]))
write_text(out, proj.to_csv())
print("wrote", out, "explained variance", np.round(proj.explained_variance, 4))
