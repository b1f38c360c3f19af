# Fine-tuning a source model on one target domain: the target is learned,
# the source is forgotten.
import numpy as np

from gradrev.data import generate_synthetic
from gradrev.training import TrainConfig, run_protocol

data = generate_synthetic(per_class=(40, 24, 24, 24), seed=0)
print("domain sizes", [len(d) for d in data])

base = run_protocol(TrainConfig(protocol="baseline", epochs=8, lr=0.05, eval_every=8), data)
ft = run_protocol(TrainConfig(protocol="finetune", epochs=8, lr=0.05, active_domains=(1,), eval_every=8),
                  data, init=base.checkpoint)


def table(history, epoch):
    return np.array([r.accuracy for r in history if r.epoch == epoch])


before, after = table(base.history, 8), table(ft.history, 8)
print("validation accuracy per domain (0 is the source, 1 the fine-tuning target)")
print("  after source training:", np.round(before, 2))
print("  after fine-tuning:    ", np.round(after, 2))
