# Sanity check: overfit a handful of samples
#
# With a tiny model and 16 synthetic samples the loss should collapse and the
# predicted heatmaps should match the targets closely.

import numpy as np

from afformer.config import RunConfig
from afformer.evaluation import evaluate
from afformer.synthetic import CorpusSpec, generate_synthetic_corpus
from afformer.training import train

data = generate_synthetic_corpus(CorpusSpec(n_samples=16, image_size=32, clip_len=8, seed=0))
cfg = RunConfig.tiny(iterations=200)
result = train(cfg, data)
print("loss: first %.3f  last %.3f" % (result.losses[0], result.losses[-1]))

# -
ev = evaluate(result.model, data)
print(ev.to_record())
hits = 0
for s, rec in zip(data, ev.per_sample):
    hits += int(rec["kld"] < 0.5)
print("samples with kld < 0.5:", hits, "of", len(data))
print("loss curve (every 25):", np.round(result.losses[::25], 3).tolist())
