# Pre-train on synthesized targets, then test without labels
#
# The model never sees a human annotation here. It learns from clips whose
# target images were built by hiding the hand, and is then scored on a
# separate labelled corpus against a fixed center prior.

from afformer.config import RunConfig
from afformer.data import pretrain_samples
from afformer.evaluation import center_bias_baseline, zero_shot_eval
from afformer.maskahand import SynthParams
from afformer.synthetic import CorpusSpec, generate_synthetic_corpus
from afformer.training import train

pool = generate_synthetic_corpus(CorpusSpec(n_samples=48, image_size=32, clip_len=8, seed=100))
held_out = generate_synthetic_corpus(CorpusSpec(n_samples=32, image_size=32, clip_len=8, seed=200))
synth = pretrain_samples(pool, SynthParams(distortion=0.3, seed=1), clip_len=8, stride=4)
print("synthesized samples:", len(synth))

# -
result = train(RunConfig.tiny(mode="maskahand_pretrain", iterations=300), synth)
print("pretrain loss: first %.3f  last %.3f" % (result.losses[0], result.losses[-1]))

# -
print("zero-shot  ", zero_shot_eval(result.model, held_out).to_record())
print("center prior", center_bias_baseline(held_out).to_record())
