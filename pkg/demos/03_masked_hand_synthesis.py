# Self-supervised targets from hand-object interaction clips
#
# Clips are mined where a hand detector is confident the hand is in contact.
# The contact frame becomes the target image: the hand region is hidden, the
# frame is warped by a random homography, and the warped hand box, blurred,
# becomes the heatmap the model has to predict from the unmasked clip.

import numpy as np

from afformer.maskahand import SynthParams, make_pretrain_dataset, mine_clips
from afformer.synthetic import CorpusSpec, generate_synthetic_corpus

sample = generate_synthetic_corpus(CorpusSpec(n_samples=1, image_size=48, clip_len=16, seed=3))[0]
frames, dets = sample.video, sample.detections
print("video", frames.shape, "detections", len(dets))

clips = mine_clips(dets, len(frames), clip_len=8, stride=4)
for c in clips:
    print(f"clip at {c.start_frame}: contact frames {c.interaction_frames}")

# -
params = SynthParams(distortion=0.3, seed=7)
synth = make_pretrain_dataset(frames, dets, params, count=4, clip_len=8, stride=4)
for s in synth:
    p = s.provenance
    gt = s.gt_heatmap.values
    peak = np.unravel_index(gt.argmax(), gt.shape)
    print(f"source frame {p['source_frame']} hand {np.round(p['hand_box'], 1).tolist()} "
          f"masks {len(p['mask_rects'])} heatmap peak {peak}")

# The hidden hand box must not survive into the target image: zero-filled
# masks make it visible as a block of zeros.
s = make_pretrain_dataset(frames, dets, SynthParams(fill="zero", distortion=0.0, seed=1), 1, 8, 4)[0]
x0, y0, x1, y1 = (int(round(v)) for v in s.provenance["hand_box"])
print("hand region max value after masking:", s.target_image[y0:y1, x0:x1].max())
