# Shapes through the grounding model
#
# A tiny configuration keeps this fast on a CPU. The encoder turns the image
# and every video frame into feature pyramids; the decoder walks the image
# levels from coarse to fine, letting image tokens attend to video tokens.

import numpy as np
import torch

from afformer.config import RunConfig, build_model
from afformer.decoder import key_token_counts

torch.manual_seed(0)
cfg = RunConfig.tiny()
model = build_model(cfg).eval()
print("parameters:", sum(p.numel() for p in model.parameters()))

size, t = cfg.spatial_size, 4
video = torch.rand(1, t, 3, size, size) * 255
image = torch.rand(1, 3, size, size) * 255

# -
img_pyr = model.encoder.encode_image(image)
vid_pyr = model.encoder.encode_video(video)
for level in sorted(img_pyr.levels):
    print(f"level {level}: image {tuple(img_pyr[level].shape)}  video {tuple(vid_pyr[level].shape)}")

# -
# Record attention to see what each image token looks at.
model.decoder.set_record_attention(True)
with torch.no_grad():
    out = model(video, image)
print("heatmap logits:", tuple(out.heatmap_logits.shape))
print("action logits:", None if out.action_logits is None else tuple(out.action_logits.shape))
for rec in model.decoder.attention_maps:
    print(f"level {rec['level']} block {rec['block']}: self {tuple(rec['msa'].shape)} cross {tuple(rec['mca'].shape)}")

# Cross-attention rows are distributions over video tokens.
mca = model.decoder.attention_maps[-1]["mca"].numpy()
print("row sums within", np.abs(mca.sum(-1) - 1).max(), "of one")

# -
# The temporal pyramid shortens the video before the finer, more expensive
# stages. At full scale (64 frames, keys at 32x32) the savings are large.
counts = key_token_counts(64, (32, 32), model.decoder.cfg.temporal, 3)
print("key tokens per stage:", counts, "total", sum(counts), "vs flat", 3 * 64 * 32 * 32)
