# Heatmap targets and saliency metrics
#
# Ground-truth affordance maps are built from annotated contact points: each
# point lights one pixel, the map is blurred with a Gaussian whose kernel size
# follows the frame size, then normalized to sum to one.

import numpy as np

from afformer.heatmaps import GaussianTargetSpec, points_to_target
from afformer.metrics import auc_judd, evaluate_at, kld, sim

h, w = 48, 64
points = [(20.0, 12.0), (22.5, 14.0), (40.0, 30.0)]
gt = points_to_target(points, h, w)
spec = GaussianTargetSpec.for_frame(h, w)
print("target spec:", spec)
print("target sums to", gt.values.sum(), "peak at", np.unravel_index(gt.values.argmax(), gt.shape))

# A perfect prediction scores KLD 0 and SIM 1.
print("self  kld=%.4f sim=%.4f" % (kld(gt.values, gt.values), sim(gt.values, gt.values)))

# A uniform guess is the usual floor.
uniform = np.full((h, w), 1 / (h * w))
print("flat  kld=%.4f sim=%.4f auc=%.4f" % (kld(gt.values, uniform), sim(gt.values, uniform),
                                            auc_judd(points, uniform)))

# A blurry but well-placed guess sits in between.
blurry = points_to_target(points, h, w, GaussianTargetSpec(kernel_size=31, sigma=8.0))
print("blur  kld=%.4f sim=%.4f auc=%.4f" % (kld(gt.values, blurry.values), sim(gt.values, blurry.values),
                                            auc_judd(points, blurry.values)))

# Scores can be reported at a lower resolution: both maps are bilinearly
# resized and renormalized, and the points are rescaled to match.
print(evaluate_at(gt.values, blurry.values, (24, 32), points=points))
