"""
Leave-one-location-out prediction on a spatial field
====================================================

Forty days of a smooth field on the unit square, observed at 30 fixed
stations with noise.  Each station in turn is dropped, its values are
predicted from the others, and the squared errors are averaged.
"""

import warnings

import numpy as np

from dfpca import FitConfig, FunctionalDataset
from dfpca.scores import holdout_prediction_error

rng = np.random.default_rng(5)
stations = rng.random((30, 2))


def field(a, b, x):
    return 1 + a * np.cos(np.pi * x[:, 0]) + b * np.sin(np.pi * x[:, 1])


samples = []
for _ in range(40):
    a, b = rng.standard_normal(2) * [1.0, 0.5]
    samples.append((stations, field(a, b, stations) + 0.1 * rng.standard_normal(30)))
ds = FunctionalDataset.from_samples(samples, bounding_box=[[0, 1], [0, 1]])

# a few corner nodes have no station within h and get a wider window
warnings.simplefilter("ignore")
cfg = FitConfig(grid_points=21, h_mean=0.3, score_method="pace")
res = holdout_prediction_error(ds, stations[:10], cfg)
# errors are summed over the 40 days at each station
print(res.table(), end="")
print("per-observation error at each held-out station:", np.round(res.errors / res.counts, 4))
