"""Soft labels versus nearest-centroid labels on one teacher.

Build the default teacher bank on a slice of the synthetic corpus, fit a
codebook, then watch the soft label of a single frame sharpen as the
temperature drops until it agrees with the hard label.

    python demos/soft_labels.py
"""

import numpy as np

from avkd.codebook import fit_kmeans, hard_labels, soft_labels
from avkd.pipeline import RunConfig
from avkd.synthdata import generate_corpus
from avkd.teacher import build_bank

run = RunConfig()
corpus = generate_corpus(run.corpus)[:40]
teacher = run.teachers[0]
bank = build_bank(corpus, teacher)
frames = bank.frames()
cb = fit_kmeans(frames, 16, seed=0, n_init=2)
print(f"teacher {teacher.name}: {frames.shape[0]} frames, inertia per frame {cb.mean_inertia:.3f}")

h = frames[:5]
print("nearest centroids:", hard_labels(h, cb).tolist())
for tau in (1.0, 0.3, 0.1, 0.01, 1e-4):
    l = soft_labels(h, cb, tau)
    ent = max(0.0, float(-(l * np.log(np.maximum(l, 1e-300))).sum(1).mean()))
    print(f"tau'={tau:<7g} argmax {l.argmax(1).tolist()}  peak mass {l.max(1).mean():.3f}  entropy {ent:.3f}")
