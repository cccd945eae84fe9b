"""
Procedure consistency and Frechet distance
==========================================

Avg-PCon scores how well each generated image also matches the *other* steps
of its recipe, weighting those steps by their text similarity. FID compares
Gaussian fits of image features.
"""

import tempfile

import numpy as np

from procdiff.encoders import ToyEncoder
from procdiff.metrics import FeatureStats, ToyFeatureExtractor, avg_pcon, fid_over_sets, frechet_distance
from procdiff.procedure import load_manifest
from procdiff.synthetic import make_toy_corpus

root = tempfile.mkdtemp()
make_toy_corpus(root, n_recipes=4, seed=1)
recipes = load_manifest(f"{root}/manifest.jsonl")
encoder = ToyEncoder()

items = [(r.recipe_id, r.texts, [r.image_path(s) for s in r.steps]) for r in recipes]
report = avg_pcon(items, encoder)
print("Avg-PCon of the ground truth:", round(report.avg_pcon, 3))
for rid, p in report.per_recipe.items():
    print(" ", rid, round(p, 3))

###############################################################################
# Shuffling images across recipes leaves the set of images, and so FID,
# unchanged. Only the per-recipe pairing breaks, which Avg-PCon notices.

real = [p for _, _, imgs in items for p in imgs]
rng = np.random.default_rng(0)
shuffled = list(rng.permutation(real))
extractor = ToyFeatureExtractor()
print("FID real vs shuffled:", round(fid_over_sets(real, shuffled, extractor), 6))
sizes = [len(imgs) for _, _, imgs in items]
cuts = np.cumsum([0, *sizes])
mixed = [(rid, texts, shuffled[a:b]) for (rid, texts, _), a, b in zip(items, cuts, cuts[1:])]
print("Avg-PCon after shuffling:", round(avg_pcon(mixed, encoder).avg_pcon, 3))

###############################################################################
# Closed forms: unit mean shift gives 1, covariance 4I vs I gives the dimension.

d = 8
print(frechet_distance(FeatureStats(np.zeros(d), np.eye(d), 10), FeatureStats(np.eye(d)[0], np.eye(d), 10)))
print(frechet_distance(FeatureStats(np.zeros(d), 4 * np.eye(d), 10), FeatureStats(np.zeros(d), np.eye(d), 10)))
