"""
Recipes, manifests and prompt scenarios
=======================================

A recipe is an ordered list of steps, each with a text and (usually) a
keyframe image. A prompt scenario decides which steps reach the model as text
and which as images.
"""

import tempfile

from procdiff.procedure import PromptScenario, load_manifest, make_prompt_sequence, sample_validation_p
from procdiff.synthetic import make_toy_corpus

root = tempfile.mkdtemp()
make_toy_corpus(root, n_recipes=2, min_steps=6, max_steps=6, seed=0)
recipes = load_manifest(f"{root}/manifest.jsonl")
recipe = recipes[0]
for step in recipe.steps:
    print(step.index, step.text, step.image_ref)

###############################################################################
# Text-only history: every step is a text prompt.

print(make_prompt_sequence(recipe, PromptScenario("text_only")).modalities)

###############################################################################
# Mixed prompts with half the steps available as images. "ordered" puts them
# first; "random" spreads them with a seed keyed on the recipe id.

for placement in ("ordered", "random"):
    seq = make_prompt_sequence(recipe, PromptScenario("multimodal", 0.5, placement, seed=3))
    print(placement, seq.image_positions, seq.text_positions)

###############################################################################
# Keeping the text of image steps marks them "text+image"; the multimodal
# memory merges those two encodings with a small mixer network.

seq = make_prompt_sequence(recipe, PromptScenario("multimodal", 0.5, "ordered", retain_text=True))
print(seq.modalities)

###############################################################################
# At evaluation time the available fraction can be drawn per recipe from (0, 0.5].

print([round(sample_validation_p(0, r.recipe_id), 3) for r in recipes])
