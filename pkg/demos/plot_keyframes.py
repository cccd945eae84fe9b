"""
From annotated videos to a manifest
===================================

Each annotated step's time span is sampled, every frame is scored against
the step text, and the best frame becomes the step's 256x256 keyframe.
"""

import tempfile
from pathlib import Path

from procdiff.encoders import ToyEncoder
from procdiff.pipeline import PipelineConfig, build_manifest, frame_source_for, load_youcook_annotations
from procdiff.synthetic import make_toy_corpus, write_annotations, write_frame_dirs

work = Path(tempfile.mkdtemp())
recipes = make_toy_corpus(work / "source", n_recipes=3, min_steps=2, max_steps=4, seed=2)
write_frame_dirs(recipes, work / "frames", fps=2.0)
annotations = load_youcook_annotations(write_annotations(recipes, work / "annotations.json"))
print([(a.recipe_id, len(a.segments)) for a in annotations])

###############################################################################
# Frames live in one directory per video, named by timestamp in seconds.

videos = [(a, frame_source_for(a.recipe_id, frames_root=work / "frames")) for a in annotations]
result = build_manifest(videos, ToyEncoder(), work / "corpus", PipelineConfig(sample_rate=1.0))
print(result.manifest_path.read_text())
print("skipped:", result.skipped)
