"""Small synthetic cooking corpora for tests, demos and desk-scale training runs."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .pipeline import OUTPUT_SIZE
from .procedure import Recipe, Step, save_manifest

VERBS = ["chop", "slice", "fry", "boil", "bake", "mix", "add", "stir", "season", "grill", "mash", "pour"]
INGREDIENTS = ["onions", "tomatoes", "potatoes", "eggs", "garlic", "carrots", "rice", "chicken",
               "butter", "flour", "milk", "cheese", "peppers", "noodles", "beef", "spinach"]
UTENSILS = ["pan", "pot", "bowl", "tray", "wok", "plate"]


def step_texts(rng: np.random.Generator, n: int) -> list[str]:
    ingredients = rng.choice(INGREDIENTS, size=n, replace=False)
    verbs = rng.choice(VERBS, size=n, replace=n > len(VERBS))
    utensils = rng.choice(UTENSILS, size=n)
    return [f"{v} the {i} in the {u}" for v, i, u in zip(verbs, ingredients, utensils)]


def step_image(rng: np.random.Generator, background, size: int = 32) -> np.ndarray:
    """A recipe-coloured background with one large step-specific rectangle."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = background
    w, h = rng.integers(size // 2, size - 4, size=2)
    x0, y0 = rng.integers(0, size - w), rng.integers(0, size - h)
    img[y0:y0 + h, x0:x0 + w] = rng.integers(0, 256, size=3)
    return img


def make_toy_corpus(root, n_recipes: int = 5, min_steps: int = 4, max_steps: int = 6,
                    size: int = 32, stored_size: int = OUTPUT_SIZE, seed: int = 0,
                    split: str = "train") -> list[Recipe]:
    """Write ``manifest.jsonl`` and step images under ``root``; returns the recipes."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    recipes = []
    for r in range(n_recipes):
        rid = f"toy{r:03d}"
        n = int(rng.integers(min_steps, max_steps + 1))
        bg = rng.integers(0, 256, size=3)
        steps = []
        for j, text in enumerate(step_texts(rng, n), start=1):
            rel = f"images/{rid}/{j}.png"
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            img = Image.fromarray(step_image(rng, bg, size))
            img.resize((stored_size, stored_size), Image.NEAREST).save(path, format="PNG")
            steps.append(Step(j, text, rel, float(10 * j), float(10 * j + 8)))
        recipes.append(Recipe(rid, tuple(steps), split, None, root))
    save_manifest(recipes, root / "manifest.jsonl")
    return recipes


def youcook_annotation(recipes: list[Recipe]) -> dict:
    """YouCookII-style annotation document describing ``recipes``."""
    db = {}
    for r in recipes:
        db[r.recipe_id] = {
            "subset": "training" if r.split == "train" else "validation",
            "recipe_type": r.label or "0",
            "duration": max(s.t_end for s in r.steps) + 5,
            "annotations": [
                {"id": s.index - 1, "segment": [s.t_start, s.t_end], "sentence": s.text} for s in r.steps
            ],
        }
    return {"database": db}


def write_frame_dirs(recipes: list[Recipe], frames_root, fps: float = 2.0, seed: int = 0,
                     noise: float = 40.0) -> None:
    """Fake pre-extracted frames: each step span shows noisy versions of the step image,
    with one clean frame in the middle of the span."""
    rng = np.random.default_rng(seed)
    frames_root = Path(frames_root)
    for r in recipes:
        d = frames_root / r.recipe_id
        d.mkdir(parents=True, exist_ok=True)
        for s in r.steps:
            base = np.asarray(Image.open(r.image_path(s)).convert("RGB").resize((64, 48)), dtype=np.float64)
            ts = np.arange(s.t_start, s.t_end, 1.0 / fps)
            clean = ts[len(ts) // 2]
            for t in ts:
                frame = base if t == clean else np.clip(base + rng.normal(0, noise, base.shape), 0, 255)
                Image.fromarray(frame.astype(np.uint8)).save(d / f"{t:.3f}.png")


def write_annotations(recipes, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(youcook_annotation(recipes), indent=1) + "\n")
    return path
