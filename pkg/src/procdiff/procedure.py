"""Recipes, the JSON-lines manifest format, and prompt-scenario masking.

A manifest holds one recipe per line::

    {"recipe_id": "abc", "split": "train", "label": null,
     "steps": [{"idx": 1, "text": "...", "t_start": 0.0, "t_end": 4.5,
                "image": "images/abc/1.png"}]}

Image paths are relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoverageError,
    IntegrityError,
    ManifestParseError,
    ReferentialError,
    ValidationError,
)

SPLITS = ("train", "validation")
SCENARIO_KINDS = ("text_only", "image_history", "multimodal")
PLACEMENTS = ("ordered", "random")

# guards ceil() against p*N landing a hair above an integer (0.3 * 10 = 3.0000000000000004)
_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class Step:
    index: int
    text: str
    image_ref: str | None = None
    t_start: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        if self.index < 1:
            raise ValidationError(f"step index must be >= 1, got {self.index}")
        if not isinstance(self.text, str):
            raise ValidationError(f"step {self.index}: text must be a string")
        if self.t_start is not None and self.t_end is not None and not self.t_start < self.t_end:
            raise ValidationError(
                f"step {self.index}: t_start ({self.t_start}) must be < t_end ({self.t_end})"
            )

    @property
    def has_span(self) -> bool:
        return self.t_start is not None and self.t_end is not None


@dataclass(frozen=True)
class Recipe:
    recipe_id: str
    steps: tuple[Step, ...]
    split: str = "train"
    label: str | None = None
    # directory that relative image paths resolve against; not part of identity
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.recipe_id:
            raise ValidationError("recipe_id must be non-empty")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.recipe_id}: split must be one of {SPLITS}, got {self.split!r}")
        if not self.steps:
            raise ValidationError(f"{self.recipe_id}: a recipe needs at least one step")
        indices = [s.index for s in self.steps]
        if indices != list(range(1, len(indices) + 1)):
            raise ReferentialError(
                f"{self.recipe_id}: step indices must be 1..N contiguous, got {indices}"
            )

    def __len__(self):
        return len(self.steps)

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.steps]

    def image_path(self, step: Step | int) -> Path | None:
        if isinstance(step, int):
            step = self.steps[step - 1]
        if step.image_ref is None:
            return None
        p = Path(step.image_ref)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p

    def to_record(self) -> dict:
        return {
            "recipe_id": self.recipe_id,
            "split": self.split,
            "label": self.label,
            "steps": [
                {
                    "idx": s.index,
                    "text": s.text,
                    "t_start": s.t_start,
                    "t_end": s.t_end,
                    "image": s.image_ref,
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_record(cls, rec: dict, root: Path | None = None) -> "Recipe":
        steps = tuple(
            Step(
                index=int(s["idx"]),
                text=s["text"],
                image_ref=s.get("image"),
                t_start=_opt_float(s.get("t_start")),
                t_end=_opt_float(s.get("t_end")),
            )
            for s in rec["steps"]
        )
        return cls(
            recipe_id=str(rec["recipe_id"]),
            steps=steps,
            split=rec.get("split", "train"),
            label=rec.get("label"),
            root=root,
        )


def _opt_float(v):
    return None if v is None else float(v)


def load_manifest(path, check_images: bool = True) -> list[Recipe]:
    """Read a JSON-lines manifest and return its recipes sorted by ``recipe_id``."""
    path = Path(path)
    root = path.parent
    recipes: dict[str, Recipe] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise TypeError("record is not a JSON object")
                recipe = Recipe.from_record(rec, root=root)
            except ReferentialError as exc:
                raise ReferentialError(f"{path}:{line_no}: {exc}") from exc
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestParseError(path, line_no, str(exc)) from exc
            if recipe.recipe_id in recipes:
                raise IntegrityError(f"{path}:{line_no}: duplicate recipe_id {recipe.recipe_id!r}")
            if check_images:
                for step in recipe.steps:
                    img = recipe.image_path(step)
                    if img is not None and not img.is_file():
                        raise ReferentialError(
                            f"{path}:{line_no}: recipe {recipe.recipe_id!r} step {step.index} "
                            f"references missing image {img}"
                        )
            recipes[recipe.recipe_id] = recipe
    return [recipes[k] for k in sorted(recipes)]


def dumps_manifest(recipes: Iterable[Recipe]) -> str:
    """Canonical manifest text: sorted by recipe_id, one compact JSON object per line."""
    lines = [
        json.dumps(r.to_record(), ensure_ascii=False, separators=(", ", ": "))
        for r in sorted(recipes, key=lambda r: r.recipe_id)
    ]
    return "".join(line + "\n" for line in lines)


def save_manifest(recipes: Iterable[Recipe], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_manifest(recipes).encode("utf-8"))
    return path


# --------------------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class PromptScenario:
    kind: str = "text_only"
    p: float = 0.0
    placement: str = "ordered"
    retain_text: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValidationError(f"scenario kind must be one of {SCENARIO_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"p must lie in [0, 1], got {self.p}")
        if self.placement not in PLACEMENTS:
            raise ValidationError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")


@dataclass(frozen=True)
class PromptEntry:
    """One step of a prompt sequence.

    ``text`` is always the step's conditional prompt. ``modality`` says which
    payload feeds the procedural memory at this position.
    """

    position: int
    modality: str  # "text" | "image" | "text+image"
    text: str
    image_ref: str | None = None


@dataclass(frozen=True)
class PromptSequence:
    recipe_id: str
    kind: str
    entries: tuple[PromptEntry, ...]

    @property
    def text_positions(self) -> tuple[int, ...]:
        return tuple(e.position for e in self.entries if e.modality == "text")

    @property
    def image_positions(self) -> tuple[int, ...]:
        return tuple(e.position for e in self.entries if e.modality in ("image", "text+image"))

    @property
    def n_text(self) -> int:
        return len(self.text_positions)

    @property
    def n_image(self) -> int:
        return len(self.image_positions)

    @property
    def modalities(self) -> list[str]:
        return [e.modality for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_record(self) -> dict:
        return {
            "recipe_id": self.recipe_id,
            "kind": self.kind,
            "text_positions": list(self.text_positions),
            "image_positions": list(self.image_positions),
            "entries": [
                {"position": e.position, "modality": e.modality, "text": e.text, "image": e.image_ref}
                for e in self.entries
            ],
        }


def n_image_positions(p: float, n: int) -> int:
    if p <= 0:
        return 0
    return min(n, math.ceil(p * n - _CEIL_EPS))


def stable_hash(*parts) -> int:
    """64-bit hash that is stable across interpreter runs (unlike ``hash``)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _random_positions(recipe: Recipe, k: int, seed: int) -> list[int]:
    available = [s.index for s in recipe.steps if s.image_ref is not None]
    if k > len(available):
        raise CoverageError(
            f"{recipe.recipe_id}: scenario needs {k} image positions, "
            f"only {len(available)} steps have images"
        )
    rng = np.random.default_rng([seed, stable_hash(recipe.recipe_id)])
    return sorted(int(i) for i in rng.choice(available, size=k, replace=False))


def make_prompt_sequence(recipe: Recipe, scenario: PromptScenario) -> PromptSequence:
    """Turn a recipe into the prompt sequence of one of the three scenarios."""
    steps = recipe.steps
    if scenario.kind == "text_only":
        entries = [PromptEntry(s.index, "text", s.text) for s in steps]
    elif scenario.kind == "image_history":
        # the last step's image is never history for anyone, so it is not required
        missing = [s.index for s in steps[:-1] if s.image_ref is None]
        if missing:
            raise CoverageError(f"{recipe.recipe_id}: image_history needs images for steps {missing}")
        entries = [PromptEntry(s.index, "image", s.text, s.image_ref) for s in steps]
    else:
        k = n_image_positions(scenario.p, len(steps))
        if scenario.placement == "ordered":
            chosen = list(range(1, k + 1))
            missing = [i for i in chosen if steps[i - 1].image_ref is None]
            if missing:
                raise CoverageError(
                    f"{recipe.recipe_id}: ordered placement needs images for steps {missing}"
                )
        else:
            chosen = _random_positions(recipe, k, scenario.seed)
        chosen_set = set(chosen)
        image_tag = "text+image" if scenario.retain_text else "image"
        entries = [
            PromptEntry(s.index, image_tag, s.text, s.image_ref)
            if s.index in chosen_set
            else PromptEntry(s.index, "text", s.text)
            for s in steps
        ]
    return PromptSequence(recipe.recipe_id, scenario.kind, tuple(entries))


def sample_validation_p(seed: int, recipe_id: str = "") -> float:
    """Draw an image fraction uniformly from (0, 0.5] for one evaluation recipe."""
    u = np.random.default_rng([seed, stable_hash(recipe_id)]).random()
    return 0.5 * (1.0 - u)


def scenario_for_memory(kind: str) -> str:
    return {"tmn": "text_only", "imn": "image_history", "mmn": "multimodal"}[kind]


def recipes_by_split(recipes: Sequence[Recipe], split: str | None) -> list[Recipe]:
    if split is None or split == "all":
        return list(recipes)
    return [r for r in recipes if r.split == split]
