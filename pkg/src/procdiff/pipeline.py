"""Turn annotated cooking videos into a procedure manifest.

For each annotated step the frames inside its time span are sampled (1 fps by
default), scored against the step text with the encoder's clip score, and the
best frame is center-cropped, resized to 256x256 and written as
``images/<recipe_id>/<step_idx>.png`` next to ``manifest.jsonl``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

from .encoders import EmbeddingProvider, clip_score, to_rgb_array
from .errors import DecodeError, EmptyCorpusError, NoFrameError, ValidationError
from .procedure import Recipe, Step, save_manifest

log = logging.getLogger(__name__)

OUTPUT_SIZE = 256
_SPLIT_NAMES = {"training": "train", "train": "train", "validation": "validation", "val": "validation"}


# --------------------------------------------------------------------------- frame sources


class FrameSource:
    """Re-iterable source of ``(timestamp_seconds, RGB array)`` pairs with non-decreasing timestamps."""

    def __iter__(self) -> Iterator[tuple[float, np.ndarray]]:
        raise NotImplementedError


class ListFrameSource(FrameSource):
    def __init__(self, frames: Sequence[tuple[float, object]]):
        self.frames = list(frames)

    def __iter__(self):
        for ts, im in self.frames:
            yield float(ts), to_rgb_array(im)


class DirectoryFrameSource(FrameSource):
    """Pre-extracted frames whose file stems are their timestamps in seconds (``12.500.jpg``)."""

    _EXT = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DecodeError(f"frame directory {self.root} does not exist")

    def _files(self):
        out = []
        for p in self.root.iterdir():
            if p.suffix.lower() in self._EXT:
                try:
                    out.append((float(p.stem), p))
                except ValueError:
                    continue
        return sorted(out)

    def __iter__(self):
        for ts, p in self._files():
            yield ts, to_rgb_array(p)


class VideoFrameSource(FrameSource):
    """Decodes a video file with OpenCV; timestamps come from the container's position."""

    def __init__(self, path):
        self.path = Path(path)

    def __iter__(self):
        import cv2

        cap = cv2.VideoCapture(str(self.path))
        if not cap.isOpened():
            raise DecodeError(f"cannot open video {self.path}")
        try:
            fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
            i = 0
            while True:
                ok, frame = cap.read()
                if not ok:
                    break
                ts = cap.get(cv2.CAP_PROP_POS_MSEC) / 1000.0 if fps <= 0 else i / fps
                yield ts, cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
                i += 1
        finally:
            cap.release()


# --------------------------------------------------------------------------- keyframes


@dataclass
class KeyframeRecord:
    step_index: int
    timestamp: float
    score: float
    n_candidates: int
    frame: np.ndarray | None = field(default=None, repr=False)
    output_path: str | None = None


def sample_span(source: Iterable, t_start: float, t_end: float, sample_rate: float | None = 1.0):
    """Frames in ``[t_start, t_end)``; with a rate, the first frame at or after each tick."""
    tick = 0
    for ts, frame in source:
        if ts < t_start:
            continue
        if ts >= t_end:
            break
        if sample_rate is None:
            yield ts, frame
            continue
        target = t_start + tick / sample_rate
        if ts + 1e-9 < target:
            continue
        yield ts, frame
        # next tick strictly after this frame
        tick = math.floor((ts - t_start) * sample_rate + 1e-9) + 1


def select_keyframe(source: FrameSource, step: Step, encoder: EmbeddingProvider,
                    sample_rate: float | None = 1.0, recipe_id: str = "") -> KeyframeRecord:
    """Highest-scoring in-span frame; ties go to the earliest timestamp."""
    if not step.has_span:
        raise ValidationError(f"{recipe_id} step {step.index}: no timestamps")
    text_emb = encoder.encode_text(step.text)
    best = None
    n = 0
    for ts, frame in sample_span(source, step.t_start, step.t_end, sample_rate):
        n += 1
        score = clip_score(encoder.encode_image(frame), text_emb)
        if best is None or score > best[1]:
            best = (ts, score, frame)
    if best is None:
        raise NoFrameError(f"recipe {recipe_id!r} step {step.index}: no frames in "
                           f"[{step.t_start}, {step.t_end})")
    return KeyframeRecord(step.index, best[0], best[1], n, best[2])


# --------------------------------------------------------------------------- resizing


def center_crop_box(width: int, height: int) -> tuple[int, int, int, int]:
    side = min(width, height)
    left = (width - side) // 2
    top = (height - side) // 2
    return left, top, left + side, top + side


def resize_frame(image, size: int = OUTPUT_SIZE) -> Image.Image:
    arr = to_rgb_array(image)
    im = Image.fromarray(arr)
    if im.width != im.height:
        im = im.crop(center_crop_box(im.width, im.height))
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    return im


def resize_and_store(image, out_path, size: int = OUTPUT_SIZE) -> Path:
    """Center-crop to square, bilinear-resize to ``size`` and write a PNG."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    resize_frame(image, size).save(out_path, format="PNG")
    return out_path


# --------------------------------------------------------------------------- annotations


@dataclass(frozen=True)
class VideoAnnotation:
    recipe_id: str
    split: str
    segments: tuple[tuple[float, float, str], ...]
    label: str | None = None


def load_youcook_annotations(path) -> list[VideoAnnotation]:
    """Parse the YouCookII ``database`` JSON into per-video annotations."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    db = data.get("database", data)
    out = []
    for vid, rec in sorted(db.items()):
        split = _SPLIT_NAMES.get(rec.get("subset", "training"))
        if split is None:
            continue  # e.g. the unannotated test subset
        anns = sorted(rec.get("annotations", []), key=lambda a: (a["segment"][0], a.get("id", 0)))
        segs = tuple((float(a["segment"][0]), float(a["segment"][1]), a["sentence"].strip()) for a in anns)
        label = rec.get("recipe_type")
        out.append(VideoAnnotation(vid, split, segs, None if label is None else str(label)))
    return out


def annotation_steps(ann: VideoAnnotation) -> tuple[Step, ...]:
    return tuple(Step(i, text, None, s, e) for i, (s, e, text) in enumerate(ann.segments, start=1))


# --------------------------------------------------------------------------- manifest


@dataclass
class PipelineConfig:
    sample_rate: float | None = 1.0
    size: int = OUTPUT_SIZE
    workers: int = 1


@dataclass
class BuildResult:
    manifest_path: Path
    recipes: list[Recipe]
    skipped: list[dict]


def _process_video(ann: VideoAnnotation, source, encoder, config: PipelineConfig, out_dir: Path):
    if callable(source) and not isinstance(source, FrameSource):
        source = source()
    steps = []
    for step in annotation_steps(ann):
        rec = select_keyframe(source, step, encoder, config.sample_rate, ann.recipe_id)
        rel = f"images/{ann.recipe_id}/{step.index}.png"
        resize_and_store(rec.frame, out_dir / rel, config.size)
        steps.append(Step(step.index, step.text, rel, step.t_start, step.t_end))
    return Recipe(ann.recipe_id, tuple(steps), ann.split, ann.label, out_dir)


def build_manifest(videos: Sequence[tuple[VideoAnnotation, FrameSource | Callable[[], FrameSource]]],
                   encoder: EmbeddingProvider, out_dir, config: PipelineConfig | None = None) -> BuildResult:
    """Process every video and write ``manifest.jsonl`` plus ``skipped.jsonl``.

    Videos that cannot be decoded or whose steps contain no frames are
    skipped and logged rather than failing the run.
    """
    config = config or PipelineConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        ann, source = item
        if not ann.segments:
            return ann, None, "no annotated steps"
        try:
            return ann, _process_video(ann, source, encoder, config, out_dir), None
        except (DecodeError, NoFrameError, OSError, ValidationError) as exc:
            return ann, None, str(exc)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, videos))
    else:
        results = [work(v) for v in videos]

    recipes, skipped = [], []
    for ann, recipe, reason in sorted(results, key=lambda r: r[0].recipe_id):
        if recipe is None:
            log.warning("skipping %s: %s", ann.recipe_id, reason)
            skipped.append({"recipe_id": ann.recipe_id, "reason": reason})
        else:
            recipes.append(recipe)
    with open(out_dir / "skipped.jsonl", "w", encoding="utf-8") as fh:
        for s in skipped:
            fh.write(json.dumps(s, ensure_ascii=False) + "\n")
    if not recipes:
        raise EmptyCorpusError(f"no usable recipes out of {len(results)} videos")
    path = save_manifest(recipes, out_dir / "manifest.jsonl")
    return BuildResult(path, recipes, skipped)


def frame_source_for(recipe_id: str, frames_root=None, video_root=None) -> Callable[[], FrameSource]:
    """Lazy source for one video: a frame directory ``<root>/<id>/`` or a video ``<root>/<id>.*``."""
    def make():
        if frames_root is not None:
            return DirectoryFrameSource(Path(frames_root) / recipe_id)
        matches = sorted(Path(video_root).glob(f"{_glob_escape(recipe_id)}.*"))
        if not matches:
            raise DecodeError(f"no video file for {recipe_id} under {video_root}")
        return VideoFrameSource(matches[0])
    return make


def _glob_escape(s: str) -> str:
    return re.sub(r"([\[\]*?])", r"[\1]", s)
