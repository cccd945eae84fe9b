"""``procdiff`` command line.

Exit codes: 0 ok, 1 IO failure, 2 empty corpus, 3 numeric failure,
4 configuration mismatch, 5 incomplete inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfglib
from .checkpoint import build_from_config, load_checkpoint, load_optimizer_state, save_checkpoint
from .diffusion import (
    Edit,
    NoiseSchedule,
    SamplerConfig,
    TrainConfig,
    apply_edits,
    encode_procedure,
    sample_procedure,
    tensor_to_image,
    train,
)
from .encoders import make_encoder
from .errors import (
    ConfigurationError,
    CoverageError,
    EditError,
    EmptyCorpusError,
    ManifestParseError,
    NumericalError,
    ProcDiffError,
    ReferentialError,
)
from .metrics import evaluation_report, make_extractor, summary_line, write_report
from .pipeline import PipelineConfig, build_manifest, frame_source_for, load_youcook_annotations
from .procedure import (
    PromptScenario,
    load_manifest,
    make_prompt_sequence,
    recipes_by_split,
    sample_validation_p,
)

log = logging.getLogger("procdiff")

EXIT_OK, EXIT_IO, EXIT_EMPTY, EXIT_NUMERIC, EXIT_CONFIG, EXIT_INCOMPLETE = 0, 1, 2, 3, 4, 5

# applied between the defaults and a config file when --toy is given
TOY_LAYER = {
    "encoder": {"backend": "toy"},
    "memory": {"dim": 64},
    "diffusion": {"lr": 1e-3, "base_channels": 32, "time_dim": 64, "steps": 2000},
}

_MEMORY_SCENARIO = {"tmn": "text_only", "imn": "image_history", "mmn": "multimodal",
                    "controlnet_text": "text_only", "controlnet_image": "image_history"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- helpers


def _resolve(args, flags: dict, toy: bool = False) -> dict:
    return cfglib.resolve(args.config, flags, preset=TOY_LAYER if toy else None)


def _provider(cfg):
    e = cfg["encoder"]
    return make_encoder(e["backend"], e.get("weights"), e.get("device", "cpu"), e.get("dim", 64), cfg["seed"])


def _load_manifest(path, check_images=True):
    try:
        return load_manifest(path, check_images=check_images)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read manifest {path}: {exc}") from exc
    except (ManifestParseError, ReferentialError) as exc:
        raise CliError(EXIT_INCOMPLETE, str(exc)) from exc


def _model_kind(cfg) -> str:
    return cfglib.get(cfg, "baseline.kind") or cfg["memory"]["kind"]


def _check_kind_vs_scenario(cfg):
    kind = _model_kind(cfg)
    want = _MEMORY_SCENARIO.get(kind)
    got = cfg["scenario"]["kind"]
    if want is not None and want != got:
        raise CliError(EXIT_CONFIG, f"model {kind!r} consumes {want!r} prompts but scenario is {got!r}")


def _scenario_for(cfg, recipe_id: str) -> PromptScenario:
    s = cfg["scenario"]
    p = sample_validation_p(cfg["seed"], recipe_id) if s.get("random_p") else float(s["p"])
    return PromptScenario(s["kind"], p, s["placement"], bool(s["retain_text"]), int(cfg["seed"]))


def _encode_all(recipes, provider, cfg, load_images=True):
    size = cfg["diffusion"]["image_size"]
    out = []
    for r in recipes:
        try:
            seq = make_prompt_sequence(r, _scenario_for(cfg, r.recipe_id))
        except CoverageError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        out.append(encode_procedure(r, seq, provider, size, load_images=load_images))
    return out


def _scenario_flags(args) -> dict:
    return {
        "scenario.kind": args.scenario,
        "scenario.p": args.p,
        "scenario.placement": args.placement,
        "scenario.retain_text": True if args.retain_text else None,
        "scenario.random_p": True if getattr(args, "random_p", False) else None,
        "memory.retain_text": True if args.retain_text else None,
    }


def _save_png(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


# --------------------------------------------------------------------------- commands


def cmd_preprocess(args) -> int:
    cfg = _resolve(args, {"pipeline.sample_rate": args.sample_rate, "pipeline.workers": args.workers,
                          "seed": args.seed})
    ann_path = Path(args.annotations)
    if not ann_path.is_file():
        raise CliError(EXIT_IO, f"annotation file not found: {ann_path}")
    if (args.frames_root is None) == (args.video_root is None):
        raise CliError(EXIT_CONFIG, "give exactly one of --frames-root / --video-root")
    anns = load_youcook_annotations(ann_path)
    videos = [(a, frame_source_for(a.recipe_id, args.frames_root, args.video_root)) for a in anns]
    out = Path(args.out)
    pc = PipelineConfig(sample_rate=cfg["pipeline"]["sample_rate"], workers=int(cfg["pipeline"]["workers"]))
    try:
        result = build_manifest(videos, _provider(cfg), out, pc)
    except EmptyCorpusError as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from exc
    cfglib.write_provenance(out, cfg, [ann_path])
    print(f"wrote {result.manifest_path} ({len(result.recipes)} recipes, {len(result.skipped)} skipped)")
    return EXIT_OK


def cmd_train(args) -> int:
    flags = {
        "seed": args.seed,
        "memory.kind": args.memory,
        "baseline.kind": args.baseline,
        "baseline.tp": args.tp,
        "diffusion.steps": args.steps,
        "diffusion.epochs": args.epochs,
        "diffusion.lr": args.lr,
        **_scenario_flags(args),
    }
    cfg = _resolve(args, flags, toy=args.toy)
    _check_kind_vs_scenario(cfg)
    out = Path(args.out)
    recipes = recipes_by_split(_load_manifest(args.manifest), args.split)
    if not recipes:
        raise CliError(EXIT_EMPTY, f"no recipes in split {args.split!r}")
    provider = _provider(cfg)
    procs = _encode_all(recipes, provider, cfg)
    d = cfg["diffusion"]
    if args.resume:
        model, state = load_checkpoint(args.resume, provider)
        start = int(state["step"])
    else:
        model, start = build_from_config(cfg, provider), 0
    if d.get("steps"):
        steps = int(d["steps"])
    else:
        steps = int(d["epochs"]) * math.ceil(len(procs) / int(d["batch_recipes"]))
    optim = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=float(d["lr"]))
    if args.resume:
        load_optimizer_state(args.resume, optim)
    schedule = NoiseSchedule(d["T"], d["beta_start"], d["beta_end"])
    out.mkdir(parents=True, exist_ok=True)
    curve = open(out / "loss.csv", "a" if args.resume else "w", encoding="utf-8")
    if not args.resume:
        curve.write("step,loss\n")
    try:
        tc = TrainConfig(steps=steps, lr=float(d["lr"]), batch_recipes=int(d["batch_recipes"]),
                         seed=int(cfg["seed"]))
        train(model, procs, schedule, tc, optim, start_step=start,
              on_step=lambda s, l: curve.write(f"{s},{l:.6f}\n"))
    except NumericalError as exc:
        (out / "failure.json").write_text(json.dumps(exc.snapshot, indent=2) + "\n")
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    finally:
        curve.close()
    save_checkpoint(out / "checkpoint", model, optim, cfg, start + steps)
    cfglib.write_provenance(out, cfg, [args.manifest])
    print(f"trained {steps} steps (total {start + steps}); checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _generate(model, state_cfg, recipes, provider, cfg, out_dir: Path, seed: int, edits=()):
    d = state_cfg["diffusion"]
    schedule = NoiseSchedule(d["T"], d["beta_start"], d["beta_end"])
    sampler = SamplerConfig(cfg["sampler"]["kind"], int(cfg["sampler"]["stride"]), d["image_size"])
    written = []
    for r in recipes:
        if edits:
            r = apply_edits(r, edits)
        seq = make_prompt_sequence(r, _scenario_for(cfg, r.recipe_id))
        proc = encode_procedure(r, seq, provider, d["image_size"], load_images=_needs_images(model))
        imgs = sample_procedure(model, proc, schedule, sampler, seed)
        for s, img in zip(r.steps, imgs):
            path = out_dir / "gen" / r.recipe_id / f"{s.index}.png"
            _save_png(tensor_to_image(img), path)
            written.append(path)
    return written


def _needs_images(model) -> bool:
    return getattr(model, "mode", None) == "image"


def _load_for_generation(args):
    if not Path(args.checkpoint, "state.json").is_file():
        raise CliError(EXIT_IO, f"no checkpoint at {args.checkpoint}")
    state = json.loads(Path(args.checkpoint, "state.json").read_text())
    train_cfg = state["config"]
    flags = {"seed": args.seed, "sampler.stride": args.stride, "sampler.kind": args.sampler,
             **_scenario_flags(args)}
    preset = {k: train_cfg[k] for k in ("encoder", "memory", "scenario", "baseline", "diffusion")}
    cfg = cfglib.resolve(args.config, flags, preset=preset)
    _check_kind_vs_scenario(cfg)
    provider = _provider(cfg)
    model, _ = load_checkpoint(args.checkpoint, provider)
    return model, train_cfg, cfg, provider


def cmd_generate(args) -> int:
    model, train_cfg, cfg, provider = _load_for_generation(args)
    recipes = recipes_by_split(_load_manifest(args.manifest, check_images=_needs_images(model)), args.split)
    if args.recipe:
        recipes = [r for r in recipes if r.recipe_id in set(args.recipe)]
    edits = [Edit.parse(e) for e in args.edit or []]
    out = Path(args.out)
    try:
        written = _generate(model, train_cfg, recipes, provider, cfg, out, int(cfg["seed"]), edits)
    except (ConfigurationError, CoverageError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    except EditError as exc:
        raise CliError(EXIT_INCOMPLETE, str(exc)) from exc
    cfglib.write_provenance(out, cfg, [args.manifest, Path(args.checkpoint) / "model.safetensors"])
    print(f"wrote {len(written)} images under {out / 'gen'}")
    return EXIT_OK


def cmd_manipulate(args) -> int:
    if not args.edit:
        raise CliError(EXIT_CONFIG, "manipulate needs at least one --edit")
    args.recipe = [args.recipe]
    return cmd_generate(args)


def cmd_evaluate(args) -> int:
    cfg = cfglib.resolve(args.config, {"metrics.fid.extractor": args.extractor, "encoder.backend": args.encoder,
                                       "seed": args.seed})
    recipes = recipes_by_split(_load_manifest(args.manifest), args.split)
    gen_root = Path(args.gen)
    if (gen_root / "gen").is_dir():
        gen_root = gen_root / "gen"
    gen, missing = {}, []
    for r in recipes:
        paths = [gen_root / r.recipe_id / f"{s.index}.png" for s in r.steps]
        absent = [str(p) for p in paths if not p.is_file()]
        missing.extend(absent)
        gen[r.recipe_id] = paths
    if missing:
        raise CliError(EXIT_INCOMPLETE, f"generated tree is incomplete; {len(missing)} missing, e.g. {missing[0]}")
    report = evaluation_report(recipes, gen, _provider(cfg), make_extractor(cfg["metrics"]["fid"]["extractor"]),
                               by_history_length=args.by_history_length)
    report["split"] = args.split
    out = Path(args.out) if args.out else gen_root.parent / "report.json"
    write_report(report, out)
    print(summary_line(report))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = cfglib.resolve(args.config, {"seed": args.seed, **_scenario_flags(args)})
    recipes = recipes_by_split(_load_manifest(args.manifest, check_images=False), args.split)
    lines = []
    for r in recipes:
        try:
            seq = make_prompt_sequence(r, _scenario_for(cfg, r.recipe_id))
        except CoverageError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        lines.append(json.dumps(seq.to_record(), ensure_ascii=False))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _add_scenario_args(p, default_kind=None):
    p.add_argument("--scenario", choices=["text_only", "image_history", "multimodal"], default=default_kind)
    p.add_argument("--p", type=float, help="fraction of steps with available images (multimodal)")
    p.add_argument("--placement", choices=["ordered", "random"])
    p.add_argument("--retain-text", action="store_true", help="image steps keep their text (token mixing)")
    p.add_argument("--random-p", action="store_true", help="draw p from (0, 0.5] per recipe")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("preprocess", help="annotated videos -> manifest + keyframes")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--frames-root")
    p.add_argument("--video-root")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=float)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a memory-conditioned (or baseline) denoiser")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--memory", choices=["tmn", "imn", "mmn", "none"])
    p.add_argument("--baseline", choices=["controlnet_text", "controlnet_image"])
    p.add_argument("--tp", choices=["A", "B"])
    p.add_argument("--toy", action="store_true", help="toy encoder and desk-scale defaults")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split", default="train")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _add_scenario_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("generate", cmd_generate, "sample every step image of each recipe"),
                                 ("manipulate", cmd_manipulate, "edit one recipe's texts and regenerate it")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="all")
        p.add_argument("--edit", action="append",
                       help="'<step>:<find>-><replace>', '<step>:<find>+><insert>', '<step>:-<text>' or '<step>:delete'")
        p.add_argument("--sampler", choices=["ddim", "ddpm"])
        p.add_argument("--stride", type=int)
        if name == "generate":
            p.add_argument("--recipe", action="append", help="restrict to these recipe ids")
        else:
            p.add_argument("--recipe", required=True)
        _add_scenario_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="FID and Avg-PCon of a generated tree")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--gen", required=True, help="generation output dir (containing gen/) or gen/ itself")
    p.add_argument("--out", help="report path (default: <gen parent>/report.json)")
    p.add_argument("--split", default="all")
    p.add_argument("--extractor", choices=["toy", "inception"])
    p.add_argument("--encoder", choices=["toy", "pretrained"])
    p.add_argument("--by-history-length", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate-scenario", help="print the prompt sequences a scenario produces")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--out")
    _add_scenario_args(p, default_kind="multimodal")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ProcDiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
