import json

import numpy as np
import pytest
from PIL import Image

from procdiff.cli import main
from procdiff.encoders import ToyEncoder
from procdiff.metrics import avg_pcon
from procdiff.procedure import load_manifest
from procdiff.synthetic import make_toy_corpus, write_annotations, write_frame_dirs

TOY_TRAIN = ["--toy", "--steps", "6", "--seed", "0"]


@pytest.fixture(scope="module")
def fixture_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_toy_corpus(root / "corpus", n_recipes=3, min_steps=3, max_steps=4, seed=2)
    return root, root / "corpus" / "manifest.jsonl"


@pytest.fixture(scope="module")
def trained(fixture_corpus):
    root, manifest = fixture_corpus
    run = root / "run"
    assert main(["train", "--manifest", str(manifest), "--out", str(run), "--memory", "tmn",
                 "--scenario", "text_only", *TOY_TRAIN]) == 0
    return run


def _tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.png"))}


def test_train_writes_run_artifacts(trained):
    assert (trained / "checkpoint" / "model.safetensors").is_file()
    state = json.loads((trained / "checkpoint" / "state.json").read_text())
    assert state["step"] == 6 and state["seed"] == 0 and len(state["config_hash"]) == 16
    lines = (trained / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 7
    assert (trained / "config.resolved.json").is_file() and (trained / "inputs.sha256").is_file()


def test_resume_continues_step_counter(fixture_corpus, trained, tmp_path):
    _, manifest = fixture_corpus
    out = tmp_path / "resumed"
    out.mkdir()
    (out / "loss.csv").write_text((trained / "loss.csv").read_text())
    assert main(["train", "--manifest", str(manifest), "--out", str(out), "--memory", "tmn",
                 "--resume", str(trained / "checkpoint"), *TOY_TRAIN]) == 0
    steps = [int(line.split(",")[0]) for line in (out / "loss.csv").read_text().splitlines()[1:]]
    assert steps == list(range(1, 13))
    assert json.loads((out / "checkpoint" / "state.json").read_text())["step"] == 12


def test_scenario_mismatch_is_config_error(fixture_corpus, tmp_path, capsys):
    _, manifest = fixture_corpus
    code = main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "x"), "--memory", "tmn",
                 "--scenario", "image_history", *TOY_TRAIN])
    assert code == 4 and "consumes" in capsys.readouterr().err


def test_generate_is_deterministic_and_complete(fixture_corpus, trained, tmp_path):
    _, manifest = fixture_corpus
    outs = []
    for name in ("a", "b"):
        assert main(["generate", "--checkpoint", str(trained / "checkpoint"), "--manifest", str(manifest),
                     "--out", str(tmp_path / name), "--seed", "3", "--stride", "250"]) == 0
        outs.append(_tree_bytes(tmp_path / name))
    assert outs[0] == outs[1]
    for r in load_manifest(manifest):
        assert sorted(k for k in outs[0] if k.startswith(f"gen/{r.recipe_id}/")) == sorted(
            f"gen/{r.recipe_id}/{i}.png" for i in range(1, len(r) + 1))


def test_generate_scenario_mismatch(fixture_corpus, trained, tmp_path):
    _, manifest = fixture_corpus
    assert main(["generate", "--checkpoint", str(trained / "checkpoint"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "g"), "--scenario", "multimodal"]) == 4


def test_generate_with_edit(fixture_corpus, trained, tmp_path):
    _, manifest = fixture_corpus
    r = load_manifest(manifest)[0]
    word = r.steps[2].text.split()[0]
    assert main(["manipulate", "--checkpoint", str(trained / "checkpoint"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "m"), "--recipe", r.recipe_id, "--edit", f"3:{word}->boil",
                 "--stride", "250"]) == 0
    assert len(list((tmp_path / "m" / "gen" / r.recipe_id).glob("*.png"))) == len(r)
    assert main(["manipulate", "--checkpoint", str(trained / "checkpoint"), "--manifest", str(manifest),
                 "--out", str(tmp_path / "m2"), "--recipe", r.recipe_id, "--edit", "3:zzz->boil"]) == 5


def _ground_truth_tree(manifest, dest):
    for r in load_manifest(manifest):
        for s in r.steps:
            p = dest / "gen" / r.recipe_id / f"{s.index}.png"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(r.image_path(s).read_bytes())


def test_evaluate_ground_truth_tree(fixture_corpus, tmp_path, capsys):
    _, manifest = fixture_corpus
    _ground_truth_tree(manifest, tmp_path)
    assert main(["evaluate", "--manifest", str(manifest), "--gen", str(tmp_path), "--by-history-length"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["fid"] <= 1e-6
    recipes = load_manifest(manifest)
    oracle = avg_pcon([(r.recipe_id, r.texts, [r.image_path(s) for s in r.steps]) for r in recipes],
                      ToyEncoder(dim=64, seed=0))
    assert report["avg_pcon"] == pytest.approx(oracle.avg_pcon, abs=1e-9)
    assert list(report["by_history_length"]) == [str(i) for i in range(9)] + ["more than 8"]
    assert "FID=" in capsys.readouterr().out


def test_evaluate_incomplete_tree(fixture_corpus, tmp_path):
    _, manifest = fixture_corpus
    _ground_truth_tree(manifest, tmp_path)
    next((tmp_path / "gen").rglob("*.png")).unlink()
    assert main(["evaluate", "--manifest", str(manifest), "--gen", str(tmp_path)]) == 5


def test_simulate_scenario(fixture_corpus, tmp_path):
    _, manifest = fixture_corpus
    out = tmp_path / "seq.jsonl"
    assert main(["simulate-scenario", "--manifest", str(manifest), "--p", "0.5", "--placement", "ordered",
                 "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 3 and all(rec["kind"] == "multimodal" for rec in recs)


def test_env_overrides_flags(fixture_corpus, tmp_path, monkeypatch):
    _, manifest = fixture_corpus
    monkeypatch.setenv("PROCDIFF_SCENARIO__P", "1.0")
    out = tmp_path / "seq.jsonl"
    assert main(["simulate-scenario", "--manifest", str(manifest), "--p", "0.0", "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert all(all(e["modality"] == "image" for e in rec["entries"]) for rec in recs)


def _preprocess_inputs(root):
    recipes = make_toy_corpus(root / "src", n_recipes=3, min_steps=2, max_steps=3, seed=4)
    write_frame_dirs(recipes, root / "frames")
    return write_annotations(recipes, root / "ann.json")


def test_preprocess_idempotent(tmp_path):
    ann = _preprocess_inputs(tmp_path)
    for name in ("o1", "o2"):
        assert main(["preprocess", "--annotations", str(ann), "--frames-root", str(tmp_path / "frames"),
                     "--out", str(tmp_path / name), "--seed", "0"]) == 0
    a, b = (tmp_path / "o1" / "manifest.jsonl").read_bytes(), (tmp_path / "o2" / "manifest.jsonl").read_bytes()
    assert a == b and len(load_manifest(tmp_path / "o1" / "manifest.jsonl")) == 3
    assert _tree_bytes(tmp_path / "o1") == _tree_bytes(tmp_path / "o2")
    with Image.open(next((tmp_path / "o1" / "images").rglob("*.png"))) as im:
        assert im.size == (256, 256)


def test_preprocess_missing_annotation(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["preprocess", "--annotations", str(missing), "--frames-root", str(tmp_path),
                 "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_preprocess_empty_corpus(tmp_path):
    ann = _preprocess_inputs(tmp_path)
    (tmp_path / "empty").mkdir()
    assert main(["preprocess", "--annotations", str(ann), "--frames-root", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == 2


def test_non_finite_loss_exit_code(fixture_corpus, tmp_path):
    _, manifest = fixture_corpus
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "r"), "--memory", "tmn",
                 "--lr", "1e30", "--toy", "--steps", "40"]) == 3
    assert (tmp_path / "r" / "failure.json").is_file()


def test_missing_manifest_is_io_error(tmp_path):
    assert main(["simulate-scenario", "--manifest", str(tmp_path / "none.jsonl")]) == 1
