import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procdiff.errors import (
    CoverageError,
    IntegrityError,
    ManifestParseError,
    ReferentialError,
    ValidationError,
)
from procdiff.procedure import (
    PromptScenario,
    Recipe,
    Step,
    dumps_manifest,
    load_manifest,
    make_prompt_sequence,
    n_image_positions,
    sample_validation_p,
)


def make_recipe(n, with_images=True, rid="r1"):
    steps = tuple(
        Step(i, f"step {i} text", f"images/{rid}/{i}.png" if with_images else None, 2.0 * i, 2.0 * i + 1)
        for i in range(1, n + 1)
    )
    return Recipe(rid, steps)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_manifest_fixture_round_trip(tmp_path):
    for i in (1, 2, 3):
        (tmp_path / f"{i}.png").write_bytes(b"")
    rec = {"recipe_id": "pancakes", "split": "train", "label": None, "steps": [
        {"idx": i, "text": f"t{i}", "t_start": float(i), "t_end": i + 0.5, "image": f"{i}.png"} for i in (1, 2, 3)
    ]}
    path = write_lines(tmp_path / "m.jsonl", [rec])
    recipes = load_manifest(path)
    assert len(recipes) == 1 and len(recipes[0]) == 3
    assert recipes[0].image_path(2) == tmp_path / "2.png"


def test_manifest_canonical_bytes_round_trip(corpus):
    path, _ = corpus
    raw = path.read_bytes()
    assert dumps_manifest(load_manifest(path)).encode() == raw


def test_manifest_sorted_by_recipe_id(tmp_path):
    recs = [{"recipe_id": rid, "split": "train", "steps": [{"idx": 1, "text": "x", "image": None}]}
            for rid in ("b", "c", "a")]
    ids = [r.recipe_id for r in load_manifest(write_lines(tmp_path / "m.jsonl", recs))]
    assert ids == ["a", "b", "c"]


def test_noncontiguous_indices_are_referential_error(tmp_path):
    rec = {"recipe_id": "x", "split": "train",
           "steps": [{"idx": 1, "text": "a", "image": None}, {"idx": 3, "text": "b", "image": None}]}
    with pytest.raises(ReferentialError):
        load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))


def test_malformed_line_names_line_number(tmp_path):
    good = {"recipe_id": "x", "split": "train", "steps": [{"idx": 1, "text": "a", "image": None}]}
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ManifestParseError) as exc:
        load_manifest(path)
    assert exc.value.line_no == 2


def test_duplicate_recipe_id(tmp_path):
    rec = {"recipe_id": "x", "split": "train", "steps": [{"idx": 1, "text": "a", "image": None}]}
    with pytest.raises(IntegrityError):
        load_manifest(write_lines(tmp_path / "m.jsonl", [rec, rec]))


def test_missing_image_is_referential_error(tmp_path):
    rec = {"recipe_id": "x", "split": "train", "steps": [{"idx": 1, "text": "a", "image": "nope.png"}]}
    with pytest.raises(ReferentialError):
        load_manifest(write_lines(tmp_path / "m.jsonl", [rec]))


def test_step_invariants():
    with pytest.raises(ValidationError):
        Step(0, "x")
    with pytest.raises(ValidationError):
        Step(1, "x", None, 5.0, 5.0)
    with pytest.raises(ValidationError):
        Recipe("r", (), "train")
    with pytest.raises(ValidationError):
        Recipe("r", (Step(1, "x"),), "test")


def test_ordered_placement_prefix():
    seq = make_prompt_sequence(make_recipe(10), PromptScenario("multimodal", 0.3, "ordered"))
    assert seq.image_positions == (1, 2, 3)
    assert seq.text_positions == tuple(range(4, 11))


def test_ceil_rounding_guards_float_error():
    # 0.3 * 10 evaluates to 3.0000000000000004
    assert n_image_positions(0.3, 10) == 3
    assert n_image_positions(0.25, 10) == 3
    assert n_image_positions(0.01, 5) == 1
    assert n_image_positions(0.0, 5) == 0


def test_random_placement_deterministic():
    r = make_recipe(10)
    sc = PromptScenario("multimodal", 0.3, "random", seed=7)
    a, b = make_prompt_sequence(r, sc), make_prompt_sequence(r, sc)
    assert a == b and len(a.image_positions) == 3


def test_p_zero_matches_text_only():
    r = make_recipe(5)
    mm = make_prompt_sequence(r, PromptScenario("multimodal", 0.0, "random"))
    to = make_prompt_sequence(r, PromptScenario("text_only"))
    assert mm.entries == to.entries


def test_retain_text_marks_text_image():
    seq = make_prompt_sequence(make_recipe(6), PromptScenario("multimodal", 0.5, "ordered", retain_text=True))
    assert seq.modalities == ["text+image"] * 3 + ["text"] * 3
    assert seq.n_image == 3 and seq.n_text == 3


def test_image_history_entries():
    seq = make_prompt_sequence(make_recipe(4), PromptScenario("image_history"))
    assert all(e.modality == "image" for e in seq.entries)
    assert [e.text for e in seq.entries] == [f"step {i} text" for i in range(1, 5)]


def test_coverage_errors():
    no_images = make_recipe(4, with_images=False)
    with pytest.raises(CoverageError):
        make_prompt_sequence(no_images, PromptScenario("multimodal", 0.5, "random"))
    with pytest.raises(CoverageError):
        make_prompt_sequence(no_images, PromptScenario("multimodal", 0.5, "ordered"))
    with pytest.raises(CoverageError):
        make_prompt_sequence(no_images, PromptScenario("image_history"))


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 20), p=st.floats(0, 1), placement=st.sampled_from(["ordered", "random"]),
       seed=st.integers(0, 2**31))
def test_partition_property(n, p, placement, seed):
    seq = make_prompt_sequence(make_recipe(n), PromptScenario("multimodal", p, placement, seed=seed))
    assert seq.n_text + seq.n_image == n
    assert sorted(seq.text_positions + seq.image_positions) == list(range(1, n + 1))
    if placement == "ordered" and seq.image_positions:
        assert max(seq.image_positions) == len(seq.image_positions)


def test_validation_p_range_and_determinism():
    vals = [sample_validation_p(s, "r") for s in range(1000)]
    assert all(0 < v <= 0.5 for v in vals)
    assert sample_validation_p(3, "abc") == sample_validation_p(3, "abc")
    assert sample_validation_p(3, "abc") != sample_validation_p(3, "abd")


def test_validation_p_mean():
    # uniform on (0, 0.5] has mean 0.25; standard error at 1e5 draws is ~4.6e-4
    vals = [sample_validation_p(s, "r") for s in range(100_000)]
    assert abs(sum(vals) / len(vals) - 0.25) < 0.005
