"""Tests für validator.py – Argumentprüfung, Exit-Codes und Artefakte der Subkommandos."""

import json
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

import validator
from src.descriptors import DESCRIPTOR_LENGTH
from src.dumps import descriptor_table, read_samples, write_descriptors, write_scores
from src.projection import sample_segments, with_label
from src.scene_model import load_scene, save_scene, scene_to_dict
from src.svm import load_model
from src.synthgen import SceneRecipe, save_recipe


def _run_main_with_args(monkeypatch, args):
    monkeypatch.setattr("sys.argv", ["validator.py", *args])
    return validator.main()


# --- Fixtures: Dateien ---

@pytest.fixture
def scores_file(tmp_path):
    path = tmp_path / "scores.csv"
    write_scores([0.9, 0.4, -0.2, 0.1, -0.8, -0.3], [1, 1, 1, -1, -1, -1], path)
    return path


@pytest.fixture
def descriptors_file(flat_scene, tmp_path):
    """20 positive und 20 negative Deskriptoren, linear trennbar."""
    rng = np.random.default_rng(0)
    sample = sample_segments(flat_scene)[0]
    samples = with_label([sample] * 20, "consistent") + with_label([sample] * 20, "inconsistent")
    values = np.vstack([rng.normal(3.0, 0.3, size=(20, DESCRIPTOR_LENGTH)),
                        rng.normal(1.0, 0.3, size=(20, DESCRIPTOR_LENGTH))])
    path = tmp_path / "descriptors.csv"
    write_descriptors(descriptor_table(samples, values), path)
    return path


# --- Argumentprüfung ---

def test_workers_must_be_positive(monkeypatch, capsys, scores_file):
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(scores_file), "--workers", "0"])
    captured = capsys.readouterr()

    assert code == 1
    assert "❌ --workers muss >= 1 sein" in captured.out


def test_n_pos_must_be_positive(monkeypatch, capsys):
    code = _run_main_with_args(monkeypatch, ["synth", "--n-pos", "0"])
    captured = capsys.readouterr()

    assert code == 1
    assert "--n-pos muss >= 1 sein" in captured.out


def test_box_c_must_be_positive(monkeypatch, capsys, descriptors_file):
    code = _run_main_with_args(
        monkeypatch, ["train", "--descriptors", str(descriptors_file), "--box-c", "0"]
    )
    captured = capsys.readouterr()

    assert code == 1
    assert "--box-c muss > 0 sein" in captured.out


def test_step_longer_than_search_line(monkeypatch, capsys, tmp_path):
    args = ["conflate", "--scene", str(tmp_path / "s.json"), "--image", str(tmp_path / "i.png"),
            "--model", str(tmp_path / "m.json"), "--half-length", "20", "--step", "40"]
    code = _run_main_with_args(monkeypatch, args)
    captured = capsys.readouterr()

    assert code == 1
    assert "--step <= --half-length" in captured.out


def test_invalid_kernel_list(monkeypatch, capsys, descriptors_file):
    code = _run_main_with_args(
        monkeypatch,
        ["evaluate", "--descriptors", str(descriptors_file), "--kernels", "linear,rbf_magic"],
    )
    captured = capsys.readouterr()

    assert code == 1
    assert "Ungültige Kernel: rbf_magic" in captured.out


def test_missing_input_file(monkeypatch, capsys, tmp_path):
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(tmp_path / "fehlt.csv")])
    captured = capsys.readouterr()

    assert code == 1
    assert "Datei nicht gefunden" in captured.out


def test_unknown_flag_exits_with_usage_error(monkeypatch):
    with pytest.raises(SystemExit) as excinfo:
        _run_main_with_args(monkeypatch, ["roc", "--scores", "x.csv", "--farbe", "rot"])
    assert excinfo.value.code == 2


def test_command_is_required(monkeypatch):
    with pytest.raises(SystemExit) as excinfo:
        _run_main_with_args(monkeypatch, [])
    assert excinfo.value.code == 2


# --- Fehler der Module ---

def test_empty_scores_file_names_file(monkeypatch, capsys, tmp_path):
    path = tmp_path / "leer.csv"
    path.write_text("", encoding="utf-8")
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(path), "--output", str(tmp_path)])
    captured = capsys.readouterr()

    assert code == 1
    assert "❌ roc:" in captured.out
    assert "leer.csv" in captured.out


def test_broken_scene_file(monkeypatch, capsys, tmp_path):
    for name in ("scene.json", "image.png", "model.json"):
        (tmp_path / name).write_text("{kaputt", encoding="utf-8")
    args = ["validate", "--scene", str(tmp_path / "scene.json"), "--image", str(tmp_path / "image.png"),
            "--model", str(tmp_path / "model.json"), "--output", str(tmp_path / "out")]
    code = _run_main_with_args(monkeypatch, args)
    captured = capsys.readouterr()

    assert code == 1
    assert "❌ validate:" in captured.out


def test_keyboard_interrupt(monkeypatch, capsys, scores_file, tmp_path):
    def interrupted(config):
        raise KeyboardInterrupt

    monkeypatch.setitem(validator.HANDLERS, "roc", interrupted)
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(scores_file), "--output", str(tmp_path)])
    captured = capsys.readouterr()

    assert code == 130
    assert "Aborted by user" in captured.out


# --- Subkommandos ---

def test_roc_writes_metrics(monkeypatch, capsys, scores_file, tmp_path):
    out = tmp_path / "out"
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(scores_file), "--output", str(out)])
    captured = capsys.readouterr()

    assert code == 0
    assert "✅ ROC COMPLETED" in captured.out
    assert (out / "roc.csv").exists()
    assert (out / "roc.png").exists()
    data = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
    assert data["format"] == "oblique-metrics v1"
    assert data["counts"] == {"tp": 2, "tn": 2, "fp": 1, "fn": 1}
    assert data["auc"] == pytest.approx(8 / 9)


def test_output_dir_from_environment(monkeypatch, scores_file, tmp_path):
    monkeypatch.setenv("VALIDATOR_OUTPUT_DIR", str(tmp_path / "env"))
    code = _run_main_with_args(monkeypatch, ["roc", "--scores", str(scores_file)])

    assert code == 0
    assert (tmp_path / "env" / "metrics.json").exists()


def test_synth_passes_injections(monkeypatch, capsys, flat_scene, tmp_path):
    called = {}

    def fake_synthesize(recipe, injections, n_pos=None, n_neg=None, *args, **kwargs):
        called["recipe"] = recipe
        called["injections"] = injections
        called["budget"] = (n_pos, n_neg)
        samples = with_label(sample_segments(flat_scene)[:4], "consistent")
        return SimpleNamespace(image=np.zeros((480, 640, 3), dtype=np.uint8), true_scene=flat_scene,
                               corrupted_scene=flat_scene, samples=samples)

    monkeypatch.setattr(validator, "synthesize", fake_synthesize)
    out = tmp_path / "synth"
    code = _run_main_with_args(monkeypatch, [
        "synth", "--offset-px", "12", "--roads", "road-0, road-2", "--yaw", "1.5",
        "--seed", "7", "--n-pos", "4", "--output", str(out),
    ])
    captured = capsys.readouterr()

    assert code == 0
    assert called["recipe"].rng_seed == 7
    assert [(e.kind, e.magnitude, e.targets) for e in called["injections"]] == [
        ("vector_offset_px", 12.0, ("road-0", "road-2")),
        ("camera_yaw_deg", 1.5, ()),
    ]
    assert called["budget"] == (4, None)
    for name in ("recipe.json", "image.png", "labels.png", "scene.json", "truth_scene.json"):
        assert (out / name).exists()
    assert scene_to_dict(load_scene(out / "scene.json")) == scene_to_dict(flat_scene)
    assert len(read_samples(out / "samples.csv")) == 4
    assert "✅ SYNTH COMPLETED" in captured.out


def test_synth_keeps_recipe_seed_without_flag(monkeypatch, flat_scene, tmp_path):
    called = {}

    def fake_synthesize(recipe, injections, n_pos=None, n_neg=None, *args, **kwargs):
        called["recipe"] = recipe
        samples = with_label(sample_segments(flat_scene)[:2], "consistent")
        return SimpleNamespace(image=np.zeros((480, 640, 3), dtype=np.uint8), true_scene=flat_scene,
                               corrupted_scene=flat_scene, samples=samples)

    monkeypatch.setattr(validator, "synthesize", fake_synthesize)
    recipe_path = tmp_path / "recipe.json"
    save_recipe(replace(SceneRecipe(), rng_seed=42), recipe_path)

    code = _run_main_with_args(monkeypatch, ["synth", "--recipe", str(recipe_path), "--output", str(tmp_path / "a")])
    assert code == 0
    assert called["recipe"].rng_seed == 42

    code = _run_main_with_args(monkeypatch, [
        "synth", "--recipe", str(recipe_path), "--seed", "3", "--output", str(tmp_path / "b"),
    ])
    assert code == 0
    assert called["recipe"].rng_seed == 3


def test_color_center_reaches_descriptor_params(monkeypatch, flat_scene, tmp_path):
    called = {}

    def fake_extract(image, samples, params, workers=1, verbose=False):
        called["params"] = params
        return np.ones((len(samples), DESCRIPTOR_LENGTH)), list(range(len(samples)))

    monkeypatch.setattr(validator, "extract_raw_descriptors", fake_extract)
    scene_path = tmp_path / "scene.json"
    image_path = tmp_path / "image.png"
    save_scene(flat_scene, scene_path)
    Image.fromarray(np.zeros((480, 640, 3), dtype=np.uint8)).save(image_path)

    code = _run_main_with_args(monkeypatch, [
        "extract", "--scene", str(scene_path), "--image", str(image_path),
        "--color-center", "mean", "--output", str(tmp_path / "out"),
    ])
    assert code == 0
    assert called["params"].color_center == "mean"


def test_color_center_rejects_unknown_value(monkeypatch):
    with pytest.raises(SystemExit) as excinfo:
        _run_main_with_args(monkeypatch, ["extract", "--scene", "s.json", "--image", "i.png",
                                          "--color-center", "mode"])
    assert excinfo.value.code == 2


def test_train_and_evaluate(monkeypatch, capsys, descriptors_file, tmp_path):
    model_dir = tmp_path / "model"
    code = _run_main_with_args(monkeypatch, [
        "train", "--descriptors", str(descriptors_file), "--kernel", "linear",
        "--workers", "1", "--output", str(model_dir),
    ])
    assert code == 0
    model = load_model(model_dir / "model.json")
    assert model.kernel.kind == "linear"
    assert model.color_scaling is not None

    eval_dir = tmp_path / "eval"
    code = _run_main_with_args(monkeypatch, [
        "evaluate", "--descriptors", str(descriptors_file), "--kernels", "rbf_gaussian,linear",
        "--n-test", "5", "--n-splits", "2", "--workers", "1", "--output", str(eval_dir),
    ])
    captured = capsys.readouterr()

    assert code == 0
    report = json.loads((eval_dir / "evaluation.json").read_text(encoding="utf-8"))
    assert list(report["kernels"]) == ["rbf_gaussian", "linear"]
    assert report["kernels"]["linear"]["pooled_auc"] > 0.9
    assert (eval_dir / "scores_linear.csv").exists()
    assert (eval_dir / "roc_kernels.png").exists()
    assert "✅ EVALUATE COMPLETED" in captured.out
