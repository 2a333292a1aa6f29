import json
from pathlib import Path

import numpy as np
import pytest

import memseg.cli as cli
from memseg.checkpoint import checkpoint_is_factored
from memseg.data import load_dataset
from memseg.errors import TrainingError

TINY = {
    "model": {"image_size": 16, "patch": 4, "d_model": 16, "enc_depth": 1,
              "n_heads": 4, "mem_depth": 1, "d_mem": 8},
    "synth": {"image_size": 16, "clutter": 1},
    "train": {"epochs": 1, "lr0": 1e-3, "batch": 2, "episodes_per_epoch": 4,
              "val_episodes": 2, "patience": 2},
    "eval": {"n_episodes": 6},
    "images_per_class": 2,
}


@pytest.fixture()
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# usage and config handling
# ---------------------------------------------------------------------------

def test_help_exits_zero():
    assert run("--help") == 0


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("frobnicate") == 64
    assert "error" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error():
    assert run("eval", "--out", "/tmp/x") == 64  # no --ckpt


def test_unknown_top_level_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"modle": {}}))
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", bad) == 64
    assert "modle" in capsys.readouterr().err


def test_unknown_section_key_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", bad) == 64
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_json_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", bad) == 64


def test_missing_config_file_is_input_error(tmp_path):
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", tmp_path / "nope.json") == 66


def test_nested_seed_keys_are_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"seed": 3}}))
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", bad) == 64


def test_mismatched_model_and_synth_sizes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"image_size": 32, "patch": 4},
                               "synth": {"image_size": 16}}))
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", bad) == 64


def test_flag_beats_config_file(tmp_path, cfg, capsys):
    # 0 episodes from the flag, despite 6 in the file
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "o",
               "--config", cfg, "--episodes", 0) == 0
    assert "mIoU undefined" in capsys.readouterr().out


def test_profile_defaults_without_config():
    profile = cli.load_profile(None)
    assert profile.model.image_size == 64
    assert profile.synth.n_classes == 16
    assert profile.fold == 0 and profile.n_folds == 4
    assert profile.train.strategy == "lora_enc_mem"


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_loadable_dataset(tmp_path, cfg, capsys):
    out = tmp_path / "data"
    assert run("synth", "--out", out, "--config", cfg) == 0
    assert "wrote 32 images over 16 classes" in capsys.readouterr().out
    index = load_dataset(out)
    assert len(index.classes) == 16
    image = index.load_image(index.images_of(0)[0])
    assert image.shape == (3, 16, 16)


def test_synth_is_reproducible(tmp_path, cfg):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--out", out1, "--config", cfg, "--seed", 5) == 0
    assert run("synth", "--out", out2, "--config", cfg, "--seed", 5) == 0
    sample = "images/c03_0001.ppm"
    assert (out1 / sample).read_bytes() == (out2 / sample).read_bytes()
    assert (out1 / "classes.txt").read_text() == (out2 / "classes.txt").read_text()


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_oracle_prints_perfect_miou(tmp_path, cfg, capsys):
    out = tmp_path / "ev"
    assert run("eval", "--ckpt", "oracle", "--out", out, "--config", cfg) == 0
    assert "mIoU 1.0000" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["miou"] == 1.0
    assert report["meta"]["mode"] == "standard"
    assert report["meta"]["fold"] == 0
    assert (out / "report.csv").read_text().startswith("class_id,")


def test_eval_blank_prints_zero_miou(tmp_path, cfg, capsys):
    assert run("eval", "--ckpt", "blank", "--out", tmp_path / "ev",
               "--config", cfg) == 0
    assert "mIoU 0.0000" in capsys.readouterr().out


def test_eval_missing_checkpoint_is_input_error(tmp_path, cfg):
    assert run("eval", "--ckpt", tmp_path / "missing.ckpt",
               "--out", tmp_path / "ev", "--config", cfg) == 66


def test_eval_oversized_K_is_usage_error(tmp_path, cfg, capsys):
    # only 2 images per class: K=2 leaves no support beyond the query
    assert run("eval", "--ckpt", "oracle", "--out", tmp_path / "ev",
               "--config", cfg, "--K", 2) == 64
    assert "error" in capsys.readouterr().err


def test_eval_identity_mode(tmp_path, cfg, capsys):
    out = tmp_path / "ev"
    assert run("eval", "--ckpt", "oracle", "--out", out, "--config", cfg,
               "--mode", "identity") == 0
    assert "mIoU 1.0000" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["mode"] == "identity"
    assert report["meta"]["K"] == 1


def test_eval_shift_mode_keeps_geometry(tmp_path, cfg, capsys):
    def report_of(mode, out):
        assert run("eval", "--ckpt", "oracle", "--out", out, "--config", cfg,
                   "--mode", mode) == 0
        return json.loads((out / "report.json").read_text())

    standard = report_of("standard", tmp_path / "a")
    shifted = report_of("shift", tmp_path / "b")
    assert shifted["meta"]["mode"] == "shift"
    # the shift swaps backgrounds (appearance), never the target masks,
    # so the truth-echoing oracle sees identical counts
    assert standard["per_class"] == shifted["per_class"]


# ---------------------------------------------------------------------------
# training pipeline through the CLI
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One pretrain + metatrain run shared by the pipeline assertions."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["pretrain", "--out", str(root / "pre"),
                     "--config", str(cfg), "--seed", "1"]) == 0
    assert cli.main(["metatrain", "--ckpt", str(root / "pre" / "base.ckpt"),
                     "--out", str(root / "meta"), "--config", str(cfg),
                     "--strategy", "lora_enc_mem", "--seed", "1"]) == 0
    return root, cfg


def test_pretrain_outputs(pipeline):
    root, _ = pipeline
    assert (root / "pre" / "base.ckpt").exists()
    lines = (root / "pre" / "pretrain.jsonl").read_text().splitlines()
    assert lines
    record = json.loads(lines[0])
    assert set(record) == {"epoch", "step", "lr", "loss", "val_miou"}


def test_metatrain_outputs(pipeline):
    root, _ = pipeline
    assert checkpoint_is_factored(root / "meta" / "meta.ckpt")
    lines = [json.loads(l) for l in
             (root / "meta" / "metatrain.jsonl").read_text().splitlines()]
    assert lines[0]["strategy"] == "lora_enc_mem"
    assert lines[0]["trainable_params"] > 0


def test_metatrain_is_bit_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    assert run("metatrain", "--ckpt", root / "pre" / "base.ckpt",
               "--out", tmp_path / "again", "--config", cfg,
               "--strategy", "lora_enc_mem", "--seed", 1) == 0
    original = (root / "meta" / "meta.ckpt").read_bytes()
    repeat = (tmp_path / "again" / "meta.ckpt").read_bytes()
    assert original == repeat


def test_metatrain_none_strategy_notice(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    assert run("metatrain", "--ckpt", root / "pre" / "base.ckpt",
               "--out", tmp_path / "none", "--config", cfg,
               "--strategy", "none", "--seed", 1) == 0
    assert "notice" in capsys.readouterr().out
    assert (tmp_path / "none" / "meta.ckpt").exists()
    assert not checkpoint_is_factored(tmp_path / "none" / "meta.ckpt")


def test_merge_and_factored_equivalence(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    assert run("merge", "--ckpt", root / "meta" / "meta.ckpt",
               "--out", tmp_path / "m1") == 0
    merged = tmp_path / "m1" / "merged.ckpt"
    assert not checkpoint_is_factored(merged)

    capsys.readouterr()
    assert run("eval", "--ckpt", root / "meta" / "meta.ckpt",
               "--out", tmp_path / "ef", "--config", cfg, "--seed", 4) == 0
    factored_line = capsys.readouterr().out
    assert run("eval", "--ckpt", merged, "--out", tmp_path / "em",
               "--config", cfg, "--seed", 4) == 0
    merged_line = capsys.readouterr().out
    assert factored_line == merged_line
    fr = (tmp_path / "ef" / "report.json").read_text()
    mr = (tmp_path / "em" / "report.json").read_text()
    assert fr == mr


def test_merge_is_idempotent(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert run("merge", "--ckpt", root / "meta" / "meta.ckpt",
               "--out", tmp_path / "m1") == 0
    assert run("merge", "--ckpt", tmp_path / "m1" / "merged.ckpt",
               "--out", tmp_path / "m2") == 0
    assert "already merged" in capsys.readouterr().out
    assert (tmp_path / "m1" / "merged.ckpt").read_bytes() == \
        (tmp_path / "m2" / "merged.ckpt").read_bytes()


def test_shift_mode_moves_model_predictions(pipeline, tmp_path):
    root, cfg = pipeline
    texts = []
    for mode in ("standard", "shift"):
        out = tmp_path / mode
        assert run("eval", "--ckpt", root / "meta" / "meta.ckpt", "--out", out,
                   "--config", cfg, "--seed", 6, "--mode", mode) == 0
        texts.append(json.loads((out / "report.json").read_text())["per_class"])
    assert texts[0] != texts[1]


def test_eval_jobs_invariance(pipeline, tmp_path):
    root, cfg = pipeline
    reports = []
    for jobs in (1, 3):
        out = tmp_path / f"j{jobs}"
        assert run("eval", "--ckpt", root / "meta" / "meta.ckpt", "--out", out,
                   "--config", cfg, "--seed", 2, "--jobs", jobs) == 0
        reports.append((out / "report.json").read_text())
    assert reports[0] == reports[1]


def test_metatrain_rejects_model_mismatch(pipeline, tmp_path):
    root, _ = pipeline
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "model": {**TINY["model"], "d_model": 32}}))
    assert run("metatrain", "--ckpt", root / "pre" / "base.ckpt",
               "--out", tmp_path / "x", "--config", other) == 64


def test_training_failure_exit_code(monkeypatch, tmp_path, cfg):
    def explode(*a, **k):
        raise TrainingError("non-finite loss at step 3", step=3)

    monkeypatch.setattr(cli, "pretrain_base", explode)
    assert run("pretrain", "--out", tmp_path / "p", "--config", cfg) == 2


def test_verify_subcommand_passes(capsys):
    assert run("verify") == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "FAIL" not in out


def test_verify_subcommand_fails_on_corruption(monkeypatch, capsys):
    import memseg.train
    monkeypatch.setattr(memseg.train, "cosine_lr",
                        lambda t, total, lr0, lr_min=0.0: lr0)
    assert run("verify") == 1
    assert "FAIL" in capsys.readouterr().out
