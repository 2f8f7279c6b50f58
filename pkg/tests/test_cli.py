import json

import pytest

from gradedit.cli import build_parser, main
from gradedit.config import build_run_config

TINY = {
    "seed": 0,
    "dataset": {"samples_per_class": 6, "image_size": [3, 16, 16]},
    "models": {"train": {"epochs": 1}},
    "gan": {"epochs": 2, "change_thresholds": [1], "batch_size": 32},
    "oracle": {"freq": {"num_variants": 2}},
    "budget": {"iterations": 2},
    "eval": {"attack_methods": ["bim", "fsps"], "num_eval": 8, "fps_batch_size": 4, "fps_timed_batches": 1},
}

COMMANDS = ("zoo-train", "attack", "gan-train", "gan-generate", "eval-transfer", "bench-fps", "repro-all")


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def zoo_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("zoo")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["zoo-train", "--config", str(cfg), "--out", str(root / "models")]) == 0
    return root


def test_help_lists_flags_and_defaults(capsys):
    for command in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for flag in ("--config", "--seed", "--out", "--device"):
            assert flag in text
        assert "default" in text
        for needle in ("gan.epochs=60", "num_variants=10", "epsilon=16/255", "change_thresholds=[20, 40]"):
            assert needle in text


def test_epilog_defaults_match_config_defaults():
    cfg = build_run_config({}, env={})
    epilog = build_parser().epilog
    assert f"gan.epochs={cfg.gan.epochs}" in epilog
    assert f"budget.iterations={cfg.budget.iterations}" in epilog
    assert f"oracle.freq.num_variants={cfg.oracle.freq.num_variants}" in epilog


def test_unknown_key_exits_1_and_names_it(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"gan": {"epohcs": 3}}))
    assert main(["zoo-train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "gan.epohcs" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path, capsys):
    assert main(["zoo-train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert "nope.json" in capsys.readouterr().err


def test_bad_method_exits_1(zoo_dir, tmp_path):
    args = ["attack", "--config", str(zoo_dir / "tiny.json"), "--surrogate", str(zoo_dir / "models" / "small_cnn_a"),
            "--method", "fgsm2", "--out", str(tmp_path)]
    assert main(args) == 1


def test_missing_checkpoint_exits_2(tiny_config, tmp_path, capsys):
    args = ["attack", "--config", str(tiny_config), "--surrogate", str(tmp_path / "none"), "--out", str(tmp_path)]
    assert main(args) == 2
    assert "none" in capsys.readouterr().err


def test_zoo_train_writes_checkpoints_and_metrics(zoo_dir):
    metrics = json.loads((zoo_dir / "models" / "metrics.json").read_text())
    assert set(metrics["metrics"]) == {"small_cnn_a", "small_cnn_b", "small_mlp", "tiny_attention"}
    for arch in metrics["metrics"]:
        assert (zoo_dir / "models" / arch / "manifest.json").is_file()


def test_attack_then_eval_transfer(zoo_dir, tmp_path, capsys):
    cfg = str(zoo_dir / "tiny.json")
    models = zoo_dir / "models"
    assert main(["attack", "--config", cfg, "--surrogate", str(models / "small_cnn_a"), "--method", "mim",
                 "--epsilon", "0.03", "--out", str(tmp_path / "adv")]) == 0
    out = capsys.readouterr().out
    assert "config-hash:" in out
    meta = json.loads((tmp_path / "adv" / "mim.json").read_text())
    assert meta["method"] == "mim"
    assert meta["budget"]["epsilon"] == 0.03
    assert meta["linf"] <= 0.03 + 1e-6
    assert main(["eval-transfer", "--config", cfg, "--crafted", str(tmp_path / "adv"),
                 "--victims", str(models / "small_cnn_a"), str(models / "small_mlp"),
                 "--out", str(tmp_path / "report")]) == 0
    rows = (tmp_path / "report.csv").read_text().strip().split("\n")
    assert len(rows) == 3
    assert rows[1].split(",")[3] == "self"


def test_gan_train_generate_and_bench(zoo_dir, tmp_path):
    cfg = str(zoo_dir / "tiny.json")
    sur = str(zoo_dir / "models" / "small_cnn_a")
    assert main(["gan-train", "--config", cfg, "--surrogate", sur, "--method", "baseline",
                 "--out", str(tmp_path / "g")]) == 0
    manifest = json.loads((tmp_path / "g" / "manifest.json").read_text())
    assert manifest["name"] == "AdvGAN"
    assert main(["gan-generate", "--config", cfg, "--generator", str(tmp_path / "g"),
                 "--out", str(tmp_path / "gen")]) == 0
    meta = json.loads((tmp_path / "gen" / "generated.json").read_text())
    assert meta["linf"] <= 16 / 255 + 1e-6
    assert main(["bench-fps", "--config", cfg, "--surrogate", sur, "--method", "bim",
                 "--generators", str(tmp_path / "g"), "--out", str(tmp_path / "fps")]) == 0
    fps = json.loads((tmp_path / "fps.json").read_text())["fps"]
    assert set(fps) == {"bim", "AdvGAN"}
    assert all(v > 0 for v in fps.values())


def test_seed_flag_beats_env(tiny_config, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GRADEDIT_SEED", "4")
    main(["zoo-train", "--config", str(tiny_config), "--out", str(tmp_path / "a")])
    env_hash = capsys.readouterr().out.split("config-hash: ")[1].split()[0]
    main(["zoo-train", "--config", str(tiny_config), "--seed", "4", "--out", str(tmp_path / "b")])
    flag_hash = capsys.readouterr().out.split("config-hash: ")[1].split()[0]
    main(["zoo-train", "--config", str(tiny_config), "--seed", "5", "--out", str(tmp_path / "c")])
    other = capsys.readouterr().out.split("config-hash: ")[1].split()[0]
    assert env_hash == flag_hash != other
    assert json.loads((tmp_path / "a" / "metrics.json").read_text())["config"]["seed"] == 4


def test_repro_all_is_deterministic(tiny_config, tmp_path):
    for run in ("r1", "r2"):
        assert main(["repro-all", "--config", str(tiny_config), "--out", str(tmp_path / run)]) == 0
    for name in ("transfer.csv", "summary.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    docs = [json.loads((tmp_path / run / "transfer.json").read_text()) for run in ("r1", "r2")]
    for doc in docs:
        doc.pop("timing")
    assert docs[0] == docs[1]
    assert docs[0]["metadata"]["config"] == json.loads((tmp_path / "r1" / "config.json").read_text())


def test_repro_all_victims_flag(tiny_config, tmp_path):
    assert main(["repro-all", "--config", str(tiny_config), "--victims", "small_mlp",
                 "--out", str(tmp_path / "r")]) == 0
    doc = json.loads((tmp_path / "r" / "transfer.json").read_text())
    assert doc["victims"] == ["small_cnn_a", "small_mlp"]
