import json

import pytest
from PIL import Image

from glanet.cli import SENTINEL, main

SMALL = [
    "--set", "data.resolution=32", "--set", "data.synthetic_count=4",
    "--set", "style.n=8", "--set", "style.embed_dim=16",
    "--set", "generator.base_channels=8", "--set", "gan.base_channels=8",
    "--set", "local.num_queries=32",
]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth-data", "--out", str(out)] + SMALL) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--out", str(out), "--set", "trainer.max_steps=6", "--set", "trainer.sample_every=3"] + SMALL)
    assert code == 0
    return out


def test_synth_data(synth):
    assert len(list((synth / "source").glob("*.png"))) == 4
    assert len(list((synth / "target").glob("*.png"))) == 4
    assert (synth / "config.ini").exists()
    assert not (synth / SENTINEL).exists()


def test_train_outputs(trained):
    assert (trained / "config.ini").exists()
    assert list((trained / "checkpoints").glob("*.pt"))
    assert len((trained / "history.jsonl").read_text().splitlines()) == 6
    grid = Image.open(trained / "samples" / "step_000003.png")
    assert grid.size == (96, 32)  # input | attention | output


def test_train_local_weight_zero(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "trainer.max_steps=3",
                 "--set", "trainer.lambda_local=0"] + SMALL) == 0
    records = [json.loads(line) for line in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert all(r["local"] == 0.0 for r in records)


def test_translate_and_eval(trained, synth, tmp_path):
    out = tmp_path / "translated"
    assert main(["translate", "--out", str(out), "--checkpoint", str(trained),
                 "--input", str(synth / "source")]) == 0
    assert len(list(out.glob("*.png"))) == 4
    style_img = sorted((synth / "target").glob("*.png"))[0]
    out2 = tmp_path / "translated_style"
    assert main(["translate", "--out", str(out2), "--checkpoint", str(trained),
                 "--input", str(synth / "source"), "--style", str(style_img)]) == 0
    ev = tmp_path / "eval"
    assert main(["eval", "--out", str(ev), "--translated", str(out), "--target", str(synth / "target"),
                 "--set", "data.resolution=32", "--set", "metrics.k=2"]) == 0
    report = json.loads((ev / "metrics.json").read_text())
    assert {"frechet_distance", "kid", "density", "coverage", "extractor", "seed"} <= set(report)


def test_eval_identical_folders(synth, tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--translated", str(synth / "target"),
                 "--target", str(synth / "target"), "--set", "data.resolution=32", "--set", "metrics.k=2"]) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert abs(report["frechet_distance"]) < 1e-6
    assert "frechet" in capsys.readouterr().out


def test_inspect_attention(synth, tmp_path):
    assert main(["inspect-attention", "--out", str(tmp_path), "--input", str(synth / "source"),
                 "--set", "data.resolution=32"]) == 0
    assert len(list(tmp_path.glob("*_attention.png"))) == 4


def test_unknown_key_is_user_error(tmp_path, capsys):
    assert main(["synth-data", "--out", str(tmp_path), "--set", "style.bogus=1"]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "\n" not in err


def test_missing_input_folder(tmp_path):
    assert main(["inspect-attention", "--out", str(tmp_path / "o"), "--input", str(tmp_path / "missing")]) == 1
    assert (tmp_path / "o" / SENTINEL).exists()


def test_missing_vit_weights_is_user_error(synth, tmp_path):
    assert main(["inspect-attention", "--out", str(tmp_path), "--input", str(synth / "source"),
                 "--set", "local.provider=pretrained_vit"]) == 1


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("GLANET_OUTPUT_ROOT", str(tmp_path))
    assert main(["synth-data", "--out", "rel"] + SMALL) == 0
    assert (tmp_path / "rel" / "source").is_dir()


def test_config_file_and_snapshot_rerun(tmp_path):
    first = tmp_path / "a"
    assert main(["synth-data", "--out", str(first)] + SMALL) == 0
    second = tmp_path / "b"
    assert main(["synth-data", "--out", str(second), "--config", str(first / "config.ini")]) == 0
    assert (first / "config.ini").read_text() == (second / "config.ini").read_text()
    for p in (first / "source").glob("*.png"):
        assert p.read_bytes() == (second / "source" / p.name).read_bytes()


def test_train_rerun_is_bitwise(tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--out", str(out), "--set", "trainer.max_steps=3"] + SMALL) == 0
        runs.append([{k: v for k, v in json.loads(line).items() if k != "wall_time"}
                     for line in (out / "history.jsonl").read_text().splitlines()])
    assert runs[0] == runs[1]
