import json
import subprocess
import sys

import pytest

from cad.cli import EXIT_CODES, main

TOY_CONFIG = """\
seed: 1
gen:
  counts: {REAL: 8, VISUAL_ONLY: 4, AUDIO_ONLY: 4, BOTH_SPECIFIC: 4, MISALIGNED: 4, COMBINED: 4}
  n_frames: 4
  height: 12
  width: 12
  n_samples: 256
model:
  dim: 16
  n_frames: 4
  n_samples: 256
  video_channels: 4
  audio_hidden: 16
  n_bins: 32
  n_bands: 8
  lora_rank: 2
  lora_alpha: 4.0
train:
  epochs: 1
  batch_size: 8
eval:
  repeats: 1
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Generate and train once; the tests share the outputs."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.yaml"
    cfg.write_text(TOY_CONFIG)
    data = root / "data"
    assert main(["gen", "--config", str(cfg), "--out", str(data), "--json"]) == 0
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--manifest", str(data), "--out", str(out), "--json"]) == 0
    return {"root": root, "cfg": cfg, "data": data, "out": out}


def _last_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_unknown_subcommand_exits_2():
    proc = subprocess.run([sys.executable, "-m", "cad.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert len(proc.stderr.strip().splitlines()) == 1 and proc.stderr.startswith("error: argument:")


def test_info_verify(capsys):
    assert main(["info", "verify", "--trials", "20", "--json"]) == 0
    payload = _last_json(capsys)
    assert payload["passed"] and payload["xor_interaction_bits"] == -1.0


def test_gen_and_train_outputs(run):
    report = json.loads((run["out"] / "report.json").read_text())
    assert report["format_version"] == "1" and report["repeats"] == 1
    assert "ALL" in report["reports"][0]["rows"]
    assert (run["out"] / "model.json").exists() and (run["out"] / "split.json").exists()
    manifest = json.loads((run["data"] / "manifest.json").read_text())
    assert manifest["format_version"] == "1" and len(manifest["entries"]) == 28


def test_eval_reproduces_training_report(run, capsys):
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run["out"] / "model.json"), "--json"]) == 0
    rep = _last_json(capsys)
    trained = json.loads((run["out"] / "report.json").read_text())["reports"][0]
    assert rep["rows"] == trained["rows"]


def test_eval_text_table(run, capsys):
    assert main(["eval", "--ckpt", str(run["out"] / "model.json"), "--manifest", str(run["data"])]) == 0
    out = capsys.readouterr().out
    assert "AUC" in out and "MISALIGNED" in out


def test_loco_train(run, capsys):
    out = run["root"] / "loco"
    assert main(["train", "--config", str(run["cfg"]), "--manifest", str(run["data"]), "--protocol", "loco",
                 "--held-out", "MISALIGNED", "--out", str(out), "--json"]) == 0
    rep = _last_json(capsys)["reports"][0]
    assert rep["held_out_category"] == "MISALIGNED" and set(rep["rows"]) == {"MISALIGNED", "ALL", "MEAN"}


def test_exports_and_inspect(run, capsys):
    ckpt = str(run["out"] / "model.json")
    att = run["root"] / "att"
    assert main(["export-attention", "--ckpt", ckpt, "--clip", "misaligned-0000", "--out", str(att)]) == 0
    assert len(list(att.glob("*.pgm"))) == 8
    csv_path = run["root"] / "emb.csv"
    assert main(["export-embeddings", "--ckpt", ckpt, "--out", str(csv_path)]) == 0
    assert csv_path.read_text().startswith("# format_version=1")
    capsys.readouterr()
    assert main(["inspect", "--ckpt", ckpt, "--manifest", str(run["data"]), "--json"]) == 0
    payload = _last_json(capsys)
    assert payload["parameters"]["lora"] == 128 and payload["manifest"]["n_clips"] == 28


def test_error_categories(run, tmp_path, capsys):
    ckpt = str(run["out"] / "model.json")
    assert main(["eval", "--ckpt", str(tmp_path / "none.json")]) == EXIT_CODES["not_found"]
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  dimm: 3\n")
    assert main(["inspect", "--config", str(bad)]) == EXIT_CODES["config"]
    assert main(["export-attention", "--ckpt", ckpt, "--clip", "nope"]) == EXIT_CODES["not_found"]
    assert main(["ablate", "--manifest", str(run["data"]), "--flags", "no_magic"]) == EXIT_CODES["argument"]
    assert main(["train", "--manifest", str(run["data"]), "--protocol", "intra", "--held-out", "MISALIGNED",
                 "--config", str(run["cfg"])]) == EXIT_CODES["argument"]
    idx = json.loads((run["out"] / "model.json").read_text())
    idx["format_version"] = "3"
    (tmp_path / "v.json").write_text(json.dumps(idx))
    assert main(["inspect", "--ckpt", str(tmp_path / "v.json")]) == EXIT_CODES["format"]
    errs = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("error: ") for line in errs) and len(errs) == 6


def test_ablate(run, capsys):
    out = run["root"] / "abl"
    assert main(["ablate", "--config", str(run["cfg"]), "--manifest", str(run["data"]), "--out", str(out),
                 "--flags", "no_alignment,video_only", "--json"]) == 0
    rows = _last_json(capsys)["rows"]
    assert set(rows) == {"full", "no_alignment", "video_only"}
    assert all(r["status"] == "OK" for r in rows.values())
    assert json.loads((out / "ablation.json").read_text())["format_version"] == "1"
