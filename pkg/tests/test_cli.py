import json
import subprocess
import sys

import numpy as np
import pytest

from garmentanim.cli import EXIT_CLIENT, EXIT_CONFIG, main
from garmentanim.media import read_video_dir, write_image, write_video_dir
from garmentanim.metrics import COLUMNS, parse_csv, parse_text

MODEL = ["--num-blocks", "2", "--model-dim", "16", "--num-heads", "2"]


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["toy-data", "--out", str(out), "--frames", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--out", str(out),
                 "--steps", "3", "--batch-size", "2"] + MODEL) == 0
    return out / "final.ckpt"


def _events(text):
    return [json.loads(line) for line in text.splitlines() if line.startswith("{")]


def _video_list(toy_dir, tmp_path, n):
    names = (toy_dir / "videos.txt").read_text().splitlines()[:n]
    path = tmp_path / "videos.txt"
    path.write_text("".join(f"{toy_dir / name}\n" for name in names))
    return path


def _generate_args(toy_dir, ckpt, out, *extra):
    sample = toy_dir / "toy-h0-red-walk-right"
    return ["generate", "--checkpoint", str(ckpt), "--human", str(sample / "human.png"),
            "--garment", str(sample / "garment_0.png"), "--pose", str(sample / "pose.json"),
            "--steps", "2", "--out", str(out)] + list(extra)


def test_version_and_help():
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    proc = subprocess.run([sys.executable, "-m", "garmentanim", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "build-dataset" in proc.stdout


def test_build_dataset_counts_and_determinism(toy_dir, tmp_path):
    videos = _video_list(toy_dir, tmp_path, 3)
    outs = []
    for workers in ("1", "3"):
        out = tmp_path / f"ds{workers}"
        assert main(["build-dataset", "--videos", str(videos), "--out", str(out), "--seed", "7",
                     "--workers", workers]) == 0
        outs.append(out)
    a, b = (o / "manifest.jsonl" for o in outs)
    assert len(a.read_text().splitlines()) == 3
    assert a.read_bytes() == b.read_bytes()
    files = sorted(f.relative_to(outs[0]) for f in outs[0].rglob("*") if f.is_file())
    assert files == sorted(f.relative_to(outs[1]) for f in outs[1].rglob("*") if f.is_file())
    for f in files:
        if f.name != "run_config.yaml":
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_build_dataset_all_rejected(tmp_path):
    blank = np.full((2, 32, 32, 3), 255, np.uint8)
    write_video_dir(blank, tmp_path / "blank")
    write_image(blank[0], tmp_path / "blank" / "garment.png")
    (tmp_path / "videos.txt").write_text("blank\n")
    code = main(["build-dataset", "--videos", str(tmp_path / "videos.txt"), "--out", str(tmp_path / "ds")])
    assert code == EXIT_CLIENT
    rec = json.loads((tmp_path / "ds" / "manifest.jsonl").read_text())
    assert rec["rejected"]


def test_missing_inputs_are_config_errors(tmp_path):
    assert main(["build-dataset", "--videos", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "cfg.yaml"
    bad.write_text("train: {bogus: 1}\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_freeze_audit(toy_dir, tmp_path, capsys):
    assert main(["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--out", str(tmp_path),
                 "--steps", "2", "--batch-size", "2"] + MODEL) == 0
    events = _events(capsys.readouterr().err)
    audit = next(e for e in events if e.get("event") == "freeze_audit")
    assert audit["backbone_unchanged"]
    trainable = next(e for e in events if e.get("event") == "trainable")
    assert trainable["prefixes"] == ["gtm", "ham"]
    losses = [json.loads(line) for line in (tmp_path / "losses.jsonl").read_text().splitlines()]
    assert len(losses) == 2


def test_train_lora_count(toy_dir, tmp_path, capsys):
    assert main(["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--out", str(tmp_path),
                 "--steps", "1", "--batch-size", "2", "--variant", "backbone-lora", "--rank", "4"] + MODEL) == 0
    trainable = next(e for e in _events(capsys.readouterr().err) if e.get("event") == "trainable")
    from garmentanim.backbone import BackboneConfig, init_backbone
    # Every 2-D weight inside a block gets a rank-4 pair.
    params = init_backbone(BackboneConfig(num_blocks=2, model_dim=16, num_heads=2, patch=(1, 2, 2)), 0)
    expected = sum(4 * sum(params.array(n).shape) for n in params.names("backbone.blocks.")
                   if n.endswith(".w"))
    assert trainable["count"] == expected
    assert trainable["prefixes"] == ["lora"]


def test_train_resume_matches_full_run(toy_dir, tmp_path):
    base = ["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--batch-size", "2"] + MODEL
    assert main(base + ["--out", str(tmp_path / "full"), "--steps", "4"]) == 0
    assert main(base + ["--out", str(tmp_path / "half"), "--steps", "2"]) == 0
    assert main(["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--out", str(tmp_path / "half"),
                 "--resume", str(tmp_path / "half" / "final.ckpt"), "--steps", "4"]) == 0
    full = (tmp_path / "full" / "losses.jsonl").read_text()
    assert (tmp_path / "half" / "losses.jsonl").read_text() == full


def test_generate_determinism_and_errors(toy_dir, trained, tmp_path):
    assert main(_generate_args(toy_dir, trained, tmp_path / "a", "--raw")) == 0
    assert main(_generate_args(toy_dir, trained, tmp_path / "b", "--raw")) == 0
    assert (tmp_path / "a" / "video" / "video.raw").read_bytes() == (tmp_path / "b" / "video" / "video.raw").read_bytes()
    assert main(_generate_args(toy_dir, tmp_path / "missing.ckpt", tmp_path / "c")) == EXIT_CONFIG


def test_generate_two_garments(toy_dir, trained, tmp_path):
    other = toy_dir / "toy-h1-green-wave" / "garment_0.png"
    assert main(_generate_args(toy_dir, trained, tmp_path / "two", "--garment", str(other))) == 0
    assert read_video_dir(tmp_path / "two" / "video").shape[0] == 2


def test_interpolate_gamma_one_matches_generate(toy_dir, trained, tmp_path):
    args = _generate_args(toy_dir, trained, tmp_path / "gen", "--beta", "1")
    garment = args[args.index("--garment") + 1]
    other = toy_dir / "toy-h1-green-wave" / "garment_0.png"
    assert main(args) == 0
    interp = ["interpolate" if a == "generate" else a for a in args]
    i = interp.index("--garment")
    interp[i:i + 2] = ["--garment-a", garment, "--garment-b", str(other), "--gamma", "1"]
    interp[interp.index("--out") + 1] = str(tmp_path / "interp")
    assert main(interp) == 0
    assert np.array_equal(read_video_dir(tmp_path / "gen" / "video"), read_video_dir(tmp_path / "interp" / "video"))


def test_evaluate_identity_and_formats(toy_dir, tmp_path, capsys):
    names = (toy_dir / "videos.txt").read_text().splitlines()[:3]
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text("".join(json.dumps({"pred": str(toy_dir / n), "truth": str(toy_dir / n),
                                         "method": "ours", "dataset": "toy"}) + "\n" for n in names))
    assert main(["evaluate", "--pairs", str(pairs), "--out", str(tmp_path / "rep")]) == 0
    text = (tmp_path / "rep" / "report.txt").read_text()
    rows = parse_csv((tmp_path / "rep" / "report.csv").read_text())
    assert rows[0].values["L1"] == 0.0
    assert text.splitlines()[2].split() == ["Method"] + list(COLUMNS)
    cells = parse_text(text)[("ours", "")]
    for c in COLUMNS:
        assert cells[c] == pytest.approx(rows[0].values[c], abs=0.01)
