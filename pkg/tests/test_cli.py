import json
import subprocess
import sys

import pytest

from taris.cli import main
from taris.checkpoint import load_checkpoint

MODEL = ["--layers", "1", "--hidden", "16", "--dff", "16", "--epochs", "1", "--batch-size", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--n-train", "8", "--n-test", "3",
                 "--d-audio", "8", "--d-video", "8", "--vocab", "6", "--max-words", "3", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *MODEL]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("config.json", "history.json", "history.csv", "training.png", "last.ckpt", "stage0.ckpt"):
        assert (run / name).exists(), name
    assert len(json.loads((run / "history.json").read_text())) == 1


def test_eval_and_hist(workspace, capsys):
    out = workspace / "eval"
    args = ["--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(workspace / "data")]
    assert main(["eval", *args, "--mode", "stream-final", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["sentences"] == 3 and "mean_delay_frames" in json.dumps(summary)
    assert {p.name for p in out.iterdir()} == {"report.json", "sentences.csv", "histogram.csv", "histogram.png"}
    assert main(["hist", *args, "--out", str(workspace / "hist")]) == 0
    assert (workspace / "hist" / "histogram.png").exists()


def test_stream_prints_events(workspace, capsys):
    assert main(["stream", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                 "--data", str(workspace / "data"), "--index", "1"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert all("frame_index" in rec for rec in lines[:-1])
    assert {"reference", "transcript", "latency"} <= set(lines[-1])


def test_stream_from_stdin(workspace):
    corpus = (workspace / "data" / "test.bin").read_bytes()
    proc = subprocess.run([sys.executable, "-m", "taris.cli", "stream", "--checkpoint",
                           str(workspace / "run" / "last.ckpt"), "--input", "-"],
                          input=corpus, capture_output=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "transcript" in proc.stdout.decode().splitlines()[-1]


def test_export_writes_f32_parameters(workspace):
    out = workspace / "model.f32"
    assert main(["export", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--out", str(out)]) == 0
    ckpt = load_checkpoint(out)
    assert not ckpt.has_optimizer() and ckpt.params


def test_masks(capsys, tmp_path):
    assert main(["masks", "--kind", "encoder", "--frames", "4", "--e-la", "0", "--e-lb", "1"]) == 0
    assert capsys.readouterr().out.split() == ["1000", "1100", "0110", "0011"]
    assert main(["masks", "--kind", "segment", "--alpha", "0.6,0.6,0.6,0.6", "--text", "ab c",
                 "--d-la", "0", "--d-lb", "0", "--out", str(tmp_path / "m.json")]) == 0
    saved = json.loads((tmp_path / "m.json").read_text())
    assert saved["word_indices"] == [0, 0, 0, 1] and saved["segment_indices"] == [0, 1, 1, 2]


def test_exit_codes(workspace, tmp_path):
    ckpt = str(workspace / "run" / "last.ckpt")
    data = str(workspace / "data")
    assert main(["masks", "--kind", "segment"]) == 2
    assert main(["train", "--data", data, "--out", str(tmp_path / "r"), "--hidden", "0"]) == 2
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "none")]) == 3
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!" * 4)
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.ckpt"), "--data", data]) == 3
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--hidden", "32"]) == 3
    assert main(["stream", "--checkpoint", ckpt, "--data", data, "--index", "99"]) == 3
    with pytest.raises(SystemExit) as info:
        main(["eval", "--mode", "beam"])
    assert info.value.code == 2
