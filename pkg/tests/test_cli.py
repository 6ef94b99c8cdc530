import json

import numpy as np
import pytest

from afformer.cli import main
from afformer.config import RunConfig
from afformer.heatmaps import Heatmap, HeatmapKind, save_heatmap
from afformer.metrics import kld, sim


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out.strip(), out.err


@pytest.fixture
def corpus_dir(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-corpus", "--n", "4", "--size", "32", "--seed", "1", "--out", str(tmp_path / "c"))
    assert code == 0
    return tmp_path / "c"


def test_score_prints_one_json_line(tmp_path, capsys):
    rng = np.random.default_rng(0)
    g, p = rng.random((16, 16)), rng.random((16, 16))
    g, p = g / g.sum(), p / p.sum()
    save_heatmap(tmp_path / "g.npy", Heatmap(g, HeatmapKind.SUM_NORMALIZED))
    save_heatmap(tmp_path / "p.npy", Heatmap(p, HeatmapKind.SUM_NORMALIZED))
    code, out, _ = run(capsys, "score", "--gt", str(tmp_path / "g.npy"), "--pred", str(tmp_path / "p.npy"))
    assert code == 0 and "\n" not in out
    rec = json.loads(out)
    assert set(rec) == {"kld", "sim", "auc_j"}
    assert rec["kld"] == pytest.approx(kld(g, p), abs=1e-12)
    assert rec["sim"] == pytest.approx(sim(g, p), abs=1e-12)
    code, out, _ = run(capsys, "score", "--gt", str(tmp_path / "g.npy"), "--pred", str(tmp_path / "p.npy"),
                       "--res", "8x8")
    assert code == 0 and json.loads(out)["kld"] != rec["kld"]


def test_score_rejects_bad_resolution(tmp_path, capsys):
    save_heatmap(tmp_path / "g.npy", Heatmap(np.full((4, 4), 1 / 16), HeatmapKind.SUM_NORMALIZED))
    code, _, err = run(capsys, "score", "--gt", str(tmp_path / "g.npy"), "--pred", str(tmp_path / "g.npy"),
                       "--res", "8x8")
    assert code == 2 and "exceeds native" in err
    with pytest.raises(SystemExit):
        main(["score", "--gt", "a", "--pred", "b", "--res", "0x8"])


def test_gen_corpus_layout(corpus_dir):
    lines = (corpus_dir / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4
    for sub in ("videos", "images", "heatmaps", "detections"):
        assert (corpus_dir / sub).is_dir()


def test_full_flow(tmp_path, corpus_dir, capsys):
    cfg = RunConfig.tiny(iterations=3, batch_size=2)
    cfg.save(tmp_path / "cfg.json")
    manifest = str(corpus_dir / "manifest.jsonl")

    code, out, _ = run(capsys, "train", "--config", str(tmp_path / "cfg.json"), "--data", manifest,
                       "--out", str(tmp_path / "run"))
    assert code == 0 and json.loads(out)["iterations"] == 3
    assert len((tmp_path / "run" / "loss_trace.jsonl").read_text().splitlines()) == 3

    code, out, _ = run(capsys, "eval", "--ckpt", str(tmp_path / "run" / "checkpoint.npz"), "--data", manifest,
                       "--res", "28x28")
    rec = json.loads(out)
    assert code == 0 and rec["resolution"] == [28, 28] and 0 <= rec["action_accuracy"] <= 1

    code, out, _ = run(capsys, "synth", "--frames", str(corpus_dir / "videos" / "00000"),
                       "--detections", str(corpus_dir / "detections" / "00000.jsonl"), "--out", str(tmp_path / "syn"),
                       "--clip-len", "8", "--stride", "4", "--distortion", "0.3", "--seed", "2")
    assert code == 0
    synth_manifest = tmp_path / "syn" / "manifest.jsonl"
    assert synth_manifest.exists()

    code, out, _ = run(capsys, "pretrain", "--config", str(tmp_path / "cfg.json"), "--synth-manifest",
                       str(synth_manifest), "--out", str(tmp_path / "pre"))
    assert code == 0

    code, out, _ = run(capsys, "zeroshot", "--ckpt", str(tmp_path / "pre" / "checkpoint.npz"), "--data", manifest)
    rec = json.loads(out)
    assert code == 0 and rec["action_accuracy"] == "n/a" and "center_bias_kld" in rec

    code, out, _ = run(capsys, "train", "--config", str(tmp_path / "cfg.json"), "--data", manifest,
                       "--out", str(tmp_path / "ft"), "--init", str(tmp_path / "pre" / "checkpoint.npz"))
    assert code == 0


def test_finetune_mode_requires_init(tmp_path, corpus_dir):
    RunConfig.tiny(mode="finetune").save(tmp_path / "cfg.json")
    with pytest.raises(SystemExit):
        main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(corpus_dir / "manifest.jsonl"),
              "--out", str(tmp_path / "o")])


def test_synth_without_minable_clip_fails(tmp_path, corpus_dir, capsys):
    (tmp_path / "none.jsonl").write_text("")
    code, _, err = run(capsys, "synth", "--frames", str(corpus_dir / "videos" / "00000"), "--detections",
                       str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "s"), "--clip-len", "8")
    assert code == 2 and "no minable" in err
