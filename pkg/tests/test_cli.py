import json

import numpy as np
import pytest

from cvgeo.cli import build_parser, main
from cvgeo.config import toy_config
from cvgeo.data import Source, read_manifest
from cvgeo.evaluate import read_embeddings, write_embeddings

TINY = {
    "backbone.input_size": 28, "backbone.channels": 16, "backbone.heads": 2, "backbone.depth": 1,
    "aggregation.dim": 32, "aggregation.pafa.out_channels": 8, "aggregation.pafa.out_rows": 4,
    "aggregation.pafa.dim": 32, "aggregation.pafa.mixer_depth": 1, "bridge3d.fusion_dim": 32,
    "bridge3d.encoder_channels": 8, "train.epochs": 1, "train.batch_size": 4,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--out", str(ws / "data"), "--locations", "5"]) == 0
    toy_config(**TINY).dump(ws / "tiny.txt")
    return ws


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for cmd in ("prepare-grem", "train", "embed", "evaluate", "ablate"):
        assert cmd in text


def test_prepare_grem_appends_manifest(workspace, capsys):
    out = workspace / "grem.jsonl"
    main(["prepare-grem", "--pool", str(workspace / "data/train/google"), "--out", str(out),
          "--data", str(workspace / "data")])
    stdout = capsys.readouterr().out
    assert "anchors=30" in stdout and "raw_selected=60" in stdout
    records = read_manifest(out)
    assert len(records) == 60 and all(r.source is Source.GREM for r in records)
    assert (workspace / "grem.assignments.jsonl").exists()


def test_train_embed_evaluate(workspace, capsys):
    run = workspace / "run"
    main(["train", "--config", str(workspace / "tiny.txt"), "--data", str(workspace / "data"),
          "--run-dir", str(run), "--plot"])
    out = capsys.readouterr().out
    assert "epoch\t1\tmean_l_total" in out
    for name in ("final.pt", "config.txt", "train_log.jsonl", "training.png"):
        assert (run / name).exists(), name

    dumps = {}
    for split in ("test_query", "test_gallery"):
        dumps[split] = workspace / f"{split}.bin"
        main(["embed", "--split", split, "--out", str(dumps[split]), "--config", str(run / "config.txt"),
              "--checkpoint", str(run / "final.pt"), "--data", str(workspace / "data")])
    ids, labels, vecs = read_embeddings(dumps["test_query"])
    assert len(ids) == 5 and vecs.shape == (5, 32)
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1, atol=1e-6)

    capsys.readouterr()
    metrics = workspace / "metrics.json"
    main(["evaluate", "--query", str(dumps["test_query"]), "--gallery", str(dumps["test_gallery"]),
          "--ap-mode", "first", "--out", str(metrics), "--plot", str(workspace / "figs"),
          "--data", str(workspace / "data")])
    out = capsys.readouterr().out
    assert out.startswith("metric\tvalue\nR@1\t")
    record = json.loads(metrics.read_text())
    assert record["ap_mode"] == "first" and record["n_queries"] == 5
    assert (workspace / "figs/recall.png").exists() and (workspace / "figs/retrieval.png").exists()


def test_evaluate_perfect_dumps(tmp_path, capsys):
    vecs = np.eye(3)
    write_embeddings(tmp_path / "q.bin", ["q0", "q1", "q2"], ["a", "b", "c"], vecs)
    write_embeddings(tmp_path / "g.bin", ["g0", "g1", "g2"], ["a", "b", "c"], vecs)
    main(["evaluate", "--query", str(tmp_path / "q.bin"), "--gallery", str(tmp_path / "g.bin")])
    lines = dict(line.split("\t")[:2] for line in capsys.readouterr().out.splitlines())
    assert lines["R@1"] == "100.00" and lines["AP"] == "100.00"
    assert (tmp_path / "q.metrics.json").exists()


def test_ablate_full_requires_weights(workspace):
    with pytest.raises(SystemExit, match="weights_path"):
        main(["ablate", "--suite", "lambda", "--full", "--data", str(workspace / "data"),
              "--out", str(workspace / "abl")])
    with pytest.raises(SystemExit, match="weights_path"):
        main(["ablate", "--suite", "heads", "--full", "--config", str(workspace / "tiny.txt"),
              "--out", str(workspace / "abl")])
    assert not (workspace / "abl").exists()


def test_unknown_suite_rejected():
    with pytest.raises(SystemExit):
        main(["ablate", "--suite", "optimizers"])
