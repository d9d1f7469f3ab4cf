import tempfile
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from cvgeo.config import RunConfig, from_flat, load_config, parse_text, toy_config


def test_defaults_match_production_settings():
    cfg = RunConfig()
    assert cfg.backbone.input_size == 448
    assert (cfg.aggregation.pafa.out_channels, cfg.aggregation.pafa.out_rows, cfg.aggregation.dim) == (1024, 4, 4096)
    assert cfg.loss.lam == 3.0
    assert (cfg.train.lr_max, cfg.train.lr_min, cfg.train.warmup_fraction) == (5e-4, 1e-4, 0.1)
    assert cfg.train.momentum == 0.9 and cfg.train.epochs == 40
    assert cfg.bridge3d.views == 6


def test_dump_and_load_round_trip(tmp_path):
    cfg = toy_config(**{"loss.lambda": 2.0, "data.root": "/data/u1652"})
    cfg.dump(tmp_path / "c.txt")
    back = load_config(tmp_path / "c.txt")
    assert back == cfg
    assert back.fingerprint() == cfg.fingerprint()


def test_parse_text_types_and_comments():
    flat = parse_text("""
        # a comment
        train.epochs = 7   # trailing comment
        bridge3d.enabled = false
        data.grem_manifest = none
        augment.jpeg_quality = (50, 90)
        backbone.backend = toy
    """)
    assert flat == {"train.epochs": 7, "bridge3d.enabled": False, "data.grem_manifest": None,
                    "augment.jpeg_quality": (50, 90), "backbone.backend": "toy"}
    with pytest.raises(ValueError):
        parse_text("train.epochs 7")


def test_unknown_key_rejected():
    with pytest.raises(KeyError):
        from_flat({"train.epoch": 3})
    with pytest.raises(KeyError):
        toy_config().replace(**{"nope": 1})


def test_pafa_geometry_follows_dim():
    cfg = from_flat({"aggregation.dim": 512})
    assert (cfg.aggregation.pafa.out_channels, cfg.aggregation.pafa.out_rows) == (128, 4)
    cfg = from_flat({"aggregation.dim": 512, "aggregation.pafa.out_channels": 64})
    assert cfg.aggregation.pafa.out_rows == 8
    with pytest.raises(ValueError):
        from_flat({"aggregation.dim": 512, "aggregation.pafa.out_channels": 64,
                   "aggregation.pafa.out_rows": 4})


def test_fingerprint_ignores_local_paths():
    a = toy_config()
    assert a.replace(**{"data.root": "/x", "bridge3d.cache_dir": "/c"}).fingerprint() == a.fingerprint()
    assert a.replace(**{"loss.lam": 1.0}).fingerprint() != a.fingerprint()


def test_replace_alias_and_validation():
    assert toy_config().replace(**{"loss.lambda": 5.0}).loss.lam == 5.0
    with pytest.raises(ValueError):
        toy_config(**{"loss.lambda": -1.0})
    with pytest.raises(ValueError):
        toy_config(**{"backbone.input_size": 50})


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10), st.floats(0, 10), st.integers(1, 100),
       st.sampled_from(["pafa", "gem", "netvlad", "conv_ap"]), st.booleans())
def test_round_trip_property(tau, lam, epochs, head, msbm):
    cfg = toy_config(**{"loss.temperature": tau, "loss.lam": lam, "train.epochs": epochs,
                        "aggregation.head": head, "bridge3d.enabled": msbm})
    with tempfile.TemporaryDirectory() as d:
        cfg.dump(Path(d) / "c.txt")
        assert load_config(Path(d) / "c.txt") == cfg
