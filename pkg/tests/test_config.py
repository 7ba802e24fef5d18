import pytest
from hypothesis import given, strategies as st

from equikernel.config import SCHEMA, ConfigError, load_config, parse_config, parse_pairs


class TestRunConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg["roel.theta_limit_deg"] == 40.0
        assert cfg["sel.reduction_r"] == 4
        assert cfg["train.margin"] == 0.2 and cfg["train.beta"] == 1.0
        assert cfg["backbone.parts"] == 16
        b = cfg.backbone()
        assert b.widths == (32, 64, 128, 256) and b.layers == (1, 1, 1, 1)

    def test_file_with_comments(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# toy\nbackbone.widths = 4,8,8,16\nroel.theta_limit_deg=20 # ablation\n\n")
        cfg = load_config(p)
        assert cfg["backbone.widths"] == (4, 8, 8, 16)
        assert cfg.backbone().theta_limit == 20.0

    def test_unknown_key_names_key(self):
        with pytest.raises(ConfigError, match="backbone.depth"):
            parse_config("backbone.depth=3")

    @pytest.mark.parametrize("line,key", [
        ("roel.theta_limit_deg=120", "roel.theta_limit_deg"),
        ("train.p=1", "train.p"),
        ("backbone.widths=1,2,3", "backbone.widths"),
        ("sel.branch_mode=atrous", "sel.branch_mode"),
        ("backbone.audit_mode=maybe", "backbone.audit_mode"),
        ("sel.reduction_r=7", "sel.reduction_r"),
    ])
    def test_range_errors_name_key(self, line, key):
        with pytest.raises(ConfigError, match=key):
            parse_config(line)

    def test_duplicate_and_malformed(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config("train.lr=0.1\ntrain.lr=0.2")
        with pytest.raises(ConfigError):
            parse_config("train.lr")

    def test_render_round_trip(self):
        cfg = parse_pairs({"backbone.widths": "4,8,8,16", "backbone.reel": "false", "train.lr": "0.05"})
        again = parse_config(cfg.render())
        assert again.values == cfg.values
        assert again.digest == cfg.digest

    @given(st.sampled_from([20.0, 30.0, 40.0, 50.0]), st.integers(1, 5000))
    def test_digest_tracks_values(self, limit, iters):
        a = parse_pairs({"roel.theta_limit_deg": str(limit), "train.iterations": str(iters)})
        b = parse_pairs({"roel.theta_limit_deg": str(limit), "train.iterations": str(iters + 1)})
        assert a.digest != b.digest
        assert len(a.digest) == 16

    def test_overrides(self):
        cfg = load_config().with_overrides({"train.frames": "4"})
        assert cfg["train.frames"] == 4

    def test_every_key_is_namespaced(self):
        assert all(k.split(".")[0] in {"backbone", "roel", "sel", "train", "data", "audit"} for k in SCHEMA)
