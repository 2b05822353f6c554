"""Configuration parsing and command-line harness tests.

The config grammar is exercised against hand-written text, including the
short alias spellings and the line-numbered error reports. The CLI is
driven through main(argv) so exit codes and artifacts are checked the
way a shell user would see them.
"""
import dataclasses
import os

import numpy as np
import pytest

from ssmseg.config import (ALIASES, ConfigError, RunConfig, apply_overrides,
                           load_config, parse_config_text, serialize,
                           write_config)
from ssmseg.cli import main
from ssmseg.gradcheck import CheckRow


TINY = """
# small run for harness tests
variant = rs-ssm
layers = 1
embed_dim = 8
state_dim = 2
bands = 4
high_bands = 2
steps = 3
lr = 1e-3
img_size = 16
frames = 2
classes = 3
shapes = 1
train_clips = 2
eval_clips = 2
noise = 0.0
data_seed = 3
seed = 0
precision = f32
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return str(path)


class TestConfigParsing:
    def test_defaults_serialize_and_parse_back_unchanged(self):
        cfg = RunConfig()
        assert parse_config_text(serialize(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(variant="bi-v-ssm", layers=3, lr=0.25,
                        detach_spectrum=True, noise=0.125, data_dir="clips")
        path = str(tmp_path / "cfg.txt")
        write_config(cfg, path)
        assert load_config(path) == cfg

    def test_comments_and_blank_lines_are_ignored(self):
        cfg = parse_config_text("\n# note\n  steps = 7 # trailing\n\n")
        assert cfg.steps == 7

    def test_whitespace_around_key_and_value_tolerated(self):
        cfg = parse_config_text("   layers   =    5   \n")
        assert cfg.layers == 5

    def test_short_aliases_map_to_descriptive_names(self):
        text = "K = 16\nk_h = 5\nlambda = 0.25\nlambda_i = 0.75\n"
        cfg = parse_config_text(text)
        assert cfg.bands == 16
        assert cfg.high_bands == 5
        assert cfg.ce_weight == 0.25
        assert cfg.ci_weight == 0.75

    def test_alias_table_targets_real_fields(self):
        fields = {f.name for f in dataclasses.fields(RunConfig)}
        for short, full in ALIASES.items():
            assert full in fields
            assert short not in fields

    def test_unknown_key_error_carries_source_and_line(self):
        with pytest.raises(ConfigError, match=r"run\.txt:3.*unknown key.*'wat'"):
            parse_config_text("steps = 1\n\nwat = 2\n", source="run.txt")

    def test_bad_value_error_carries_source_and_line(self):
        with pytest.raises(ConfigError, match=r"<config>:1.*'steps'"):
            parse_config_text("steps = soon\n")

    def test_missing_equals_sign_reports_the_line(self):
        with pytest.raises(ConfigError, match=r":2.*key = value"):
            parse_config_text("steps = 1\njust words\n")

    def test_boolean_spellings(self):
        for raw, expected in (("true", True), ("1", True), ("yes", True),
                              ("on", True), ("false", False), ("0", False),
                              ("no", False), ("off", False)):
            cfg = parse_config_text(f"detach_spectrum = {raw}\n")
            assert cfg.detach_spectrum is expected

    def test_bad_boolean_rejected(self):
        with pytest.raises(ConfigError, match="boolean"):
            parse_config_text("detach_spectrum = maybe\n")

    def test_missing_file_reports_the_path(self, tmp_path):
        with pytest.raises(ConfigError, match="no_such"):
            load_config(str(tmp_path / "no_such.txt"))

    def test_float_accepts_scientific_notation(self):
        assert parse_config_text("lr = 2.5e-3\n").lr == 2.5e-3


class TestOverrides:
    def test_override_wins_over_file_value(self):
        cfg = parse_config_text("steps = 7\n")
        cfg = apply_overrides(cfg, {"steps": 11, "variant": "v-ssm"})
        assert cfg.steps == 11
        assert cfg.variant == "v-ssm"

    def test_none_entries_leave_the_config_alone(self):
        cfg = apply_overrides(RunConfig(), {"steps": None, "seed": None})
        assert cfg == RunConfig()

    def test_alias_accepted_as_override_key(self):
        cfg = apply_overrides(RunConfig(), {"lambda_i": 0.5})
        assert cfg.ci_weight == 0.5

    def test_unknown_override_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config field"):
            apply_overrides(RunConfig(), {"velocity": 3})

    def test_override_result_is_validated(self):
        with pytest.raises(ConfigError, match="lr must be positive"):
            apply_overrides(RunConfig(), {"lr": -1.0})


class TestValidation:
    @pytest.mark.parametrize("field,value,message", [
        ("variant", "s4", "variant"),
        ("precision", "f16", "precision"),
        ("invert_axis", "time", "invert_axis"),
        ("layers", 0, "layers"),
        ("steps", -1, "steps"),
        ("bands", 1, "bands"),
        ("classes", 1, "classes"),
        ("classes", 300, "classes"),
        ("img_size", 30, "patch stride"),
        ("lr", 0.0, "lr"),
        ("weight_decay", -0.1, "nonnegative"),
        ("ce_weight", -0.5, "nonnegative"),
        ("noise", -0.01, "noise"),
        ("fgir_eps", 0.0, "fgir_eps"),
    ])
    def test_each_bound_is_enforced(self, field, value, message):
        cfg = dataclasses.replace(RunConfig(), **{field: value})
        with pytest.raises(ConfigError, match=message):
            cfg.validate()

    def test_high_bands_must_stay_below_bands(self):
        cfg = dataclasses.replace(RunConfig(), bands=4, high_bands=4)
        with pytest.raises(ConfigError, match="high_bands"):
            cfg.validate()

    def test_defaults_validate(self):
        RunConfig().validate()


class TestCliExitCodes:
    def test_missing_subcommand_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_unknown_flag_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--warp-speed"])
        assert exc.value.code == 1

    def test_invalid_variant_choice_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--variant", "s4"])
        assert exc.value.code == 1

    def test_broken_config_file_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("steps = soon\n")
        code = main(["train", "--config", str(bad),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_missing_checkpoint_exits_1(self, tiny_config, tmp_path, capsys):
        code = main(["eval", "--config", tiny_config,
                     "--checkpoint", str(tmp_path / "absent.ckpt"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert capsys.readouterr().err

    def test_gradcheck_failure_exits_2(self, tmp_path, monkeypatch, capsys):
        import ssmseg.cli as cli
        monkeypatch.setattr(cli, "check_leaves", lambda *a, **k: [
            CheckRow(name="stub.weight", max_rel_err=1.0,
                     worst_index=(0,), ok=False)])
        code = main(["gradcheck", "--out", str(tmp_path / "out")])
        assert code == 2
        assert "FAIL" in capsys.readouterr().err


class TestCliRuns:
    def test_train_then_eval_produces_artifacts(self, tiny_config, tmp_path, capsys):
        train_out = str(tmp_path / "train")
        assert main(["train", "--config", tiny_config, "--out", train_out]) == 0
        assert os.path.exists(os.path.join(train_out, "config.txt"))
        assert os.path.exists(os.path.join(train_out, "train_log.csv"))
        ckpt = os.path.join(train_out, "model_final.ckpt")
        assert os.path.exists(ckpt)
        capsys.readouterr()

        eval_out = str(tmp_path / "eval")
        assert main(["eval", "--config", tiny_config,
                     "--checkpoint", ckpt, "--out", eval_out]) == 0
        out = capsys.readouterr().out
        assert "miou" in out
        metrics = os.path.join(eval_out, "metrics.txt")
        assert os.path.exists(metrics)
        with open(metrics) as f:
            assert f.read().startswith("miou ")

    def test_train_writes_resolved_config_copy(self, tiny_config, tmp_path):
        out = str(tmp_path / "run")
        assert main(["train", "--config", tiny_config, "--out", out,
                     "--steps", "1", "--seed", "5"]) == 0
        copy = load_config(os.path.join(out, "config.txt"))
        assert copy.steps == 1
        assert copy.seed == 5
        assert copy.embed_dim == 8

    def test_gradcheck_default_profile_passes(self, tmp_path, capsys):
        out = str(tmp_path / "gc")
        assert main(["gradcheck", "--out", out]) == 0
        assert "gradcheck passed" in capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "gradcheck.txt"))

    def test_inspect_gates_dumps_heatmaps(self, tiny_config, tmp_path, capsys):
        train_out = str(tmp_path / "train")
        assert main(["train", "--config", tiny_config, "--out", train_out]) == 0
        out = str(tmp_path / "gates")
        code = main(["inspect-gates", "--config", tiny_config,
                     "--checkpoint", os.path.join(train_out, "model_final.ckpt"),
                     "--out", out])
        assert code == 0
        files = os.listdir(out)
        assert "layer0_decay.pgm" in files
        assert "layer0_inverted.pgm" in files
        assert "band_mask_0.pgm" in files
        assert "heatmap_ranges.txt" in files
        assert any(f.startswith("features_layer") for f in files)
        capsys.readouterr()
