import json
import subprocess
import sys
from pathlib import Path

import pytest

from promptseg.config import (
    ConfigError,
    apply_env_overrides,
    config_digest,
    default_adapt_config,
    default_eval_config,
    default_pretrain_config,
    default_train_config,
    load_config,
    validate_config,
)
from promptseg.runner import RunError, run


class TestValidation:
    def test_valid_defaults_pass(self, tmp_path):
        validate_config(default_pretrain_config(str(tmp_path)))
        validate_config(default_train_config("source_cs", str(tmp_path), "bb.ckpt"))
        validate_config(default_train_config("dg_t", str(tmp_path), "bb.ckpt"))
        validate_config(default_train_config("dg_i", str(tmp_path), "bb.ckpt"))
        validate_config(default_train_config("oracle", str(tmp_path), "bb.ckpt"))
        validate_config(default_adapt_config(str(tmp_path), "m.ckpt"))
        validate_config(default_eval_config(str(tmp_path), "m.ckpt"))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            validate_config({"schema_version": 1, "mode": "fly"})

    def test_schema_version_required(self, tmp_path):
        cfg = default_pretrain_config(str(tmp_path))
        cfg["schema_version"] = 99
        with pytest.raises(ConfigError, match="schema_version"):
            validate_config(cfg)

    def test_dg_requires_two_scenes(self, tmp_path):
        cfg = default_train_config("dg_t", str(tmp_path), "bb.ckpt")
        cfg["prompts"]["scenes"] = cfg["prompts"]["scenes"][:1]
        with pytest.raises(ConfigError, match="K >= 2"):
            validate_config(cfg)

    def test_k_field_must_match_scene_count(self, tmp_path):
        cfg = default_train_config("dg_t", str(tmp_path), "bb.ckpt")
        cfg["train"]["k"] = 3
        with pytest.raises(ConfigError, match="train.k"):
            validate_config(cfg)

    def test_field_level_diagnostics_accumulate(self):
        with pytest.raises(ConfigError) as exc:
            validate_config({"schema_version": 1, "mode": "adapt_ttda"})
        msg = str(exc.value)
        assert "dataset_path" in msg and "init_checkpoint" in msg
        assert "adapt.domain" in msg

    def test_scene_spec_kinds_checked(self, tmp_path):
        cfg = default_train_config("source_cs", str(tmp_path), "bb.ckpt")
        cfg["prompts"]["scene"] = {"kind": "telepathy"}
        with pytest.raises(ConfigError, match="scene"):
            validate_config(cfg)
        cfg["prompts"]["scene"] = {"kind": "learned"}
        with pytest.raises(ConfigError, match="seed"):
            validate_config(cfg)

    def test_threshold_range(self, tmp_path):
        cfg = default_adapt_config(str(tmp_path), "m.ckpt")
        cfg["adapt"]["threshold"] = 1.2
        with pytest.raises(ConfigError, match="threshold"):
            validate_config(cfg)


class TestEnvOverrides:
    def test_nested_override(self, tmp_path):
        cfg = default_pretrain_config(str(tmp_path))
        out = apply_env_overrides(cfg, {"PROMPTSEG_PRETRAIN__STEPS": "42",
                                        "PROMPTSEG_SEED": "9"})
        assert out["pretrain"]["steps"] == 42
        assert out["seed"] == 9
        assert cfg["pretrain"]["steps"] != 42  # original untouched

    def test_json_and_string_values(self, tmp_path):
        cfg = default_adapt_config(str(tmp_path), "m.ckpt")
        out = apply_env_overrides(cfg, {
            "PROMPTSEG_ADAPT__THRESHOLD": "null",
            "PROMPTSEG_ADAPT__DOMAIN": "domainB",
            "PROMPTSEG_ADAPT__EPISODIC": "true",
        })
        assert out["adapt"]["threshold"] is None
        assert out["adapt"]["domain"] == "domainB"
        assert out["adapt"]["episodic"] is True

    def test_load_config_applies_env(self, tmp_path, monkeypatch):
        cfg = default_pretrain_config(str(tmp_path))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        monkeypatch.setenv("PROMPTSEG_PRETRAIN__STEPS", "7")
        assert load_config(path)["pretrain"]["steps"] == 7

    def test_digest_stable_under_key_order(self, tmp_path):
        cfg = default_pretrain_config(str(tmp_path))
        flipped = json.loads(json.dumps(cfg, sort_keys=True))
        assert config_digest(cfg) == config_digest(flipped)


class TestRunDirectoryContract:
    def test_refuses_nonempty_dir(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        cfg = default_pretrain_config(str(tmp_path / "nodata"))
        with pytest.raises(RunError, match="exists"):
            run(cfg, out)

    def test_resume_rejects_mismatched_digest(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "config_digest.txt").write_text("deadbeef\n")
        (out / "resolved_config.json").write_text("{}")
        cfg = default_pretrain_config(str(tmp_path / "nodata"))
        with pytest.raises(RunError, match="digest mismatch"):
            run(cfg, out, resume=True)


class TestCli:
    def _cli(self, *args):
        return subprocess.run([sys.executable, "-m", "promptseg.cli", *args],
                              capture_output=True, text=True)

    def test_invalid_config_exits_one(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema_version": 1, "mode": "eval"}))
        proc = self._cli("eval", "--config", str(bad), "--out", str(tmp_path / "o"))
        assert proc.returncode == 1
        assert "config error" in proc.stderr

    def test_mode_command_mismatch_exits_one(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(default_pretrain_config(str(tmp_path))))
        proc = self._cli("eval", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert proc.returncode == 1

    def test_missing_dataset_exits_nonzero_as_config_problem(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(default_pretrain_config(str(tmp_path / "missing"))))
        proc = self._cli("pretrain", "--config", str(cfg), "--out", str(tmp_path / "o"))
        assert proc.returncode == 1
        assert "config error" in proc.stderr

    def test_gen_data_and_spec(self, tmp_path):
        from conftest import tiny_domains, tiny_layout
        from promptseg.data import DatasetSpec, read_manifest

        spec = DatasetSpec(domains=tuple(tiny_domains()), layout=tiny_layout(),
                           splits={"train": (0, 2)})
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec.to_json()))
        out = tmp_path / "data"
        proc = self._cli("gen-data", "--out", str(out), "--spec", str(spec_path))
        assert proc.returncode == 0, proc.stderr
        assert len(read_manifest(out)) == 4

    def test_gen_data_existing_exits_one(self, tmp_path):
        out = tmp_path / "data"
        out.mkdir()
        (out / "x").write_text("x")
        proc = self._cli("gen-data", "--out", str(out))
        assert proc.returncode == 1

    def test_pretrain_and_report_happy_path(self, tmp_path, tiny_dataset):
        from conftest import tiny_backbone_config
        cfg = default_pretrain_config(str(tiny_dataset))
        cfg["backbone"] = tiny_backbone_config().to_json()
        cfg["schedule"] = {"P": 10, "beta_start": 1e-4, "beta_end": 0.02}
        cfg["pretrain"].update({"steps": 2, "batch_size": 2})
        path = tmp_path / "pre.json"
        path.write_text(json.dumps(cfg))
        proc = self._cli("pretrain", "--config", str(path), "--out", str(tmp_path / "run"))
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "run" / "backbone.ckpt").exists()
        assert "run complete" in proc.stdout

    def test_seed_flag_overrides_config(self, tmp_path, tiny_dataset):
        from conftest import tiny_backbone_config
        cfg = default_pretrain_config(str(tiny_dataset), seed=0)
        cfg["backbone"] = tiny_backbone_config().to_json()
        cfg["schedule"] = {"P": 10, "beta_start": 1e-4, "beta_end": 0.02}
        cfg["pretrain"].update({"steps": 1, "batch_size": 2})
        path = tmp_path / "pre.json"
        path.write_text(json.dumps(cfg))
        proc = self._cli("pretrain", "--config", str(path), "--seed", "5",
                         "--out", str(tmp_path / "run"))
        assert proc.returncode == 0, proc.stderr
        resolved = json.loads((tmp_path / "run" / "resolved_config.json").read_text())
        assert resolved["seed"] == 5
