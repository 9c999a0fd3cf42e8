import json

import pytest

from demoforge.config import PipelineConfig, config_from_dict, load_config
from demoforge.errors import ConfigError
from demoforge.pipeline import profile_plan


def test_defaults_roundtrip_through_dict():
    cfg = PipelineConfig()
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p).to_dict() == PipelineConfig().to_dict()


def test_digest_tracks_values():
    assert config_from_dict({"seed": 1}).digest() != PipelineConfig().digest()


def test_nested_values_and_int_to_float(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\npolicy:\n  posttrain:\n    lr: 1\n    steps: 7\neval:\n  tasks: [handover]\n")
    cfg = load_config(p)
    assert cfg.seed == 3 and cfg.policy.posttrain.lr == 1.0 and cfg.policy.posttrain.steps == 7
    assert cfg.policy.pretrain.steps == PipelineConfig().policy.pretrain.steps
    assert cfg.eval.tasks == ["handover"]


@pytest.mark.parametrize("text, line, field", [
    ("seed: 0\ncorpus:\n  n_clean: 10\n  n_sims: 3\n", 4, "corpus.n_sims"),
    ("seed: 0\npolicy:\n  preset: huge\n", 3, "policy.preset"),
    ("eval:\n  rollouts: many\n", 2, "eval.rollouts"),
    ("corpus:\n  profiles:\n    - name: j\n      corruption:\n        jitter: 0.1\n", 5,
     "corpus.profiles[0].corruption.jitter"),
    ("corpus:\n  n_clean: 4\n  n_corrupted: 5\n", 3, "corpus.n_corrupted"),
])
def test_errors_name_line_and_field(tmp_path, text, line, field):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    assert f"line {line}:" in str(exc.value) and field in str(exc.value)


def test_yaml_syntax_error_has_line(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 0\ncorpus: [\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(p)


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DEMOFORGE_SEED", "7")
    assert load_config(None).seed == 7
    monkeypatch.setenv("DEMOFORGE_SEED", "x")
    with pytest.raises(ConfigError, match="DEMOFORGE_SEED"):
        load_config(None)


def test_profile_plan_largest_remainder():
    plan = profile_plan(PipelineConfig())
    assert [plan.count(i) for i in range(5)] == [60, 40, 40, 30, 30]
    cfg = config_from_dict({"corpus": {"n_clean": 7, "n_corrupted": 7, "profiles": [
        {"name": n, "weight": 1, "corruption": {}} for n in "abc"]}})
    assert sorted(profile_plan(cfg)) == [0, 0, 0, 1, 1, 2, 2]
    assert profile_plan(cfg) == profile_plan(cfg)
