from pathlib import Path

import pytest
import yaml

from asd.config import ConfigError, config_from_dict, dump_config, override, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, d):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


def test_minimal_config_gets_full_scale_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, {"dataset": {"source": "cifar10"}, "attack": {"target_label": 3}}))
    s, sched, mm = cfg.defense.split, cfg.defense.schedule, cfg.defense.mixmatch
    assert (s.seeds_per_class, s.quota_step, s.quota_interval) == (10, 10, 5)
    assert (s.agnostic_percent, s.meta_percent, s.virtual_lr) == (50, 50, 0.015)
    assert (sched.class_aware_end, sched.class_agnostic_end, sched.total_epochs) == (60, 90, 120)
    assert (mm.lambda_u, mm.temperature, mm.alpha, mm.augmentations) == (15, 0.5, 0.75, 2)
    assert (cfg.defense.lr, cfg.defense.batch_size) == (0.002, 64)
    assert (cfg.attack.poison_rate, cfg.attack.trigger.kind, cfg.attack.trigger.patch_size) == (0.05, "badnets", 2)
    # section objects convert to the runtime configs
    assert s.build().quota_interval == 5 and sched.build().total_epochs == 120


def test_constraint_violation_names_the_key(tmp_path):
    with pytest.raises(ConfigError, match=r"defense\.split\.agnostic_percent"):
        parse_config(write(tmp_path, {"defense": {"split": {"agnostic_percent": 150}}}))


def test_unknown_and_mistyped_keys_rejected():
    with pytest.raises(ConfigError, match=r"defense\.split\.alpha_pct"):
        config_from_dict({"defense": {"split": {"alpha_pct": 50}}})
    with pytest.raises(ConfigError, match=r"defense\.lr"):
        config_from_dict({"defense": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="mode"):
        config_from_dict({"mode": "train-everything"})
    with pytest.raises(ConfigError, match="class_aware_end"):
        config_from_dict({"defense": {"schedule": {"class_aware_end": 50, "class_agnostic_end": 40}}})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.yaml")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_parse_and_round_trip(path, tmp_path):
    cfg = parse_config(path)
    out = tmp_path / "r.yaml"
    dump_config(cfg, out)
    assert parse_config(out) == cfg


def test_paper_config_spells_out_the_defaults():
    assert parse_config(CONFIGS / "paper_cifar10_badnets.yaml").defense == config_from_dict({}).defense


def test_override_revalidates():
    cfg = override(config_from_dict({}), mode="eval", seed=4)
    assert (cfg.mode, cfg.seed) == ("eval", 4)
    assert override(cfg, seed=None).seed == 4
    with pytest.raises(ConfigError):
        override(cfg, mode="bogus")
