from pathlib import Path

import pytest

from embedlab import ConfigError
from embedlab.config import ExperimentConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = """
[dataset]
seed = 1
days = 5
examples_per_day = 300
calibration_examples = 20000

[space.campaign]
num_ids = 2000

[task.click]
relative_density = 1.0

[task.checkout]
relative_density = 0.1
condition = click
loss_weight = 2

[plan]
batch_days = 0-1
epochs = 2
continual_days = 2-3

[arm.baseline]

[arm.fal]
fal = log
base_lr = 0.001
"""


def parse(text=BASE):
    return ExperimentConfig.parse(text)


class TestParse:
    def test_roundtrip(self):
        cfg = parse()
        again = ExperimentConfig.parse(cfg.serialize())
        assert again.serialize() == cfg.serialize()
        assert again.config_hash() == cfg.config_hash()

    @pytest.mark.parametrize("name", ["smoke.ini", "overfit.ini"])
    def test_shipped_configs(self, name):
        cfg = ExperimentConfig.load(CONFIGS / name)
        assert cfg.plan().arms

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'colour'"):
            parse(BASE + "\n[model]\ncolour = red\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse(BASE + "\n[extras]\n")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="examples_per_day"):
            parse(BASE.replace("examples_per_day = 300\n", ""))

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse(BASE.replace("epochs = 2", "epochs = two"))

    def test_cycle(self):
        text = BASE.replace("condition = click", "condition = checkout")
        with pytest.raises(ConfigError, match="checkout -> checkout"):
            parse(text)

    def test_plan_beyond_data(self):
        with pytest.raises(ConfigError, match="day 5"):
            parse(BASE.replace("continual_days = 2-3", "continual_days = 2-4"))

    def test_empty_arm_list(self):
        cfg = parse(BASE.replace("[arm.baseline]\n", "").replace("[arm.fal]\nfal = log\nbase_lr = 0.001\n", ""))
        with pytest.raises(ConfigError, match="arm list is empty"):
            cfg.plan()


class TestBuilders:
    def test_arms(self):
        arms = {a.name: a for a in parse().arms()}
        assert arms["fal"].fal.mode == "log"
        assert arms["fal"].sparse.base_lr == 0.001
        assert arms["baseline"].sparse.embedding_lr_multiplier == 50.0

    def test_model_config(self):
        mc = parse().model_config()
        assert mc.tasks == ("click", "checkout")
        assert mc.loss_weights == (1.0, 2.0)
        assert mc.tables[0].bits == 16

    def test_calibrated_space(self):
        sp = parse().spaces()[0]
        assert 0.1 < sp.exponent < 5.0

    def test_dataset_hash_ignores_training_keys(self):
        a = parse()
        b = parse(BASE.replace("epochs = 2", "epochs = 1").replace("loss_weight = 2", "loss_weight = 3"))
        c = parse(BASE.replace("seed = 1", "seed = 2"))
        assert a.dataset_hash() == b.dataset_hash() != c.dataset_hash()
        assert a.config_hash() != b.config_hash()

    def test_with_seed(self):
        cfg = parse()
        t = cfg.with_seed(9, dataset=False)
        assert t.dataset_hash() == cfg.dataset_hash()
        assert t.sections["model"]["seed"] == 9 and t.sections["plan"]["shuffle_seed"] == 9
        assert cfg.with_seed(9, dataset=True).dataset["seed"] == 9

    def test_relative_paths(self, tmp_path):
        p = tmp_path / "exp.ini"
        p.write_text(BASE)
        cfg = ExperimentConfig.load(p)
        assert cfg.path("dataset_dir") == tmp_path / "data"
