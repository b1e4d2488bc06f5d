import pytest

from dermhybrid.config import load_config, parse_config
from dermhybrid.errors import ConfigError

from conftest import write_tiny_config


def test_tiny_config_parses(tmp_path):
    cfg = load_config(write_tiny_config(tmp_path / "run.cfg", kind="sequential", fusion="perceptron", epochs=3))
    assert cfg.model.kind == "sequential" and cfg.model.fusion == "perceptron"
    assert cfg.model.backbone_channels == [4, 8]
    assert cfg.model.image_size == cfg.augment.output_size == 32
    assert cfg.train.epochs == 3 and cfg.train.deterministic is True
    assert cfg.augment.crop_scale == (0.8, 1.0)
    assert cfg.resolve(cfg.data.split_dir) == tmp_path / "splits"


def test_defaults_without_sections():
    cfg = parse_config("")
    assert cfg.train.epochs == 10 and cfg.train.batch_size == 32 and cfg.train.lr == 1e-4
    assert cfg.model.d_model == 64 and cfg.augment.rotation_degrees == 20.0


@pytest.mark.parametrize(
    "text,line",
    [
        ("[train]\nepochs = 2\nepoch = 3\n", 3),
        ("[model]\n\n# comment\nimage_size = 64\n", 4),
        ("[optimizer]\nlr = 1\n", 1),
        ("lr = 1\n", 1),
        ("[train]\nepochs = two\n", 2),
        ("[train]\nepochs = 2\nepochs = 3\n", 3),
        ("[augment]\ncrop_scale = 0.5\n", 2),
    ],
)
def test_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}"):
        parse_config(text)


def test_semantic_validation():
    with pytest.raises(ConfigError):
        parse_config("[train]\nepochs = 0\n")
    with pytest.raises(ConfigError):
        parse_config("[model]\nd_model = 10\nn_heads = 4\n")
    with pytest.raises(ConfigError):
        parse_config("[data]\nimage_size = 64\n[augment]\noutput_size = 32\n")
    with pytest.raises(ConfigError):
        parse_config("[data]\nimage_size = 50\n")


def test_bool_spellings():
    assert parse_config("[train]\ndeterministic = off\n").train.deterministic is False
    assert parse_config("[augment]\nenabled = no\n").augment.enabled is False
