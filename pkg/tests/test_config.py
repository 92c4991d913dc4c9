"""Run configs: bundled files, scales, overrides, validation."""

import pytest
import yaml

from gfmm.config import (bundled_names, dump_config, get_path, load_config, parse_override, set_path,
                         train_config)
from gfmm.errors import ConfigError

BUNDLED = ["bvp-mno", "bvp-uno", "darcy1d-mno", "darcy1d-mno-relu", "darcy1d-uno-mix",
           "poisson1d-uno", "poisson2d"]


def test_bundled_present():
    assert bundled_names() == BUNDLED


@pytest.mark.parametrize("name", BUNDLED)
@pytest.mark.parametrize("scale", ["desk", "paper"])
def test_bundled_validate(name, scale):
    cfg = load_config(name, scale=scale)
    assert cfg["scale"] == scale and "scales" not in cfg
    assert cfg["name"] == name


@pytest.mark.parametrize("name", BUNDLED)
def test_resolved_config_reloads(name, tmp_path):
    cfg = load_config(name, ["train.seed=7"])
    dump_config(cfg, tmp_path / "c.yaml")
    again = load_config(str(tmp_path / "c.yaml"), scale=cfg["scale"])
    assert again == cfg


def test_paper_scale_applies():
    desk, paper = load_config("poisson1d-uno"), load_config("poisson1d-uno", scale="paper")
    assert desk["train"]["iterations"] == 20000
    assert paper["train"]["iterations"] == 120000
    assert paper["train"]["lr_drops"] == [[20000, 1.0e-4]]


def test_overrides_and_seed():
    cfg = load_config("poisson1d-uno", ["train.lr=0", "model.blocks.1.activation=rational"], seed=3)
    assert cfg["train"]["lr"] == 0 and cfg["train"]["seed"] == 3
    assert cfg["model"]["blocks"][1]["activation"] == "rational"
    assert train_config(cfg).lr == 0


class TestOverrideSyntax:
    @pytest.mark.parametrize("text, value", [("a=1", 1), ("a=1e-3", 1e-3), ("a=true", True),
                                             ("a=[1, 2]", [1, 2]), ("a=word", "word"), ("a=", None),
                                             ("a=x=y", "x=y")])
    def test_parse(self, text, value):
        assert parse_override(text) == ("a", value)

    @pytest.mark.parametrize("text", ["novalue", "=3"])
    def test_bad(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_paths(self):
        cfg = {"a": [{"b": 1}]}
        set_path(cfg, "a.0.b", 2)
        set_path(cfg, "c.d", 3)
        assert cfg == {"a": [{"b": 2}], "c": {"d": 3}}
        assert get_path(cfg, "a.0.b") == 2 and get_path(cfg, "a.5", "x") == "x"
        with pytest.raises(ConfigError):
            set_path(cfg, "a.9.b", 1)
        with pytest.raises(ConfigError):
            set_path(cfg, "c.d.e", 1)


class TestValidation:
    @pytest.mark.parametrize("override, field", [
        ("problem.type=heat", "problem.type"),
        ("problem.D=100", "model.blocks.0"),
        ("model.kind=cnn", "model.kind"),
        ("model.blocks.0.activation=tanh", "model.blocks.0.activation"),
        ("train.lr=-1", "train.lr"),
        ("train.momentum=0.9", "train"),
        ("eval.schemes=[weak]", "eval.schemes"),
    ])
    def test_field_paths(self, override, field):
        with pytest.raises(ConfigError) as ei:
            load_config("poisson1d-uno", [override])
        assert ei.value.field == field

    def test_mno_width(self):
        with pytest.raises(ConfigError) as ei:
            load_config("darcy1d-mno", ["model.coeff_blocks.0.c_hidden=3"])
        assert ei.value.field == "model.coeff_blocks.0.c_hidden"

    def test_mno_branch_lengths(self):
        with pytest.raises(ConfigError) as ei:
            load_config("darcy1d-mno", ["model.rhs_blocks=[{L: 4}]"])
        assert ei.value.field == "model.rhs_blocks"

    def test_unknown_distribution(self):
        with pytest.raises(ConfigError) as ei:
            load_config("darcy1d-mno", ["eval.distributions=[gaussian]"])
        assert ei.value.field == "eval.distributions"

    def test_unknown_top_level(self):
        with pytest.raises(ConfigError):
            load_config("poisson1d-uno", ["optimizer.name=sgd"])

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config("no-such-config")
        (tmp_path / "bad.yaml").write_text("problem: [unclosed")
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "bad.yaml"))
        (tmp_path / "list.yaml").write_text(yaml.safe_dump([1, 2]))
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "list.yaml"))
        with pytest.raises(ConfigError):
            load_config("poisson1d-uno", scale="huge")

    def test_plain_dict(self):
        cfg = load_config({"problem": {"type": "poisson1d", "D": 16},
                           "model": {"kind": "uno", "blocks": [{"L": 2}]}})
        assert cfg["scale"] == "desk"
