import math

import pytest

from bagsfit.config import ConfigError, ExperimentConfig


def test_empty_text_is_default():
    assert ExperimentConfig.from_ini("").to_ini() == ExperimentConfig().to_ini()


def test_round_trip_and_hash():
    text = "[dataset]\nseed = 7\nscenes = 2\n[segmentation]\ntemperature = 0.5\n[ransac]\nrefine = no\n"
    cfg = ExperimentConfig.from_ini(text)
    assert cfg.dataset.seed == 7 and cfg.segmentation.temperature == 0.5 and cfg.ransac.refine is False
    again = ExperimentConfig.from_ini(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini()
    assert again.hash == cfg.hash != ExperimentConfig().hash
    assert len(cfg.hash) == 16


def test_manifest_section_ignored():
    cfg = ExperimentConfig()
    text = "[manifest]\nconfig_hash = abc\n\n" + cfg.to_ini()
    assert ExperimentConfig.from_ini(text).hash == cfg.hash


@pytest.mark.parametrize(
    "text, needle",
    [
        ("[dataset]\nseed = x\n", ":2:"),
        ("[dataset]\n\nscenes = 0\n", "scenes"),
        ("[bogus]\n", ":1: unknown section"),
        ("[ransac]\nmin_support = 10\nfoo = 1\n", ":3: unknown key 'foo'"),
        ("[scanner]\nsigma = -1\n", "[scanner]"),
        ("[segmentation]\nscheme = k7\n", "[segmentation]"),
        ("[ransac]\nrefine = maybe\n", "expected a boolean"),
        ("no section\n", "<config>"),
    ],
)
def test_errors_name_line_or_field(text, needle):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_ini(text)
    assert needle in str(e.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "none.ini")


def test_component_configs():
    cfg = ExperimentConfig.from_ini("[scanner]\nwidth = 320\nheight = 240\n[ransac]\nangle_score_deg = 40\n")
    sc = cfg.scanner_config()
    assert (sc.intrinsics.fx, sc.intrinsics.cx, sc.intrinsics.cy) == (287.5, 159.5, 119.5)
    assert math.isclose(cfg.ransac_params().angle_score, math.radians(40))
    assert cfg.scheme.K == 6
