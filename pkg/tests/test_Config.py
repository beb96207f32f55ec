import pytest
from pydantic import ValidationError
from urbanet.Config import DEFAULT_SETTINGS, format_settings, load_settings


def test_defaults():
    settings = load_settings()
    assert settings.window == 28
    assert settings.test_regions == ["USA", "CHN", "GBR", "MWI"]
    assert settings.task_weights == (1.0, 1.0)
    assert settings.by_region is False
    assert settings.unet_spec().tile_size == 28
    schedule = settings.schedule()
    assert schedule.phase1.learning_rate == 1e-3
    assert schedule.phase2.learning_rate == 1e-4


def test_file_then_overrides(tmp_path):
    path = tmp_path / "urbanet.env"
    path.write_text("# small run\nwindow=16\nseed=4\ntest_regions=USA, GBR\nshuffle=false\n")
    settings = load_settings(str(path), {"seed": 9, "out_dir": None})
    assert settings.window == 16
    assert settings.seed == 9
    assert settings.out_dir == "out"
    assert settings.test_regions == ["USA", "GBR"]
    assert settings.train_config().shuffle is False


def test_rejects_bad_settings(tmp_path):
    path = tmp_path / "urbanet.env"
    path.write_text("windw=16\n")
    with pytest.raises(ValueError):
        load_settings(str(path))
    with pytest.raises(ValueError):
        load_settings(overrides={"colour": "red"})
    with pytest.raises(FileNotFoundError):
        load_settings(str(tmp_path / "missing.env"))
    with pytest.raises(ValidationError):
        load_settings(overrides={"window": 0})
    with pytest.raises(ValidationError):
        load_settings(overrides={"normalization": "robust"})
    with pytest.raises(ValidationError):
        load_settings(overrides={"finetune_learning_rate": "0.01"}).schedule()


def test_formatted_settings_load_back(tmp_path):
    settings = load_settings(overrides={"window": 22, "by_region": True})
    path = tmp_path / "urbanet.env"
    path.write_text(format_settings(settings))
    assert load_settings(str(path)) == settings
    defaults = format_settings().splitlines()
    assert len(defaults) == len(DEFAULT_SETTINGS)
    assert "window=28" in defaults
