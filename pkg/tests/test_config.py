import pytest

from civiscan.service.config import ConfigError, load_config


def write(tmp_path, text):
    path = tmp_path / "svc.conf"
    path.write_text(text)
    return path


def test_config_parses_and_resolves(tmp_path):
    path = write(
        tmp_path,
        "# comment\n"
        "data_dir = mydata\n"
        "checkpoint = model.ckpt\n"
        "threshold = 0.7\n"
        "workers = 3\n"
        "proposer.saliency_threshold = 0.2\n"
        "proposer.max_proposals = 4\n",
    )
    cfg = load_config(path)
    assert cfg.data_dir == str((tmp_path / "mydata").resolve())
    assert cfg.checkpoint == str((tmp_path / "model.ckpt").resolve())
    assert cfg.threshold == 0.7
    assert cfg.workers == 3
    assert cfg.proposer.saliency_threshold == 0.2
    assert cfg.proposer.max_proposals == 4


def test_config_env_overrides_data_dir(tmp_path, monkeypatch):
    override = tmp_path / "elsewhere"
    monkeypatch.setenv("CIVISCAN_DATA_DIR", str(override))
    cfg = load_config(write(tmp_path, "data_dir = ignored\n"))
    assert cfg.data_dir == str(override.resolve())


def test_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown setting"):
        load_config(write(tmp_path, "workerz = 3\n"))


def test_config_rejects_bad_value(tmp_path):
    with pytest.raises(ConfigError, match="bad value"):
        load_config(write(tmp_path, "workers = many\n"))


def test_config_rejects_missing_equals(tmp_path):
    with pytest.raises(ConfigError, match="key = value"):
        load_config(write(tmp_path, "just a line\n"))
