import pytest

from pointseg.config import format_config, load_config, parse_config_text
from pointseg.errors import ConfigError
from pointseg.network import NetworkConfig


def test_parse_types_and_comments():
    text = """
    d_in = 6            # xyz + rgb
    n_class = 4
    encoder_widths = 16, 32
    decimation = 0.5
    units = 1
    pooling = max
    locse = center_only
    """
    values = parse_config_text(text)
    assert values == {"d_in": 6, "n_class": 4, "encoder_widths": [16, 32], "decimation": 0.5,
                      "units": 1, "pooling": "max", "locse": "center_only"}


def test_round_trip(tmp_path):
    cfg = NetworkConfig(d_in=4, n_class=7, encoder_widths=(16, 32, 64), k=8, seed=5, dtype="float32")
    path = tmp_path / "net.cfg"
    path.write_text(format_config(cfg))
    assert load_config(path) == cfg


def test_overrides_win(tmp_path):
    path = tmp_path / "net.cfg"
    path.write_text("seed = 1\nn_class = 5\n")
    cfg = load_config(path, seed=9)
    assert (cfg.seed, cfg.n_class) == (9, 5)


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "d_in = three\n",
    "encoder_widths = 16, x\n",
    "n_class = 1\n",
    "pooling = median\n",
    "no equals sign here\n",
])
def test_bad_configs(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
