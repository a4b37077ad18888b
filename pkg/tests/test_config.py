import pytest

from bits.config import KEYS, PATH_KEYS, ConfigError, build, load_config, parse_lines
from bits.trainer import TrainConfig


def test_defaults_match_dataclasses():
    rc = build({})
    assert rc.train.to_dict() == TrainConfig().to_dict()
    assert rc.paths == PATH_KEYS


def test_every_field_is_a_key():
    for name in ("epochs", "beta", "eps", "backbone", "head_out", "global_crop", "n_local", "bit_normalization"):
        assert name in KEYS


def test_parse_comments_types_and_tuples(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "# a run\n"
        "dataset = data/x.bin  # trailing comment\n"
        "epochs = 3\n"
        "beta = 0.25\n"
        "reset_teacher = false\n"
        "rate_scale = none\n"
        "global_crop = 0.5, 1.0\n"
        "backbone = mlp\n"
        "\n"
    )
    rc = load_config(p, {"epochs": "7"})
    assert rc.paths["dataset"] == "data/x.bin"
    assert rc.train.epochs == 7
    assert rc.train.beta == 0.25
    assert rc.train.reset_teacher is False
    assert rc.train.rate_scale is None
    assert rc.train.augment.global_crop == (0.5, 1.0)
    assert rc.train.model.backbone == "mlp"


@pytest.mark.parametrize(
    "lines, match",
    [
        (["bogus_key = 1"], "bogus_key"),
        (["epochs = 1", "epochs = 2"], "duplicate"),
        (["epochs"], "line 1"),
        (["epochs = many"], "epochs"),
        (["global_crop = 0.5"], "global_crop"),
        (["reset_teacher = maybe"], "boolean"),
    ],
)
def test_parse_errors_name_the_problem(lines, match):
    with pytest.raises(ConfigError, match=match):
        build(parse_lines(lines))


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        build({"head_out": "12"})
    with pytest.raises(ConfigError):
        build({"agreement": "nope"})


def test_echo_round_trips(tmp_path):
    rc = build(parse_lines(["epochs = 4", "input_shape = 16, 16, 3", "pixel_mean = 0.1, 0.2, 0.3", "out_dir = o"]))
    path = rc.write_echo(tmp_path)
    text = path.read_text()
    assert "# augment" in text and "local_size = none" in text
    again = load_config(path)
    assert again.train.to_dict() == rc.train.to_dict()
    assert again.paths == rc.paths


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
