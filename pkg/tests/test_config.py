import pytest

from texguard.config import SEED_ENV, ConfigError, RunConfig, dump_config, load_config, parse_config


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.defense.epsilon == 5.5 / 255
    assert cfg.loss.weights().lambda2 == 0.04
    assert [e.edit_kind for e in cfg.surrogate.edit_specs()] == ["hair-recolor", "region-invert"]


def test_parse_values():
    cfg = parse_config("""
        seed = 9   # trailing comment
        defense.epsilon = 4/255
        texture.lbp_after_pool = false
        texture.luma = bt601
        surrogate.edits = hair-recolor
    """)
    assert cfg.seed == 9 and cfg.defense.epsilon == 4 / 255
    assert cfg.texture.lbp_after_pool is False and cfg.luma[2] == 0.114
    assert len(cfg.surrogate.edit_specs()) == 1


@pytest.mark.parametrize("text", [
    "nonsense",
    "defense.unknown = 1",
    "bogus.epochs = 1",
    "corpus.n_train = many",
    "texture.lbp_after_pool = maybe",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "defense.epsilon = 0.5",
    "texture.window = 4",
    "loss.T = 1.5",
    "corpus.size = 30",
    "surrogate.edits = face-swap",
    "texture.luma = hsv",
    "defense.variant = triple",
    "eval.threshold = 0",
])
def test_validation_errors(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_seed_env_override(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\n")
    assert load_config(path, env={SEED_ENV: "17"}).seed == 17
    assert load_config(path, env={}).seed == 1


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_dump_round_trip():
    cfg = parse_config("seed = 4\ndefense.epochs = 3\nloss.lambda3 = 0.25\n")
    again = parse_config(dump_config(cfg))
    assert again == cfg
