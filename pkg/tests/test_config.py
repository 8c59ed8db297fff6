import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dunet.config import ConfigError, RunConfig, load_config, parse_config, serialize_config
from dunet.data import RECIPES


def test_default_round_trip():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    recipe=st.sampled_from(RECIPES),
    lr=st.floats(1e-5, 1.0),
    flags=st.lists(st.booleans(), min_size=4, max_size=4),
    model_id=st.integers(0, 8),
    sigma=st.floats(0.01, 5.0),
)
def test_round_trip_property(seed, recipe, lr, flags, model_id, sigma):
    cfg = RunConfig().with_values(seed=seed, data__recipe=recipe, optim__lr=lr,
                                  net__du_stages=tuple(flags), du__model_id=model_id,
                                  analysis__sigma=sigma)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_parse_comments_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\n\nseed = 4\ndata.recipe = l_block\nnet.widths = 8,8,16,16\n"
                    "train.augment = false  # trailing comment\nout = runs/a#1\n")
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.data.recipe == "l_block"
    assert cfg.net.widths == (8, 8, 16, 16) and cfg.train.augment is False
    assert cfg.out == "runs/a#1"


def test_errors_name_the_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed = 1\ndata.colour = red\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("optim.lr = fast\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("nonsense\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("model.k = 3\n")


def test_validation():
    with pytest.raises(ValueError, match="minimum"):
        RunConfig().with_values(data__n=16).validate()
    with pytest.raises(ConfigError, match="recipe"):
        RunConfig().with_values(data__recipe="torus").validate()
    with pytest.raises(ConfigError, match="model_id"):
        RunConfig().with_values(du__model_id=9).validate()
    with pytest.raises(ConfigError, match="du_stages"):
        RunConfig().with_values(net__du_stages=(True,)).validate()


def test_model_id_selects_ablation_row():
    spec = RunConfig().with_values(du__model_id=8).network_spec(2, 1)
    assert spec.du_edge_feature == "neighbor" and spec.du_k == 16
    spec = RunConfig().with_values(du__model_id=5).network_spec(2, 1)
    assert spec.du_k == 8
    spec = RunConfig().with_values(du__model_id=4).network_spec(2, 1)
    assert not spec.du_use_phi and not spec.du_use_varphi
