import pytest

from conftest import CONFIGS, SMALL_SHAPE
from swelltopo import config as cfgmod
from swelltopo.errors import ConfigError, OutputError

SHIPPED = sorted(CONFIGS.glob("*.cfg"))


@pytest.mark.parametrize("path", SHIPPED, ids=[p.stem for p in SHIPPED])
def test_shipped_configs_load_and_round_trip(path):
    cfg = cfgmod.load_config(path)
    again = cfgmod.loads(cfgmod.dumps(cfg))
    assert again == cfg


def test_required_shipped_configs_exist():
    names = {p.name for p in SHIPPED}
    for n in ("free_swell.cfg", "bilayer.cfg", "inverter.cfg", "organogel_inverter.cfg", "aniso_plate.cfg",
              "aniso_inverter.cfg", "shape_recovery.cfg"):
        assert n in names


def test_inverted_bath_potentials_are_named():
    text = SMALL_SHAPE.replace('[[solvents]]\nname = "water"\n',
                               '[[solvents]]\nname = "water"\nmu_dry_j_per_mol = -10.0\nmu_wet_j_per_mol = -100.0\n')
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(text)
    assert any("solvents[0]" in v and "mu_dry" in v for v in exc.value.violations)


def test_omitted_blocks_are_defaulted_and_flagged():
    cfg = cfgmod.loads(SMALL_SHAPE)
    assert "projection" in cfg.defaulted
    assert cfg.projection == cfgmod.ProjectionConfig()
    assert cfg.optimizer.learning_rate == 5e-3 and "optimizer.learning_rate" in cfg.defaulted
    assert "optimizer.max_iterations" not in cfg.defaulted


@pytest.mark.parametrize("old,new,needle", [
    ('G_pa = 1e6', 'G_pa = -1e6', "G_pa"),
    ('kind = "shape"', 'kind = "twist"', "objective.kind"),
    ('case = "water"', 'case = "brine"', "brine"),
    ('set = "left"\ncomponent = "x"', 'set = "nowhere"\ncomponent = "x"', "nowhere"),
    ('nx = 4', 'nx = 0', "nx"),
    ('nx = 4', 'nx = "four"', "nx"),
])
def test_violations_name_the_offending_key(old, new, needle):
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(SMALL_SHAPE.replace(old, new, 1))
    assert any(needle in v for v in exc.value.violations), exc.value.violations


def test_all_violations_are_collected():
    text = SMALL_SHAPE.replace("nx = 4", "nx = 0").replace("G_pa = 1e6", "G_pa = 0.0")
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(text)
    assert len(exc.value.violations) >= 2


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError) as exc:
        cfgmod.loads(SMALL_SHAPE.replace("[optimizer]", "[optimizer]\nmomentum = 0.9"))
    assert any("momentum" in v for v in exc.value.violations)


def test_malformed_toml():
    with pytest.raises(ConfigError):
        cfgmod.loads("name = ")


def test_unreadable_file_is_an_io_error(tmp_path):
    with pytest.raises(OutputError):
        cfgmod.load_config(tmp_path / "nope.cfg")
