import pytest

SMALL_CONFIG = """\
# compact case used by the tool-level tests
phantom.dims = 32 32 32
phantom.spacing = 4.0
phantom.body_semiaxes = 44 40 42
phantom.prostate_radius = 10
phantom.bladder_center = 0 -22 5
phantom.bladder_radius = 11
phantom.rectum_center = 0 18 0
phantom.rectum_radius = 6
phantom.rectum_half_length = 22
phantom.seed = 7
arc.n_cp = 24
arc.bev_fov = 120
optimizer.max_iters = 8
"""


@pytest.fixture(scope="session")
def small_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture(scope="session")
def small_settings(small_config_path):
    from arcplan.config import load_settings

    return load_settings(small_config_path)
