import pytest

from routeseg.model import ModelConfig

CONFIGS_DIR = "configs"


def micro_config(**overrides) -> ModelConfig:
    """Smallest legal geometry; single-block stages keep forwards cheap."""
    base = dict(in_channels=1, num_classes=2, base_channels=8,
                stage_depths=(1, 0, 0, 0, 0, 0, 1), s=2, input_hw=32)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def gradcheck_reports():
    # one run shared by the unit test and the acceptance criterion
    from routeseg.gradcheck import run_standard_suite
    return run_standard_suite(step=1e-4, tol=1e-3)
