import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dawm.envs import generate_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    """20 medium PointMass2D episodes (1000 transitions)."""
    return generate_dataset("pointmass2d", "medium", 20, seed=7)


_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown" or (rep.when == "setup" and rep.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _CRITERIA[mark.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k.split("-")[1])):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{key:6s} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    """A RunConfig small enough for a full run in a second or two."""
    from dawm.agents import AgentConfig
    from dawm.diffusion import DiffusionConfig
    from dawm.idm import IdmConfig
    from dawm.pipeline import RunConfig, SynthesisConfig
    base = dict(n_episodes=6, eval_episodes=4,
                diffusion=DiffusionConfig(width=8, n_blocks=1, emb_dim=8, steps=40, batch_size=16),
                idm=IdmConfig(hidden=16, steps=40, batch_size=32),
                agent=AgentConfig(hidden=16, steps=40, batch_size=32),
                synthesis=SynthesisConfig(horizon=3, chunk=64))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config
