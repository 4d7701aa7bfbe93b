import numpy as np
import pytest

from ddctree.panel import Panel
from ddctree.simulator import DgpConfig, sim1_truth, simulate


def random_panel(rng, n_agents=None, n_dims=None, max_obs=200, n_x=4, n_choices=2, integer_q=True):
    """Small random panel with consecutive periods per agent."""
    n_agents = n_agents or int(rng.integers(2, 8))
    n_dims = n_dims or int(rng.integers(1, 5))
    lengths = rng.integers(2, max(3, max_obs // n_agents), n_agents)
    agent = np.repeat(np.arange(n_agents), lengths)
    period = np.concatenate([np.arange(1, m + 1) for m in lengths])
    n = agent.shape[0]
    x = rng.integers(1, n_x + 1, n)
    d = rng.integers(0, n_choices, n)
    q = rng.integers(0, 6, (n, n_dims)).astype(float) if integer_q else rng.random((n, n_dims))
    return Panel(agent, period, x, d, q, n_choices=n_choices, x_range=(1, n_x))


@pytest.fixture
def toy_panel():
    # agent 0 sits at q = 0, agent 1 at q = 1
    return Panel(
        agent=[0, 0, 0, 1, 1, 1],
        period=[1, 2, 3, 1, 2, 3],
        x=[1, 2, 1, 1, 2, 2],
        d=[0, 1, 0, 0, 0, 1],
        q=[[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]],
    )


@pytest.fixture(scope="session")
def sim_panel():
    """Dissimilar/dissimilar study-1 panel with random covariate moves (80 buses x 40 periods)."""
    cfg = DgpConfig(sim1_truth(True, True, n_dims=4), "random", n_buses=80, n_periods=40, seed=3)
    return cfg, simulate(cfg)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
