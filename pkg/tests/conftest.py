import math

import numpy as np
import pytest

from apgsim.core import (
    AgentState,
    DynamicsKind,
    Polyline,
    Scenario,
    SimState,
    Trajectory,
)


def make_line_scenario(
    n_agents=1,
    history=2,
    horizon=6,
    speed=4.0,
    dynamics=DynamicsKind.BICYCLE,
    controlled=None,
    dt=0.1,
    lane_gap=6.0,
    half_width=3.0,
    scenario_id="line",
):
    """Constant-velocity straight-line log; feasible under both dynamics models."""
    n_steps = history + horizon + 1
    controlled = tuple(True for _ in range(n_agents)) if controlled is None else tuple(controlled)
    states = []
    for t in range(n_steps):
        agents = []
        for i in range(n_agents):
            agents.append(AgentState(
                x=1.0 + speed * dt * t + 10.0 * i,
                y=0.0,
                yaw=0.0,
                vx=speed,
                vy=0.0,
                length=4.0,
                width=1.8,
            ))
        states.append(SimState(t, tuple(agents), (True,) * n_agents, controlled))
    road = Polyline(np.array([[-5.0, 0.0], [60.0 + 10.0 * n_agents, 0.0]]), half_width)
    return Scenario(
        id=scenario_id,
        roadgraph=(road,),
        log=Trajectory(tuple(states), dt),
        is_modeled=(True,) * n_agents,
        dynamics=dynamics,
        history_len=history,
        horizon=horizon,
    )


@pytest.fixture
def line_scenario():
    return make_line_scenario()


def rand_agent_state(rng, span=20.0):
    return AgentState(
        x=rng.uniform(-span, span),
        y=rng.uniform(-span, span),
        yaw=rng.uniform(-3.0, 3.0),
        vx=rng.uniform(-10, 10),
        vy=rng.uniform(-10, 10),
        length=rng.uniform(0.5, 3.0),
        width=rng.uniform(0.5, 3.0),
    )
