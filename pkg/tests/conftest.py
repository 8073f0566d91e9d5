import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from morel.scenegen import SceneSpec, generate  # noqa: E402
from morel.store import AnchorStore  # noqa: E402
from morel.training import ModelConfig, PointConfig, RunConfig, TrainPlan, Trainer  # noqa: E402

# A 12-frame, 40x40 scene with all three actors; GOP 4 gives three key frames.
SMALL_SCENE = SceneSpec(frames=12, width=40, height=40, views=2, n_static=6, circle_center=(14.0, 24.0),
                        circle_radius=5.0, circle_period=12, linear_start=(8.0, 8.0),
                        transient_start=(26.0, 26.0), transient_window=(3, 9))

TINY = RunConfig(
    plan=TrainPlan(frames=12, gop=4, eps=1, iters_gca=40, iters_kfa=12, iters_pwd=12, iters_ifb=8),
    model=ModelConfig(feature_dim=6, n_offsets=2, hidden=8, grid_voxel=6.0, field_resolution=4,
                      field_time_resolution=4, field_channels=3, field_hidden=6),
    points=PointConfig(frames=3, per_frame=120),
    log_interval=4,
)


@pytest.fixture(scope="session")
def small_data():
    return generate(SMALL_SCENE)


@pytest.fixture(scope="session")
def tiny_run(small_data, tmp_path_factory):
    """Fully trained tiny store plus a snapshot of every bundle after each stage."""
    root = tmp_path_factory.mktemp("tiny")
    store = AnchorStore(root)
    snapshots = {}

    def on_end(stage, n):
        snapshots[f"{stage}:{n}"] = {p.name: p.read_bytes() for p in root.glob("*.morl")}

    Trainer(small_data, store, TINY, on_stage_end=on_end).run()
    return store, snapshots


_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    return request.config.stash.setdefault(_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
