import numpy as np
import pytest

from patchkit.kitti import KittiDataset
from patchkit.synthetic import write_dataset


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    """Synthetic KITTI-layout dataset shared by the whole session."""
    root = tmp_path_factory.mktemp("kitti")
    write_dataset(root, num_frames=8, cars_per_frame=3, seed=1234)
    return root


@pytest.fixture(scope="session")
def dataset(dataset_root):
    return KittiDataset(dataset_root)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)


def random_box(rng, center_span=4.0, z=0.0):
    from patchkit.boxes import OrientedBox3D

    return OrientedBox3D(
        cx=float(rng.uniform(-center_span, center_span)),
        cy=float(rng.uniform(-center_span, center_span)),
        cz=z + float(rng.uniform(-0.5, 0.5)),
        l=float(rng.uniform(1.5, 4.5)),
        w=float(rng.uniform(1.0, 2.5)),
        h=float(rng.uniform(1.0, 2.0)),
        yaw=float(rng.uniform(-np.pi, np.pi)),
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = []
    for key in ("passed", "failed"):
        reports.extend(
            r for r in terminalreporter.stats.get(key, []) if "test_acceptance" in r.nodeid
        )
    if reports:
        terminalreporter.section("acceptance criteria")
        for r in sorted(reports, key=lambda rep: rep.nodeid):
            name = r.nodeid.split("::")[-1]
            terminalreporter.write_line(f"[{'PASS' if r.passed else 'FAIL'}] {name}")
