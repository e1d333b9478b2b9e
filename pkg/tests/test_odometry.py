import math

import numpy as np
import pytest

from dlo.errors import FormatError
from dlo.heightgrid import GridConfig
from dlo.lie import Pose, compose, exp_map
from dlo.odometry import (
    OdometryConfig,
    Trajectory,
    read_trajectory,
    run_odometry,
    write_trajectory,
)
from dlo.pointcloud import Scan
from dlo.registration import SolverConfig
from dlo.synth import SensorModel, loop_scene, render_sequence, render_scan, straight_line

from conftest import rng_for


def random_trajectory(rng, n: int = 20) -> Trajectory:
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(compose(poses[-1], exp_map(np.concatenate([rng.normal(0, 1, 3), rng.normal(0, 0.1, 3)]))))
    return Trajectory(enumerate(poses), timestamps=0.1 * np.arange(n))


@pytest.fixture(scope="module")
def street():
    """Six LiDAR frames, 0.5 m apart, along a street of the loop scene."""
    scene = loop_scene(seed=1, clutter=120)
    return render_sequence(scene, SensorModel(), straight_line(6, 0.5, start=(6.0, 0.0)))


# --- trajectory type ------------------------------------------------------------------


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory([(0, exp_map([1, 0, 0, 0, 0, 0]))])
    with pytest.raises(ValueError):
        Trajectory([(0, Pose.identity()), (0, Pose.identity())])
    t = Trajectory([(0, Pose.identity()), (3, exp_map([1, 0, 0, 0, 0, 0]))])
    assert t.frames == [0, 3]
    assert np.allclose(t.path_lengths(), [0, 1])


def test_relative_motions_compose_to_final_pose():
    t = random_trajectory(rng_for(0), 50)
    acc = Pose.identity()
    for m in t.relative_motions():
        acc = compose(acc, m)
    assert np.abs(acc.matrix - t[-1].matrix).max() < 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        OdometryConfig(motion_prior="zero-velocity")


# --- trajectory files -------------------------------------------------------------------


def test_identity_kitti_line(tmp_path):
    write_trajectory(Trajectory([(0, Pose.identity())]), tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_text() == "1 0 0 0 0 1 0 0 0 0 1 0\n"


@pytest.mark.parametrize("fmt", ["kitti", "tum"])
def test_trajectory_file_round_trip(tmp_path, fmt):
    t = random_trajectory(rng_for(1))
    write_trajectory(t, tmp_path / "t.txt", fmt)
    back = read_trajectory(tmp_path / "t.txt", fmt)
    assert len(back) == len(t)
    for a, b in zip(back.poses, t.poses):
        assert np.abs(a.matrix - b.matrix).max() < 1e-9
    if fmt == "tum":
        assert np.allclose(back.timestamps, t.timestamps, atol=0)
        assert len((tmp_path / "t.txt").read_text().splitlines()[0].split()) == 8


def test_empty_trajectory_writes_empty_file(tmp_path):
    write_trajectory(Trajectory(), tmp_path / "t.txt")
    assert (tmp_path / "t.txt").read_bytes() == b""


def test_malformed_trajectory_files(tmp_path):
    f = tmp_path / "t.txt"
    f.write_text("1 0 0\n")
    with pytest.raises(FormatError):
        read_trajectory(f)
    f.write_text("1 0 0 0 0 1 0 0 0 0 1 x\n")
    with pytest.raises(FormatError):
        read_trajectory(f)
    with pytest.raises(FormatError):
        write_trajectory(Trajectory(), f, "csv")


# --- running odometry ----------------------------------------------------------------------


def test_identical_scans_give_identity(street):
    scans, _ = street
    res = run_odometry([scans[0]] * 4)
    assert res.trajectory.frames == [0, 1, 2, 3]
    for p in res.trajectory.poses:
        assert np.linalg.norm(p.t) <= 1e-6
    assert not res.failed_frames


def test_needs_two_scans(street):
    scans, _ = street
    with pytest.raises(ValueError):
        run_odometry(scans[:1])
    with pytest.raises(ValueError):
        run_odometry([])


def test_short_street_sequence_tracks_ground_truth(street):
    scans, gt = street
    res = run_odometry(scans)
    err = np.linalg.norm(res.trajectory.positions - gt.positions, axis=1)
    assert err.max() < 0.1
    assert all(d.converged for d in res.diagnostics)
    assert all(d.runtime_s > 0 for d in res.diagnostics)
    assert all(d.ground_leveled for d in res.diagnostics)


def test_failed_frame_falls_back_to_prior(street):
    scans, _ = street
    # a frame of bare ground has no semi-dense cells
    xy = rng_for(2).uniform(-15, 15, size=(200_000, 2))
    ground = Scan(np.column_stack([xy, np.full(len(xy), -1.7)]))
    seq = [scans[0], scans[1], ground, scans[3]]
    res = run_odometry(seq)
    d = res.diagnostics[2]
    assert d.fallback and d.error == "InsufficientResiduals"
    assert res.failed_frames == [2, 3]
    motions = res.trajectory.relative_motions()
    # constant-velocity prior: the failed step repeats the previous motion
    assert np.allclose(motions[1].matrix, motions[0].matrix, atol=1e-12)


def test_identity_prior_fallback(street):
    scans, _ = street
    xy = rng_for(3).uniform(-15, 15, size=(200_000, 2))
    ground = Scan(np.column_stack([xy, np.full(len(xy), -1.7)]))
    res = run_odometry([scans[0], ground], OdometryConfig(motion_prior="identity"))
    assert res.trajectory[1].is_close(Pose.identity(), atol=0)


def test_odometry_is_deterministic(street):
    scans, _ = street
    a = run_odometry(scans[:4])
    b = run_odometry(scans[:4])
    for p, q in zip(a.trajectory.poses, b.trajectory.poses):
        assert np.array_equal(p.matrix, q.matrix)
    c = run_odometry(scans[:4], OdometryConfig(solver=SolverConfig(workers=2, chunk_size=128)))
    for p, q in zip(a.trajectory.poses, c.trajectory.poses):
        assert np.abs(p.matrix - q.matrix).max() <= 1e-12


def test_straight_street_drifts_less_than_one_percent():
    side = 25 + (2 - math.pi / 2) * 5
    scene = loop_scene(side=side, seed=0, clutter=120)
    scans, gt = render_sequence(scene, SensorModel(), straight_line(30, 0.5, start=(5.0, 0.0)))
    res = run_odometry(scans)
    err = np.linalg.norm(res.trajectory.positions[-1] - gt.positions[-1])
    assert not res.failed_frames
    assert err / gt.path_lengths()[-1] < 0.01
