import numpy as np
import pytest

from tpcost.errors import DimensionMismatch, TooFewPoints, TooFewTasks
from tpcost.sampling import (ClusterModel, TaskFeatureSet,
                             build_distance_table, kmeans, select_tasks)

FIVE_POINTS = np.array([0.0, 0.1, 5.0, 10.0, 10.1])
INIT = np.array([0.05, 10.05])


def _tasks():
    return [TaskFeatureSet("A", np.array([[0.0], [0.1]])),
            TaskFeatureSet("B", np.array([[10.0], [10.1]])),
            TaskFeatureSet("C", np.array([[5.0]]))]


# ---------------------------------------------------------------------------
# kmeans
# ---------------------------------------------------------------------------

def test_kmeans_saturated():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [5.0, -1.0]])
    model = kmeans(x, kappa=4, seed=0)
    assert sorted(model.sizes.tolist()) == [1, 1, 1, 1]
    inertia = 0.0
    for i, c in enumerate(model.assignment):
        inertia += float(((x[i] - model.centers[c]) ** 2).sum())
    assert inertia == 0.0


def test_kmeans_single_cluster_is_mean(rng):
    x = rng.normal(size=(40, 3))
    model = kmeans(x, kappa=1, seed=1)
    assert np.allclose(model.centers[0], x.mean(axis=0), atol=1e-12)
    assert model.sizes.tolist() == [40]


def test_kmeans_hand_run_from_stated_centers():
    model = kmeans(FIVE_POINTS, kappa=2, seed=0, init_centers=INIT)
    assert model.sizes.tolist() == [3, 2]
    assert model.centers[0, 0] == pytest.approx(1.7, abs=1e-12)
    assert model.centers[1, 0] == pytest.approx(10.05, abs=1e-12)
    assert model.assignment.tolist() == [0, 0, 0, 1, 1]


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(50, 4))
    a = kmeans(x, 5, seed=9)
    b = kmeans(x, 5, seed=9)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.assignment, b.assignment)


def test_kmeans_too_few_points():
    with pytest.raises(TooFewPoints):
        kmeans(np.zeros((2, 2)), kappa=3, seed=0)


def test_kmeans_repairs_empty_cluster():
    # duplicate initial centers force an empty cluster on the first pass
    x = np.array([[0.0], [0.0], [0.0], [9.0]])
    model = kmeans(x, kappa=2, seed=0, init_centers=np.array([[0.0], [0.0]]))
    assert min(model.sizes) >= 1


# ---------------------------------------------------------------------------
# distance table
# ---------------------------------------------------------------------------

def test_distance_table_zero_for_matching_center():
    clusters = ClusterModel(centers=np.array([[5.0]]),
                            assignment=np.zeros(1, dtype=int),
                            sizes=np.array([1]))
    table = build_distance_table(clusters, [TaskFeatureSet("C",
                                                           np.array([[5.0]]))])
    assert table.psi[0, 0] == 0.0


def test_distance_table_hand_values():
    clusters = ClusterModel(centers=np.array([[1.7], [10.05]]),
                            assignment=np.array([0, 0, 0, 1, 1]),
                            sizes=np.array([3, 2]))
    table = build_distance_table(clusters, _tasks())
    assert table.psi[0, 0] == pytest.approx(1.65, abs=1e-12)  # task A
    assert table.psi[0, 2] == pytest.approx(3.3, abs=1e-12)  # task C
    assert table.psi[0, 1] == pytest.approx(8.35, abs=1e-12)  # task B
    assert table.psi[1, 1] == pytest.approx(0.05, abs=1e-12)


def test_distance_table_scaling_homogeneity(rng):
    centers = rng.normal(size=(3, 2))
    tasks = [TaskFeatureSet(f"t{i}", rng.normal(size=(4, 2)))
             for i in range(5)]
    clusters = ClusterModel(centers=centers, assignment=np.zeros(1, int),
                            sizes=np.array([1, 1, 1]))
    base = build_distance_table(clusters, tasks).psi
    s = 3.7
    scaled_clusters = ClusterModel(centers=s * centers,
                                   assignment=np.zeros(1, int),
                                   sizes=np.array([1, 1, 1]))
    scaled_tasks = [TaskFeatureSet(t.task_id, s * t.features) for t in tasks]
    scaled = build_distance_table(scaled_clusters, scaled_tasks).psi
    assert np.allclose(scaled, s * base, rtol=1e-12)


def test_distance_table_matches_bruteforce(rng):
    centers = rng.normal(size=(4, 3))
    tasks = [TaskFeatureSet(f"t{i}", rng.normal(size=(int(rng.integers(1, 7)), 3)))
             for i in range(6)]
    clusters = ClusterModel(centers=centers, assignment=np.zeros(1, int),
                            sizes=np.ones(4, int))
    psi = build_distance_table(clusters, tasks).psi
    for e in range(4):
        for t, task in enumerate(tasks):
            total = 0.0
            for row in task.features:
                total += float(np.sqrt(((centers[e] - row) ** 2).sum()))
            assert abs(psi[e, t] - total / len(task.features)) < 1e-9


def test_distance_table_dimension_mismatch():
    clusters = ClusterModel(centers=np.zeros((2, 3)),
                            assignment=np.zeros(1, int),
                            sizes=np.array([1, 1]))
    with pytest.raises(DimensionMismatch):
        build_distance_table(clusters,
                             [TaskFeatureSet("x", np.zeros((2, 2)))])


# ---------------------------------------------------------------------------
# select_tasks
# ---------------------------------------------------------------------------

def test_select_single_task():
    selected = select_tasks(FIVE_POINTS, 1, _tasks(), seed=0)
    assert len(selected) == 1
    # with one cluster the center is the global mean (5.04); task C at 5.0
    # is nearest on average
    assert selected == ["C"]


def test_select_tasks_hand_example():
    selected = select_tasks(FIVE_POINTS, 2, _tasks(), seed=0,
                            init_centers=INIT)
    assert selected == ["A", "B"]


def test_select_all_tasks_is_permutation(rng):
    x = rng.normal(size=(12, 2))
    tasks = [TaskFeatureSet(f"t{i}", x[4 * i:4 * i + 4]) for i in range(3)]
    selected = select_tasks(x, 3, tasks, seed=2)
    assert sorted(selected) == ["t0", "t1", "t2"]


def test_select_tasks_deterministic(rng):
    x = rng.normal(size=(30, 3))
    tasks = [TaskFeatureSet(f"t{i}", x[5 * i:5 * i + 5]) for i in range(6)]
    a = select_tasks(x, 4, tasks, seed=7)
    b = select_tasks(x, 4, tasks, seed=7)
    assert a == b


def test_select_tasks_too_few():
    with pytest.raises(TooFewTasks):
        select_tasks(FIVE_POINTS, 4, _tasks(), seed=0)
