import json

import numpy as np
import pytest
from scipy import stats

from ric_lab import taskgen
from ric_lab.taskgen import TaskSpec


def test_far_separated_gaussians_have_near_onehot_posteriors():
    spec = TaskSpec(kind="gaussian-mixture", num_classes=2, dim=2, overlap=1.0,
                    separation=20.0, n_train=4000, n_val=0, n_test=0, seed=1)
    post = taskgen.generate(spec).train.posterior
    extreme = (post.max(axis=1) > 0.999)
    assert extreme.mean() > 0.999


def test_separable_task_has_perfect_linear_classifier():
    spec = TaskSpec(kind="separable-linear", num_classes=3, dim=4, margin=1.0,
                    n_train=2000, n_val=200, n_test=200, seed=5)
    task = taskgen.generate(spec)
    for ds in (task.train, task.val, task.test):
        scores = ds.X @ task.true_weights.T + task.true_bias
        assert np.all(scores.argmax(axis=1) == ds.y)
        top = np.sort(scores, axis=1)
        assert np.all(top[:, -1] - top[:, -2] >= 1.0 - 1e-9)


@pytest.mark.parametrize("kind", taskgen.GENERATORS)
def test_empty_splits_allowed(kind):
    task = taskgen.generate(TaskSpec(kind=kind, n_train=20, n_val=0, n_test=0))
    assert len(task.val) == 0 and task.val.dim == task.train.dim


def test_noise_rate_reproduced_on_ten_classes():
    spec = TaskSpec(kind="gaussian-mixture", num_classes=10, dim=10, overlap=0.05,
                    noise_rate=0.4021, n_train=20000, n_val=0, n_test=0, seed=2)
    train = taskgen.generate(spec).train
    flipped = train.y != train.posterior.argmax(axis=1)
    assert abs(flipped.mean() - 0.4021) < 0.01


def test_zero_noise_is_identity():
    spec = TaskSpec(n_train=100, n_val=10, n_test=10)
    ds = taskgen.generate(spec).train
    assert taskgen.inject_label_noise(ds, 0.0, 3) is ds


def test_noise_flip_fraction_and_uniform_other_class():
    ds = taskgen.Dataset(np.zeros((50000, 1)), np.zeros(50000, dtype=int), 4)
    noisy = taskgen.inject_label_noise(ds, 0.0903, 11)
    frac = np.mean(noisy.y != 0)
    assert abs(frac - 0.0903) < 0.01
    counts = np.bincount(noisy.y[noisy.y != 0], minlength=4)[1:]
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.array_equal(noisy.clean_y, ds.y)


def test_half_noise_two_classes_bayes_rule_accuracy():
    # uniform-other-class flipping at 0.5 with K=2 swaps every other label
    spec = TaskSpec(kind="gaussian-mixture", num_classes=2, dim=2, overlap=0.1,
                    noise_rate=0.5, n_train=40000, n_val=0, n_test=0, seed=4)
    tr = taskgen.generate(spec).train
    acc = np.mean(tr.posterior.argmax(axis=1) == tr.y)
    assert abs(acc - 0.5) < 0.01


def test_generation_is_deterministic():
    spec = TaskSpec(kind="ring", num_classes=3, dim=3, overlap=0.3, n_train=300,
                    n_val=50, n_test=50, noise_rate=0.1, seed=9)
    a, b = taskgen.generate(spec), taskgen.generate(spec)
    for name in taskgen.SPLITS:
        assert a.split(name).X.tobytes() == b.split(name).X.tobytes()
        assert a.split(name).y.tobytes() == b.split(name).y.tobytes()


@pytest.mark.parametrize("kind", taskgen.GENERATORS)
def test_posteriors_are_distributions(kind):
    spec = TaskSpec(kind=kind, num_classes=4, dim=3, overlap=0.4, n_train=500,
                    n_val=10, n_test=10, seed=0)
    post = taskgen.generate(spec).train.posterior
    assert np.all(post >= 0)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_empirical_labels_match_posterior_in_a_cell():
    spec = TaskSpec(kind="gaussian-mixture", num_classes=3, dim=2, overlap=0.5,
                    n_train=100000, n_val=0, n_test=0, seed=8)
    tr = taskgen.generate(spec).train
    cell = np.all(np.abs(tr.X - np.array([0.2, -0.1])) < 0.15, axis=1)
    observed = np.bincount(tr.y[cell], minlength=3)
    expected = tr.posterior[cell].sum(axis=0)
    assert cell.sum() > 500
    assert stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue > 0.01


def test_bayes_error_matches_monte_carlo():
    spec = TaskSpec(kind="gaussian-mixture", num_classes=3, dim=2, overlap=0.6,
                    n_train=100000, n_val=0, n_test=0, seed=6)
    tr = taskgen.generate(spec).train
    empirical = np.mean(tr.posterior.argmax(axis=1) != tr.y)
    assert abs(empirical - taskgen.bayes_error(tr)) < 0.01


@pytest.mark.parametrize("bad", [
    dict(num_classes=1), dict(noise_rate=1.0), dict(overlap=0.0), dict(n_train=0),
    dict(kind="spiral"),
])
def test_degenerate_specs_rejected(bad):
    with pytest.raises(taskgen.TaskError):
        taskgen.generate(TaskSpec(**bad))


def test_overlap_controls_entropy():
    spec = TaskSpec(kind="gaussian-mixture", num_classes=3, dim=2, overlap=1 / 3,
                    n_train=20000, n_val=0, n_test=0, seed=0)
    h = taskgen.mean_entropy(taskgen.generate(spec).train)
    assert 0.25 < h < 0.35


def test_load_csv_examples(tmp_path):
    good = tmp_path / "good.csv"
    good.write_text("0.1,0.2,0\n1.5,-2,1\n3,4,1\n")
    ds = taskgen.load_csv(good, num_classes=2, dim=2)
    assert len(ds) == 3 and ds.posterior is None
    assert ds[1].label == 1 and ds[1].bayes_posterior is None

    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,0.2,0\n0.3,0.4,2\n")
    with pytest.raises(taskgen.CSVFormatError) as info:
        taskgen.load_csv(bad, num_classes=2)
    assert info.value.line == 2

    nonnum = tmp_path / "nonnum.csv"
    nonnum.write_text("0.1,abc,0\n")
    with pytest.raises(taskgen.CSVFormatError, match=":1:"):
        taskgen.load_csv(nonnum, num_classes=2)

    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert len(taskgen.load_csv(empty, num_classes=2)) == 0

    with pytest.raises(FileNotFoundError):
        taskgen.load_csv(tmp_path / "missing.csv", num_classes=2)


def test_export_import_round_trip(tmp_path):
    spec = TaskSpec(kind="gaussian-mixture", num_classes=3, noise_rate=0.2,
                    n_train=50, n_val=20, n_test=20, seed=3)
    task = taskgen.generate(spec)
    taskgen.export_task(task, tmp_path)
    side = json.loads((tmp_path / "task.json").read_text())
    assert side["spec"]["num_classes"] == 3
    back = taskgen.import_task(tmp_path)
    for name in taskgen.SPLITS:
        a, b = task.split(name), back.split(name)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.posterior, b.posterior)
        assert np.array_equal(a.clean_y, b.clean_y)
