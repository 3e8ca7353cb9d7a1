import numpy as np
import pytest

from oicrkit.netcore import ModelDims, checkpoint_bytes, init_model
from oicrkit.oicr import OicrConfig
from oicrkit.synthdata import SceneConfig, generate_dataset
from oicrkit.trainer import (BatchSampler, NonFiniteLossError, TrainConfig, default_schedule,
                             log_to_csv, train_run)


@pytest.fixture(scope="module")
def bags():
    return generate_dataset(SceneConfig(images=20, seed=5))


def test_default_schedule_splits_four_sevenths():
    assert default_schedule(3500, 0.001) == [(2000, 0.001), (1500, 0.0001)]
    assert sum(n for n, _ in default_schedule(7)) == 7


def test_sampler_visits_each_image_once_per_epoch():
    s = BatchSampler(7, 0)
    seen = s.next_batch(7)
    assert sorted(seen) == list(range(7))
    again = BatchSampler(7, 0).next_batch(21)
    assert again[:7] == seen and sorted(again[7:14]) == list(range(7))


def test_zero_learning_rate_leaves_params(bags):
    cfg = TrainConfig(total_iterations=20, schedule=[(20, 0.0)], oicr=OicrConfig(2))
    init = init_model(ModelDims(32, cfg.hidden, 4, 2), cfg.seed)
    params, _ = train_run(bags, cfg)
    assert checkpoint_bytes(params) == checkpoint_bytes(init)


def test_zero_iterations_returns_init(bags):
    cfg = TrainConfig(total_iterations=0, oicr=OicrConfig(1))
    params, rows = train_run(bags, cfg)
    assert rows == []
    assert checkpoint_bytes(params) == checkpoint_bytes(init_model(ModelDims(32, 64, 4, 1), 0))


def test_training_is_deterministic(bags):
    cfg = TrainConfig(total_iterations=60, oicr=OicrConfig(2), seed=3)
    p1, r1 = train_run(bags, cfg)
    p2, r2 = train_run(bags, cfg)
    assert checkpoint_bytes(p1) == checkpoint_bytes(p2)
    assert log_to_csv(r1, 2) == log_to_csv(r2, 2)


def test_loss_decreases(bags):
    cfg = TrainConfig(total_iterations=400, oicr=OicrConfig(2), seed=1)
    _, rows = train_run(bags, cfg)
    assert [r.iteration for r in rows[:2]] == [50, 100]
    assert rows[-1].iteration == 400
    assert rows[-1].loss_total < rows[0].loss_total
    for r in rows:
        assert r.loss_total == pytest.approx(r.loss_base + sum(r.loss_refine))


def test_log_csv_layout(bags):
    _, rows = train_run(bags, TrainConfig(total_iterations=75, oicr=OicrConfig(3)))
    lines = log_to_csv(rows, 3).splitlines()
    assert lines[0] == "iter,lr,loss_total,loss_base,loss_r1,loss_r2,loss_r3"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["50", "75"]


def test_non_finite_loss_aborts(bags):
    first = bags[0]
    feats = first.features.copy()
    feats[:] = np.nan
    broken = [type(first)(first.image_id, first.proposals, feats, first.label, first.ground_truth)]
    with pytest.raises(NonFiniteLossError, match="iteration 1"):
        train_run(broken, TrainConfig(total_iterations=5, oicr=OicrConfig(1)))


def test_unlabelled_image_rejected(bags):
    b = bags[0]
    empty = type(b)(b.image_id, b.proposals, b.features, np.zeros_like(b.label), [])
    with pytest.raises(ValueError):
        train_run([empty], TrainConfig(total_iterations=1))


def test_default_run_lowers_loss():
    bags = generate_dataset(SceneConfig())
    _, rows = train_run(bags, TrainConfig())
    assert rows[0].iteration == 50 and rows[-1].iteration == 3500
    assert rows[-1].loss_total < rows[0].loss_total
