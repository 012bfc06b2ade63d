import pytest

from complseg.data import SynthConfig
from complseg.experiment import ExperimentConfig, ExperimentResult, SeedResult, pair_confusion, run_experiment

TINY = SynthConfig(n_train=6, n_val=3, n_test=4, height=32, width=32)


def seed_result(seed, seconds):
    dice = {"IL": 0.5, "EN": 0.4, "IL-mask-only": 0.45}
    return SeedResult(seed, dice, {}, {"IL": 0.1, "EN": 0.2, "IL-mask-only": 0.1}, {},
                      {"IL": seconds, "EN": 0.0, "IL-mask-only": 0.0})


def test_projected_runtime_schedules_longest_first():
    res = ExperimentResult({}, ("A", "B"), [seed_result(0, 10), seed_result(1, 7), seed_result(2, 5)],
                           0.5, 0.0, 600, runtime_s=24, setup_s=2, workers=1)
    assert res.projected_runtime(1) == 24
    assert res.projected_runtime(2) == 2 + 12
    assert res.projected_runtime(4) == 2 + 10
    assert res.wins("IL", "EN") == 3 and res.confusion_wins("IL", "EN") == 3


def test_pair_confusion_is_symmetric_mean():
    import numpy as np

    m = np.array([[0.8, 0.2, 0.0], [0.1, 0.9, 0.0], [0.0, 0.0, 1.0]])
    assert pair_confusion(m, 0, 1) == pytest.approx(0.15)
    assert pair_confusion(m, 1, 0) == pytest.approx(0.15)


def test_tiny_run_same_with_and_without_workers(tmp_path):
    cfg = dict(synth=TINY, seeds=(0, 1), epochs=2, width=4, depth=2)
    a = run_experiment(ExperimentConfig(workers=1, **cfg), tmp_path / "a")
    b = run_experiment(ExperimentConfig(workers=2, **cfg), tmp_path / "b")
    assert [s.mean_dice for s in a.seeds] == [s.mean_dice for s in b.seeds]
    assert a.pooled_p_il_vs_en == b.pooled_p_il_vs_en
    assert a.n_pooled_pairs == 2 * 4 * 4
    assert set(a.seeds[0].pair_confusion) == {"IL", "EN", "IL-mask-only"}
    assert '"pooled_p_il_vs_en"' in a.to_json()


def test_needs_exactly_one_pair(tmp_path):
    with pytest.raises(ValueError):
        run_experiment(ExperimentConfig(synth=SynthConfig(confusable_pairs=())), tmp_path)
