import json

import numpy as np
import pytest

import pami


def test_partition_covers_the_mask_with_disjoint_regions():
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[4:20, 6:18] = 1
    labels, seeds = pami.partition(mask, n_f=9, seed=3)
    assert labels.shape == mask.shape
    assert len(seeds) == 9
    assert set(np.unique(labels[mask == 1])) == set(range(9))
    assert np.all(labels[mask == 0] == -1)
    again, _ = pami.partition(mask, n_f=9, seed=3)
    assert np.array_equal(labels, again)


def test_empty_mask_raises_with_a_code():
    with pytest.raises(pami.PamiError) as info:
        pami.partition(np.zeros((8, 8)), n_f=4)
    assert info.value.args[0] == "empty-foreground"


def test_dice():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:2] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[:, :2] = 1
    assert pami.dice(a, a) == 1.0
    assert pami.dice(a, b) == pytest.approx(0.5)


def test_train_step_evaluate_and_predict(tmp_path):
    data = pami.Dataset.synthetic(n_scans=5, slices=9, height=32, width=32, seed=1)
    assert len(data.scan_ids) == 5
    trainer = pami.make_trainer(data, channels=16, n_f=8, m_modules=1, iterations=3, setting=1)
    it, lr, loss = trainer.step()
    assert it == 0 and lr == pytest.approx(1e-3) and np.isfinite(loss)
    assert trainer.iteration == 1

    table = json.loads(trainer.evaluate(data, fold=0))
    assert len(table["classes"]) == 4

    episode = data.eval_episodes(0, 1)[0]
    pred, soft = trainer.predict(episode, seed=2)
    assert pred.shape == soft.shape == episode["query"].shape
    assert soft.min() >= 0.0 and soft.max() <= 1.0
    assert np.array_equal(pred, (soft >= 0.5).astype(pred.dtype))

    trainer.save(tmp_path / "ck.bin")
    assert (tmp_path / "ck.bin").stat().st_size > 0


def test_unknown_config_key_is_rejected():
    with pytest.raises(KeyError):
        pami.train_config(frobnicate=1)


def test_cli_round_trip(tmp_path):
    code, _, _ = pami.cli("synth", "--out", tmp_path / "d", "--scans", 5, "--slices", 9, "--height", 32, "--width", 32)
    assert code == 0
    assert (tmp_path / "d" / "manifest.json").exists()
    assert pami.cli("frobnicate")[0] == 2


def test_nested_lists_are_accepted_as_masks():
    assert pami.dice([[1, 0], [0, 1]], [[1, 0], [0, 0]]) == pytest.approx(2 / 3)
