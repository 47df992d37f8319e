import json

import numpy as np
import pytest

from gazecnn import data as D
from gazecnn import harness as H
from gazecnn import model as M

FAST = dict(max_epochs=3, batch_size=8, patience=3, val_fraction=0.2)


def test_best_snapshot(tiny_samples):
    cfg = H.TrainConfig(**FAST)
    result = H.train(tiny_samples, cfg)
    _, val = H.validation_split(tiny_samples, cfg.val_fraction, cfg.seed)
    best = H.evaluate(result.net, val).mae_mean_deg
    maes = [h["val_mae"] for h in result.history]
    assert best == pytest.approx(min(maes), rel=1e-12)
    assert all(best <= m for m in maes[result.best_epoch - 1:])
    assert not result.train_subjects & result.val_subjects


def test_train_deterministic(tiny_samples):
    cfg = H.TrainConfig(**{**FAST, "max_epochs": 2})
    a, b = H.train(tiny_samples, cfg), H.train(tiny_samples, cfg)
    assert a.history == b.history
    assert M.to_bytes(a.net) == M.to_bytes(b.net)


def test_mirroring_doubles_training_rows(tiny_samples):
    cfg = H.TrainConfig(**{**FAST, "max_epochs": 1})
    train_part, _ = H.validation_split(tiny_samples, cfg.val_fraction, cfg.seed)
    on = H.train(tiny_samples, cfg)
    off = H.train(tiny_samples, H.TrainConfig(**{**FAST, "max_epochs": 1, "mirror": False}))
    n = len(train_part)
    assert on.history[0]["steps"] == -(-2 * n // cfg.batch_size)
    assert off.history[0]["steps"] == -(-n // cfg.batch_size)


def test_max_steps(tiny_samples):
    r = H.train(tiny_samples, H.TrainConfig(**{**FAST, "max_steps": 3}))
    assert r.steps == 3 and len(r.history) == 1


def test_overfit_reaches_half_degree(tiny_samples):
    subset = [s for s in tiny_samples if s.subject_id == tiny_samples[0].subject_id]
    subset = (subset + subset[:14])[:32] if len(subset) < 32 else subset[:32]
    cfg = H.TrainConfig(max_epochs=2000, batch_size=32, overfit=True, mirror=False,
                        patience=2000, target_mae=0.5, max_steps=2000)
    r = H.train(subset, cfg)
    assert r.steps <= 2000
    assert H.evaluate(r.net, subset).mae_mean_deg < 0.5


def test_evaluate_examples():
    net = M.zeros()
    img = np.zeros((3, 4, 4), np.uint8)
    samples = [D.GazeSample(img, img, (0, 0, 0), (1.0, -1.0), "a"),
               D.GazeSample(img, img, (0, 0, 0), (3.0, 3.0), "b")]
    rep = H.evaluate(net, samples)
    assert (rep.mae_mean_deg, rep.mae_std_deg, rep.max_error_deg, rep.n_samples) == (2.0, 1.0, 3.0, 2)
    perm = H.evaluate(net, samples[::-1])
    assert perm == rep


def test_evaluate_perfect_net():
    net = M.zeros()
    img = np.full((3, 5, 5), 77, np.uint8)
    samples = [D.GazeSample(img, img, (10, 0, 0), (0.0, 0.0), "a")] * 3
    assert H.evaluate(net, samples) == H.EvalReport(0.0, 0.0, 0.0, 3)
    with pytest.raises(ValueError):
        H.evaluate(net, [])


def test_cross_validate_partition(tiny_samples):
    cfg = H.TrainConfig(**{**FAST, "max_epochs": 1})
    cv = H.cross_validate(tiny_samples, 3, cfg)
    assert len(cv.folds) == 3
    assert cv.pooled.n_samples == len(tiny_samples)
    assert sum(r.n_samples for r in cv.folds) == len(tiny_samples)
    for train_s, test_s in cv.fold_subjects:
        assert not {D.base_subject(s) for s in train_s} & test_s
    all_test = set().union(*(t for _, t in cv.fold_subjects))
    assert all_test == set(D.subjects_of(tiny_samples))


def test_cross_validate_rejects_k1(tiny_samples):
    with pytest.raises(ValueError):
        H.cross_validate(tiny_samples, 1)


def test_cross_validate_threads_match_serial(tiny_samples):
    cfg = H.TrainConfig(**{**FAST, "max_epochs": 1, "max_steps": 2})
    a = H.cross_validate(tiny_samples, 2, cfg, jobs=1)
    b = H.cross_validate(tiny_samples, 2, cfg, jobs=2)
    assert a.folds == b.folds and a.pooled == b.pooled


def test_matrix_shape_and_leakage(tiny_domains):
    cfg = H.TrainConfig(**{**FAST, "max_epochs": 1, "max_steps": 2})
    res = H.cross_dataset_matrix(tiny_domains, cfg, k=4)
    rep = res.report
    assert rep.names == ["bright", "dim", "combined"]
    assert len(rep.cells) == 3 and all(len(row) == 3 for row in rep.cells)
    for tr in rep.names:
        train_base = {D.base_subject(s) for s in res.train_subjects[tr]}
        for te in rep.names:
            assert not train_base & res.test_subjects[te]
    assert res.test_subjects["combined"] == res.test_subjects["bright"] | res.test_subjects["dim"]
    assert rep.row_max("dim") == max(r.mae_mean_deg for r in rep.cells[1])


def test_matrix_rejects_reserved_name(tiny_domains):
    with pytest.raises(ValueError):
        H.cross_dataset_matrix({"combined": tiny_domains["dim"], "x": tiny_domains["bright"]})


def test_leakage_detected(tiny_samples):
    with pytest.raises(H.LeakageError):
        H._check_disjoint(tiny_samples[:5], [D.mirror_augment(tiny_samples[0])])


def test_config_validation():
    for bad in ({"patience": 0}, {"val_fraction": 1.0}, {"batch_size": 0},
                {"precision": "half"}):
        with pytest.raises(ValueError):
            H.TrainConfig(**bad)


def test_report_files(tmp_path):
    r = H.EvalReport(1.5, 0.5, 2.0, 4)
    cv = H.CVResult([r, r], r, [])
    H.write_cv_report(tmp_path, cv)
    lines = (tmp_path / "crossval.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 and lines[-1].startswith("pooled,")
    assert json.loads((tmp_path / "crossval.json").read_text())["k"] == 2
    mat = H.MatrixReport(["a", "b", "combined"], [[r] * 3] * 3)
    H.write_matrix_report(tmp_path, mat)
    assert len((tmp_path / "matrix.csv").read_text().splitlines()) == 1 + 9
    H.write_eval_report(tmp_path, r)
    assert json.loads((tmp_path / "eval.json").read_text())["n_samples"] == 4
