"""
Tests for the synthetic sparse-recovery sweeps
"""

import numpy as np
import pandas as pd
import pytest

from qsr.errors import DimensionMismatchError, InvalidGridError, ZeroVarianceError
from qsr.solvers import AnnealConfig
from qsr.synthbench import (
    CSV_COLUMNS,
    SweepConfig,
    SweepResult,
    default_grid,
    fit_design,
    generate_dataset,
    one_minus_r2,
    run_sweep,
    value_at_sparsity,
    write_sweep_csv,
    write_sweep_svg,
)

QUICK = SweepConfig(anneal=AnnealConfig(sweeps=16, reads=4), ensemble_reads=4)


def test_dataset_layout():
    data = generate_dataset(3)
    assert data.x_train.shape == (36, 100) and data.x_val.shape == (720, 100)
    assert data.y_train.shape == (36,) and data.y_val.shape == (720,)
    assert np.all(data.alpha_true >= 0) and data.alpha_true.size == 10
    assert np.allclose(data.x_val[:, :10] @ data.alpha_true, data.y_val)
    again = generate_dataset(3)
    assert np.array_equal(data.x_train, again.x_train) and np.array_equal(data.y_val, again.y_val)
    assert not np.array_equal(generate_dataset(4).x_train, data.x_train)


def test_one_minus_r2_values():
    y = np.array([1.0, 2.0, 3.0])
    assert one_minus_r2(y, y) == pytest.approx(0.0)
    assert one_minus_r2(np.full(3, 2.0), y) == pytest.approx(1.0)
    assert one_minus_r2(y[::-1], y) == pytest.approx(4.0)


def test_one_minus_r2_errors():
    with pytest.raises(ZeroVarianceError):
        one_minus_r2(np.array([1.0, 2.0]), np.array([5.0, 5.0]))
    with pytest.raises(DimensionMismatchError):
        one_minus_r2(np.ones(3), np.ones(4))


def test_default_grids():
    lasso = default_grid('lasso')
    assert lasso.size == 25 and lasso[0] == pytest.approx(1e-3) and lasso[-1] == pytest.approx(8.0)
    anneal = default_grid('classical_anneal')
    assert anneal.size == 25 and anneal[0] == 0.0 and anneal[-1] == pytest.approx(6.5)
    assert anneal[1] == pytest.approx(0.05)
    assert np.all(np.diff(anneal) > 0)


def test_fit_design_scales_target_to_unit_norm():
    data = generate_dataset(2)
    d, target, s = fit_design(data)
    assert d is data.x_train
    assert np.linalg.norm(target) == pytest.approx(1.0)
    assert s == pytest.approx(np.linalg.norm(data.y_train))
    assert np.allclose(d[:, :10] @ (data.alpha_true / s), target)


def test_lasso_fits_training_rows_better_than_validation_rows():
    result = run_sweep('lasso', [0.01, 0.1, 1.0], n_datasets=5)
    assert np.all(result.train_err.mean(axis=1) <= result.val_err.mean(axis=1))


def test_lasso_support_shrinks_as_lambda_grows():
    result = run_sweep('lasso', default_grid('lasso'), n_datasets=5)
    mean_l0 = result.l0.mean(axis=1)
    assert mean_l0[-1] < mean_l0[0]
    assert np.all(np.diff(mean_l0) <= 1.0)


def test_lasso_with_huge_lambda_is_empty():
    result = run_sweep('lasso', [100.0], n_datasets=3)
    assert np.all(result.l0 == 0)
    assert np.all(result.val_err >= 1.0 - 1e-9)


def test_single_point_sweep_frame():
    result = run_sweep('lasso', [0.05], n_datasets=2)
    frame = result.to_frame()
    assert list(frame.columns) == CSV_COLUMNS
    assert len(frame) == 1
    assert frame.loc[0, 'solver'] == 'lasso' and frame.loc[0, 'knob'] == 'lambda'


def test_invalid_grids():
    with pytest.raises(InvalidGridError):
        run_sweep('lasso', [], n_datasets=1)
    with pytest.raises(InvalidGridError):
        run_sweep('lasso', [-1.0], n_datasets=1)
    with pytest.raises(InvalidGridError):
        run_sweep('lasso', [np.nan], n_datasets=1)
    with pytest.raises(InvalidGridError):
        run_sweep('simplex', [1.0], n_datasets=1)


def test_annealing_sweeps_run():
    classical = run_sweep('classical_anneal', [3.0], n_datasets=2, cfg=QUICK)
    ensemble = run_sweep('ensemble_anneal', [3.0], n_datasets=2, cfg=QUICK)
    for result in (classical, ensemble):
        assert result.train_err.shape == (1, 2)
        assert np.all((result.l0 >= 0) & (result.l0 <= 100))
        assert np.all(np.isfinite(result.val_err))


def test_value_at_sparsity_prefers_first_tie():
    result = SweepResult('lasso', 'lambda', np.array([0.1, 0.2, 0.3, 0.4]),
                         np.zeros((4, 2)), np.zeros((4, 2)),
                         np.array([[20, 20], [11, 11], [9, 9], [3, 3]], dtype=float))
    row = value_at_sparsity(result, 10)
    assert row['value'] == 0.2
    assert row['mean_l0'] == 11.0


def test_sweep_outputs(tmp_path):
    results = [run_sweep('lasso', [0.01, 0.5], n_datasets=2)]
    write_sweep_csv(results, tmp_path / 'sweep.csv')
    frame = pd.read_csv(tmp_path / 'sweep.csv')
    assert list(frame.columns) == CSV_COLUMNS and len(frame) == 2
    write_sweep_svg(results, tmp_path / 'sweep.svg')
    assert '<svg' in (tmp_path / 'sweep.svg').read_text()


@pytest.mark.slow
def test_ensemble_reaches_ten_atoms_on_the_default_grid():
    """Test both binary solvers pass ten atoms on the default grid and match the lasso there"""
    grid = default_grid('classical_anneal')
    lasso_row = value_at_sparsity(run_sweep('lasso', default_grid('lasso'), n_datasets=20))
    for solver in ('classical_anneal', 'ensemble_anneal'):
        row = value_at_sparsity(run_sweep(solver, grid, n_datasets=20))
        assert abs(row['mean_l0'] - 10) <= 2
        assert 0.35 <= row['mean_val_err'] <= 0.65
        spread = row['std_val_err'] + lasso_row['std_val_err']
        assert abs(lasso_row['mean_val_err'] - row['mean_val_err']) <= spread
