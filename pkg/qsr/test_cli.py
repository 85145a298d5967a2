"""
End-to-end tests for the command line
"""

import json

import pandas as pd
import pytest

from qsr.cli import main, merge_settings, parse_crop
from qsr.conftest import make_natural_crop, make_tiny_pair
from qsr.dictionary import load_dictionary, save_dictionary
from qsr.errors import InvalidGridError
from qsr.imagecore import load_image, save_image

QUIET = ['--threads', '1', '-q']


@pytest.fixture
def corpus(tmp_path):
    directory = tmp_path / 'corpus'
    directory.mkdir()
    for seed in (1, 2):
        save_image(make_natural_crop(seed), directory / f"crop_{seed}.png")
    return directory


@pytest.fixture
def dict_file(tmp_path):
    path = tmp_path / 'tiny.qsrd'
    save_dictionary(make_tiny_pair(), path)
    return path


@pytest.fixture
def lr_file(tmp_path):
    path = tmp_path / 'lr.png'
    save_image(make_natural_crop(11, 12, 12), path)
    return path


def test_merge_settings_prefers_flags():
    table = {'mu': 0.1, 'sampler': {'kind': 'tabu', 'anneal': {'sweeps': 3}}}
    merged = merge_settings(table, {'mu': None, 'seed': 4, 'sampler': {'anneal': {'sweeps': 9}}})
    assert merged == {'mu': 0.1, 'seed': 4, 'sampler': {'kind': 'tabu', 'anneal': {'sweeps': 9}}}


def test_parse_crop():
    assert parse_crop('1,2,30,40') == (1, 2, 30, 40)
    assert parse_crop(None) is None
    with pytest.raises(InvalidGridError):
        parse_crop('1,2,3')


def test_train_dict_is_reproducible(tmp_path, corpus):
    args = ['--corpus', str(corpus), '--atoms', '4', '--patches', '60', '--epochs', '1',
            '--batch-size', '16', '--variance-floor', '1e-6', '--seed', '1'] + QUIET
    first, second = tmp_path / 'a.qsrd', tmp_path / 'b.qsrd'
    assert main(['train-dict', '--out', str(first)] + args) == 0
    assert main(['train-dict', '--out', str(second)] + args) == 0
    assert first.read_bytes() == second.read_bytes()
    assert load_dictionary(first).n_atoms == 4

    manifest = json.loads((tmp_path / 'a.qsrd.manifest.json').read_text())
    assert manifest['command'] == 'train-dict'
    assert manifest['seed'] == 1
    assert len(manifest['inputs']) == 2


def test_train_dict_missing_corpus(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(['train-dict', '--corpus', str(tmp_path / 'nowhere'), '--out', str(tmp_path / 'd.qsrd')] + QUIET)
    assert exc.value.code == 2


def test_unknown_method(tmp_path, lr_file, dict_file):
    with pytest.raises(SystemExit) as exc:
        main(['sr', '--input', str(lr_file), '--dict', str(dict_file), '--out', str(tmp_path / 'o.png'),
              '--method', 'magic'] + QUIET)
    assert exc.value.code == 2


def test_sr_writes_image_entropy_and_manifest(tmp_path, lr_file, dict_file):
    out = tmp_path / 'sr.png'
    code = main(['sr', '--input', str(lr_file), '--dict', str(dict_file), '--out', str(out),
                 '--sampler', 'simulated_anneal', '--sweeps', '4', '--reads', '4',
                 '--backproject-iters', '3', '--entropy-map', str(tmp_path / 'entropy.png')] + QUIET)
    assert code == 0
    assert load_image(out).size == (36, 36)
    assert load_image(tmp_path / 'entropy.png').size == (36, 36)
    assert len(pd.read_csv(tmp_path / 'entropy.csv')) == 25

    manifest = json.loads((tmp_path / 'sr.png.manifest.json').read_text())
    assert manifest['config']['method'] == 'ensemble'
    assert set(manifest['timings']) == {'cpu_opt', 'create_qubo', 'sampler_prep', 'sampler_opt', 'misc'}


@pytest.mark.parametrize('method', ['anneal', 'ensemble'])
def test_sr_output_does_not_depend_on_threads(tmp_path, lr_file, dict_file, method):
    outputs = []
    for threads in ('1', '3'):
        out = tmp_path / f"sr_{threads}.png"
        assert main(['sr', '--input', str(lr_file), '--dict', str(dict_file), '--out', str(out),
                     '--method', method, '--sampler', 'simulated_anneal', '--sweeps', '4', '--reads', '40',
                     '--backproject-iters', '3', '--threads', threads, '-q']) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_capture_then_replay_reproduces_output(tmp_path, lr_file, dict_file):
    record = tmp_path / 'calls.jsonl'
    common = ['--input', str(lr_file), '--dict', str(dict_file), '--reads', '4',
              '--backproject-iters', '3', '--seed', '5'] + QUIET
    captured, replayed = tmp_path / 'captured.png', tmp_path / 'replayed.png'
    assert main(['capture', '--out', str(captured), '--record', str(record),
                 '--sampler', 'simulated_anneal', '--sweeps', '4'] + common) == 0
    assert record.exists()
    assert main(['sr', '--out', str(replayed), '--sampler', 'replay', '--replay-file', str(record)] + common) == 0
    assert captured.read_bytes() == replayed.read_bytes()


def test_replay_miss_exit_code(tmp_path, lr_file, dict_file):
    record = tmp_path / 'empty.jsonl'
    record.write_text('')
    code = main(['sr', '--input', str(lr_file), '--dict', str(dict_file), '--out', str(tmp_path / 'o.png'),
                 '--sampler', 'replay', '--replay-file', str(record)] + QUIET)
    assert code == 1


def test_synth_single_point(tmp_path):
    out = tmp_path / 'sweep.csv'
    assert main(['synth', '--out', str(out), '--solvers', 'lasso', '--grid', '0.1', '--datasets', '2'] + QUIET) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 1 and frame.loc[0, 'solver'] == 'lasso'
    assert (tmp_path / 'sweep.csv.manifest.json').exists()


def test_synth_unknown_solver(tmp_path):
    assert main(['synth', '--out', str(tmp_path / 's.csv'), '--solvers', 'simplex'] + QUIET) == 2


def test_bench_rows(tmp_path, dict_file):
    hr_dir = tmp_path / 'hr'
    hr_dir.mkdir()
    for seed in (3, 4):
        save_image(make_natural_crop(seed, 24, 24), hr_dir / f"img_{seed}.png")
    out = tmp_path / 'bench.csv'
    code = main(['bench', '--hr-dir', str(hr_dir), '--out', str(out), '--methods', 'lasso',
                 '--dict', str(dict_file), '--backproject-iters', '2'] + QUIET)
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['image', 'bicubic', 'lasso']
    assert frame['image'].tolist() == ['img_3.png', 'img_4.png', 'mean']
    assert len(pd.read_csv(tmp_path / 'bench.csv.timings.csv')) == 2


def test_bench_needs_dictionary_for_sparse_methods(tmp_path):
    hr_dir = tmp_path / 'hr'
    hr_dir.mkdir()
    save_image(make_natural_crop(3, 24, 24), hr_dir / 'img.png')
    with pytest.raises(SystemExit):
        main(['bench', '--hr-dir', str(hr_dir), '--out', str(tmp_path / 'b.csv'), '--methods', 'lasso'] + QUIET)
