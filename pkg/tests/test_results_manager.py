"""Tests for artifact writers and the SQLite run registry."""

import json
import math
import struct
from datetime import datetime, timedelta

import numpy as np
import pandas as pd
import pytest

from results_manager import (
    RunRegistry,
    config_hash,
    read_grid,
    sanitize,
    write_csv,
    write_grid,
    write_json,
    write_manifest,
)


class TestSanitize:

    def test_non_finite_values_become_strings(self):
        data = sanitize({'a': math.inf, 'b': -math.inf, 'c': math.nan, 'd': 1.5})
        assert data == {'a': 'inf', 'b': '-inf', 'c': 'nan', 'd': 1.5}

    def test_numpy_values(self):
        data = sanitize({'x': np.array([1.0, np.inf]), 'ok': np.bool_(True), 'n': np.int64(3)})
        assert data == {'x': [1.0, 'inf'], 'ok': True, 'n': 3}
        assert type(data['n']) is int


class TestWriters:

    def test_json_leaves_no_temporary_files(self, tmp_path):
        path = write_json(tmp_path / 'out' / 'report.json', {'gap': math.inf})
        assert [p.name for p in path.parent.iterdir()] == ['report.json']
        assert json.loads(path.read_text())['gap'] == 'inf'

    def test_csv_keeps_every_digit(self, tmp_path):
        frame = pd.DataFrame({'t': [0.0], 'Y': [0.1 + 0.2]})
        text = write_csv(tmp_path / 'Y.csv', frame).read_text()
        assert text == 't,Y\n0,0.30000000000000004\n'

    def test_grid_layout(self, tmp_path):
        values = np.arange(12, dtype=float).reshape(2, 3, 2)
        path = write_grid(tmp_path / 'Z.bin', values, {'name': 'Z'})
        raw = path.read_bytes()
        (length,) = struct.unpack('<Q', raw[:8])
        header = json.loads(raw[8:8 + length])
        assert header['shape'] == [2, 3, 2]
        assert header['dtype'] == '<f8'
        assert header['name'] == 'Z'
        assert len(raw) == 8 + length + 12 * 8
        loaded, _ = read_grid(path)
        assert np.array_equal(loaded, values)

    def test_manifest_fields(self, tmp_path):
        config = {'problem': {'mu': 2.0}}
        path = write_manifest(tmp_path, 'domain', config, 7, {'T': 1.0, 'N': 8},
                              {'model': 'tree'}, 1, ['domain.json'])
        manifest = json.loads(path.read_text())
        assert manifest['config_sha256'] == config_hash(config)
        assert manifest['seed'] == 7
        assert manifest['outputs'] == ['domain.json']
        assert {'numpy', 'scipy', 'python'} <= set(manifest['versions'])

    def test_config_hash_ignores_key_order(self):
        assert config_hash({'a': 1, 'b': 2}) == config_hash({'b': 2, 'a': 1})


class TestRunRegistry:

    @pytest.fixture
    def registry(self, tmp_path):
        return RunRegistry(str(tmp_path / 'db' / 'runs.db'))

    def test_run_lifecycle(self, registry):
        run_id = registry.start_run('solve-bsvie', {'problem': {}}, 3, 'results/x')
        assert registry.get_run(run_id)['status'] == 'running'
        assert registry.finish_run(run_id, 'ok', {'residual': 1e-9})
        run = registry.get_run(run_id)
        assert run['status'] == 'ok'
        assert run['summary'] == {'residual': 1e-9}
        assert run['finished_at'] is not None

    def test_timestamps_carry_utc_offset(self, registry):
        run_id = registry.start_run('domain', {}, 0, 'a')
        registry.finish_run(run_id, 'ok')
        run = registry.get_run(run_id)
        for key in ('created_at', 'finished_at'):
            stamp = datetime.fromisoformat(run[key])
            assert stamp.utcoffset() == timedelta(0)

    def test_list_runs_by_command(self, registry):
        registry.start_run('domain', {}, 0, 'a')
        registry.start_run('voc', {}, 0, 'b')
        assert [run['command'] for run in registry.list_runs('voc')] == ['voc']
        assert len(registry.list_runs()) == 2

    def test_unknown_runs(self, registry):
        assert registry.get_run('missing') is None
        assert not registry.finish_run(None, 'ok')

    def test_env_path(self, tmp_path, monkeypatch):
        monkeypatch.setenv('VOLTERRA_RUNS_DB', str(tmp_path / 'env.db'))
        assert RunRegistry().db_path == str(tmp_path / 'env.db')
