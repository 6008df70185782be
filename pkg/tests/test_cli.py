"""Command-line surface: subcommands, output files and exit codes."""

import os

import pandas as pd
import pytest

from app import create_parser, main
from dataset import COLUMNS


PLAIN_CONFIG = os.path.join(os.path.dirname(__file__), '..', 'configs', 'plain.json')


def cli(tmp_path, *command, data='synth:40:1'):
    return main(['--env', 'testing', '--data', data, '--out', str(tmp_path), *command])


class TestParser:

    def test_training_overrides(self):
        args = create_parser().parse_args(['train-split', '--epochs', '3', '--batch-size', '8', '--eta', '0.01'])
        assert (args.epochs, args.batch_size, args.eta) == (3, 8, 0.01)
        assert args.connect is None

    def test_indices(self):
        args = create_parser().parse_args(['dump-activations', '--indices', '0,4,7'])
        assert args.indices == [0, 4, 7]

    def test_global_flags_after_command(self):
        args = create_parser().parse_args(['server', '--listen', '127.0.0.1:9', '--config', 'configs/plain.json',
                                           '--data', 'synth:8:1', '--out', 'runs', '--subset', '4'])
        assert (args.config, args.data, args.out, args.subset) == ('configs/plain.json', 'synth:8:1', 'runs', 4)
        assert args.listen == '127.0.0.1:9'

    def test_global_flags_before_command_survive(self):
        args = create_parser().parse_args(['--config', 'configs/plain.json', '--env', 'testing', 'params'])
        assert (args.config, args.env) == ('configs/plain.json', 'testing')
        assert args.data is None and args.subset is None

    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as info:
            create_parser().parse_args(['eval', '--client-checkpoint', 'c.ckpt'])
        assert info.value.code == 2


class TestCommands:

    def test_params(self, capsys):
        assert main(['--env', 'testing', 'params']) == 0
        out = capsys.readouterr().out
        for preset in ('p2048-18-18-18', 'p4096-40-20-20', 'p8192-60-40-40-60'):
            assert preset in out

    def test_train_local_then_eval(self, tmp_path, capsys):
        assert cli(tmp_path, 'train-local', '--epochs', '1') == 0
        metrics = pd.read_csv(tmp_path / 'metrics_local.csv')
        assert list(metrics['epoch']) == [1]
        assert (tmp_path / 'client.ckpt').exists() and (tmp_path / 'server.ckpt').exists()
        capsys.readouterr()

        code = cli(tmp_path, 'eval', '--client-checkpoint', str(tmp_path / 'client.ckpt'),
                   '--server-checkpoint', str(tmp_path / 'server.ckpt'))
        assert code == 0
        reported = float(capsys.readouterr().out.strip().split('=')[1])
        assert reported == pytest.approx(metrics['accuracy'].iloc[-1], abs=1e-4)

    def test_flags_after_command(self, tmp_path):
        code = main(['train-local', '--env', 'testing', '--data', 'synth:40:1', '--out', str(tmp_path),
                     '--config', PLAIN_CONFIG, '--epochs', '1'])
        assert code == 0
        assert (tmp_path / 'metrics_local.csv').exists()

    def test_train_split_plain(self, tmp_path):
        assert cli(tmp_path, 'train-split', '--epochs', '1') == 0
        transcript = pd.read_csv(tmp_path / 'transcript_split_plain.csv')
        metrics = pd.read_csv(tmp_path / 'metrics_split_plain.csv')
        assert (transcript['tag'] == 'ACT_PLAIN').sum() == 10
        assert metrics['bytes_out'].iloc[0] > 0
        assert (tmp_path / 'server.ckpt').exists()

    def test_bench_extrapolates_from_mean(self, tmp_path):
        assert cli(tmp_path, 'bench', '--batches', '3') == 0
        report = pd.read_csv(tmp_path / 'bench_plain.csv').iloc[0]
        assert report['batches'] == 3
        assert report['num_batches'] == 10
        assert report['epoch_bytes'] == pytest.approx(10 * report['mean_batch_bytes'])
        assert report['epoch_seconds'] == pytest.approx(10 * report['mean_batch_seconds'])


class TestActivationDump:

    def test_rows_per_sample(self, tmp_path):
        assert cli(tmp_path, 'dump-activations', '--indices', '0,2') == 0
        frame = pd.read_csv(tmp_path / 'activations.csv')
        assert len(frame) == 18
        first = frame[frame['sample'] == 0]
        assert list(first['series']) == ['input'] + ['activation'] * 8
        assert list(first['length']) == [128] + [32] * 8
        assert first.iloc[1][[f'v{i}' for i in range(32, 128)]].isna().all()

    def test_zero_init_rows_are_constant(self, tmp_path):
        assert cli(tmp_path, 'dump-activations', '--indices', '1', '--zero-init') == 0
        frame = pd.read_csv(tmp_path / 'activations.csv')
        activations = frame[frame['series'] == 'activation'][[f'v{i}' for i in range(32)]]
        assert (activations.to_numpy() == 0.0).all()

    def test_rerun_is_identical(self, tmp_path):
        first, second = tmp_path / 'a', tmp_path / 'b'
        assert cli(first, 'dump-activations', '--indices', '3', '--seed', '4') == 0
        assert cli(second, 'dump-activations', '--indices', '3', '--seed', '4') == 0
        assert (first / 'activations.csv').read_bytes() == (second / 'activations.csv').read_bytes()


class TestExitCodes:

    def test_missing_checkpoint_is_usage_error(self, tmp_path):
        code = cli(tmp_path, 'eval', '--client-checkpoint', str(tmp_path / 'none.ckpt'),
                   '--server-checkpoint', str(tmp_path / 'none.ckpt'))
        assert code == 2

    def test_index_out_of_range(self, tmp_path):
        assert cli(tmp_path, 'dump-activations', '--indices', '999') == 2

    def test_invalid_hyperparameter(self, tmp_path):
        assert cli(tmp_path, 'train-local', '--eta', '-1') == 2

    def test_negative_seed(self, tmp_path):
        assert cli(tmp_path, 'train-local', '--seed', '-1') == 2

    def test_negative_synthetic_seed(self, tmp_path):
        assert cli(tmp_path, 'train-local', data='synth:40:-3') == 2

    def test_zero_subset(self, tmp_path):
        assert cli(tmp_path, '--subset', '0', 'train-local') == 2

    def test_truncated_checkpoint(self, tmp_path):
        assert cli(tmp_path, 'train-local', '--epochs', '1') == 0
        short = tmp_path / 'short.ckpt'
        short.write_bytes((tmp_path / 'server.ckpt').read_bytes()[:40])
        code = cli(tmp_path, 'eval', '--client-checkpoint', str(tmp_path / 'client.ckpt'),
                   '--server-checkpoint', str(short))
        assert code == 1

    def test_malformed_dataset(self, tmp_path):
        bad = tmp_path / 'bad.csv'
        bad.write_text(','.join(COLUMNS) + '\n' + ','.join(['0.1'] * 100) + '\n')
        assert cli(tmp_path, 'train-local', data=str(bad)) == 6

    def test_unreachable_server(self, tmp_path, monkeypatch):
        import commands
        from errors import TransportError

        def refuse(*args, **kwargs):
            raise TransportError("connection refused", 'state=start')

        monkeypatch.setattr(commands, 'connect', refuse)
        assert cli(tmp_path, 'client', '--connect', '127.0.0.1:1') == 3
