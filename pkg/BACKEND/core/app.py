"""
SplitHE Command-Line Application

Entry point of the application: builds the argument parser, loads the
environment configuration, sets up logging and dispatches to the command
handlers in routes/commands.py.

Global flags: --env, --config, --data, --out, --subset
Exit codes come from the SplitHEException raised (0 on success).
"""

import argparse
import logging

from dotenv import load_dotenv

load_dotenv()

import commands
from config import get_config
from errors import SplitHEException
from extensions import init_extensions

logger = logging.getLogger(__name__)


def _indices(value):
    try:
        return [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _add_global_flags(parser, default=None):
    parser.add_argument('--env', default=default,
                        help='configuration environment (development, mitbih, testing)')
    parser.add_argument('--config', default=default, help='JSON training config')
    parser.add_argument('--data', default=default, help="converted MIT-BIH CSV or synth:<count>:<seed>")
    parser.add_argument('--out', default=default, help='output directory for metrics, transcripts and checkpoints')
    parser.add_argument('--subset', type=int, default=default, help='use only the first COUNT samples of each split')


def create_parser():
    """
    Parser Factory

    Returns:
        argparse.ArgumentParser with one subparser per command
    """
    parser = argparse.ArgumentParser(prog='splithe',
                                     description='Split learning for 1D CNNs on ECG, with optional CKKS encryption')
    _add_global_flags(parser)
    # the same flags after the command; SUPPRESS keeps values given before it
    shared = argparse.ArgumentParser(add_help=False)
    _add_global_flags(shared, default=argparse.SUPPRESS)

    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    def add(name, handler, help_text, training=True):
        p = sub.add_parser(name, help=help_text, parents=[shared])
        p.set_defaults(handler=handler)
        if training:
            p.add_argument('--epochs', type=int)
            p.add_argument('--seed', type=int)
            p.add_argument('--batch-size', dest='batch_size', type=int)
            p.add_argument('--eta', type=float)
        return p

    add('train-local', commands.train_local, 'train the unsplit network')
    p = add('train-split', commands.train_split, 'split training; both roles in-process unless --connect')
    p.add_argument('--connect', help='host:port of a running server')
    p = add('server', commands.server, 'serve the Linear layer to one client')
    p.add_argument('--listen', help='host:port to accept on')
    p = add('client', commands.client, 'train as the data owner against a server')
    p.add_argument('--connect', help='host:port of the server')

    p = add('eval', commands.evaluate, 'accuracy of saved checkpoints', training=False)
    p.add_argument('--client-checkpoint', dest='client_checkpoint', required=True)
    p.add_argument('--server-checkpoint', dest='server_checkpoint', required=True)

    p = add('bench', commands.bench, 'time the first K batches and extrapolate an epoch')
    p.add_argument('--batches', type=int, help='K (default from the environment config)')
    p.add_argument('--connect', help='host:port of a running server')

    p = add('dump-activations', commands.activations, 'write inputs and split-layer feature maps', training=False)
    p.add_argument('--checkpoint', help='client checkpoint (untrained seeded weights when omitted)')
    p.add_argument('--indices', type=_indices, default=[0])
    p.add_argument('--split', choices=('train', 'test'), default='test')
    p.add_argument('--seed', type=int)
    p.add_argument('--zero-init', dest='zero_init', action='store_true')

    add('params', commands.params, 'list the HE parameter presets', training=False)
    return parser


def create_app(argv=None):
    """
    Application Factory Function

    Parses `argv`, picks the Config class (--env, else $SPLITHE_ENV) and
    initializes logging and progress bars from it.

    Returns:
        tuple: (parsed arguments, Config class)
    """
    args = create_parser().parse_args(argv)
    app_config = get_config(args.env)
    init_extensions(app_config)
    logger.debug("Environment %s, command %s", app_config.ENV_NAME, args.command)
    return args, app_config


def main(argv=None):
    args, app_config = create_app(argv)
    try:
        return args.handler(args, app_config) or 0
    except SplitHEException as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return 130


if __name__ == '__main__':
    raise SystemExit(main())
