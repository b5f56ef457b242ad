import argparse
import logging
import sys

from motionssm import __version__
from motionssm.cli import commands
from motionssm.model.config import LearnerConfig
from motionssm.model.core.deform import DEFAULT_SQUARINGS, WARP_MODES
from motionssm.model.core.errors import NumericalError, PreconditionError
from motionssm.model.serializable import ValidationError
from motionssm.model.state import load_learner_config

logger = logging.getLogger(__name__)

# Exit codes
EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3
EXIT_PRECONDITION_ERROR = 4

LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


def _add_learner_options(
    parser: argparse.ArgumentParser, defaults: LearnerConfig
):
    parser.add_argument(
        '--lr',
        type=float,
        default=defaults.learning_rate,
        help='Adam learning rate (default: %(default)s)',
    )
    parser.add_argument(
        '--seed',
        type=int,
        default=defaults.seed,
        help='Random seed (default: %(default)s)',
    )


def build_parser(defaults: LearnerConfig | None = None):
    if defaults is None:
        defaults = LearnerConfig()

    parser = argparse.ArgumentParser(
        prog='motionssm',
        description=(
            'Linear Gaussian state-space motion models: simulation, '
            'learning, deformation and evaluation'
        ),
    )
    parser.add_argument(
        '--version',
        action='version',
        version=f'%(prog)s {__version__ or "unknown"}',
    )
    parser.add_argument(
        '-v',
        '--verbose',
        action='count',
        default=0,
        help='Print progress messages (repeat for debug output)',
    )
    parser.set_defaults(defaults=defaults)
    subparsers = parser.add_subparsers(
        title='commands', dest='command', required=True
    )

    p = subparsers.add_parser('simulate', help='Sample from an LG-SSM')
    p.add_argument('--params', required=True, help='ParamFile')
    p.add_argument('--steps', type=int, required=True, help='Sequence length')
    p.add_argument('--seed', type=int, default=defaults.seed)
    p.add_argument(
        '--out', required=True, help='Writes PREFIX.z.mseq and PREFIX.x.mseq'
    )
    p.set_defaults(func=commands.cmd_simulate)

    p = subparsers.add_parser('fit', help='Fit LG-SSM params offline')
    p.add_argument(
        '--data',
        required=True,
        help='Glob of MSEQ observation files; NaN rows are missing',
    )
    p.add_argument('--init', required=True, help='Initial ParamFile')
    _add_learner_options(p, defaults)
    p.add_argument(
        '--iters',
        type=int,
        default=defaults.max_iters,
        help='Maximum number of updates (default: %(default)s)',
    )
    p.add_argument(
        '--out',
        required=True,
        help='Fitted ParamFile. The loss curve goes next to it.',
    )
    p.set_defaults(func=commands.cmd_fit)

    p = subparsers.add_parser(
        'online', help='Moving-horizon learning and forecasting'
    )
    p.add_argument('--data', required=True, help='MSEQ observation file')
    p.add_argument('--params', required=True, help='Initial ParamFile')
    p.add_argument(
        '--horizon',
        type=int,
        default=defaults.horizon,
        help='Moving-horizon window length (default: %(default)s)',
    )
    p.add_argument(
        '--forecast',
        type=int,
        default=50,
        help='Held-out forecast horizon (default: %(default)s)',
    )
    p.add_argument(
        '--samples',
        type=int,
        default=0,
        help='Forecast paths for the RMSE, 0 to use the mean',
    )
    _add_learner_options(p, defaults)
    p.add_argument('--out', required=True, help='Output prefix')
    p.set_defaults(func=commands.cmd_online)

    _add_deform_parser(subparsers)

    p = subparsers.add_parser(
        'metrics', help='Dice, HD95 and LCC between two arrays'
    )
    p.add_argument('a', help='MSEQ or image file')
    p.add_argument('b', help='MSEQ or image file')
    p.add_argument(
        '--label',
        type=int,
        default=None,
        help='Compare this label (default: any nonzero value)',
    )
    p.add_argument('--window', type=int, default=9, help='LCC window')
    p.add_argument(
        '--spacing',
        type=float,
        nargs=2,
        default=(1.0, 1.0),
        metavar=('ROW', 'COL'),
        help='Pixel spacing for HD95',
    )
    p.add_argument('--out', required=True, help='CSV report')
    p.set_defaults(func=commands.cmd_metrics)

    p = subparsers.add_parser(
        'experiment', help='Synthetic experiments over many seeds'
    )
    p.add_argument('preset', choices=list(commands.EXPERIMENT_PRESETS))
    p.add_argument('--seeds', type=int, default=20, help='Number of seeds')
    p.add_argument('--first-seed', type=int, default=0)
    p.add_argument(
        '--out', required=True, help='Writes raw.csv and aggregate.csv'
    )
    p.set_defaults(func=commands.cmd_experiment)

    return parser


def _add_deform_parser(subparsers):
    deform = subparsers.add_parser(
        'deform', help='Velocity field and deformation tools'
    )
    actions = deform.add_subparsers(
        title='actions', dest='action', required=True
    )

    p = actions.add_parser('exp', help='Smooth and exponentiate a field')
    p.add_argument('field', help='(H, W, 2) velocity field MSEQ')
    p.add_argument(
        '--sigma',
        type=float,
        default=2.0,
        help='Gaussian smoothing sigma (default: %(default)s)',
    )
    p.add_argument(
        '--squarings',
        type=int,
        default=DEFAULT_SQUARINGS,
        help='Scaling-and-squaring steps (default: %(default)s)',
    )
    p.add_argument('--out', required=True)
    p.set_defaults(func=commands.cmd_deform_exp)

    p = actions.add_parser('warp', help='Warp an image by a deformation')
    p.add_argument('image', help='MSEQ or image file')
    p.add_argument('field', help='(H, W, 2) deformation MSEQ')
    p.add_argument('--mode', choices=WARP_MODES, default='bilinear')
    p.add_argument('--out', required=True)
    p.set_defaults(func=commands.cmd_deform_warp)

    p = actions.add_parser(
        'jacdet', help='Jacobian determinant of a deformation'
    )
    p.add_argument('field', help='(H, W, 2) deformation MSEQ')
    p.add_argument('--out', default=None)
    p.set_defaults(func=commands.cmd_deform_jacdet)


def run(argv: list[str] | None = None) -> int:
    defaults = load_learner_config()
    parser = build_parser(defaults)
    args = parser.parse_args(argv)

    level = LOG_LEVELS[min(args.verbose, len(LOG_LEVELS) - 1)]
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format='%(levelname)s %(name)s: %(message)s',
    )

    try:
        return args.func(args)
    except PreconditionError as e:
        print(f'motionssm: {e}', file=sys.stderr)
        return EXIT_PRECONDITION_ERROR
    except NumericalError as e:
        print(f'motionssm: {e}', file=sys.stderr)
        return EXIT_NUMERICAL_ERROR
    except (ValidationError, OSError) as e:
        print(f'motionssm: {e}', file=sys.stderr)
        return EXIT_INPUT_ERROR
