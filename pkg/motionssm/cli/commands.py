"""Implementations of the command-line subcommands

Each `cmd_*` takes the parsed arguments and returns an exit code. Errors
are raised and mapped to exit codes by `motionssm.cli.main.run`.
"""

import argparse
import glob
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from motionssm.cli.reports import aggregate, loss_curve, write_csv
from motionssm.model.config import LearnerConfig
from motionssm.model.core.deform import (
    exp_svf,
    gaussian_smooth,
    jacobian_det,
    warp,
)
from motionssm.model.core.errors import (
    ExperimentError,
    NumericalError,
    PreconditionError,
)
from motionssm.model.core.kalman import simulate
from motionssm.model.core.learn import (
    OnlineState,
    ParamVector,
    evaluate_forecast,
    fit_offline,
    online_step,
)
from motionssm.model.core.metrics import dice, hd95, lcc
from motionssm.model.io import (
    load_array,
    read_mseq,
    read_params,
    write_mseq,
    write_params,
)
from motionssm.model.lgssm import ObsSeq
from motionssm.model.serializable import ValidationError
from motionssm.model.synth import (
    IMPUTATION_STRIDES,
    ONLINE_SHIFT_STEP,
    ONLINE_T,
    make_scenario,
    run_imputation_experiment,
    run_online_experiment,
    synth_sequence,
)
from motionssm.utils.parallel import ordered_map

logger = logging.getLogger(__name__)


def _learner_config(args: argparse.Namespace, **kwargs) -> LearnerConfig:
    return args.defaults.replace(
        learning_rate=args.lr, seed=args.seed, **kwargs
    )


def _read_obs(path: str) -> ObsSeq:
    values = read_mseq(path)
    if values.ndim not in (1, 2):
        msg = (
            f'{path}: observations must be (T,) or (T, d_x), '
            f'got {values.shape}'
        )
        raise ValidationError(msg)

    return ObsSeq.from_array(values)


def cmd_simulate(args: argparse.Namespace) -> int:
    params = read_params(args.params)
    latents, observations = simulate(params, args.steps, args.seed)

    prefix = args.out
    write_mseq(f'{prefix}.z.mseq', latents)
    write_mseq(f'{prefix}.x.mseq', observations)
    logger.info(f'Simulated {args.steps} steps to {prefix}.{{z,x}}.mseq')
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.data))
    if not paths:
        raise ValidationError(f'No data files match {args.data!r}')

    dataset = [_read_obs(path) for path in paths]
    init_params = read_params(args.init)
    cfg = _learner_config(args, max_iters=args.iters)

    result = fit_offline(ParamVector.from_params(init_params), dataset, cfg)

    # The init itself is written unchanged so that it survives the
    # Cholesky round trip bit for bit.
    if result.best_iteration == 0:
        fitted = init_params
    else:
        fitted = result.params.to_params()

    out = Path(args.out)
    write_params(out, fitted)
    write_csv(loss_curve(result.history), out.with_suffix('.loss.csv'))
    logger.info(
        f'Fitted {len(dataset)} sequence(s): best objective '
        f'{result.best_objective:.6f} at iteration {result.best_iteration}'
    )
    return 0


def cmd_online(args: argparse.Namespace) -> int:
    obs = _read_obs(args.data)
    params = read_params(args.params)
    if obs.d_x != params.d_x:
        msg = (
            f'{args.data}: observation dimension {obs.d_x} does not match '
            f'the model ({params.d_x})'
        )
        raise ValidationError(msg)

    T = len(obs)
    required = args.horizon + args.forecast + 1
    if T < required:
        msg = (
            f'{args.data} has {T} steps; a horizon of {args.horizon} and a '
            f'forecast of {args.forecast} need at least {required}'
        )
        raise PreconditionError(msg)

    cfg = _learner_config(args, horizon=args.horizon)
    origin = T - args.forecast

    state = OnlineState.start(ParamVector.from_params(params), cfg)
    for row in obs.to_array()[:origin]:
        online_step(state, row)

    adapted = state.params.to_params()

    past = obs.window(origin - args.horizon, origin)
    future = obs.window(origin, T)
    rows = []
    for name, model in (('adapted', adapted), ('frozen', params)):
        score = evaluate_forecast(
            model, past, future, n_samples=args.samples, seed=args.seed
        )
        rows.append(
            {'model': name, 'loglik': score.loglik, 'rmse': score.rmse}
        )

    prefix = args.out
    write_params(f'{prefix}.params', adapted)
    write_csv(
        pd.DataFrame(
            {'step': np.arange(origin), 'loglik': state.loglik_log}
        ),
        f'{prefix}.loglik.csv',
    )
    write_csv(pd.DataFrame(rows), f'{prefix}.forecast.csv')
    logger.info(f'Adapted over {origin} steps, forecast {args.forecast}')
    return 0


def _write_array(path: str, array: np.ndarray):
    write_mseq(path, array)
    logger.info(f'Wrote {array.shape} array to {path}')


def cmd_deform_exp(args: argparse.Namespace) -> int:
    v = read_mseq(args.field)
    phi = exp_svf(gaussian_smooth(v, args.sigma), args.squarings)
    _write_array(args.out, phi)
    return 0


def cmd_deform_warp(args: argparse.Namespace) -> int:
    image = load_array(args.image)
    phi = read_mseq(args.field)
    _write_array(args.out, warp(image, phi, args.mode))
    return 0


def cmd_deform_jacdet(args: argparse.Namespace) -> int:
    det = jacobian_det(read_mseq(args.field))
    if args.out:
        _write_array(args.out, det)

    print(f'min {float(det.min())}')
    return 0


def _as_stack(array: np.ndarray, path: str) -> np.ndarray:
    if array.ndim == 2:
        return array[None]

    if array.ndim != 3:
        msg = f'{path}: expected an (H, W) or (T, H, W) array'
        raise ValidationError(msg)

    return array


def cmd_metrics(args: argparse.Namespace) -> int:
    a = _as_stack(load_array(args.a), args.a)
    b = _as_stack(load_array(args.b), args.b)
    if a.shape != b.shape:
        msg = f'Input shapes differ: {a.shape} != {b.shape}'
        raise ValidationError(msg)

    def to_mask(x):
        return x == args.label if args.label is not None else x != 0

    rows = []
    for t, (a_t, b_t) in enumerate(zip(a, b)):
        mask_a, mask_b = to_mask(a_t), to_mask(b_t)
        if mask_a.any() and mask_b.any():
            distance = hd95(mask_a, mask_b, spacing=tuple(args.spacing))
        else:
            distance = np.nan

        rows.append(
            {
                'frame': t,
                'dice': dice(mask_a, mask_b),
                'hd95': distance,
                'lcc': lcc(a_t, b_t, args.window),
            }
        )

    write_csv(pd.DataFrame(rows), args.out)
    return 0


def _imputation_row(seed: int) -> dict:
    scenario = make_scenario(seed)
    output = synth_sequence(scenario)
    row = {}
    for stride in IMPUTATION_STRIDES:
        report = run_imputation_experiment(scenario, stride, output)
        for key, value in report.to_dict().items():
            if key != 'stride':
                row[f'{key}_stride{stride}'] = value

    return row


def _online_row(seed: int) -> dict:
    scenario = make_scenario(seed, T=ONLINE_T, shift_step=ONLINE_SHIFT_STEP)
    return run_online_experiment(scenario).to_dict()


def _online_null_row(seed: int) -> dict:
    scenario = make_scenario(seed, T=ONLINE_T)
    return run_online_experiment(scenario).to_dict()


EXPERIMENT_PRESETS = {
    'imputation': _imputation_row,
    'online': _online_row,
    'online-null': _online_null_row,
}


def cmd_experiment(args: argparse.Namespace) -> int:
    run_seed = EXPERIMENT_PRESETS[args.preset]
    seeds = range(args.first_seed, args.first_seed + args.seeds)

    def run_one(seed):
        logger.info(f'Running {args.preset} experiment for seed {seed}')
        try:
            return {'seed': seed, **run_seed(seed)}
        except (NumericalError, PreconditionError, ValidationError) as e:
            raise ExperimentError(seed, e) from e

    rows = ordered_map(run_one, seeds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw = pd.DataFrame(rows)
    write_csv(raw, out / 'raw.csv')
    write_csv(aggregate(raw), out / 'aggregate.csv')
    logger.info(f'Wrote {len(rows)} raw rows to {out}')
    return 0
