"""
Command-line interface for the sampler experiments.
"""

import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

import pandas as pd
from colorama import Fore, Style, init

from app.exceptions import ConfigurationError, NumericError, SamplerError, ValidationError
from app.experiment_config import ExperimentConfig
from app.harness import ABLATION_AXES, Experiment
from app.logger import SamplerLogger
from app.records import MetricReport
from app.settings import HarnessSettings
from app.solver import FAMILIES
from app.validators import InputValidator

# Initialize colorama
init(autoreset=True)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DEFAULT_ABLATION_VALUES = {
    'c-schedule': ['linear', 'constant:0.25', 'derived'],
    'tau': ['T', 'midpoint', 'current'],
    'coefficient-mode': ['schedule', 'derived'],
    'difference': ['literal', 'corrected'],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML experiment configuration')
    common.add_argument('--seed', help='random seed (unsigned 64-bit)')
    common.add_argument('--out', help='output directory')
    common.add_argument('--batch', help='number of trajectories')
    common.add_argument('--nfe', help='comma-separated step counts, e.g. 5,6,7,8,10')
    common.add_argument('--solver', choices=FAMILIES, help='solver family')
    common.add_argument('--dualfast', choices=('on', 'off'), help='apply the DualFast correction')
    common.add_argument('--c-schedule', dest='c_schedule', help='linear | constant:<v> | derived')
    common.add_argument('--tau', help='T | current | midpoint | <time>')
    common.add_argument('--workers', help='worker threads')

    parser = argparse.ArgumentParser(
        prog='dualfast',
        description='Exponential-integrator diffusion samplers on Gaussian-mixture oracles.',
    )
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('sample', parents=[common], help='sample endpoints with the configured solver')
    reference = sub.add_parser('reference', parents=[common], help='build the cached pseudo-ground truth')
    reference.add_argument('--force', action='store_true', help='recompute even on a cache hit')
    sub.add_parser('compare', parents=[common], help='paired metrics against the reference')
    ablate = sub.add_parser('ablate', parents=[common], help='vary one correction setting')
    ablate.add_argument('--axis', required=True, choices=ABLATION_AXES)
    ablate.add_argument('--values', help='comma-separated axis values')
    convergence = sub.add_parser('convergence', parents=[common], help='fit convergence orders')
    convergence.add_argument('--families', help='comma-separated solver families')
    disentangle = sub.add_parser('disentangle', parents=[common], help='approximation vs discretization error')
    disentangle.add_argument('--periods', help='number of time periods')
    disentangle.add_argument('--fine-nfe', dest='fine_nfe', help='fine steps per period')
    disentangle.add_argument('--coarse-nfe', dest='coarse_nfe', help='coarse steps per period')
    return parser


class CommandRunner:
    """Executes one parsed command against an Experiment."""

    def __init__(self, args: argparse.Namespace, settings: Optional[HarnessSettings] = None):
        self.args = args
        self.validator = InputValidator()
        self.settings = settings or HarnessSettings()
        self.config = ExperimentConfig.load(args.config).with_overrides(self._overrides())
        self.experiment = Experiment(self.config, self.settings)

    def _overrides(self) -> dict:
        args, v = self.args, self.validator
        overrides = {
            'seed': None if args.seed is None else v.validate_seed(args.seed),
            'batch': None if args.batch is None else v.validate_batch(args.batch),
            'grid.n_steps': None if args.nfe is None else v.validate_step_counts(args.nfe),
            'solver': None if args.solver is None else {'family': v.validate_family(args.solver)},
            'dualfast.enabled': None if args.dualfast is None else v.validate_switch(args.dualfast, '--dualfast'),
            'dualfast.mix_schedule': args.c_schedule,
            'dualfast.multistep_mix_schedule': args.c_schedule,
            'dualfast.tau': args.tau,
            'output_dir': args.out,
            'workers': None if args.workers is None else v.validate_int(args.workers, 'workers', 1),
        }
        if args.command == 'disentangle':
            overrides.update({
                'disentangle.periods': None if args.periods is None else v.validate_int(args.periods, 'periods', 1),
                'disentangle.fine_nfe': None if args.fine_nfe is None else v.validate_int(args.fine_nfe, 'fine_nfe', 1),
                'disentangle.coarse_nfe': (None if args.coarse_nfe is None
                                           else v.validate_int(args.coarse_nfe, 'coarse_nfe', 1)),
            })
        return overrides

    def print_success(self, message: str):
        print(f"{Fore.GREEN}{message}{Style.RESET_ALL}")

    def print_info(self, message: str):
        print(f"{Fore.YELLOW}{message}{Style.RESET_ALL}")

    def run(self) -> int:
        command = self.args.command
        SamplerLogger.log(logging.INFO, f"Command: {command} config_hash={self.config.config_hash()[:12]}")
        extra = getattr(self, f"handle_{command}")() or {}
        manifest = self.experiment.write_manifest(command, extra)
        self.print_success(f"Run manifest written to {manifest}")
        return EXIT_OK

    def handle_sample(self) -> dict:
        solver = self.config.solver
        x_T = self.experiment.initial_noise()
        nfe = {}
        for n in self.config.n_steps:
            record, count = self.experiment.run_method(solver, n, x_T)
            frame = pd.DataFrame(record.endpoint, columns=[f"x_{i}" for i in range(record.endpoint.shape[1])])
            path = self.experiment.save_frame(frame, f"sample_{solver.label()}_N{n}.csv")
            nfe[str(n)] = count
            self.print_success(f"{solver.label()} N={n}: {count} evaluations -> {path}")
        return {'method': solver.label(), 'nfe': nfe}

    def handle_reference(self) -> dict:
        entry = self.experiment.build_reference(force=self.args.force)
        csv_path, _ = self.experiment.cache.paths(entry.key)
        self.print_success(f"Reference {entry.key[:12]} ({entry.x_ref.shape[0]} samples) at {csv_path}")
        return {'reference_key': entry.key}

    def handle_compare(self) -> dict:
        reference = self.experiment.build_reference()
        reports = self.experiment.compare(reference=reference)
        path = self.experiment.save_reports(reports, 'compare.csv')
        self.experiment.save_plot(reports, 'compare.svg')
        for report in reports:
            values = ', '.join(f"N={r.n_steps}: {r.mse_to_reference:.4e}" for r in report.records)
            self.print_info(f"{report.method}: {values}")
        self.print_success(f"Report written to {path}")
        return {'reference_key': reference.key, 'methods': [r.method for r in reports]}

    def handle_ablate(self) -> dict:
        axis = self.args.axis
        if self.args.values:
            values = [v for v in self.args.values.split(',') if v]
        else:
            values = DEFAULT_ABLATION_VALUES[axis]
        result = self.experiment.ablate(axis, values)
        name = f"ablation_{axis}"
        path = self.experiment.save_frame(result.to_frame(), f"{name}.csv")
        reports = [
            MetricReport(f"{axis}={value}", [dataclasses.replace(r, method=f"{axis}={value}") for r in report.records])
            for value, report in result.entries
        ]
        self.experiment.save_plot(reports, f"{name}.svg")
        self.print_success(f"Ablation over {axis} written to {path}")
        return {'axis': axis, 'values': values}

    def handle_convergence(self) -> dict:
        families = None
        if self.args.families:
            families = [self.validator.validate_family(f) for f in self.args.families.split(',') if f]
        n_steps = self.config.n_steps if self.args.nfe else None
        result = self.experiment.convergence_study(families, n_steps)
        self.experiment.save_frame(result.to_frame(), 'convergence.csv')
        path = self.experiment.save_frame(result.summary_frame(), 'convergence_summary.csv')
        for family, (slope, r_squared) in result.fits.items():
            self.print_info(f"{family}: order {slope:.3f} (R^2 = {r_squared:.4f})")
        self.print_success(f"Convergence summary written to {path}")
        return {'slopes': {f: s for f, (s, _) in result.fits.items()}}

    def handle_disentangle(self) -> dict:
        curve = self.experiment.disentangle()
        path = self.experiment.save_curve(curve)
        for r in curve.records:
            self.print_info(f"[{r.t:.3f}, {r.s:.3f}] approx={r.approx_mse:.3e} disc={r.disc_mse:.3e}")
        self.print_success(f"Error curves written to {path}")
        return {'periods': len(curve.records)}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        return CommandRunner(args).run()
    except (ConfigurationError, ValidationError) as e:
        _report(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NumericError as e:
        _report(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except SamplerError as e:
        _report(str(e))
        return EXIT_FAILURE


def _report(message: str):
    SamplerLogger.log(logging.ERROR, message)
    print(f"{Fore.RED}Error: {message}{Style.RESET_ALL}", file=sys.stderr)


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
