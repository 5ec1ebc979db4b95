from .config import OPT_PRESETS, RunConfig, build_config
from .data import TokenDataset, gen_synthetic
from .metrics import MetricsReport, params_digest
from .runner import cli_run, execute_run
from .suites import SUITE_NAMES, SuiteReport, run_suite

__all__ = [
    "OPT_PRESETS", "RunConfig", "build_config",
    "TokenDataset", "gen_synthetic",
    "MetricsReport", "params_digest",
    "cli_run", "execute_run",
    "SUITE_NAMES", "SuiteReport", "run_suite",
]
