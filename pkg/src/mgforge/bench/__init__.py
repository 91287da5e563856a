"""Benchmark harness: Poisson runs, error norms, timing reports, scaling fits."""
from .amdahl import AmdahlFit, fit_amdahl
from .parameters import (FMG_PATCH_PARAMETERS, native_fmg_options, native_telescope_options,
                       telescope_parameters, translate_options)
from .poisson import (CG_MG_OPTIONS, BenchConfig, PoissonResult, dofs_per_rank, l2_error, max_node_error,
                      prepare, run_poisson)
from .report import HEADER, StageRow, TimingReport, emit_report, format_report, read_report, write_svg
from .sweep import SweepResult, strong_scaling

__all__ = ["AmdahlFit", "fit_amdahl", "FMG_PATCH_PARAMETERS", "native_fmg_options",
           "native_telescope_options", "telescope_parameters", "translate_options", "CG_MG_OPTIONS",
           "BenchConfig", "PoissonResult", "dofs_per_rank", "l2_error", "max_node_error", "prepare",
           "run_poisson", "HEADER", "StageRow", "TimingReport", "emit_report", "format_report",
           "read_report", "write_svg", "SweepResult", "strong_scaling"]
