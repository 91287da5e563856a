"""Strong-scaling sweeps: the same problem over several rank counts."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .amdahl import AmdahlFit, fit_amdahl
from .poisson import BenchConfig, prepare, run_poisson
from .report import TimingReport


@dataclass
class SweepResult:
    runs: list                      # (ranks, PoissonResult) with per-stage minima over repetitions
    fit: AmdahlFit | None

    @property
    def reports(self):
        return [r.report for _, r in self.runs]


def _stage_minimum(reports) -> TimingReport:
    best = {}
    for rep in reports:
        for row in rep.rows:
            cur = best.get(row.stage)
            if cur is None or row.seconds < cur.seconds:
                best[row.stage] = row
    order = [row.stage for row in reports[0].rows]
    return TimingReport([best[s] for s in order], dict(reports[0].meta))


def strong_scaling(config: BenchConfig, ranks, reps: int | None = None) -> SweepResult:
    """Run ``config`` for every rank count; keep per-stage minima over ``reps`` runs."""
    reps = config.reps if reps is None else reps
    runs = []
    for R in ranks:
        cfg = replace(config, ranks=int(R))
        problem = prepare(cfg)
        results = [run_poisson(cfg, problem) for _ in range(reps)]
        first = results[0]
        first.report = _stage_minimum([r.report for r in results])
        runs.append((int(R), first))
    fit = None
    if len({R for R, _ in runs}) >= 2:
        pts = [(R, res.report.stage("total_solve").seconds) for R, res in runs
               if res.report.stage("total_solve") is not None]
        fit = fit_amdahl(pts)
    return SweepResult(runs, fit)


__all__ = ["SweepResult", "strong_scaling"]
