"""Per-stage timing reports: CSV (primary) and a small SVG chart."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

HEADER = ("stage", "level", "seconds", "calls", "dofs", "dofs_per_rank")


@dataclass(frozen=True)
class StageRow:
    stage: str
    level: int
    seconds: float
    calls: int
    dofs: int
    dofs_per_rank: float


@dataclass
class TimingReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)           # shown in the run header line

    def add(self, stage, level, seconds, calls, dofs, nranks):
        self.rows.append(StageRow(stage, int(level), float(seconds), int(calls), int(dofs),
                                  dofs / float(nranks)))

    def stage(self, name) -> StageRow | None:
        for r in self.rows:
            if r.stage == name:
                return r
        return None

    @property
    def stages(self):
        return [r.stage for r in self.rows]


def _row_cells(r: StageRow):
    return [r.stage, str(r.level), repr(r.seconds), str(r.calls), str(r.dofs), repr(r.dofs_per_rank)]


def format_report(reports, fit=None) -> str:
    """CSV text: header, then one ``# run:`` section per report, then ``# amdahl``."""
    if isinstance(reports, TimingReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for rep in reports:
        meta = " ".join(f"{k}={v}" for k, v in rep.meta.items())
        buf.write(f"# run: {meta}\n" if meta else "# run:\n")
        for r in rep.rows:
            w.writerow(_row_cells(r))
    if fit is not None:
        buf.write("# amdahl\n")
        w.writerow(("s", "p", "residual"))
        w.writerow((repr(fit.s), repr(fit.p), repr(fit.residual)))
    return buf.getvalue()


def emit_report(reports, fit=None, path=None, format="csv") -> str:
    """Write the CSV report to ``path`` (if given) and return the text."""
    if format != "csv":
        raise ValueError(f"unsupported report format {format!r}")
    text = format_report(reports, fit)
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_report(source):
    """Parse :func:`format_report` output. Returns ``(reports, fit_or_None)``."""
    if isinstance(source, str) and source.startswith(HEADER[0] + ","):
        text = source
    else:
        with open(source) as fh:
            text = fh.read()
    reports, fit = [], None
    lines = text.splitlines()
    if not lines or lines[0] != ",".join(HEADER):
        raise ValueError("not a timing report (bad header)")
    mode = None
    for line in lines[1:]:
        if line.startswith("# run:"):
            meta = {}
            for item in line[len("# run:"):].split():
                k, _, v = item.partition("=")
                meta[k] = v
            reports.append(TimingReport([], meta))
            mode = "run"
        elif line.startswith("# amdahl"):
            mode = "amdahl"
        elif mode == "amdahl":
            if line.startswith("s,"):
                continue
            s, p, res = (float(x) for x in next(csv.reader([line])))
            fit = (s, p, res)
        elif mode == "run" and line:
            st, lv, sec, calls, dofs, dpr = next(csv.reader([line]))
            reports[-1].rows.append(StageRow(st, int(lv), float(sec), int(calls), int(dofs), float(dpr)))
    return reports, fit


def write_svg(reports, path, stages=None, width=640, height=420):
    """Log-log chart of stage seconds versus dofs per rank, one line per stage."""
    series = {}
    for rep in reports:
        for r in rep.rows:
            if r.seconds > 0 and (stages is None or r.stage in stages):
                series.setdefault(r.stage, []).append((r.dofs_per_rank, r.seconds))
    pad = 60
    pts = [p for s in series.values() for p in s]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if pts:
        lx = [math.log10(p[0]) for p in pts]
        ly = [math.log10(p[1]) for p in pts]
        x0, x1 = min(lx), max(lx) + 1e-9
        y0, y1 = min(ly), max(ly) + 1e-9

        def X(v):
            return pad + (math.log10(v) - x0) / (x1 - x0) * (width - 2 * pad)

        def Y(v):
            return height - pad - (math.log10(v) - y0) / (y1 - y0) * (height - 2 * pad)

        palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
        out.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
        out.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
        out.append(f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle" font-size="12">'
                   f'dofs per rank (log)</text>')
        out.append(f'<text x="15" y="{height / 2}" font-size="12" transform="rotate(-90 15 {height / 2})" '
                   f'text-anchor="middle">seconds (log)</text>')
        for i, (name, data) in enumerate(sorted(series.items())):
            data.sort()
            colour = palette[i % len(palette)]
            poly = " ".join(f"{X(a):.1f},{Y(b):.1f}" for a, b in data)
            out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{poly}"/>')
            out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" fill="{colour}">'
                       f'{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
