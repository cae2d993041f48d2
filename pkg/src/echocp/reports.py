"""Run records and the text/CSV/JSON reports written by the command line driver."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .bench import BenchProblemSpec
from .ech import EchAbort, EchConfig, EchResult, IterationRecord, recomputation_time, run, run_standard
from .interp import interpolate
from .mesh import Mesh
from .problem import OcpProblem
from .transcription import ALL, NONE

STANDARD = "standard"
ECH = "ech"
OBJECTIVE_RTOL = 1e-4
TRAJECTORY_COLUMNS = ("t", "pN", "pE", "vN", "vE", "aN", "aE")

TIME_ROW = "Total Computation Time [s]"
ITER_ROW = "No. of Mesh Refinement Iterations"
RECOMP_ROW = "Re-computation Time [s]"
OBJ_ROW = "Objective"


@dataclass
class PipelineReport:
    name: str
    status: str
    converged: bool
    total_time: float
    recompute_time: Optional[float]
    objective: Optional[float]
    mr_iterations: int
    final_K: int
    final_n_ineq: int
    afp_invocations: int
    history: list = field(default_factory=list)
    trajectory: dict = field(default_factory=dict)
    message: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history"] = [h.to_dict() for h in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineReport":
        d = dict(d)
        d["history"] = [IterationRecord.from_dict(h) for h in d.get("history", [])]
        return cls(**d)


@dataclass
class RunReport:
    problem: dict
    config: dict
    pipelines: dict = field(default_factory=dict)

    @property
    def objective_rel_diff(self) -> Optional[float]:
        try:
            a = self.pipelines[STANDARD].objective
            b = self.pipelines[ECH].objective
        except KeyError:
            return None
        if a is None or b is None:
            return None
        return abs(b - a) / max(abs(a), 1e-300)

    @property
    def objectives_agree(self) -> Optional[bool]:
        d = self.objective_rel_diff
        return None if d is None else d <= OBJECTIVE_RTOL

    def to_dict(self) -> dict:
        return {"problem": self.problem, "config": self.config,
                "pipelines": {k: v.to_dict() for k, v in self.pipelines.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["problem"], d["config"],
                   {k: PipelineReport.from_dict(v) for k, v in d.get("pipelines", {}).items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


def config_dict(cfg: EchConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
    out["solver"].pop("log_callback", None)
    out["warm_solver"].pop("log_callback", None)
    return out


def trajectory_samples(result: EchResult, samples_per_interval: int = 10) -> dict:
    interp = interpolate(result.solution)
    t = np.unique(interp.sample_grid(samples_per_interval).ravel())
    X = interp.state(t)
    U = interp.input(t)
    cols = [t] + [X[:, k] for k in range(X.shape[1])] + [U[:, k] for k in range(U.shape[1])]
    names = TRAJECTORY_COLUMNS if len(cols) == len(TRAJECTORY_COLUMNS) else \
        ["t"] + [f"x{k}" for k in range(X.shape[1])] + [f"u{k}" for k in range(U.shape[1])]
    return {n: c.tolist() for n, c in zip(names, cols)}


def run_pipeline(name: str, prob: OcpProblem, mesh: Mesh, cfg: EchConfig, recompute_repeats: int = 3) -> PipelineReport:
    fn = run if name == ECH else run_standard
    try:
        res = fn(prob, mesh, cfg)
    except EchAbort as exc:
        st = exc.state
        hist = st.history if st is not None else []
        return PipelineReport(name, "failed", False, st.total_time if st else float("nan"), None, None,
                              len(hist), hist[-1].K if hist else mesh.K, hist[-1].n_ineq if hist else 0,
                              st.afp_invocations if st else 0, hist, {}, str(exc))
    st = res.state
    rt = recomputation_time(st, recompute_repeats) if recompute_repeats > 0 else None
    return PipelineReport(name, "converged" if st.converged else "max-iterations", st.converged, st.total_time, rt,
                          float(res.solution.objective), st.iteration, st.mesh.K, st.last_nlp.n_ineq,
                          st.afp_invocations, st.history, trajectory_samples(res, cfg.samples_per_interval))


def run_comparison(prob: OcpProblem, mesh: Mesh, cfg: EchConfig, spec: Optional[BenchProblemSpec] = None,
                   recompute_repeats: int = 3) -> RunReport:
    """Standard pipeline and ECH pipeline on identical inputs."""
    rep = RunReport(spec.to_dict() if spec is not None else {"name": prob.name}, config_dict(cfg))
    for name in (STANDARD, ECH):
        rep.pipelines[name] = run_pipeline(name, prob, mesh, cfg, recompute_repeats)
    return rep


def run_single(prob: OcpProblem, mesh: Mesh, cfg: EchConfig, pipeline: str = ECH,
               spec: Optional[BenchProblemSpec] = None, recompute_repeats: int = 3) -> RunReport:
    rep = RunReport(spec.to_dict() if spec is not None else {"name": prob.name}, config_dict(cfg))
    rep.pipelines[pipeline] = run_pipeline(pipeline, prob, mesh, cfg, recompute_repeats)
    return rep


# ---------------------------------------------------------------------------
# text tables

def _fmt_entry(entry, horizon) -> str:
    if entry == NONE:
        return "∅"
    if entry == ALL:
        return f"[{horizon[0]:g}, {horizon[1]:g}]"
    return ", ".join(f"[{a:.4g} {b:.4g}]" for a, b in entry)


def _table(header, rows) -> str:
    widths = [max(len(str(r[k])) for r in [header] + rows) for k in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    out = [line(header), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def history_table(pipe: PipelineReport, horizon=(0.0, 1.0)) -> str:
    """Per constraint set and iteration: implemented time spans."""
    hist = pipe.history
    header = ["Constraint Set"] + [f"MR Iteration {h.iteration} (K = {h.K})" for h in hist]
    labels = list(hist[0].filter) if hist else []
    rows = [[lab] + [_fmt_entry(_as_entry(h.filter[lab]), horizon) for h in hist] for lab in labels]
    return _table(header, rows)


def _as_entry(e):
    return e if isinstance(e, str) else [tuple(iv) for iv in e]


def comparison_table(report: RunReport) -> str:
    names = [n for n in (STANDARD, ECH) if n in report.pipelines]
    titles = {STANDARD: "Standard", ECH: "ECH"}
    header = [""] + [titles[n] for n in names]
    f = lambda v, spec: "n/a" if v is None else format(v, spec)
    rows = [
        [TIME_ROW] + [f(report.pipelines[n].total_time, ".3f") for n in names],
        [ITER_ROW] + [str(report.pipelines[n].mr_iterations) for n in names],
        [RECOMP_ROW] + [f(report.pipelines[n].recompute_time, ".3f") for n in names],
        [OBJ_ROW] + [f(report.pipelines[n].objective, ".8g") for n in names],
    ]
    return _table(header, rows)


def emit_reports(report: RunReport, out_dir) -> dict:
    """Write the history and comparison tables, CSV data and the JSON record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    horizon = (report.problem.get("t0", 0.0), report.problem.get("tf", 1.0))
    written = {}
    main = ECH if ECH in report.pipelines else next(iter(report.pipelines), None)
    hist_txt = history_table(report.pipelines[main], horizon) if main else _table(["Constraint Set"], [])
    written["history"] = out / "history.txt"
    written["history"].write_text(hist_txt)
    written["comparison"] = out / "comparison.txt"
    written["comparison"].write_text(comparison_table(report))
    for name, pipe in report.pipelines.items():
        if not pipe.trajectory:
            continue
        path = out / f"trajectory_{name}.csv"
        cols = list(pipe.trajectory)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(zip(*(pipe.trajectory[c] for c in cols)))
        written[f"trajectory_{name}"] = path
    zones = report.problem.get("zones", [])
    written["zones"] = out / "zones.csv"
    with written["zones"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zone", "north", "east", "radius"])
        for k, z in enumerate(zones):
            w.writerow([f"NFZ {k + 1}", *z])
    written["record"] = out / "run_record.json"
    written["record"].write_text(report.to_json())
    return written


def load_record(path) -> RunReport:
    return RunReport.from_json(Path(path).read_text())
