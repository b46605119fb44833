"""The comparison protocol: random splines, optimized variants, Monte Carlo filtering, tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dump_config
from . import metrics
from .lie import rank_diagnostic
from .metrics import default_P0, make_windows
from .optimizer import accel_cost, cost_batch, limits_for, random_spline, solve
from .sim import QualityLevel, cost_normalized_error, normalized_cost, run_calibration
from .spline import UniformSpline, save_spline

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("method", "quality", "seed", "sum_sq_error", "accel_cost")


def trial_seed(master: int, trial: int) -> int:
    return int(np.random.SeedSequence([master, trial]).generate_state(1)[0])


def run_seed(master: int, trial: int, quality: int) -> int:
    # shared across methods: common random numbers for the comparison
    return int(np.random.SeedSequence([master, trial, quality, 7]).generate_state(1)[0])


def trial_splines(cfg: ExperimentConfig, trial: int, log_dir: Path | None = None) -> dict[str, UniformSpline]:
    """The random spline of one trial and its optimized variants."""
    base = random_spline(
        np.zeros(4),
        trial_seed(cfg.master_seed, trial),
        cfg.n_knots,
        cfg.dt_knot,
        cfg.limit_spec(),
        cfg.spline_order,
        cfg.end_radius,
        cfg.yaw_range,
        cfg.wiggle,
    )
    lim = limits_for(base, cfg.limit_spec())
    out = {}
    for method in cfg.methods:
        if method == "random":
            out[method] = base
            continue
        res = solve(base, cfg.cost_spec(method), lim, cfg.budget, cfg.solver_options())
        if log_dir is not None:
            (log_dir / f"trial{trial}_{method}_opt.csv").write_text(res.log_csv())
        out[method] = res.spline
    return out


@dataclass
class ExperimentResult:
    out_dir: Path
    runs: dict = field(default_factory=dict)  # (method, quality) -> list[CalibrationRunResult]
    table: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def mean_error(self, method: str, quality: int) -> float:
        return float(np.mean([r.sum_sq_error for r in self.runs[(method, quality)]]))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue())


def summary_table(cfg: ExperimentConfig, runs: dict) -> list[dict]:
    by_method = {m: [r for q in cfg.qualities for r in runs.get((m, q), [])] for m in cfg.methods}
    by_method = {m: rs for m, rs in by_method.items() if rs}
    norm = normalized_cost(by_method) if by_method else {}
    table = []
    for m in by_method:
        row = {"method": m, "norm_cost": norm[m]}
        for q in cfg.qualities:
            rs = runs.get((m, q), [])
            sse = float(np.mean([r.sum_sq_error for r in rs])) if rs else float("nan")
            row[f"sse_q{q}"] = sse
            row[f"cost_x_error_q{q}"] = cost_normalized_error(norm[m], sse) if rs else float("nan")
        table.append(row)
    return table


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Full protocol; module errors abort only the affected run and are listed in failures.json."""
    out = Path(out_dir or cfg.out_dir)
    for sub in ("splines", "logs", "runs", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    result = ExperimentResult(out)
    noise, truth, rates, P0 = cfg.noise_spec(), cfg.truth(), cfg.rates(), default_P0()
    offset = (cfg.init_offset_m, float(np.deg2rad(cfg.init_offset_deg)))
    summary_rows = []
    for trial in range(cfg.n_trials):
        try:
            splines = trial_splines(cfg, trial, out / "logs")
        except Exception as exc:  # noqa: BLE001 - recorded in the manifest
            result.failures.append({"trial": trial, "stage": "trajectory", "error": repr(exc)})
            log.error("trial %d trajectory failed: %s", trial, exc)
            continue
        for method, spl in splines.items():
            save_spline(spl, out / "splines" / f"trial{trial}_{method}.spline")
            for q in cfg.qualities:
                seed = run_seed(cfg.master_seed, trial, q)
                try:
                    res = run_calibration(spl, truth, noise, P0, rates, QualityLevel(q), seed, offset)
                except Exception as exc:  # noqa: BLE001
                    result.failures.append(
                        {"trial": trial, "method": method, "quality": q, "stage": "calibration", "error": repr(exc),
                         "trace": traceback.format_exc(limit=3)}
                    )
                    continue
                result.runs.setdefault((method, q), []).append(res)
                (out / "runs" / f"trial{trial}_{method}_q{q}.csv").write_text(res.to_csv())
                summary_rows.append((method, q, seed, res.sum_sq_error, res.accel_cost))

    _write_csv(out / "summary_runs.csv", SUMMARY_FIELDS, summary_rows)
    result.table = summary_table(cfg, result.runs)
    if result.table:
        header = list(result.table[0])
        _write_csv(out / "summary_table.csv", header, [[row[h] for h in header] for row in result.table])
    _write_error_curves(out / "plots", result.runs)
    (out / "failures.json").write_text(json.dumps(result.failures, indent=2) + "\n")
    return result


def _write_error_curves(plot_dir: Path, runs: dict) -> None:
    """Mean and std of the extrinsic translation error norm across trials, per method and quality."""
    for (method, q), rs in sorted(runs.items()):
        n = min(len(r.t) for r in rs)
        E = np.stack([np.linalg.norm(r.trans_err[:n], axis=1) for r in rs])
        R = np.stack([r.rot_err[:n] for r in rs])
        rows = zip(rs[0].t[:n], E.mean(0), E.std(0), R.mean(0), R.std(0))
        _write_csv(
            plot_dir / f"error_{method}_q{q}.csv",
            ("t", "trans_err_mean", "trans_err_std", "rot_err_mean", "rot_err_std"),
            [tuple(float(x) for x in r) for r in rows],
        )


def read_summary_runs(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["quality"] = int(r["quality"])
        r["seed"] = int(r["seed"])
        r["sum_sq_error"] = float(r["sum_sq_error"])
        r["accel_cost"] = float(r["accel_cost"])
    return rows


# ---------------------------------------------------------------------------
# trajectory report
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryReport:
    span: float
    max_speed: float
    max_accel: float
    accel_cost: float
    j_deterministic: float
    j_stochastic: float
    window_times: list
    window_ranks: list
    unobservable: list

    def format(self) -> str:
        lines = [
            f"span            {self.span:.6g} s",
            f"max |v|         {self.max_speed:.6g} m/s",
            f"max |a|         {self.max_accel:.6g} m/s^2",
            f"accel_cost      {self.accel_cost:.6g}",
            f"J_obs (E2LOG)   {self.j_deterministic:.6g}",
            f"J_obs (info)    {self.j_stochastic:.6g}",
            "observability rank at sample windows:",
        ]
        for t, r, u in zip(self.window_times, self.window_ranks, self.unobservable):
            flag = f"  [{21 - r} unobservable: {', '.join(u)}]" if r < 21 else ""
            lines.append(f"  t = {t:7.3f} s  rank {r:2d}/21{flag}")
        return "\n".join(lines) + "\n"


def describe_trajectory(spline: UniformSpline, cfg: ExperimentConfig | None = None, n_windows: int = 5) -> TrajectoryReport:
    cfg = cfg or ExperimentConfig()
    t = np.linspace(spline.t_start, spline.t_end, 2001)
    v = spline.eval(t, 1)[:, :3]
    a = spline.eval(t, 2)[:, :3]
    j_det = float(cost_batch(spline.knots, spline, cfg.cost_spec("deterministic")))
    j_sto = float(cost_batch(spline.knots, spline, cfg.cost_spec("stochastic")))
    windows = make_windows(spline, cfg.H, 1.0 / cfg.cam_hz, 1.0 / cfg.imu_hz)
    pick = np.unique(np.linspace(0, len(windows) - 1, n_windows).round().astype(int))
    sel = [windows[i] for i in pick]
    O = metrics.window_observability(spline.knots, spline, sel, cfg.cost_spec("deterministic").lie, cfg.truth(), tuple(cfg.noise.gravity))
    ranks, unobs = [], []
    for n in range(len(sel)):
        rep = rank_diagnostic(O[n])
        ranks.append(rep.rank)
        unobs.append(rep.unobservable_blocks())
    return TrajectoryReport(
        spline.span,
        float(np.max(np.linalg.norm(v, axis=1))),
        float(np.max(np.linalg.norm(a, axis=1))),
        accel_cost(spline),
        j_det,
        j_sto,
        [w.t_start for w in sel],
        ranks,
        unobs,
    )
