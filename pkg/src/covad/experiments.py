"""Monte Carlo experiment orchestration.

An experiment is described by a TOML file (see ``recipes/``)::

    kind = "support_error_vs_m"
    trials = 20
    master_seed = 1
    output = "out/support.csv"

    [model]
    l = 100
    ktot = 2000
    ka = [300]
    m = [100, 200, 400]
    snr_db = [0.0, 0.0]

    [algorithms]
    names = ["ml", "nnls", "amp"]

Unknown keys anywhere are rejected.  Each grid point runs ``trials``
independent trials seeded by ``derive_seed(master_seed, [kind, point, trial])``;
all algorithms inside a trial see the same pilots, activity pattern and
received block.  One CSV row is written per (grid point, algorithm) with
the mean and standard error of every metric, in deterministic order.
"""

from __future__ import annotations

import csv
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import amp as amp_mod
from . import detectors as det
from . import metrics as met
from . import ura as ura_mod
from .errors import InvalidArgument
from .seeding import derive_seed, make_rng
from .system_model import (
    LsfcModel,
    ReceivedBlock,
    complex_normal,
    generate_pilots,
    sample_covariance,
    sample_ground_truth,
    synthesize_block,
    true_covariance,
)

KINDS = (
    "support_error_vs_m",
    "l1_error_vs_m",
    "phase_transition",
    "amp_stability",
    "ura_pe_vs_ka",
    "ura_pe_vs_ebn0",
    "ura_ebn0_vs_ka",
    "covariance_deviation",
)
ALGORITHMS = ("ml", "nnls", "amp")


@dataclass
class ModelConfig:
    l: List[int] = field(default_factory=lambda: [100])
    ktot: int = 2000
    ka: List[int] = field(default_factory=lambda: [100])
    m: List[int] = field(default_factory=lambda: [100])
    snr_db: List[float] = field(default_factory=lambda: [0.0, 0.0])
    sigma2: float = 1.0
    ebn0_db: List[float] = field(default_factory=lambda: [0.0])


@dataclass
class DetectorConfig:
    max_epochs: int = 50
    tolerance: Optional[float] = None
    schedule: str = "random_permutation"
    box_constraint: bool = False


@dataclass
class AmpConfig:
    max_iters: int = 50
    tau_mode: str = "empirical"
    derivative_mode: str = "full"
    early_stop: Optional[float] = 1e-6
    se_samples: int = 10_000
    divergence_factor: float = 3.0
    statistic: str = "row_energy"


@dataclass
class PhaseConfig:
    success_tol: float = 1e-3
    max_epochs: int = 2000


@dataclass
class UraConfig:
    preset_l: int = 100
    parity_seed: int = 0
    threshold: Optional[float] = None
    delta: Optional[int] = None
    pilot_slots: int = 4
    fresh_codebook: bool = True
    target_pe: float = 0.05
    max_epochs: int = 30
    tolerance: float = 1e-3


@dataclass
class ExperimentConfig:
    kind: str
    trials: int = 10
    master_seed: int = 0
    output: str = "results.csv"
    workers: int = 1
    keep_raw: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    algorithms: List[str] = field(default_factory=lambda: ["ml"])
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    amp: AmpConfig = field(default_factory=AmpConfig)
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    ura: UraConfig = field(default_factory=UraConfig)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if self.trials < 1:
            problems.append("trials: must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            problems.append("master_seed: must fit in 64 bits")
        if self.workers < 1:
            problems.append("workers: must be >= 1")
        for name in ("l", "ka", "m", "ebn0_db"):
            if not list(getattr(self.model, name)):
                problems.append(f"model.{name}: grid must be non-empty")
        if len(self.model.snr_db) != 2 or self.model.snr_db[0] > self.model.snr_db[1]:
            problems.append("model.snr_db: expected [low, high] with low <= high")
        if self.model.sigma2 <= 0:
            problems.append("model.sigma2: must be positive")
        if any(k < 0 or k > self.model.ktot for k in self.model.ka) and not self.kind.startswith("ura"):
            problems.append("model.ka: entries must lie in [0, ktot]")
        if any(m < 1 for m in self.model.m):
            problems.append("model.m: entries must be >= 1")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            problems.append(f"algorithms.names: unknown {bad}; choose from {ALGORITHMS}")
        if not self.algorithms:
            problems.append("algorithms.names: must be non-empty")
        if self.kind == "phase_transition" and "amp" in self.algorithms:
            problems.append("algorithms.names: phase_transition supports ml and nnls only")
        if self.amp.statistic not in ("row_energy", "phi"):
            problems.append("amp.statistic: must be 'row_energy' or 'phi'")
        if problems:
            raise InvalidArgument("invalid experiment config:\n  " + "\n  ".join(problems))
        return self


_SECTIONS = {
    "model": ModelConfig,
    "detector": DetectorConfig,
    "amp": AmpConfig,
    "phase": PhaseConfig,
    "ura": UraConfig,
}
_LIST_FIELDS = {"l", "ka", "m", "ebn0_db", "snr_db"}


def _build_section(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise InvalidArgument(f"{where}: expected a table")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise InvalidArgument(f"{where}: unknown keys {unknown}; allowed {sorted(names)}")
    values = {}
    for key, val in table.items():
        if key in _LIST_FIELDS and not isinstance(val, list):
            val = [val]
        values[key] = val
    return cls(**values)


def config_from_dict(data: dict) -> ExperimentConfig:
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise InvalidArgument(f"unknown top-level keys {unknown}; allowed {sorted(top)}")
    if "kind" not in data:
        raise InvalidArgument("kind: missing")
    values = dict(data)
    for name, cls in _SECTIONS.items():
        if name in values:
            values[name] = _build_section(cls, values[name], name)
    if "algorithms" in values:
        algos = values["algorithms"]
        if isinstance(algos, dict):
            extra = sorted(set(algos) - {"names"})
            if extra:
                raise InvalidArgument(f"algorithms: unknown keys {extra}; allowed ['names']")
            algos = algos.get("names", [])
        values["algorithms"] = [str(a).lower() for a in algos]
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data)


# --------------------------------------------------------------------------- grid points


def grid_points(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    mdl = cfg.model
    if cfg.kind == "phase_transition":
        return [{"l": l, "ka": ka} for l in mdl.l for ka in mdl.ka]
    if cfg.kind == "ura_pe_vs_ka":
        return [{"m": m, "ka": ka, "ebn0_db": mdl.ebn0_db[0]} for m in mdl.m for ka in mdl.ka]
    if cfg.kind == "ura_pe_vs_ebn0":
        return [{"m": m, "ka": ka, "ebn0_db": e} for m in mdl.m for ka in mdl.ka for e in mdl.ebn0_db]
    if cfg.kind == "ura_ebn0_vs_ka":
        return [{"m": m, "ka": ka, "ebn0_db": e} for m in mdl.m for ka in mdl.ka for e in mdl.ebn0_db]
    return [{"l": l, "ka": ka, "m": m} for l in mdl.l for ka in mdl.ka for m in mdl.m]


def _point_labels(point: Dict[str, Any]) -> List[str]:
    return [f"{k}={point[k]!r}" for k in sorted(point)]


def trial_seed(cfg: ExperimentConfig, point: Dict[str, Any], trial: int) -> int:
    return derive_seed(cfg.master_seed, [cfg.kind, *_point_labels(point), trial])


# --------------------------------------------------------------------------- trials


def _lsfc_model(cfg: ExperimentConfig) -> LsfcModel:
    lo, hi = cfg.model.snr_db
    return LsfcModel.from_snr_db(lo, hi, cfg.model.sigma2)


def _detector_options(cfg: ExperimentConfig, seed: int, box=None) -> det.DetectorOptions:
    d = cfg.detector
    return det.DetectorOptions(
        max_epochs=d.max_epochs, tolerance=d.tolerance, schedule=d.schedule,
        box_upper=box, seed=seed & 0xFFFFFFFF,
    )


def _activity_trial(cfg: ExperimentConfig, point, seed: int) -> Dict[str, Any]:
    """One draw of pilots, activity and block; every algorithm sees the same data."""
    l, ka, m = point["l"], point["ka"], point["m"]
    sigma2 = cfg.model.sigma2
    pilots = generate_pilots(l, cfg.model.ktot, derive_seed(seed, ["pilots"]))
    truth = sample_ground_truth(cfg.model.ktot, ka, _lsfc_model(cfg), derive_seed(seed, ["truth"]))
    block = synthesize_block(pilots, truth, m, sigma2, derive_seed(seed, ["block"]))
    cov = sample_covariance(block)
    out = {"truth": truth, "estimates": {}}
    box = truth.lsfc if cfg.detector.box_constraint else None
    for alg in cfg.algorithms:
        if alg == "amp":
            opts = amp_mod.AmpOptions(
                lam=ka / cfg.model.ktot, lsfc=truth.lsfc, max_iters=cfg.amp.max_iters,
                tau_mode=cfg.amp.tau_mode, derivative_mode=cfg.amp.derivative_mode,
                early_stop=cfg.amp.early_stop, se_samples=cfg.amp.se_samples,
            )
            res = amp_mod.amp_run(block, pilots, opts)
            if res.diverged:
                gamma = np.full(cfg.model.ktot, np.nan)
            elif cfg.amp.statistic == "phi":
                gamma = amp_mod.amp_activity_probability(res)
            else:
                gamma = amp_mod.amp_estimate_gamma(res.x, res.z, pilots, res.tau2)
        else:
            est = det.run_detector(pilots, cov, sigma2, _detector_options(cfg, seed, box), alg)
            gamma = est.gamma_hat
        out["estimates"][alg] = gamma
    return out


def _trial_support(cfg, point, seed):
    res = _activity_trial(cfg, point, seed)
    truth = res["truth"]
    rows = {}
    for alg, gamma in res["estimates"].items():
        if not np.all(np.isfinite(gamma)):
            rows[alg] = {"eer": math.nan, "gamma": None, "active": truth.active_set}
            continue
        if truth.ka == 0:
            eer = float(np.mean(gamma > 0))
        else:
            eer = met.equal_error_point(met.roc_sweep(gamma, truth.active_set, sigma2=cfg.model.sigma2)).rate
        rows[alg] = {"eer": eer, "gamma": gamma, "active": truth.active_set}
    return rows


def _trial_l1(cfg, point, seed):
    res = _activity_trial(cfg, point, seed)
    truth = res["truth"]
    rows = {}
    for alg, gamma in res["estimates"].items():
        if truth.ka == 0:
            rows[alg] = {"rel_l1": float(np.sum(np.abs(gamma)))}
        else:
            rows[alg] = {
                "rel_l1": met.lp_error(gamma, truth.gamma_true, 1),
                "rel_l2": met.lp_error(gamma, truth.gamma_true, 2),
            }
    return rows


def _trial_phase(cfg, point, seed):
    l, ka = point["l"], point["ka"]
    sigma2 = cfg.model.sigma2
    pilots = generate_pilots(l, cfg.model.ktot, derive_seed(seed, ["pilots"]))
    truth = sample_ground_truth(cfg.model.ktot, ka, _lsfc_model(cfg), derive_seed(seed, ["truth"]))
    cov = true_covariance(pilots, truth.gamma_true, sigma2)
    opts = det.DetectorOptions(max_epochs=cfg.phase.max_epochs, seed=seed & 0xFFFFFFFF)
    out = {}
    for alg in cfg.algorithms:
        est = det.run_detector(pilots, cov, sigma2, opts, alg)
        err = met.lp_error(est.gamma_hat, truth.gamma_true, 1) if ka > 0 else float(np.sum(est.gamma_hat))
        out[alg] = {"rel_l1": err, "success": float(err < cfg.phase.success_tol)}
    return out


def amp_stability_trial(l, ktot, ka, m, lsfc_model, sigma2, seed, amp_cfg: Optional[AmpConfig] = None):
    """One AMP run with ground truth; returns the final measured/predicted MSE ratio and traces."""
    amp_cfg = amp_cfg or AmpConfig()
    pilots = generate_pilots(l, ktot, derive_seed(seed, ["pilots"]))
    truth = sample_ground_truth(ktot, ka, lsfc_model, derive_seed(seed, ["truth"]))
    rng = make_rng(derive_seed(seed, ["channel"]))
    x = np.zeros((ktot, m), dtype=np.complex128)
    act = truth.active_set
    x[act] = np.sqrt(truth.gamma_true[act])[:, None] * complex_normal(rng, (act.size, m))
    y = pilots.entries @ x + complex_normal(rng, (l, m), sigma2)
    opts = amp_mod.AmpOptions(
        lam=ka / ktot, lsfc=truth.lsfc, max_iters=amp_cfg.max_iters, tau_mode=amp_cfg.tau_mode,
        derivative_mode=amp_cfg.derivative_mode, early_stop=None, se_samples=amp_cfg.se_samples,
        seed=derive_seed(seed, ["se"]) & 0xFFFFFFFF,
    )
    res = amp_mod.amp_run(ReceivedBlock(y, sigma2), pilots, opts, x_true=x, lsfc_model=lsfc_model)
    if res.diverged or not res.mse_trace:
        ratio = math.inf
    else:
        ratio = res.mse_trace[-1] / res.se_mse_trace[-1]
    return ratio, res


def _trial_amp(cfg, point, seed):
    ratio, res = amp_stability_trial(
        point["l"], cfg.model.ktot, point["ka"], point["m"], _lsfc_model(cfg), cfg.model.sigma2, seed, cfg.amp
    )
    return {"amp": {
        "final_mse": res.mse_trace[-1] if res.mse_trace else math.nan,
        "se_prediction": res.se_mse_trace[-1] if res.se_mse_trace else math.nan,
        "unstable": float(ratio > cfg.amp.divergence_factor),
        "diverged": float(res.diverged),
    }}


def _trial_deviation(cfg, point, seed):
    l, ka, m = point["l"], point["ka"], point["m"]
    pilots = generate_pilots(l, cfg.model.ktot, derive_seed(seed, ["pilots"]))
    truth = sample_ground_truth(cfg.model.ktot, ka, _lsfc_model(cfg), derive_seed(seed, ["truth"]))
    block = synthesize_block(pilots, truth, m, cfg.model.sigma2, derive_seed(seed, ["block"]))
    cov = true_covariance(pilots, truth.gamma_true, cfg.model.sigma2)
    dev2 = met.covariance_deviation(sample_covariance(block), cov) ** 2
    return {"covariance": {"deviation_sq": dev2, "predicted": met.expected_deviation_sq(cov, m)}}


def _ura_setup(cfg: ExperimentConfig):
    spec = ura_mod.table_one_spec(cfg.ura.preset_l, cfg.ura.parity_seed)
    opts = det.DetectorOptions(max_epochs=cfg.ura.max_epochs, tolerance=cfg.ura.tolerance)
    return spec, opts


def _ura_threshold(cfg, point, spec, opts, codebook):
    if cfg.ura.delta is not None:
        return None
    if cfg.ura.threshold is not None:
        return cfg.ura.threshold
    seed = derive_seed(cfg.master_seed, [cfg.kind, "calibration", *_point_labels(point)])
    return ura_mod.calibrate_threshold(
        spec, codebook, point["ka"], point["m"], point["ebn0_db"], seed,
        pilot_slots=cfg.ura.pilot_slots, detector_options=opts,
    )


def _shared_codebook(cfg, spec):
    return generate_pilots(cfg.ura.preset_l, 1 << spec.j_bits, derive_seed(cfg.master_seed, ["codebook"]))


def _trial_ura(cfg, point, seed, threshold=None):
    spec, opts = _ura_setup(cfg)
    codebook = None if cfg.ura.fresh_codebook else _shared_codebook(cfg, spec)
    if codebook is None:
        codebook = generate_pilots(cfg.ura.preset_l, 1 << spec.j_bits, derive_seed(seed, ["codebook"]))
    opts = replace(opts, seed=seed & 0xFFFFFFFF)
    res = ura_mod.ura_end_to_end(
        spec, codebook, point["ka"], point["m"], point["ebn0_db"], threshold, seed,
        detector_options=opts, delta=cfg.ura.delta,
    )
    return {"ura": {"p_md": res.p_md, "p_fa": res.p_fa, "pe": res.pe, "max_paths": float(res.max_paths)}}


_TRIALS: Dict[str, Callable] = {
    "support_error_vs_m": _trial_support,
    "l1_error_vs_m": _trial_l1,
    "phase_transition": _trial_phase,
    "amp_stability": _trial_amp,
    "covariance_deviation": _trial_deviation,
    "ura_pe_vs_ka": _trial_ura,
    "ura_pe_vs_ebn0": _trial_ura,
    "ura_ebn0_vs_ka": _trial_ura,
}


def _run_task(args):
    cfg, point, trial, extra = args
    seed = trial_seed(cfg, point, trial)
    fn = _TRIALS[cfg.kind]
    if cfg.kind.startswith("ura"):
        return fn(cfg, point, seed, extra)
    return fn(cfg, point, seed)


def _map_tasks(tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks, chunksize=1))


# --------------------------------------------------------------------------- aggregation


def _aggregate(cfg, point, results) -> List[Dict[str, Any]]:
    rows = []
    for alg in results[0]:
        per = [r[alg] for r in results]
        row = {"kind": cfg.kind, **point, "algorithm": alg}
        if cfg.kind in ("support_error_vs_m", "l1_error_vs_m", "covariance_deviation", "amp_stability"):
            row.update({"ktot": cfg.model.ktot, "snr_lo_db": cfg.model.snr_db[0], "snr_hi_db": cfg.model.snr_db[1]})
        keys = [k for k in per[0] if k not in ("gamma", "active")]
        for key in keys:
            mean, se = met.mean_and_stderr(p[key] for p in per)
            row[f"{key}_mean"] = mean
            row[f"{key}_stderr"] = se
        if cfg.kind == "support_error_vs_m":
            valid = [p for p in per if p["gamma"] is not None]
            if valid and point["ka"] > 0:
                eer = met.equal_error_point(
                    met.roc_curve([p["gamma"] for p in valid], [p["active"] for p in valid], cfg.model.sigma2)
                )
                row["eer_pooled"] = eer.rate
                row["eer_in_grid"] = int(eer.in_grid)
            else:
                row["eer_pooled"] = math.nan
                row["eer_in_grid"] = 0
            row["failed_runs"] = len(per) - len(valid)
        if cfg.kind == "covariance_deviation":
            row["ratio"] = row["deviation_sq_mean"] / row["predicted_mean"]
        row["trials"] = cfg.trials
        row["master_seed"] = cfg.master_seed
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_rows(path, rows: Sequence[Dict[str, Any]]) -> None:
    cols: List[str] = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=",")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])


@dataclass
class ExperimentSummary:
    kind: str
    rows: List[Dict[str, Any]]
    files: List[str]
    notes: List[str] = field(default_factory=list)

    def text(self) -> str:
        lines = [f"experiment: {self.kind}", f"rows: {len(self.rows)}"]
        lines += [f"note: {n}" for n in self.notes]
        lines += [f"wrote: {f}" for f in self.files]
        return "\n".join(lines)


def phase_boundary(
    rows: Sequence[Dict[str, Any]], l: int, level: float = 0.5, algorithm: Optional[str] = None
) -> Tuple[int, bool]:
    """Largest ``Ka`` before the first grid point whose success rate drops below ``level``.

    Returns ``(ka_star, censored)``; ``censored`` is True when every ``Ka`` in
    the grid succeeds, so the boundary lies beyond the grid.  ``algorithm``
    restricts the rows used (required when several were run).
    """
    sel = [r for r in rows if r["l"] == l and (algorithm is None or r["algorithm"] == algorithm)]
    if algorithm is None and len({r["algorithm"] for r in sel}) > 1:
        raise InvalidArgument("rows hold several algorithms; pass algorithm=")
    pts = sorted((r["ka"], r["success_mean"]) for r in sel)
    prev = 0
    for ka, rate in pts:
        if rate < level:
            return prev, False
        prev = ka
    return prev, True


def _ebn0_requirements(cfg, rows):
    # Smallest Eb/N0 on the grid reaching the target error rate, per (m, ka).
    out = []
    keyed: Dict[Tuple[int, int], List[Tuple[float, float]]] = {}
    for r in rows:
        keyed.setdefault((r["m"], r["ka"]), []).append((r["ebn0_db"], r["pe_mean"]))
    for (m, ka), pts in sorted(keyed.items()):
        req = next((e for e, pe in sorted(pts) if pe < cfg.ura.target_pe), math.nan)
        out.append({"kind": cfg.kind, "preset_l": cfg.ura.preset_l, "m": m, "ka": ka,
                    "required_ebn0_db": req, "target_pe": cfg.ura.target_pe,
                    "trials": cfg.trials, "master_seed": cfg.master_seed})
    return out


def run_experiment(cfg: ExperimentConfig, progress: Optional[Callable[[str], None]] = None) -> ExperimentSummary:
    """Run every grid point of ``cfg`` and write the aggregated CSV."""
    cfg.validate()
    points = grid_points(cfg)
    extras = []
    if cfg.kind.startswith("ura"):
        spec, opts = _ura_setup(cfg)
        codebook = _shared_codebook(cfg, spec)
        extras = [_ura_threshold(cfg, p, spec, opts, codebook) for p in points]
    else:
        extras = [None] * len(points)
    tasks = [(cfg, p, t, extras[i]) for i, p in enumerate(points) for t in range(cfg.trials)]
    results = _map_tasks(tasks, cfg.workers)
    rows: List[Dict[str, Any]] = []
    raw: List[Dict[str, Any]] = []
    for i, point in enumerate(points):
        chunk = results[i * cfg.trials:(i + 1) * cfg.trials]
        point_rows = _aggregate(cfg, point, chunk)
        if cfg.kind.startswith("ura") and extras[i] is not None:
            for r in point_rows:
                r["threshold"] = extras[i]
        rows.extend(point_rows)
        if cfg.keep_raw:
            for t, res in enumerate(chunk):
                for alg, vals in res.items():
                    raw.append({"kind": cfg.kind, **point, "algorithm": alg, "trial": t,
                                "seed": trial_seed(cfg, point, t),
                                **{k: v for k, v in vals.items() if k not in ("gamma", "active")}})
        if progress:
            progress(f"{cfg.kind} {point} done")
    files = []
    notes = []
    write_rows(cfg.output, rows)
    files.append(str(cfg.output))
    if cfg.kind == "ura_ebn0_vs_ka":
        req_path = str(Path(cfg.output).with_suffix("")) + "_required.csv"
        write_rows(req_path, _ebn0_requirements(cfg, rows))
        files.append(req_path)
    if cfg.kind == "phase_transition":
        for alg in cfg.algorithms:
            for l in cfg.model.l:
                ka_star, censored = phase_boundary(rows, l, algorithm=alg)
                notes.append(f"{alg} L={l}: Ka*={ka_star}{' (censored at grid edge)' if censored else ''}")
    if cfg.keep_raw:
        raw_path = str(Path(cfg.output).with_suffix("")) + "_raw.csv"
        write_rows(raw_path, raw)
        files.append(raw_path)
    summary = ExperimentSummary(cfg.kind, rows, files, notes)
    summary_path = str(Path(cfg.output).with_suffix(".txt"))
    Path(summary_path).write_text(summary.text() + f"\nwrote: {summary_path}\n", encoding="utf-8")
    summary.files.append(summary_path)
    return summary
