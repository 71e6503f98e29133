"""Command-line driver.

    swmimaging simulate     --config run.json --out out/
    swmimaging reconstruct  --config run.json --data out/dataset.json --out out/
    swmimaging analyze-fim  --config run.json --out out/
    swmimaging sweep-width  --config run.json --out out/
    swmimaging bias-demo    --config run.json --out out/
    swmimaging fit-width    --config run.json --out out/

Configs are JSON documents with ``"schema": 1``; unknown keys are rejected.
Exit codes: 0 success, 2 configuration/input error, 3 model degeneracy,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import fisher, phantoms, sim, swm
from .forward import (
    MeasurementModel,
    ModelDegeneracyError,
    build_tensor,
    make_source,
)
from .optics import DetectorGrid, ImagingSystem, ObjectModel

SCHEMA = 1

DEFAULTS = {
    "schema": SCHEMA,
    "geometry": {
        "object_distance_mm": 234.0,
        "image_distance_mm": 454.0,
        "pinhole_radius_mm": 0.85,
        "wavelength_nm": 405.0,
        "detectors": {"layout": "conjugate", "pitch_um": 44.64, "dims": None, "oversample": 1,
                      "pad": 0},
    },
    "source": {"kind": "thermal", "correlation_width_px": 1.5, "correlation_width_um": None},
    "object": {"phantom": "three-slit", "values": None, "file": None,
               "pixel_size_rayleigh": 0.5, "pixel_size_um": None},
    "run": {
        "order": 2, "N": 1000000, "seed": 0, "noiseless": False, "sampling": "multinomial",
        "cap_factor": 2.0, "integration": None, "q": 3,
    },
    "reconstruct": {
        "core": 8, "border": None, "margin_um": None, "max_sweeps": 20, "sweep_tol": 1e-4,
        "outside": "current", "stride": None, "rho_star": 3.0, "initial_pixel_size_um": None,
        "max_iter": 200, "weighting": "poisson",
    },
    "fim": {"bandwidth_eps": 0.05, "rho_star": 3.0, "value": None},
    "sweep": {"grid_px": None, "start_px": 0.25, "stop_px": 4.0, "num": 16, "metric": "crb",
              "seeds": [0]},
    "bias": {"F11N": 50.0, "x_grid": None, "num": 11, "mc_trials": 0},
    "fit": {"input": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported config schema {doc.get('schema')!r}")
    cfg = _merge(DEFAULTS, doc)
    validate(cfg)
    return cfg


def _positive(cfg, *keys):
    for dotted in keys:
        node = cfg
        for k in dotted.split("."):
            node = node[k]
        if node is not None and not (isinstance(node, (int, float)) and node > 0 and math.isfinite(node)):
            raise ConfigError(f"{dotted} must be a positive number")


def validate(cfg: dict) -> None:
    _positive(cfg, "geometry.object_distance_mm", "geometry.image_distance_mm",
              "geometry.pinhole_radius_mm", "geometry.wavelength_nm", "geometry.detectors.pitch_um",
              "object.pixel_size_rayleigh", "object.pixel_size_um", "run.N", "run.q",
              "reconstruct.core", "reconstruct.max_sweeps", "reconstruct.sweep_tol",
              "reconstruct.max_iter", "bias.F11N", "bias.num", "fim.bandwidth_eps")
    src = cfg["source"]
    if src["kind"] not in ("thermal", "spdc"):
        raise ConfigError("source.kind must be 'thermal' or 'spdc'")
    for key in ("correlation_width_px", "correlation_width_um"):
        v = src[key]
        if v is not None and not (isinstance(v, (int, float)) and v >= 0):
            raise ConfigError(f"source.{key} must be >= 0")
    run = cfg["run"]
    if run["order"] not in (1, 2, 3, 4):
        raise ConfigError("run.order must be 1..4")
    if src["kind"] == "spdc" and run["order"] != 2:
        raise ConfigError("SPDC runs need order 2")
    if not isinstance(run["seed"], int) or not 0 <= run["seed"] < 2 ** 64:
        raise ConfigError("run.seed must be an unsigned 64-bit integer")
    if run["sampling"] not in ("multinomial", "poisson"):
        raise ConfigError("run.sampling must be 'multinomial' or 'poisson'")
    if run["integration"] not in (None, "quadrature", "small-pixel"):
        raise ConfigError("run.integration must be null, 'quadrature' or 'small-pixel'")
    obj = cfg["object"]
    given = [k for k in ("phantom", "values", "file") if obj[k] is not None]
    if obj["values"] is not None or obj["file"] is not None:
        given = [k for k in given if k != "phantom"]
    if len(given) != 1:
        raise ConfigError("object needs exactly one of phantom, values or file")
    if obj["file"] is not None and not Path(obj["file"]).is_file():
        raise ConfigError(f"object file {obj['file']} does not exist")
    if obj["phantom"] is not None and given == ["phantom"] and obj["phantom"] not in phantoms.phantom_names():
        raise ConfigError(f"unknown phantom {obj['phantom']!r}")
    if cfg["geometry"]["detectors"]["layout"] not in ("conjugate", "regular"):
        raise ConfigError("detectors.layout must be 'conjugate' or 'regular'")
    if cfg["reconstruct"]["outside"] not in ("zero", "current"):
        raise ConfigError("reconstruct.outside must be 'zero' or 'current'")
    if cfg["sweep"]["metric"] not in ("crb", "infidelity"):
        raise ConfigError("sweep.metric must be 'crb' or 'infidelity'")
    grid = cfg["bias"]["x_grid"]
    if grid is not None and (not grid or any(not isinstance(v, (int, float)) or v > 1 for v in grid)):
        raise ConfigError("bias.x_grid must be a nonempty list of values <= 1")
    if cfg["fit"]["input"] is not None and not Path(cfg["fit"]["input"]).is_file():
        raise ConfigError(f"fit input {cfg['fit']['input']} does not exist")


# --------------------------------------------------------------------------
# config -> model objects


def system_from(cfg) -> ImagingSystem:
    g = cfg["geometry"]
    return ImagingSystem.from_lab_units(g["object_distance_mm"], g["image_distance_mm"],
                                        g["pinhole_radius_mm"], g["wavelength_nm"])


def pixel_size_from(cfg, system) -> float:
    o = cfg["object"]
    if o["pixel_size_um"] is not None:
        return float(o["pixel_size_um"])
    return float(o["pixel_size_rayleigh"]) * system.rayleigh_width


def object_from(cfg, system) -> ObjectModel:
    o = cfg["object"]
    d = pixel_size_from(cfg, system)
    if o["values"] is not None:
        x = np.asarray(o["values"], dtype=float)
    elif o["file"] is not None:
        x = np.loadtxt(o["file"], delimiter=",", ndmin=1)
    else:
        x = phantoms.phantom_array(o["phantom"])
    try:
        return ObjectModel.from_array(x, d)
    except ValueError as exc:
        raise ConfigError(f"invalid object: {exc}") from exc


def source_from(cfg, pixel_size: float):
    s = cfg["source"]
    w = s["correlation_width_um"]
    if w is None:
        w = s["correlation_width_px"] * pixel_size
    return make_source(s["kind"], float(w))


def detectors_from(cfg, obj, system) -> DetectorGrid:
    d = cfg["geometry"]["detectors"]
    if d["layout"] == "regular":
        dims = d["dims"] or [int(math.ceil(n * obj.pixel_size * system.magnification / d["pitch_um"]))
                             for n in obj.shape]
        return DetectorGrid.regular(tuple(dims), d["pitch_um"])
    return DetectorGrid.conjugate_to(obj, system, d["oversample"], d["pad"])


def pipeline_from(cfg, workers: int) -> swm.PipelineConfig:
    r = cfg["reconstruct"]
    run = cfg["run"]
    return swm.PipelineConfig(
        core=r["core"], border=r["border"], margin=r["margin_um"], cap_factor=run["cap_factor"],
        rho_star=r["rho_star"], initial_pixel_size=r["initial_pixel_size_um"],
        max_sweeps=r["max_sweeps"], sweep_tol=r["sweep_tol"], stride=r["stride"],
        outside=r["outside"], mode=run["integration"], q=run["q"], workers=workers,
        solver=swm.SolverConfig(max_iter=r["max_iter"], weighting=r["weighting"],
                                seed=run["seed"]))


# --------------------------------------------------------------------------
# output helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _metadata(out: Path, command: str, t0: float) -> None:
    _write(out / f"{command}.meta.json", _json({"command": command,
                                                 "elapsed_s": time.perf_counter() - t0}))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def profile_svg(estimate, truth=None, width: int = 480, height: int = 200) -> str:
    """Minimal line plot of a 1D profile (estimate solid, truth dashed)."""
    est = np.ravel(estimate)
    n = len(est)

    def line(v, style):
        xs = np.linspace(10, width - 10, n)
        ys = height - 10 - np.asarray(v) * (height - 20)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
        return f'<polyline fill="none" stroke="black" {style} points="{pts}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if truth is not None:
        parts.append(line(np.ravel(truth), 'stroke-dasharray="4 3" stroke-width="1"'))
    parts.append(line(est, 'stroke-width="2"'))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args) -> int:
    system = system_from(cfg)
    truth = object_from(cfg, system)
    source = source_from(cfg, truth.pixel_size)
    run = cfg["run"]
    detectors = detectors_from(cfg, truth, system)
    data = sim.synthesize_dataset(truth, system, source, run["order"], run["N"], run["seed"],
                                  detectors=detectors, cap_factor=run["cap_factor"],
                                  mode=run["integration"], q=run["q"], sampling=run["sampling"],
                                  noiseless=run["noiseless"])
    out = Path(args.out)
    sim.write_dataset(data, out / "dataset.json")
    print(f"outcomes: {len(data.tuples)}  no-counts frequency: {data.no_counts:.6g}")
    return 0


def _same_geometry(a: ImagingSystem, b: ImagingSystem) -> bool:
    return all(math.isclose(getattr(a, k), getattr(b, k), rel_tol=1e-9)
               for k in ("object_distance", "image_distance", "lens_radius", "wavelength"))


def cmd_reconstruct(cfg, args) -> int:
    if args.data is None:
        raise ConfigError("reconstruct needs --data")
    try:
        data = sim.read_dataset(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    if args.config is not None and not _same_geometry(system_from(cfg), data.system):
        raise ConfigError("dataset geometry does not match the config geometry")
    result = swm.reconstruct(data, pipeline_from(cfg, args.workers))
    out = Path(args.out)
    est = result.estimate
    _write(out / "estimate.csv", _csv(enumerate(est.ravel()), ["pixel", "x"]))
    report = {
        "pixel_size_um": result.pixel_size,
        "stage_pixel_sizes_um": result.stage_pixel_sizes,
        "sweep_history": result.sweep_history,
        "flags": result.flags,
        "windows_not_converged": sum(1 for w in result.window_reports if not w.converged),
        "windows_rejected": sum(1 for w in result.window_reports if not w.accepted),
    }
    if data.truth is not None and np.any(data.truth > 0):
        report["infidelity"] = result.infidelity
        report["max_abs_error"] = float(np.max(np.abs(est - data.truth)))
    _write(out / "report.json", _json(report))
    if args.svg:
        _write(out / "profile.svg", profile_svg(est, data.truth))
    print(f"stages: {len(result.stage_pixel_sizes)}  sweeps: {len(result.sweep_history)}"
          + (f"  infidelity: {report['infidelity']:.4g}" if "infidelity" in report else ""))
    return 0


def _fim_for(cfg):
    system = system_from(cfg)
    obj = object_from(cfg, system)
    if cfg["fim"]["value"] is not None:
        obj = obj.with_values(np.full(obj.shape, float(cfg["fim"]["value"])))
    source = source_from(cfg, obj.pixel_size)
    run = cfg["run"]
    detectors = detectors_from(cfg, obj, system)
    tuples = sim.default_tuples(run["order"], detectors, system, run["cap_factor"])
    tensor = build_tensor(obj, system, detectors, source, run["order"], run["integration"], run["q"])
    model = MeasurementModel(tensor, tuples)
    p, p0 = model.probabilities(obj.x)
    g, g0 = model.gradients(obj.x)
    return fisher.build_fim(p, g, p0, g0, bandwidth_eps=cfg["fim"]["bandwidth_eps"])


def cmd_analyze_fim(cfg, args) -> int:
    if args.debug_matrix is not None:
        try:
            F = np.loadtxt(args.debug_matrix, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read debug matrix: {exc}") from exc
        report = fisher.report_for(F, bandwidth_eps=cfg["fim"]["bandwidth_eps"])
    else:
        report = _fim_for(cfg)
    N = cfg["run"]["N"]
    dominant = report.dominant(cfg["fim"]["rho_star"])
    out = Path(args.out)
    _write(out / "fim_report.txt", report.to_text())
    summary = {
        "diagonally_dominant": dominant,
        "min_dominance_ratio": float(np.min(report.dominance_ratios)),
        "effective_bandwidth": report.effective_bandwidth,
        "crb_total": report.inv_trace / N if math.isfinite(report.inv_trace) else None,
        "rank": report.rank,
        "gershgorin_lower": report.gershgorin_lower,
        "trace_lower": report.trace_lower,
        "lambda_min": report.lambda_min,
    }
    _write(out / "fim_summary.json", _json(summary))
    print(f"diagonally dominant: {str(dominant).lower()}")
    print(f"effective bandwidth: {report.effective_bandwidth}")
    print(f"Tr F^-1 / N: {summary['crb_total']}")
    return 0


def cmd_sweep_width(cfg, args) -> int:
    system = system_from(cfg)
    truth = object_from(cfg, system)
    sw = cfg["sweep"]
    if sw["grid_px"] is not None:
        grid_px = np.asarray(sw["grid_px"], dtype=float)
    else:
        grid_px = np.geomspace(sw["start_px"], sw["stop_px"], int(sw["num"]))
    if len(grid_px) < 5 or np.any(np.diff(grid_px) <= 0) or np.any(grid_px < 0):
        raise ConfigError("sweep grid needs >= 5 strictly increasing nonnegative widths")
    run = cfg["run"]
    result = sim.sweep_width(truth, system, cfg["source"]["kind"], grid_px * truth.pixel_size,
                             sw["metric"], run["order"], run["N"], tuple(sw["seeds"]),
                             run["cap_factor"], run["integration"], run["q"], args.workers,
                             pipeline_from(cfg, 1))
    out = Path(args.out)
    _write(out / "sweep.csv", result.to_csv())
    summary = {"argmin_um": result.argmin, "argmin_px": result.argmin / truth.pixel_size,
               "interior_minimum": result.interior_minimum,
               "nonincreasing_toward_small": result.nonincreasing_toward_small(),
               "singular_points": int(np.sum(result.singular))}
    _write(out / "sweep_summary.json", _json(summary))
    print(f"argmin: {summary['argmin_px']:.4g} px  interior minimum: {result.interior_minimum}")
    return 0


def cmd_bias_demo(cfg, args) -> int:
    b = cfg["bias"]
    grid = b["x_grid"] if b["x_grid"] is not None else np.linspace(0, 1, int(b["num"])).tolist()
    info = float(b["F11N"])
    trials = int(b["mc_trials"])
    rng = sim.rng_stream(cfg["run"]["seed"])
    rows = []
    for x in grid:
        st = fisher.clipped_estimator_stats(float(x), info, 1.0)
        row = [float(x), st.xi, st.mean, st.variance_bound / st.delta2, st.variance / st.delta2,
               st.mse / st.delta2]
        if trials:
            y = np.minimum(rng.normal(x, math.sqrt(st.delta2), trials), 1.0)
            row += [float(y.mean()), float(y.var(ddof=1) / st.delta2),
                    float(np.mean((y - x) ** 2) / st.delta2)]
        rows.append(row)
    header = ["x", "xi", "mean", "variance_bound_ratio", "variance_ratio", "mse_ratio"]
    if trials:
        header += ["mc_mean", "mc_variance_ratio", "mc_mse_ratio"]
    _write(Path(args.out) / "bias.csv", _csv(rows, header))
    print(f"wrote {len(rows)} rows")
    return 0


def cmd_fit_width(cfg, args) -> int:
    path = cfg["fit"]["input"]
    if path is None:
        raise ConfigError("fit.input (CSV of separation_um,g2) is required")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"cannot read fit input: {exc}") from exc
    system = system_from(cfg)
    w = sim.fit_correlation_width(table[:, 0], table[:, 1], system.magnification)
    _write(Path(args.out) / "fit.json", _json({"correlation_width_um": w,
                                               "magnification": system.magnification}))
    print(f"w_c = {w:.6g} um")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "analyze-fim": cmd_analyze_fim,
    "sweep-width": cmd_sweep_width,
    "bias-demo": cmd_bias_demo,
    "fit-width": cmd_fit_width,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swmimaging", description="Sliding window imaging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", default=".")
        p.add_argument("--svg", action="store_true")
        if name == "reconstruct":
            p.add_argument("--data", default=None)
        if name == "analyze-fim":
            p.add_argument("--debug-matrix", default=None,
                           help="analyse this CSV matrix instead of the model FIM")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
            validate(cfg)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        code = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ModelDegeneracyError as exc:
        print(f"model degeneracy: {exc}", file=sys.stderr)
        return 3
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    _metadata(Path(args.out), args.command, t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
