"""Batch command-line front-end.

Subcommands: raytransform (forward/adjoint/inversion on a phantom), beam
(frequency sweeps of concentration and residual), recover (end-to-end
potential recovery from DN-map differences), validate (fast invariant
suite).  Configuration is a flat key=value file with dotted section
prefixes; unknown keys are hard errors.  Artifacts are CSV + JSON; every
run writes a manifest into its output directory before heavy computation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .manifold import make_metric, sample_influx, santalo_check
from . import ray as rayt
from .ray import GridFunction, RayData
from . import beam
from . import helmholtz as hz
from . import reconstruct as rec


class CliConfigError(ValueError):
    def __init__(self, msg, field=None, line=None):
        super().__init__(msg)
        self.field = field
        self.line = line


# ---------------------------------------------------------------------------
# Config parsing: flat key=value with dotted prefixes


def parse_config(path: str) -> dict:
    cfg = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliConfigError(
                    f"{path}:{lineno}: expected key = value, got {line!r}",
                    line=lineno,
                )
            key, val = line.split("=", 1)
            key = key.strip()
            val = val.strip()
            if key in cfg:
                raise CliConfigError(
                    f"{path}:{lineno}: duplicate key {key!r}", field=key, line=lineno
                )
            cfg[key] = val
    return cfg


def _convert(key, raw, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(tok) for tok in raw.split(",") if tok.strip())
        return kind(raw)
    except ValueError:
        raise CliConfigError(
            f"config field {key!r}: cannot parse {raw!r}", field=key
        )


def apply_schema(cfg: dict, schema: dict, path: str = "") -> dict:
    """Validate keys against {key: (type, default|REQUIRED)}; unknown keys
    are hard errors, missing required keys name the field."""
    out = {}
    for key in cfg:
        if key not in schema:
            raise CliConfigError(f"unknown config key {key!r}", field=key)
    for key, (kind, default) in schema.items():
        if key in cfg:
            out[key] = _convert(key, cfg[key], kind)
        elif default is REQUIRED:
            raise CliConfigError(f"missing required config key {key!r}", field=key)
        else:
            out[key] = default
    return out


REQUIRED = object()

RAYTRANSFORM_SCHEMA = {
    "metric.id": (str, REQUIRED),
    "metric.radius": (float, 1.0),
    "grid.n": (int, 64),
    "fan.ns": (int, 64),
    "fan.nt": (int, 64),
    "phantom.random": (bool, False),
    "phantom.amp": (float, 1.0),
    "phantom.center_x": (float, 0.15),
    "phantom.center_y": (float, 0.0),
    "phantom.sigma": (float, 0.2),
    "invert.reg_rel": (float, 1e-6),
}

BEAM_SCHEMA = {
    "metric.id": (str, REQUIRED),
    "metric.radius": (float, 1.0),
    "sweep.lams": ("floats", (50.0, 100.0, 200.0, 400.0)),
    "beam.a": (float, 0.4),
    "beam.c_delta": (float, 3.0),
    "beam.q_sigma": (float, 0.0),
    "residual.nt": (int, 600),
    "residual.ny": (int, 400),
}

RECOVER_SCHEMA = {
    "metric.id": (str, REQUIRED),
    "metric.radius": (float, 0.5),
    "q.amp": (float, 0.5),
    "q.center_x": (float, -0.05),
    "q.center_y": (float, -0.03),
    "q.sigma": (float, 0.12),
    "p.amp": (float, 0.3),
    "p.center_x": (float, 0.08),
    "p.center_y": (float, 0.04),
    "p.sigma": (float, 0.1),
    "sweep.lams": ("floats", (100.0, 200.0, 400.0)),
    "beam.a": (float, 0.4),
    "fan.ns": (int, 8),
    "fan.nt": (int, 10),
    "fan.mu_min": (float, 0.2),
    "sobolev.s": (float, 2.0),
    "sobolev.bound": (float, 200.0),
    "mesh.lam_h": (float, 0.15),
    "mesh.max_rings": (int, 340),
    "invert.grid_n": (int, 32),
    "invert.smooth": (float, 1e-3),
    "invert.deconvolve": (bool, True),
    "invert.baseline": (bool, True),
    "phantom.grid_n": (int, 64),
    "scan.offsets": (int, 4),
}

VALIDATE_SCHEMA = {}


def _seed() -> int:
    return int(os.environ.get("GEOBEAM_SEED", "0"))


# ---------------------------------------------------------------------------
# Manifest


def write_manifest(out_dir, subcommand, config_path, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": os.path.abspath(config_path) if config_path else None,
        "out_dir": os.path.abspath(out_dir),
        "version": __version__,
        "seed": _seed(),
        "started_unix": time.time(),
        "timings": {},
    }
    if extra:
        manifest.update(extra)
    _dump_manifest(out_dir, manifest)
    return manifest


def _dump_manifest(out_dir, manifest):
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _finish_manifest(out_dir, manifest, t0):
    manifest["timings"]["wall_seconds"] = time.time() - t0
    _dump_manifest(out_dir, manifest)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_raytransform(args) -> int:
    cfg = apply_schema(parse_config(args.config), RAYTRANSFORM_SCHEMA)
    m = make_metric(cfg["metric.id"], radius=cfg["metric.radius"])
    if cfg["phantom.random"]:
        rng = np.random.default_rng(_seed())
        cx, cy = rng.uniform(-0.3, 0.3, size=2) * m.radius
        sig = rng.uniform(0.1, 0.3) * m.radius
        amp = cfg["phantom.amp"]
    else:
        cx, cy = cfg["phantom.center_x"], cfg["phantom.center_y"]
        sig, amp = cfg["phantom.sigma"], cfg["phantom.amp"]
    phantom = rec.gaussian_bump(
        amp, (cx, cy), sig, m.radius, cfg["grid.n"], m.name
    )
    plan = {
        "metric": m.name,
        "phantom": {"center": [cx, cy], "sigma": sig, "amp": amp},
        "fan": [cfg["fan.ns"], cfg["fan.nt"]],
    }
    if args.dry_run:
        _emit(args, {"plan": plan, "dry_run": True})
        return 0
    t0 = time.time()
    manifest = write_manifest(args.out, "raytransform", args.config,
                              {"metric": m.name})
    fan = sample_influx(m, cfg["fan.ns"], cfg["fan.nt"])
    sino = rayt.forward_transform(m, phantom, fan)
    sino.save(os.path.join(args.out, "sinogram"))
    summary = {"plan": plan}
    if args.check == "adjoint":
        # the adjoint pairing lives on the extended-disk grid
        fx = GridFunction.from_function(
            lambda P: phantom.interp(P), m.radius1, phantom.n
        )
        If = rayt.forward_transform(m, fx, fan)
        h = RayData(
            np.cos(fan.s)[:, None] * np.cos(fan.alpha)[None, :] ** 2, fan
        )
        Ah = rayt.adjoint_transform(m, h, phantom.n)
        lhs = If.l2_mu_inner(h)
        rhs = rayt.grid_inner(fx, Ah, m)
        summary["adjoint_rel_err"] = abs(lhs - rhs) / abs(lhs)
        print(f"adjoint identity relative error: {summary['adjoint_rel_err']:.3e}")
    else:
        recov, info = rayt.invert_ray(m, sino, n=phantom.n,
                                      radius_grid=phantom.radius)
        recov.save(os.path.join(args.out, "recovered"))
        msk = phantom.mask()
        summary["rel_l2_error"] = float(
            np.linalg.norm((recov.values - phantom.values)[msk])
            / np.linalg.norm(phantom.values[msk])
        )
        summary["cg_iterations"] = info["iterations"]
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    _finish_manifest(args.out, manifest, t0)
    _emit(args, summary)
    return 0


def cmd_beam(args) -> int:
    cfg = apply_schema(parse_config(args.config), BEAM_SCHEMA)
    if not (1.0 / 3.0 < cfg["beam.a"] < 0.5):
        raise CliConfigError(
            f"beam.a = {cfg['beam.a']} outside the admissible interval "
            "(1/3, 1/2)",
            field="beam.a",
        )
    m = make_metric(cfg["metric.id"], radius=cfg["metric.radius"])
    lams = cfg["sweep.lams"]
    plan = {"metric": m.name, "lams": list(lams), "a": cfg["beam.a"]}
    if args.dry_run:
        _emit(args, {"plan": plan, "dry_run": True})
        return 0
    t0 = time.time()
    manifest = write_manifest(args.out, "beam", args.config, {"metric": m.name})
    qs = cfg["beam.q_sigma"]
    q = (lambda P: np.exp(-(P[..., 0] ** 2 + P[..., 1] ** 2) / (2 * qs**2))) \
        if qs > 0 else None
    path = beam.extend_geodesic(m, [0.0, 0.0], [1.0, 0.0])
    rows = []
    for lam in lams:
        if lam * (2.0 * m.radius / cfg["residual.nt"]) > 10.0:
            raise CliConfigError(f"sweep lambda {lam} under-resolved in t")
        qm = beam.assemble_quasimode(
            m, path, lam, a=cfg["beam.a"], q=q, c_delta=cfg["beam.c_delta"]
        )
        phi = lambda P: np.ones(P.shape[:-1])
        lhs, rhs, _ = beam.concentration_test(m, qm, phi)
        _, res = beam.pde_residual(
            m, q, qm, nt=cfg["residual.nt"], ny=cfg["residual.ny"]
        )
        rows.append(
            {"lam": lam, "mass": lhs, "ray_value": rhs,
             "gap": abs(lhs - rhs), "residual": res}
        )
        print(f"lam={lam}: gap={abs(lhs-rhs):.5f} residual={res:.3f}",
              flush=True)
    gaps = np.array([r["gap"] for r in rows])
    slope = float(np.polyfit(np.log(lams), np.log(gaps), 1)[0]) \
        if len(lams) > 1 and np.all(gaps > 0) else 0.0
    summary = {"plan": plan, "rows": rows, "gap_slope": slope}
    with open(os.path.join(args.out, "sweep.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    _finish_manifest(args.out, manifest, t0)
    _emit(args, summary)
    return 0


def cmd_recover(args) -> int:
    cfg = apply_schema(parse_config(args.config), RECOVER_SCHEMA)
    n = cfg["phantom.grid_n"]
    radius = cfg["metric.radius"]
    q = rec.gaussian_bump(cfg["q.amp"], (cfg["q.center_x"], cfg["q.center_y"]),
                          cfg["q.sigma"], radius, n, cfg["metric.id"])
    p = rec.gaussian_bump(cfg["p.amp"], (cfg["p.center_x"], cfg["p.center_y"]),
                          cfg["p.sigma"], radius, n, cfg["metric.id"])
    config = rec.ExperimentConfig(
        metric_id=cfg["metric.id"], q=q, p=p, lams=cfg["sweep.lams"],
        a_exp=cfg["beam.a"], fan_ns=cfg["fan.ns"], fan_nt=cfg["fan.nt"],
        mu_min=cfg["fan.mu_min"], s_index=cfg["sobolev.s"],
        bound_B=cfg["sobolev.bound"], lam_h=cfg["mesh.lam_h"],
        max_rings=cfg["mesh.max_rings"], grid_n=cfg["invert.grid_n"],
        smooth=cfg["invert.smooth"], scan_offsets=cfg["scan.offsets"],
        deconvolve=cfg["invert.deconvolve"], baseline=cfg["invert.baseline"],
    )
    try:
        config.validate()
    except rec.ConfigError as exc:
        raise CliConfigError(str(exc))
    plan = {
        "metric": cfg["metric.id"], "lams": list(config.lams),
        "fan": [config.fan_ns, config.fan_nt],
        "mesh_rings": [config.mesh_rings(l) for l in config.lams],
        "digest": config.digest(),
    }
    if args.dry_run:
        _emit(args, {"plan": plan, "dry_run": True})
        return 0
    t0 = time.time()
    manifest = write_manifest(args.out, "recover", args.config, {"plan": plan})
    try:
        report = rec.recover_potential(config, out_dir=args.out, verbose=True)
    except Exception as exc:
        stage = type(exc).__name__
        print(f"recover aborted at stage {stage}: {exc}", file=sys.stderr)
        raise
    _finish_manifest(args.out, manifest, t0)
    _emit(args, {
        "rel_errors": report.rel_errors(),
        "gaps": report.gaps(),
        "slope": report.slope,
    })
    return 0


# ---------------------------------------------------------------------------
# validate


def _check_santalo(mu_sign=+1.0):
    m = make_metric("euclidean")
    fan = sample_influx(m, 64, 64)
    if mu_sign != +1.0:
        fan.mu[:] = mu_sign * fan.mu
    F = lambda X, V: np.ones(X.shape[:-1])
    lhs, rhs, rel = santalo_check(m, F, fan)
    target = 2.0 * math.pi**2
    err = max(rel, abs(lhs - target) / target, abs(rhs - target) / target)
    return err < 5e-3, f"lhs={lhs:.5f} rhs={rhs:.5f} target=2pi^2"


def _check_adjoint():
    m = make_metric("euclidean")
    fan = sample_influx(m, 48, 48)
    rng = np.random.default_rng(_seed())
    worst = 0.0
    for _ in range(2):
        c = rng.standard_normal(4)

        def fn(P, c=c):
            return c[0] + c[1] * P[..., 0] + c[2] * np.sin(
                2 * P[..., 1]
            ) + c[3] * np.exp(-(P[..., 0] ** 2 + P[..., 1] ** 2))

        f = GridFunction.from_function(fn, m.radius1, 48)
        If = rayt.forward_transform(m, f, fan)
        h = RayData(
            np.cos(fan.s)[:, None] * np.cos(fan.alpha)[None, :] ** 2, fan
        )
        Ah = rayt.adjoint_transform(m, h, 48)
        lhs = If.l2_mu_inner(h)
        rhs = rayt.grid_inner(f, Ah, m)
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return worst < 5e-3, f"worst rel err {worst:.2e}"


def _check_riccati():
    t = np.linspace(0.0, 3.0, 601)
    H = beam.riccati_solve(np.zeros_like(t), 1j, t)
    exact = (t + 1j) / (1.0 + t**2)
    err_e = float(np.max(np.abs(H - exact)))
    # hyperbolic forcing Hdot + H^2 = 1: H = tanh(t + artanh(i))
    Hh = beam.riccati_solve(np.ones_like(t), 1j, t)
    err_h = float(np.max(np.abs(Hh - np.tanh(t + np.arctanh(1j)))))
    err = max(err_e, err_h)
    return err < 1e-8, f"sup errors euclid {err_e:.2e}, hyperbolic {err_h:.2e}"


def _check_weight():
    t = np.linspace(0.0, 3.0, 601)
    H = beam.riccati_solve(np.zeros_like(t), 1j, t)
    a00 = beam.amplitude_solve(H, t, 0)
    w = np.abs(a00) ** 2 * np.abs(H.imag) ** (-0.5)
    dev = float(np.max(np.abs(w - w[0])))
    return dev < 1e-8, f"max deviation {dev:.2e}"


def _check_dn_symmetry():
    m = make_metric("euclidean")
    mesh = hz.build_mesh(m, 1.0 / 24.0)
    r = np.hypot(*mesh.vertices.T)
    dn = hz.dn_map(m, mesh, 0.4 * np.exp(-(r**2)), 3.0)
    defect = dn.symmetry_defect()
    dn0 = hz.dn_map(m, mesh, None, 0.0)
    b = mesh.vertices[mesh.boundary]
    th = np.arctan2(b[:, 1], b[:, 0])
    fk = np.exp(1j * th)
    sym = float(np.real(
        np.conj(fk) @ (dn0.mass @ dn0.apply(fk))
        / (np.conj(fk) @ (dn0.mass @ fk))
    ))
    ok = defect <= 5 * mesh.h_mesh and abs(sym - 1.0) < 0.02
    return ok, f"symmetry defect {defect:.4f}, k=1 symbol {sym:.4f}"


VALIDATION_CHECKS = [
    ("santalo", _check_santalo),
    ("adjoint", _check_adjoint),
    ("riccati", _check_riccati),
    ("weight", _check_weight),
    ("dn_symmetry", _check_dn_symmetry),
]


def run_validation(checks=None):
    results = []
    for name, fn in (checks or VALIDATION_CHECKS):
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:        # a crashed check is a failed check
            ok, detail = False, f"exception: {exc}"
        results.append(
            {"check": name, "ok": bool(ok), "detail": detail,
             "seconds": round(time.time() - t0, 2)}
        )
    return results


def cmd_validate(args) -> int:
    results = run_validation()
    all_ok = all(r["ok"] for r in results)
    if args.json:
        print(json.dumps({"ok": all_ok, "checks": results}, indent=1))
    else:
        for r in results:
            status = "ok" if r["ok"] else "FAIL"
            print(f"{r['check']:<14} {status:<5} {r['seconds']:>6.2f}s  "
                  f"{r['detail']}")
    if args.out:
        manifest = write_manifest(args.out, "validate", args.config or "")
        with open(os.path.join(args.out, "validate.json"), "w") as fh:
            json.dump({"ok": all_ok, "checks": results}, fh, indent=1,
                      sort_keys=True)
        _dump_manifest(args.out, manifest)
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------


def _emit(args, obj):
    if args.json:
        print(json.dumps(obj, indent=1, sort_keys=True, default=float))


def build_parser():
    ap = argparse.ArgumentParser(
        prog="geobeam",
        description="Geodesic ray tomography, Gaussian-beam quasimodes and "
                    "DN-map potential recovery on Riemannian disks.",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config)
        p.add_argument("--out", default="out")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--dry-run", action="store_true", dest="dry_run")
        p.add_argument("--json", action="store_true")

    p = sub.add_parser("raytransform", help="forward/adjoint/invert a phantom")
    common(p)
    p.add_argument("--check", choices=["adjoint"], default=None)
    p.set_defaults(fn=cmd_raytransform)

    p = sub.add_parser("beam", help="quasimode frequency sweeps")
    common(p)
    p.set_defaults(fn=cmd_beam)

    p = sub.add_parser("recover", help="end-to-end potential recovery")
    common(p)
    p.set_defaults(fn=cmd_recover)

    p = sub.add_parser("validate", help="fast invariant suite")
    common(p, needs_config=False)
    p.set_defaults(fn=cmd_validate, out=None)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.threads is not None and args.threads > 0:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        return args.fn(args)
    except CliConfigError as exc:
        field = f" (field {exc.field!r})" if exc.field else ""
        print(f"config error{field}: {exc}", file=sys.stderr)
        return 2
    except (rec.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
