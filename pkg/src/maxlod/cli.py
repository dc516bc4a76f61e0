"""Configuration-driven command-line front end.

Configs are TOML with a top-level `command` plus [mesh], [physics], [method],
and [output] sections.  Flags override file values.  Every run writes its
outputs under <out>/<run_id>/ where run_id is a hash of the fully resolved
configuration, so repeated runs with the same inputs land in the same place
and produce identical files.

Exit codes: 0 success, 1 computational failure (resonance, singularity),
2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from . import analysis, corrector, lod as lodmod
from .fem import (assemble_load, build_dof_map, curl_omega_norm,
                  export_vector)
from .interp import (build_interpolation, commuting_defect, embed_coarse,
                     projection_defect)
from .mesh import build_structured_mesh, refine
from .problem import check_resolution


class ConfigError(ValueError):
    """Invalid or unparsable configuration; carries the offending key path."""


COMMANDS = ("solve", "study-convergence", "study-decay", "study-infsup",
            "verify")
THREAD_ENV = corrector.THREAD_ENV


@dataclass
class RunConfig:
    command: str = "verify"
    # mesh
    n_fine: int = 8
    coarse_sizes: list = field(default_factory=lambda: [2])
    # physics (no silent defaults: omega/coeff_kind must be explicit for
    # solve/study commands; validate() enforces this)
    omega: float | None = None
    omegas: list = field(default_factory=list)
    coeff_kind: str | None = None
    eps_kind: str = "identity"
    contrast: float = 10.0
    lo: float = 1.0
    hi: float = 10.0
    source_kind: str = "smooth"
    # method
    m: int | None = None
    m_max: int = 4
    dof_cap: int = 100_000
    seed_cell: int | None = None
    # output
    out_dir: str = "out"
    record_timings: bool = False
    write_vectors: bool = False
    seed: int = 0

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown command {self.command!r}")
        if self.n_fine < 1:
            raise ConfigError("mesh.n_fine: must be a positive integer")
        if not self.coarse_sizes:
            raise ConfigError("mesh.coarse_sizes: must be non-empty")
        for n in self.coarse_sizes:
            if not isinstance(n, int) or n < 1:
                raise ConfigError(f"mesh.coarse_sizes: invalid entry {n!r}")
            if self.n_fine % n:
                raise ConfigError(
                    f"mesh.coarse_sizes: {n} does not divide n_fine={self.n_fine}")
        if self.command != "verify":
            if self.omega is None:
                raise ConfigError("physics.omega: required (no silent default)")
            if self.coeff_kind is None:
                raise ConfigError("physics.coeff_kind: required (no silent default)")
        if self.omega is not None and self.omega <= 0:
            raise ConfigError("physics.omega: must be positive")
        for w in self.omegas:
            if w <= 0:
                raise ConfigError("physics.omegas: entries must be positive")
        if self.coeff_kind is not None and self.coeff_kind not in (
                "identity", "checkerboard", "random"):
            raise ConfigError(f"physics.coeff_kind: unknown kind {self.coeff_kind!r}")
        if self.eps_kind not in ("identity", "checkerboard", "random"):
            raise ConfigError(f"physics.eps_kind: unknown kind {self.eps_kind!r}")
        if self.source_kind not in ("smooth", "constant", "zero"):
            raise ConfigError(f"physics.source_kind: unknown {self.source_kind!r}")
        if self.m is not None and self.m < 1:
            raise ConfigError("method.m: must be >= 1")
        if self.m_max < 1:
            raise ConfigError("method.m_max: must be >= 1")
        if self.contrast <= 0 or self.lo <= 0 or self.hi < self.lo:
            raise ConfigError("physics: contrast/lo/hi must be positive with hi >= lo")
        return self

    def to_payload(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["coarse_sizes"] = list(self.coarse_sizes)
        d["omegas"] = list(self.omegas)
        return d


_SECTIONS = {
    "mesh": ("n_fine", "coarse_sizes"),
    "physics": ("omega", "omegas", "coeff_kind", "eps_kind", "contrast",
                "lo", "hi", "source_kind"),
    "method": ("m", "m_max", "dof_cap", "seed_cell"),
    "output": ("out_dir", "record_timings", "write_vectors"),
}
_TOP_LEVEL = ("command", "seed")


def parse_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc

    cfg = RunConfig()
    for key, value in doc.items():
        if key in _TOP_LEVEL:
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a section")
            for sub, subval in value.items():
                if sub not in _SECTIONS[key]:
                    raise ConfigError(f"{key}.{sub}: unknown key")
                setattr(cfg, sub, subval)
        else:
            raise ConfigError(f"{key}: unknown key")
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def _run_dir(cfg: RunConfig) -> str:
    run_id = analysis.config_hash(cfg.to_payload())
    path = os.path.join(cfg.out_dir, run_id)
    os.makedirs(os.path.join(path, "vectors"), exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as fh:
        payload = cfg.to_payload()
        payload["run_id"] = run_id
        payload["threads"] = corrector.thread_count()
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def _cmd_solve(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    spec = analysis._problem_from(cfg)
    n_coarse = cfg.coarse_sizes[0]
    coarse = build_structured_mesh(n_coarse)
    pair = refine(coarse, max(1, cfg.n_fine // n_coarse))
    mu, eps = spec.materialize(pair.fine)
    dofs = build_dof_map(pair.fine)
    f_vec = assemble_load(pair.fine, dofs, spec.source.as_callable())
    H = 1.0 / n_coarse
    m = cfg.m if cfg.m is not None else lodmod.m_schedule(H)
    flagged = check_resolution(cfg.omega, H)
    basis = corrector.assemble_corrector_basis(pair, mu, eps, cfg.omega, m)
    system = lodmod.assemble_lod(pair, mu, eps, cfg.omega, basis, f_vec)
    u_H, u_ms = lodmod.solve_lod(system)
    report = {
        "H": H, "h": 1.0 / cfg.n_fine, "m": m, "omega": cfg.omega,
        "omegaH_flag": bool(flagged),
        "norm_u_ms_curl_omega": curl_omega_norm(u_ms, pair.fine, cfg.omega),
        "coarse_dim": system.meta["coarse_dim"],
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if cfg.write_vectors:
        export_vector(os.path.join(out, "vectors", "u_coarse.txt"), u_H)
        export_vector(os.path.join(out, "vectors", "u_fine.txt"), u_ms)
    print(f"solve: |u_ms|_curl,omega = {report['norm_u_ms_curl_omega']:.6e} "
          f"(outputs in {out})")
    return 0


def _cmd_study(cfg: RunConfig) -> int:
    out = _run_dir(cfg)
    result = analysis.run_study(cfg)
    result.write(os.path.join(out, "results.csv"),
                 os.path.join(out, "manifest.json"))
    failures = [r for r in result.rows if r.status != "ok"]
    print(f"{cfg.command}: {len(result.rows)} rows "
          f"({len(failures)} failed) -> {out}/results.csv")
    return 1 if failures and len(failures) == len(result.rows) else 0


def _cmd_verify(cfg: RunConfig) -> int:
    checks = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:        # report, don't crash the suite
            ok, detail = False, f"exception: {exc}"
        checks.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")

    def curl_grad():
        from .fem import assemble_curl_curl, discrete_gradient
        worst = 0.0
        for n in (2, 4):
            mesh = build_structured_mesh(n)
            d = build_dof_map(mesh)
            A = assemble_curl_curl(mesh, d, np.ones(mesh.n_cells))
            worst = max(worst, abs(A @ discrete_gradient(mesh)).max())
        return worst <= 1e-12, f"max defect {worst:.2e}"

    def proj_commute():
        coarse = build_structured_mesh(2)
        pair = refine(coarse, 2)
        ops = build_interpolation(pair, R=embed_coarse(pair))
        p = projection_defect(ops)
        c = commuting_defect(ops, pair)
        return max(p, c) <= 1e-12, f"projection {p:.2e}, commuting {c:.2e}"

    def saturation():
        coarse = build_structured_mesh(2)
        pair = refine(coarse, 2)
        ident = np.repeat(np.eye(3)[None], pair.fine.n_cells, axis=0)
        ideal = corrector.ideal_basis(pair, ident, ident, 1.0)
        loc = corrector.assemble_corrector_basis(pair, ident, ident, 1.0, m=6)
        diff = abs(ideal.K - loc.K).max()
        scale = max(abs(ideal.K).max(), 1e-300)
        return diff <= 1e-8 * scale, f"relative defect {diff / scale:.2e}"

    check("discrete complex: curl o grad = 0", curl_grad)
    check("interpolation: projection and commuting", proj_commute)
    check("corrector: saturation equals ideal", saturation)
    return 0 if all(checks) else 1


def dispatch(cfg: RunConfig) -> int:
    try:
        if cfg.command == "verify":
            return _cmd_verify(cfg)
        if cfg.command == "solve":
            return _cmd_solve(cfg)
        return _cmd_study(cfg)
    except (corrector.PatchResonanceError, lodmod.LodResonanceError,
            analysis.ResonantFrequencyError) as exc:
        print(f"computational failure: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="maxlod",
        description="Quasi-local numerical homogenization for curl-curl problems")
    parser.add_argument("config", nargs="?", help="TOML configuration file")
    parser.add_argument("--command", choices=COMMANDS)
    parser.add_argument("--m", type=int, dest="m")
    parser.add_argument("--omega", type=float)
    parser.add_argument("--n-fine", type=int, dest="n_fine")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", dest="out_dir")
    parser.add_argument("--record-timings", action="store_const", const=True,
                        dest="record_timings", default=None)
    args = parser.parse_args(argv)

    overrides = {k: getattr(args, k) for k in
                 ("command", "m", "omega", "n_fine", "seed", "out_dir",
                  "record_timings")}
    try:
        if args.config is None:
            cfg = RunConfig()
            for key, value in overrides.items():
                if value is not None:
                    setattr(cfg, key, value)
            cfg.validate()
        else:
            cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
