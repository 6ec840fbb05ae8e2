"""Flat run configuration and run manifests.

Configs are one ``key = value`` per line with ``#`` comments; keys are
dotted section paths.  Unknown keys are rejected.  Environment variables
prefixed ``MVFHN_`` override file values (dots become underscores), and
CLI flags override both.  Every run directory gets a manifest written at
start and finalized at exit that echoes the resolved config, its hash,
and the truncation diagnostics needed to reproduce the run bit-exactly.
"""

from __future__ import annotations

import datetime
import hashlib
import os
import subprocess

import numpy as np

from .errors import ConfigError

_FLOAT_FMT = "{:.17g}"


def _parse_bool(s):
    if s in ("true", "True", "1", "yes"):
        return True
    if s in ("false", "False", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_float_list(s):
    return [float(x) for x in s.split(",") if x.strip()]


#: key -> (parser, default)
KNOWN_KEYS = {
    "model.lambda": (str, "auto"),
    "model.eps_couple": (float, 0.1),
    "model.K": (int, 16),
    "model.omega": (float, 1.0),
    "model.p": (float, 4.0),
    "model.auto_scale_lambda": (_parse_bool, True),
    "model.eta": (float, 0.1),
    "model.margin_target": (float, 1.0),
    "grid.dimension": (int, 1),
    "grid.half_width": (float, 8.0),
    "grid.points": (int, 256),
    "scheme.dt": (float, 1e-3),
    "scheme.ensemble": (int, 64),
    "scheme.kind": (str, "semi_implicit"),
    "scheme.checkpoint_stride": (int, 10),
    "scheme.t_end": (float, 1.0),
    "scheme.initial": (str, "gaussian_bump"),
    "scheme.initial_scale": (float, 1.0),
    "scheme.track_w2": (_parse_bool, True),
    "check.samples": (int, 20000),
    "check.tolerance": (float, 1e-6),
    "picard.T": (float, 1.0),
    "picard.tol": (float, 1e-4),
    "picard.max_iters": (int, 12),
    "picard.eta": (float, 2.0),
    "pullback.tau": (float, 0.0),
    "pullback.depths": (_parse_float_list, [5.0, 10.0, 20.0, 40.0]),
    "pullback.family": (str, "bounded"),
    "pullback.base_scale": (float, 1.0),
    "pullback.floor_replicates": (int, 8),
    "pullback.tail_gate": (float, 1e-4),
    "output.dir": (str, "out"),
    "seed": (int, 0),
    "threads": (int, 1),
}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return _FLOAT_FMT.format(v)
    if isinstance(v, list):
        return ",".join(_FLOAT_FMT.format(x) for x in v)
    return str(v)


class RunConfig:
    """Resolved flat configuration with typed values."""

    def __init__(self, values=None):
        self.values = {k: d for k, (_, d) in KNOWN_KEYS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        parser, _ = KNOWN_KEYS[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for {key}: {value!r} ({exc})")
        self.values[key] = value

    def __getitem__(self, key):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    @classmethod
    def load(cls, path):
        cfg = cls()
        with open(path) as fh:
            for ln, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key = value")
                key, value = (part.strip() for part in line.split("=", 1))
                cfg.set(key, value)
        return cfg

    def apply_env(self, environ=None):
        env = os.environ if environ is None else environ
        by_env_name = {"MVFHN_" + k.upper().replace(".", "_"): k
                       for k in KNOWN_KEYS}
        for name, value in env.items():
            if not name.startswith("MVFHN_"):
                continue
            key = by_env_name.get(name)
            if key is None:
                raise ConfigError(f"unknown config environment variable: {name}")
            self.set(key, value)

    def serialize(self):
        lines = [f"{k} = {_format_value(self.values[k])}"
                 for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.serialize())


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


class RunManifest:
    """Key-value manifest written at run start and finalized at exit."""

    def __init__(self, config: RunConfig, out_dir):
        self.config = config
        self.out_dir = out_dir
        self.fields = {}
        self.path = os.path.join(out_dir, "manifest.txt")

    def start(self):
        os.makedirs(self.out_dir, exist_ok=True)
        from . import __version__
        self.fields = {
            "status": "running",
            "config_hash": self.config.config_hash(),
            "seed": self.config["seed"],
            "threads": self.config["threads"],
            "started_at": datetime.datetime.now(
                datetime.timezone.utc).isoformat(),
            "package_version": __version__,
            "build": _git_describe(),
        }
        self._write()
        self.config.save(os.path.join(self.out_dir, "config_resolved.cfg"))

    def add(self, **kw):
        self.fields.update(kw)

    def add_truncation_diagnostics(self, coeffs, grid):
        w = np.abs(coeffs.w_values(grid))
        peak = float(w.max()) if w.max() > 0 else 1.0
        boundary = _boundary_magnitude(w, grid) / peak
        self.fields["w_boundary_over_peak"] = _FLOAT_FMT.format(boundary)
        if boundary > 1e-8:
            self.fields["w_boundary_warning"] = (
                "weight function is not negligible at the truncation "
                "boundary; tail-truncation error is uncontrolled")
        tail_frac = coeffs.meta.get("mode_tail_fraction")
        if tail_frac is not None:
            self.fields["omitted_hs_mode_fraction"] = \
                _FLOAT_FMT.format(tail_frac)
        self.fields["grid"] = (f"n={grid.dimension} L={grid.half_width:g} "
                               f"N={grid.points_per_axis} h={grid.spacing:.6g}")

    def finalize(self, status="completed", **kw):
        self.fields.update(kw)
        self.fields["status"] = status
        self.fields["finished_at"] = datetime.datetime.now(
            datetime.timezone.utc).isoformat()
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            for k in sorted(self.fields):
                fh.write(f"{k} = {self.fields[k]}\n")


def _boundary_magnitude(values, grid):
    if grid.dimension == 1:
        return float(max(values[0], values[-1]))
    edge = np.concatenate([values[0, :], values[-1, :],
                           values[:, 0], values[:, -1]])
    return float(np.max(edge))
