"""Scenario files: schema validation and the synthesis pipeline.

A scenario fixes everything that influences a run: the plant, the position
polygon (lifted to the four-state layout when ``vbound`` is given), the
noise model, synthesis parameters, solver settings and the simulation
setup.  Unknown fields are rejected so a misspelt key never falls back to
a silent default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .chance import NoiseModel
from .compiler import SynthesisParams, SynthesisSetup, assemble
from .errors import DimensionMismatch, ScenarioError
from .geometry import Polytope, polytope_from_halfspaces
from .simulate import SimConfig
from .solvers import SolverConfig, SynthesisResult, find_P, solve_qcqp
from .systems import LinearSystem, double_integrator_2d, lift_position_constraints

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "system", "polytope", "noise"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "task": {"enum": ["equilibrium", "path"]},
        "system": {
            "oneOf": [
                {"const": "double_integrator_2d"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["A", "B"],
                    "properties": {"A": _MAT, "B": _MAT},
                },
            ]
        },
        "polytope": {
            "type": "object",
            "additionalProperties": False,
            "required": ["A", "b"],
            "properties": {"A": _MAT, "b": _VEC},
        },
        "vbound": _POS,
        "velocity_barriers": {"type": "boolean"},
        "exit_face": {"type": "integer", "minimum": 0},
        "excluded_faces": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "equilibrium_point": _VEC,
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["sigma0"],
            "properties": {"sigma0": _MAT, "linear": {"type": "array", "items": _MAT}},
        },
        "sigma_scale": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "actuator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["A", "b"],
            "properties": {"A": _MAT, "b": _VEC},
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t": _POS,
                "alpha": _VEC,
                "beta_V": _VEC,
                "eta_v": {"type": "number", "minimum": 0, "maximum": 1},
                "eta_u": {"type": "number", "minimum": 0, "maximum": 1},
                "rho": _POS,
                "slack": {"type": "boolean"},
                "literal_cclf": {"type": "boolean"},
                "conservative_eta": {"type": "boolean"},
                "psd_epsilon": _POS,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "barrier_mu0": _POS,
                "barrier_factor": {"type": "number", "exclusiveMinimum": 1},
                "max_newton_iters": {"type": "integer", "minimum": 1},
                "tol_kkt": _POS,
                "psd_epsilon": _POS,
                "max_outer_iters": {"type": "integer", "minimum": 1},
            },
        },
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": _POS,
                "horizon": _POS,
                "seed": {"type": "integer", "minimum": 0},
                "runs": {"type": "integer", "minimum": 1},
            },
        },
        "x0": {"type": "array", "items": _VEC, "minItems": 1},
        "invariant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_resolution": {"type": "integer", "minimum": 2},
                "threshold": _POS,
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "points": {"type": "integer", "minimum": 0},
                "samples_per_point": {"type": "integer", "minimum": 1},
                "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"task": {"const": "path"}}}, "then": {"required": ["exit_face"]}},
        {
            "if": {"properties": {"task": {"const": "equilibrium"}}},
            "then": {"required": ["equilibrium_point"], "not": {"required": ["exit_face"]}},
        },
    ],
}


@dataclass
class InvariantOptions:
    grid_resolution: int = 100
    threshold: float = 0.05


@dataclass
class VerifyOptions:
    points: int = 20
    samples_per_point: int = 10_000
    shrink: float = 0.05


@dataclass
class Scenario:
    """Validated scenario with every model object built."""

    task: str
    sys: LinearSystem
    polytope: Polytope
    noise: NoiseModel
    params: SynthesisParams
    solver: SolverConfig
    sim: SimConfig
    x0: np.ndarray
    sigma_scale: tuple = (0.0,)
    exit_face: Optional[int] = None
    excluded_faces: tuple = ()
    x_ref: Optional[np.ndarray] = None
    actuator: Optional[tuple] = None
    invariant: InvariantOptions = field(default_factory=InvariantOptions)
    verify: VerifyOptions = field(default_factory=VerifyOptions)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def setup(self, P=None) -> SynthesisSetup:
        """Compiler input; equilibrium problems are posed in coordinates centred at ``x_ref``."""
        poly = self.polytope if self.x_ref is None else self.polytope.shifted(self.x_ref)
        return SynthesisSetup(
            task=self.task,
            sys=self.sys,
            polytope=poly,
            noise=self.noise,
            params=self.params,
            P=P,
            exit_face=self.exit_face,
            excluded_faces=self.excluded_faces,
            actuator=self.actuator,
            noise_origin=self.x_ref,
        )

    def watched_faces(self) -> list[int]:
        """Stored rows checked for violations: barrier faces minus exclusions and the exit."""
        out = []
        for i in self.polytope.barrier_faces():
            fid = self.polytope.face_ids[i]
            if fid in self.excluded_faces or fid == self.exit_face:
                continue
            out.append(i)
        return out


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON encoding of a configuration."""
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _field_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(raw) -> None:
    """Raise :class:`ScenarioError` listing every schema violation with its field path."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = [f"{_field_path(e)}: {e.message}" for e in errors]
        raise ScenarioError("invalid scenario:\n  " + "\n  ".join(lines))


def _build_system(system) -> LinearSystem:
    if system == "double_integrator_2d":
        return double_integrator_2d()
    try:
        return LinearSystem(system["A"], system["B"])
    except ValueError as exc:
        raise ScenarioError(f"system: {exc}") from None


def _subset(cls, obj: Optional[dict]):
    obj = obj or {}
    names = {f.name for f in fields(cls)}
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items() if k in names})


def from_dict(raw: dict) -> Scenario:
    validate(raw)
    sys = _build_system(raw["system"])
    A, b = raw["polytope"]["A"], raw["polytope"]["b"]
    try:
        poly2 = polytope_from_halfspaces(A, b)
    except ValueError as exc:
        raise ScenarioError(f"polytope: {exc}") from None
    if "vbound" in raw:
        if sys.n_x != 4 or poly2.dim != 2:
            raise ScenarioError("vbound lifts a planar polygon and needs the four-state planar layout")
        poly = lift_position_constraints(poly2, raw["vbound"], raw.get("velocity_barriers", False))
    else:
        poly = poly2
    if poly.dim != sys.n_x:
        raise DimensionMismatch(f"polytope has dimension {poly.dim} but the state has {sys.n_x}")

    try:
        noise = NoiseModel.from_json(raw["noise"])
    except ValueError as exc:
        raise ScenarioError(f"noise: {exc}") from None
    if noise.dim != sys.n_x:
        raise DimensionMismatch(f"noise covariance is {noise.dim}x{noise.dim}, state has {sys.n_x}")

    task = raw["task"]
    x_ref = None
    if task == "equilibrium":
        x_ref = _state_vector(raw["equilibrium_point"], sys, "equilibrium_point")
        if not np.all(poly.A @ x_ref < poly.b):
            raise ScenarioError("equilibrium_point must lie strictly inside the polytope")

    exit_face = raw.get("exit_face")
    if exit_face is not None and exit_face not in poly.face_ids:
        raise ScenarioError(f"exit_face {exit_face} is not a face of the polytope")
    excluded = tuple(raw.get("excluded_faces", ()))

    actuator = None
    if "actuator" in raw:
        A_u = np.asarray(raw["actuator"]["A"], dtype=float)
        b_u = np.asarray(raw["actuator"]["b"], dtype=float)
        if A_u.shape != (b_u.size, sys.n_u):
            raise DimensionMismatch(f"actuator rows must have {sys.n_u} columns and match b")
        actuator = (A_u, b_u)

    params = _subset(SynthesisParams, raw.get("params"))
    solver = _subset(SolverConfig, raw.get("solver"))
    sim = _subset(SimConfig, raw.get("sim"))
    x0 = np.array([_state_vector(v, sys, "x0") for v in raw.get("x0", [])]).reshape(-1, sys.n_x)
    for v in x0:
        if not poly.contains(v):
            raise ScenarioError(f"x0 {v.tolist()} lies outside the polytope")
    return Scenario(
        task=task,
        sys=sys,
        polytope=poly,
        noise=noise,
        params=params,
        solver=solver,
        sim=sim,
        x0=x0,
        sigma_scale=tuple(float(s) for s in raw.get("sigma_scale", [0.0])),
        exit_face=exit_face,
        excluded_faces=excluded,
        x_ref=x_ref,
        actuator=actuator,
        invariant=_subset(InvariantOptions, raw.get("invariant")),
        verify=_subset(VerifyOptions, raw.get("verify")),
        raw=raw,
    )


def _state_vector(v, sys: LinearSystem, name: str) -> np.ndarray:
    """Full state, or a planar position expanded with zero velocity."""
    v = np.asarray(v, dtype=float)
    if v.size == sys.n_x:
        return v
    if v.size == 2 and sys.n_x == 4:
        return np.array([v[0], 0.0, v[1], 0.0])
    raise DimensionMismatch(f"{name} has {v.size} entries, state has {sys.n_x}")


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(raw)


# -- synthesis pipeline ----------------------------------------------------------

def synthesize(scn: Scenario, solver: Optional[SolverConfig] = None) -> SynthesisResult:
    """``find_P`` (equilibrium task), compile, then solve."""
    cfg = solver or scn.solver
    P = None
    if scn.task == "equilibrium":
        P = find_P(scn.sys, float(np.atleast_1d(scn.params.beta_V)[0]), cfg)
    res = solve_qcqp(assemble(scn.setup(P)), cfg)
    res.P = P
    return res


@dataclass
class Controller:
    """Persisted gain: ``u = K (x - x_ref + theta)``."""

    K: np.ndarray
    status: str
    task: str
    x_ref: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    exit_face: Optional[int] = None
    slacks: Optional[np.ndarray] = None
    objective: float = float("nan")
    config_hash: str = ""

    @classmethod
    def from_result(cls, res: SynthesisResult, scn: Scenario) -> "Controller":
        return cls(res.K, res.status, scn.task, scn.x_ref, res.P, scn.exit_face,
                   res.slacks, res.objective_value, scn.config_hash)

    def to_json(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        obj = float(self.objective)
        return {
            "task": self.task,
            "status": self.status,
            "K": arr(self.K),
            "x_ref": arr(self.x_ref),
            "P": arr(self.P),
            "exit_face": self.exit_face,
            "slacks": arr(self.slacks),
            "objective": None if np.isnan(obj) else obj,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Controller":
        def arr(key):
            v = obj.get(key)
            return None if v is None else np.asarray(v, dtype=float)

        try:
            K = np.atleast_2d(np.asarray(obj["K"], dtype=float))
            objective = obj.get("objective")
            objective = float("nan") if objective is None else float(objective)
            return cls(K, obj["status"], obj["task"], arr("x_ref"), arr("P"), obj.get("exit_face"),
                       arr("slacks"), objective, obj.get("config_hash", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed controller file: {exc}") from None

    def check(self, scn: Scenario) -> None:
        """Raise :class:`DimensionMismatch` when the gain does not fit the scenario."""
        if self.K.shape != (scn.sys.n_u, scn.sys.n_x):
            raise DimensionMismatch(f"K is {self.K.shape}, scenario needs {(scn.sys.n_u, scn.sys.n_x)}")
        if self.x_ref is not None and self.x_ref.size != scn.sys.n_x:
            raise DimensionMismatch("x_ref does not match the state dimension")


def load_controller(path) -> Controller:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return Controller.from_json(obj)
