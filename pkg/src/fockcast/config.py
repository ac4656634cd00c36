"""Experiment configuration: validation, TOML files, bundled presets."""

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import ValidationError

STAGES = (
    "sample",
    "kernel",
    "basis",
    "eigs",
    "moments",
    "predict",
    "evaluate",
    "report",
)

PRESET_NAMES = ("stepanoff_desk", "stepanoff_paper", "l63_desk", "l63_paper")

_SYSTEMS = ("stepanoff", "l63")


def _positive(value, name, kind=float):
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ValidationError("%s must be a number" % name)
    if not value > 0:
        raise ValidationError("%s must be positive" % name)
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated parameter set for one end-to-end run.

    bandwidth is either the string "auto" (slope-scan tuning on both
    kernels) or an explicit (eps_tilde, m_nu, eps) triple pinning the
    density-estimation bandwidth, the dimension exponent, and the main
    kernel bandwidth. Presets for small grids pin explicit values: the
    slope scan targets the manifold-resolution scale, whose spectrum is
    too short for the requested operator dimension l.
    """

    system: str
    system_params: tuple = ()
    observable: dict = field(default_factory=dict)
    n_side: int | None = None
    n_samples: int | None = None
    delta_t: float | None = None
    spinup: float = 0.0
    sample_step: float = 1e-3
    seed: int = 0
    bandwidth: object = "auto"
    l: int = 64
    tau: float = 1e-3
    sigma: float = 2e-3
    z: float = 1e-3
    lprime: int = 16
    d: int = 4
    m: int = 2
    epsilon: float = 0.1
    sigma_w: float = 1.0
    p: float = 0.5
    times: tuple = (0.0,)
    truth_step: float = 1e-3
    holdout: tuple = ()
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.system not in _SYSTEMS:
            raise ValidationError("unknown system %r" % (self.system,))
        object.__setattr__(
            self, "system_params", tuple(float(v) for v in self.system_params)
        )
        if self.system == "stepanoff":
            if self.n_side is None:
                raise ValidationError("stepanoff sampling needs n_side")
            if self.n_samples is not None or self.delta_t is not None:
                raise ValidationError("grid sampling takes no n_samples/delta_t")
            if int(self.n_side) < 2:
                raise ValidationError("n_side must be at least 2")
            object.__setattr__(self, "n_side", int(self.n_side))
        else:
            if self.n_samples is None or self.delta_t is None:
                raise ValidationError("trajectory sampling needs n_samples and delta_t")
            if self.n_side is not None:
                raise ValidationError("trajectory sampling takes no n_side")
            object.__setattr__(self, "n_samples", int(self.n_samples))
            if self.n_samples < 2:
                raise ValidationError("n_samples must be at least 2")
            object.__setattr__(self, "delta_t", _positive(self.delta_t, "delta_t"))
            if self.spinup < 0:
                raise ValidationError("spinup must be nonnegative")
        _positive(self.sample_step, "sample_step")
        _positive(self.truth_step, "truth_step")

        for name in ("l", "lprime", "d", "m"):
            object.__setattr__(self, name, int(getattr(self, name)))
            if getattr(self, name) <= 0:
                raise ValidationError("%s must be positive" % name)
        if self.d > self.lprime:
            raise ValidationError("d pairs cannot exceed the lprime retained pairs")
        if self.lprime > self.l:
            raise ValidationError("lprime cannot exceed the basis dimension l")

        _positive(self.sigma, "sigma")
        _positive(self.z, "z")
        _positive(self.epsilon, "epsilon")
        if not 0.0 < self.tau <= self.sigma / 2.0:
            raise ValidationError(
                "tau must lie in (0, sigma/2]; got tau=%g sigma=%g"
                % (self.tau, self.sigma)
            )

        _positive(self.sigma_w, "sigma_w")
        if not 0.0 < self.p < 1.0:
            raise ValidationError("weight exponent p must lie in (0, 1)")

        bw = self.bandwidth
        if bw != "auto":
            try:
                bw = tuple(float(v) for v in bw)
            except (TypeError, ValueError):
                raise ValidationError('bandwidth must be "auto" or a numeric triple')
            if len(bw) != 3 or any(v <= 0 for v in bw):
                raise ValidationError(
                    "explicit bandwidth needs three positive values"
                    " (eps_tilde, m_nu, eps)"
                )
            object.__setattr__(self, "bandwidth", bw)

        times = tuple(float(t) for t in self.times)
        if len(times) == 0:
            raise ValidationError("time grid must not be empty")
        arr_ok = all(math.isfinite(t) and t >= 0 for t in times)
        if not arr_ok or any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError(
                "time grid must be finite, nonnegative, and nondecreasing"
            )
        object.__setattr__(self, "times", times)

        state_dim = 2 if self.system == "stepanoff" else 3
        try:
            holdout = tuple(
                tuple(float(v) for v in row) for row in self.holdout
            )
        except (TypeError, ValueError):
            raise ValidationError("holdout must be a list of state rows")
        for row in holdout:
            if len(row) != state_dim or not all(math.isfinite(v) for v in row):
                raise ValidationError(
                    "holdout rows must be finite states of dimension %d" % state_dim
                )
        object.__setattr__(self, "holdout", holdout)

        object.__setattr__(self, "observable", dict(self.observable))
        object.__setattr__(self, "out_dir", str(self.out_dir))

    def stage_params(self, stage):
        """Parameter subset one stage depends on, for content hashing.

        The weight family (sigma_w, p) appears in no subset: it cancels
        from every computed quantity, so runs differing only in the
        weights share all artifacts byte for byte.
        """
        if stage == "sample":
            return {
                "system": self.system,
                "system_params": list(self.system_params),
                "observable": self.observable,
                "n_side": self.n_side,
                "n_samples": self.n_samples,
                "delta_t": self.delta_t,
                "spinup": self.spinup,
                "sample_step": self.sample_step,
                "seed": self.seed,
            }
        if stage == "kernel":
            bw = self.bandwidth
            return {"bandwidth": bw if bw == "auto" else list(bw)}
        if stage == "basis":
            return {"l": self.l}
        if stage == "eigs":
            return {"tau": self.tau, "z": self.z, "lprime": self.lprime}
        if stage == "moments":
            return {"d": self.d, "m": self.m, "epsilon": self.epsilon}
        if stage == "predict":
            return {"sigma": self.sigma}
        if stage == "evaluate":
            return {
                "times": list(self.times),
                "truth_step": self.truth_step,
                "holdout": [list(row) for row in self.holdout],
            }
        if stage == "report":
            return {}
        raise ValidationError("unknown stage %r" % (stage,))


def _section(raw, name):
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ValidationError("config section [%s] must be a table" % name)
    return value


def config_from_mapping(raw):
    """Build a config from parsed TOML sections."""
    system = _section(raw, "system")
    sampling = _section(raw, "sampling")
    kernel = _section(raw, "kernel")
    generator = _section(raw, "generator")
    fock = _section(raw, "fock")
    evaluate = _section(raw, "evaluate")
    output = _section(raw, "output")
    if "name" not in system:
        raise ValidationError("config needs [system] name")
    return ExperimentConfig(
        system=system["name"],
        system_params=system.get("params", ()),
        observable=_section(raw, "observable"),
        n_side=sampling.get("n_side"),
        n_samples=sampling.get("n_samples"),
        delta_t=sampling.get("delta_t"),
        spinup=sampling.get("spinup", 0.0),
        sample_step=sampling.get("step", 1e-3),
        seed=sampling.get("seed", 0),
        bandwidth=kernel.get("bandwidth", "auto"),
        l=kernel.get("l", 64),
        tau=generator.get("tau", 1e-3),
        sigma=generator.get("sigma", 2e-3),
        z=generator.get("z", 1e-3),
        lprime=generator.get("lprime", 16),
        d=fock.get("d", 4),
        m=fock.get("m", 2),
        epsilon=fock.get("epsilon", 0.1),
        sigma_w=fock.get("sigma_w", 1.0),
        p=fock.get("p", 0.5),
        times=evaluate.get("times", (0.0,)),
        truth_step=evaluate.get("truth_step", 1e-3),
        holdout=evaluate.get("holdout", ()),
        out_dir=output.get("dir", "runs/experiment"),
    )


def load_config(path):
    """Parse and validate a TOML config file."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError("config file not found: %s" % path)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError("config file %s is not valid TOML: %s" % (path, exc))
    return config_from_mapping(raw)


def load_preset(name):
    """Load one of the bundled preset configs by name."""
    if name not in PRESET_NAMES:
        raise ValidationError(
            "unknown preset %r; available: %s" % (name, ", ".join(PRESET_NAMES))
        )
    text = resources.files("fockcast.presets").joinpath(name + ".toml").read_text()
    return config_from_mapping(tomllib.loads(text))
