"""Plain-text ``key=value`` configuration shared by the CLI subcommands."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .deformation import DEFAULT_SPACINGS


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _floats(text):
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _strs(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


@dataclass
class Config:
    # inputs and outputs
    manifest: str = ""
    images: tuple = ()
    out: str = "out"
    results: str = ""
    seed: int = 0
    workers: int = 0
    verbose: bool = False
    # model
    levels: tuple = DEFAULT_SPACINGS
    support_factor: float = 4.0
    bias_support: float = 40.0
    patch_edge: int = 8
    euler_steps: int = 16
    max_outer: int = 10
    tol: float = 1e-4
    variance_patches: int = 64
    variance_evals: int = 200
    max_iter: int = 100
    grad_tol: float = 1e-5
    step_tol: float = 1e-8
    bias_corrected_template: bool = False
    output_format: str = "af3d"
    # simulation
    n_images: int = 5
    dims: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    noise_sigma: float = 0.01
    bias_amplitude: float = 0.05
    bias_width: float = 30.0
    bias_images: tuple = ()
    deformation_lambdas: tuple = (0.0, 0.0, 0.0)

    _PARSERS = {
        "images": _strs,
        "levels": _floats,
        "dims": _ints,
        "spacing": _floats,
        "bias_images": _ints,
        "deformation_lambdas": _floats,
    }

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def update(self, pairs: dict, source="config") -> "Config":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in pairs.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ConfigError(f"{source}: unknown key {key!r}")
            current = getattr(self, name)
            try:
                if name in self._PARSERS:
                    value = self._PARSERS[name](raw)
                elif isinstance(current, bool):
                    value = _bool(raw)
                elif isinstance(current, int):
                    value = int(raw)
                elif isinstance(current, float):
                    value = float(raw)
                else:
                    value = str(raw).strip()
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {name}: {raw!r}") from exc
            if name in ("dims", "spacing") and len(value) == 1:
                value = value * 3
            setattr(self, name, value)
        return self

    def validate(self) -> "Config":
        s = self.levels
        if not s or min(s) <= 0 or any(b >= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"levels must be positive and strictly decreasing, got {s}")
        for name in ("support_factor", "bias_support", "tol", "grad_tol", "step_tol", "bias_width"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("patch_edge", "euler_steps", "max_outer", "max_iter", "variance_evals", "n_images"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ConfigError(f"dims must be three values >= 2, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        if not any(self.deformation_lambdas):
            self.deformation_lambdas = (0.0,) * len(self.levels)
        if len(self.deformation_lambdas) != len(self.levels):
            raise ConfigError("deformation_lambdas needs one value per level")
        if self.output_format not in ("af3d", "nii"):
            raise ConfigError("output_format must be 'af3d' or 'nii'")
        return self

    def to_text(self) -> str:
        lines = []
        for name in self.keys():
            v = getattr(self, name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{name}={v}")
        return "\n".join(lines) + "\n"

    def pipeline(self):
        from .template import PipelineConfig

        return PipelineConfig(
            spacings=self.levels,
            support_factor=self.support_factor,
            bias_support=self.bias_support,
            patch_edge=self.patch_edge,
            euler_steps=self.euler_steps,
            max_outer=self.max_outer,
            tol=self.tol,
            variance_patches=self.variance_patches,
            variance_evals=self.variance_evals,
            max_iter=self.max_iter,
            grad_tol=self.grad_tol,
            step_tol=self.step_tol,
            bias_corrected_template=self.bias_corrected_template,
            trace=self.verbose,
        )

    def phantom(self):
        from .synth import PhantomSpec

        return PhantomSpec(
            dims=self.dims,
            spacing=self.spacing,
            n_images=self.n_images,
            noise_sigma=self.noise_sigma,
            bias_amplitude=self.bias_amplitude,
            bias_width=self.bias_width,
            bias_images=self.bias_images or None,
            levels=self.levels,
            support_factor=self.support_factor,
            deformation_lambdas=self.deformation_lambdas,
            euler_steps=self.euler_steps,
            seed=self.seed,
        )


def parse_key_values(text: str, source="config") -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    """File values first, then ``overrides`` (command-line flags win)."""
    cfg = Config()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        cfg.update(parse_key_values(text, str(path)), str(path))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg.validate()


@dataclass
class Manifest:
    """Per-image file paths keyed ``image.<i>.<kind>`` plus free-form globals."""

    entries: dict = field(default_factory=dict)
    base: Path = Path(".")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        return cls(parse_key_values(text, str(path)), path.parent)

    def write(self, path) -> None:
        lines = [f"{k}={v}" for k, v in self.entries.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def n_images(self) -> int:
        idx = {int(k.split(".")[1]) for k in self.entries if k.startswith("image.")}
        return len(idx)

    def path(self, i, kind):
        v = self.entries.get(f"image.{i}.{kind}")
        return None if v is None else self.base / v

    def get(self, key):
        v = self.entries.get(key)
        return None if v is None else self.base / v
