"""
Configuration Module

This module loads environment variables from a .env file and provides
them as configuration values for the MLMC blind super-resolution solver,
together with the `SolverConfig` dataclass holding every hyperparameter of
a run.

The module uses python-dotenv to load variables from a .env file in the
project root directory. Solver hyperparameters can also be read from and
written to flat `key = value` config files.
"""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv

# Get the project root directory (parent of src/)
# This ensures we load the .env file from the project root regardless of where
# the script is run from
PROJECT_ROOT = Path(__file__).parent.parent

# Load environment variables from .env file
load_dotenv(dotenv_path=PROJECT_ROOT / ".env")


def _get_setting(key: str) -> Optional[str]:
    """
    Get a setting from the environment (populated from .env on import).

    Args:
        key: The setting name

    Returns:
        The setting value or None if not set
    """
    value = os.getenv(key)
    return value if value not in ("", None) else None


# =============================================================================
# Environment Settings
# =============================================================================

# Default seed for every command that does not receive --seed
SEED = int(_get_setting("MLMC_SEED") or "0")

# Logging level name: DEBUG, INFO, WARNING, ...
LOG_LEVEL = (_get_setting("MLMC_LOG_LEVEL") or "INFO").upper()

# Where runs write their outputs when no --out is given
OUTPUT_DIR = _get_setting("MLMC_OUTPUT_DIR") or str(PROJECT_ROOT / "data" / "runs")


# =============================================================================
# Solver Configuration
# =============================================================================

_PAIR_FIELDS = ("width_range", "ood_width_range", "angle_range")
_LIST_FIELDS = ("meta_weights",)
PEAK_CONVENTIONS = ("gt_max", "one")


@dataclass
class SolverConfig:
    """
    Every hyperparameter of one solver run.

    Loop counts:
        iters: Outer iterations I (0 returns the untrained networks).
        mc_steps: MCKA inner steps L.
        meta_steps: Meta-updates Q per MLAO phase.
        image_steps: Image-network steps P per meta-update.
        mc_samples: Monte Carlo kernels T drawn per outer iteration.

    Optimization:
        gamma_mc, gamma_ml: Kernel-network learning rates for the two phases.
        gamma_x: Image-network learning rate.
        epsilon: Stabilizer added to every Monte Carlo fitness value.
        rho_reg, eta: Hyper-Laplacian prior weight and exponent.
        meta_weights: Per-p weights of the meta-loss; None means all ones.
        kernel_step_cap: Largest change of any kernel logit (relative to the mean
            change) one kernel-network step may make; larger Adam steps are
            shrunk along their own direction.
    """

    # Degradation
    scale: int = 2
    noise_sigma: float = 0.0
    seed: int = field(default_factory=lambda: SEED)

    # Loop counts
    iters: int = 100
    mc_steps: int = 1
    meta_steps: int = 5
    image_steps: int = 5
    mc_samples: int = 10

    # Optimization
    gamma_mc: float = 0.5
    gamma_ml: float = 0.5
    gamma_x: float = 0.005
    epsilon: float = 1e-5
    rho_reg: float = 1e-4
    eta: float = 0.67
    meta_weights: Optional[List[float]] = None
    kernel_step_cap: float = 0.5

    # Kernel generator
    kernel_hidden: int = 1000
    z_k_dim: int = 64

    # Image restorer
    restorer_depth: int = 3
    restorer_channels: int = 32
    skip_channels: int = 4
    z_x_channels: int = 16
    leaky_slope: float = 0.1

    # Monte Carlo kernel sampling
    width_range: Optional[Tuple[float, float]] = None
    ood_width_range: Optional[Tuple[float, float]] = None
    angle_range: Tuple[float, float] = (0.0, float(np.pi))
    center_jitter: float = 1.0
    kernel_family: str = "gaussian"
    motion_steps: int = 12
    vary_kernel_size: bool = False
    ood_kernels: bool = False

    # Ablations and variants
    no_mc: bool = False
    no_meta: bool = False
    no_kernel: bool = False
    normalize_weights: bool = False
    bicubic_warm_start: bool = False
    full_unroll: bool = False

    # Reporting
    kernel_psnr_peak: str = "gt_max"
    log_every: int = 10

    @property
    def kernel_side(self) -> int:
        from src.degradation import kernel_side_for_scale

        return kernel_side_for_scale(self.scale)

    @property
    def hr_multiple(self) -> int:
        """HR dims must be multiples of this (restorer depth times scale)."""
        return self.scale * 2 ** self.restorer_depth

    def resolved_meta_weights(self) -> List[float]:
        if self.meta_weights is None:
            return [1.0] * self.image_steps
        return list(self.meta_weights)

    def resolved_width_range(self) -> Tuple[float, float]:
        from src.kernel_sampler import default_width_range

        if self.ood_kernels:
            return self.ood_width_range or default_width_range(self.scale, ood=True)
        return self.width_range or default_width_range(self.scale)

    def kernel_ranges(self) -> "KernelRanges":
        """Sampling ranges for the solver's Monte Carlo kernels."""
        from src.kernel_sampler import KernelRanges

        return KernelRanges(
            width_range=self.resolved_width_range(),
            angle_range=tuple(self.angle_range),
            center_jitter=self.center_jitter,
            family=self.kernel_family,
            motion_steps=self.motion_steps,
            vary_side=self.vary_kernel_size,
        )

    def validate(self) -> dict:
        """
        Check every config invariant and return status.

        Returns:
            dict: Configuration status with 'valid' boolean and any 'errors'
        """
        from src.kernel_sampler import KERNEL_FAMILIES

        errors = []

        if self.scale < 1:
            errors.append(f"scale must be >= 1, got {self.scale}")
        if self.noise_sigma < 0:
            errors.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.iters < 0:
            errors.append(f"iters must be >= 0, got {self.iters}")
        for name in ("mc_steps", "meta_steps", "image_steps", "mc_samples", "kernel_hidden",
                     "z_k_dim", "restorer_depth", "restorer_channels", "skip_channels",
                     "z_x_channels", "motion_steps", "log_every"):
            value = getattr(self, name)
            if value < 1:
                errors.append(f"{name} must be >= 1, got {value}")
        for name in ("gamma_mc", "gamma_ml", "gamma_x", "epsilon", "kernel_step_cap"):
            value = getattr(self, name)
            if not value > 0:
                errors.append(f"{name} must be > 0, got {value}")
        if self.rho_reg < 0:
            errors.append(f"rho_reg must be >= 0, got {self.rho_reg}")
        if not 0 < self.eta <= 1:
            errors.append(f"eta must be in (0, 1], got {self.eta}")
        if self.meta_weights is not None:
            if len(self.meta_weights) != self.image_steps:
                errors.append(
                    f"meta_weights has {len(self.meta_weights)} entries but image_steps is {self.image_steps}"
                )
            if any(w < 0 for w in self.meta_weights):
                errors.append(f"meta_weights must be >= 0, got {self.meta_weights}")
        if self.leaky_slope < 0:
            errors.append(f"leaky_slope must be >= 0, got {self.leaky_slope}")

        for name in ("width_range", "ood_width_range"):
            pair = getattr(self, name)
            if pair is not None and not (len(pair) == 2 and 0 < pair[0] <= pair[1]):
                errors.append(f"{name} must satisfy 0 < lo <= hi, got {pair}")
        if not (len(self.angle_range) == 2 and self.angle_range[0] <= self.angle_range[1]):
            errors.append(f"angle_range must satisfy lo <= hi, got {self.angle_range}")
        if self.center_jitter < 0:
            errors.append(f"center_jitter must be >= 0, got {self.center_jitter}")
        if self.kernel_family not in KERNEL_FAMILIES:
            errors.append(f"kernel_family must be one of {KERNEL_FAMILIES}, got '{self.kernel_family}'")
        if self.kernel_psnr_peak not in PEAK_CONVENTIONS:
            errors.append(f"kernel_psnr_peak must be one of {PEAK_CONVENTIONS}, got '{self.kernel_psnr_peak}'")

        return {
            "valid": len(errors) == 0,
            "errors": errors
        }

    def require_valid(self) -> "SolverConfig":
        """Raise ValueError listing every violated invariant; return self otherwise."""
        validation = self.validate()
        if not validation["valid"]:
            raise ValueError("Invalid solver configuration:\n  - " + "\n  - ".join(validation["errors"]))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# =============================================================================
# Config files
# =============================================================================

def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, raw: str, default: Any) -> Any:
    text = raw.strip()
    if name in _PAIR_FIELDS or name in _LIST_FIELDS:
        if text.lower() == "none":
            return None
        values = [float(part) for part in text.split(",") if part.strip()]
        if name in _PAIR_FIELDS:
            if len(values) != 2:
                raise ValueError(f"Config key '{name}' needs two comma-separated numbers, got '{raw}'")
            return (values[0], values[1])
        return values
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"Config key '{name}' needs a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_lines(lines: List[str], base: Optional[SolverConfig] = None) -> SolverConfig:
    """
    Apply `key = value` lines on top of `base` (defaults when None).

    Raises:
        ValueError: Malformed line, unknown key, or unparseable value.
    """
    cfg = base if base is not None else SolverConfig()
    known = {f.name for f in fields(SolverConfig)}
    updates: Dict[str, Any] = {}

    for number, line in enumerate(lines, start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ValueError(f"Config line {number} is not 'key = value': {line.strip()}")
        key, raw = (part.strip() for part in content.split("=", 1))
        if key not in known:
            raise ValueError(f"Unknown config key '{key}' on line {number}")
        try:
            updates[key] = _parse_value(key, raw, getattr(cfg, key))
        except ValueError as e:
            raise ValueError(f"Config line {number}: {e}") from e

    values = cfg.to_dict()
    values.update(updates)
    return SolverConfig(**values)


def load_config_file(path: Union[str, Path], base: Optional[SolverConfig] = None) -> SolverConfig:
    """Read a flat `key = value` config file."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Config file not found: {path}")
    return parse_config_lines(path.read_text().splitlines(), base)


def dump_config_file(cfg: SolverConfig, path: Union[str, Path]) -> Path:
    """Write every field of `cfg` so that `load_config_file` reproduces it exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# MLMC solver configuration"]
    lines += [f"{name} = {_format_value(value)}" for name, value in cfg.to_dict().items()]
    path.write_text("\n".join(lines) + "\n")
    return path


# =============================================================================
# Validation and Information
# =============================================================================

def validate_config(cfg: Optional[SolverConfig] = None) -> dict:
    """
    Validate environment settings and (optionally) a solver config.

    Returns:
        dict: Configuration status with 'valid' boolean and any 'errors'
    """
    errors = []
    if LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        errors.append(f"MLMC_LOG_LEVEL must be a logging level name, got '{LOG_LEVEL}'")
    if cfg is not None:
        errors.extend(cfg.validate()["errors"])
    return {
        "valid": len(errors) == 0,
        "errors": errors
    }


def print_config_status(cfg: Optional[SolverConfig] = None):
    """
    Print the current configuration status to help with debugging.
    """
    cfg = cfg if cfg is not None else SolverConfig()
    print("=" * 70)
    print("Configuration Status")
    print("=" * 70)
    print(f"MLMC_SEED: {SEED}")
    print(f"MLMC_LOG_LEVEL: {LOG_LEVEL}")
    print(f"MLMC_OUTPUT_DIR: {OUTPUT_DIR}")
    print("-" * 70)
    for name, value in cfg.to_dict().items():
        print(f"{name}: {_format_value(value)}")
    print(f"kernel_side (derived): {cfg.kernel_side}")
    print(f"width_range (effective): {_format_value(cfg.resolved_width_range())}")
    print("=" * 70)

    validation = validate_config(cfg)
    if not validation["valid"]:
        print("\n⚠️  Configuration Errors:")
        for error in validation["errors"]:
            print(f"  - {error}")
        print("\nPlease check your config file, CLI flags and .env file.")
    else:
        print("\n✓ Configuration is valid!")


if __name__ == "__main__":
    # When run directly, print configuration status
    import sys

    sys.path.insert(0, str(PROJECT_ROOT))
    print_config_status()
