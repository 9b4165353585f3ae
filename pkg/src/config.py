"""
Experiment Configuration
Defaults, JSON config files, FLEXREQ_* environment variables and flag overrides.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from uncertainty import EpsilonConfig, UncertaintyError


MECHANISMS = ("deterministic", "stochastic")
LIQUIDITY = ("high", "medium", "low", "none")
MODES = ("not_responsible", "dso_responsible")

# settings that do not change results and stay out of the run id
RUNTIME_ONLY = ("runs_dir", "workers", "log_level")


class ConfigError(ValueError):
    """Raised when a configuration value is missing or invalid."""


def default_prices() -> Dict[str, float]:
    return {
        "request_up": 70.0,
        "request_down": 40.0,
        "activation": 0.0,
        "shedding": 200.0,
        "curtailment": 60.0,
        "offer_min": 25.0,
        "offer_max": 35.0,
    }


@dataclass
class ExperimentConfig:
    network: str = "data/network_15bus.json"
    model: str = "data/model_15bus.json"
    bids: Optional[str] = None
    requests: Optional[str] = None
    gap_input: Optional[str] = None
    zones: List[str] = field(default_factory=lambda: ["nodal", "congestion", "single"])

    estimation_seed: int = 1
    out_of_sample_seed: int = 2
    offer_seed: int = 3
    zone_seed: int = 4
    estimation_scenarios: int = 1000
    out_of_sample_scenarios: int = 2000
    dispatch_scenarios: int = 200
    estimate_covariance: bool = True
    covariance_confidence: Optional[float] = 0.99

    epsilons: Optional[Dict[str, float]] = None
    beta: Optional[float] = None
    prices: Dict[str, float] = field(default_factory=default_prices)
    offer_quantity: List[float] = field(default_factory=lambda: [0.5, 1.5])
    liquidity: List[str] = field(default_factory=lambda: ["high", "medium", "low"])
    mechanisms: List[str] = field(default_factory=lambda: list(MECHANISMS))
    mode: str = "not_responsible"
    method: str = "chance_constrained"
    tie_break: bool = False

    congestion_samples: int = 500
    congestion_threshold: float = 0.05
    congestion_margin: float = 0.0

    solver_tol: float = 1e-8
    workers: int = 1
    runs_dir: str = "runs"
    log_level: str = "INFO"

    def canonical_json(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k not in RUNTIME_ONLY}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @property
    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    def epsilon_config(self, fallback: Optional[EpsilonConfig] = None) -> EpsilonConfig:
        """Config epsilons win over the ones stored with the error model."""
        base = fallback or EpsilonConfig()
        doc = {**base.to_dict(), **(self.epsilons or {})}
        beta = self.beta if self.beta is not None else base.beta
        return EpsilonConfig.from_dict(doc, beta)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


ENV_VARS = {
    "FLEXREQ_RUNS_DIR": ("runs_dir", str),
    "FLEXREQ_SOLVER_TOL": ("solver_tol", float),
    "FLEXREQ_WORKERS": ("workers", int),
    "FLEXREQ_LOG_LEVEL": ("log_level", str),
}


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load configuration: defaults, then the JSON file, then FLEXREQ_*
    environment variables (a .env file is honored), then explicit overrides.

    Raises:
        ConfigError: naming every invalid or unknown key
        FileNotFoundError: when the config file does not exist
    """
    load_dotenv()
    config = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}

    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_path}")
        try:
            with open(config_path, "r") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        if "prices" in doc:
            doc["prices"] = {**default_prices(), **doc["prices"]}
        config = replace(config, **doc)

    env = {}
    for var, (key, cast) in ENV_VARS.items():
        raw = os.getenv(var)
        if raw is None or raw == "":
            continue
        try:
            env[key] = cast(raw)
        except ValueError as e:
            raise ConfigError(f"Invalid {var}={raw!r}: {e}") from e
    config = replace(config, **env)

    if overrides:
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        config = replace(config, **{k: v for k, v in overrides.items() if v is not None})

    validate_config(config)
    return config


def validate_config(config: ExperimentConfig):
    problems = []
    for key in ("estimation_scenarios", "out_of_sample_scenarios", "dispatch_scenarios", "congestion_samples", "workers"):
        if int(getattr(config, key)) < 1:
            problems.append(f"{key} must be >= 1, got {getattr(config, key)}")
    bad = [x for x in config.liquidity if x not in LIQUIDITY]
    if bad or not config.liquidity:
        problems.append(f"liquidity must be a non-empty subset of {LIQUIDITY}, got {config.liquidity}")
    bad = [x for x in config.mechanisms if x not in MECHANISMS]
    if bad:
        problems.append(f"mechanisms must be a subset of {MECHANISMS}, got {config.mechanisms}")
    if config.mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {config.mode!r}")
    if config.method not in ("chance_constrained", "sampled"):
        problems.append(f"method must be 'chance_constrained' or 'sampled', got {config.method!r}")
    missing = sorted(set(default_prices()) - set(config.prices))
    if missing:
        problems.append(f"prices lack {missing}")
    elif config.prices["offer_min"] > config.prices["offer_max"]:
        problems.append(f"offer_min {config.prices['offer_min']} exceeds offer_max {config.prices['offer_max']}")
    elif min(config.prices[k] for k in ("activation", "shedding", "curtailment")) < 0:
        problems.append("real-time prices must be nonnegative")
    if len(config.offer_quantity) != 2 or not 0 <= config.offer_quantity[0] <= config.offer_quantity[1]:
        problems.append(f"offer_quantity must be [min, max] with 0 <= min <= max, got {config.offer_quantity}")
    if not config.solver_tol > 0:
        problems.append(f"solver_tol must be positive, got {config.solver_tol}")
    if config.covariance_confidence is not None and not 0 < config.covariance_confidence < 1:
        problems.append(f"covariance_confidence must lie in (0, 1), got {config.covariance_confidence}")
    if not 0 <= config.congestion_margin < 1:
        problems.append(f"congestion_margin must lie in [0, 1), got {config.congestion_margin}")
    try:
        config.epsilon_config()
    except (UncertaintyError, KeyError, TypeError) as e:
        problems.append(f"epsilons: {e}")

    if problems:
        raise ConfigError("; ".join(problems))
