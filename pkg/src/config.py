"""
Configuration Management for the GMWB Monte Carlo engine.

Centralized defaults for simulation, fee solving, risk measures, output
and validation, plus the loader for JSON run documents.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Mapping, Tuple

from exceptions import ConfigError, ErrorCode


@dataclass(frozen=True)
class SimulationDefaults:
    """Monte Carlo simulation settings."""
    h: float = 1.0 / 250.0
    n_paths: int = 200_000
    epsilon: float = 1e-4  # low-variance barrier for the likelihood
    weight_scheme: str = "transition"
    q1: float = 1.0
    q2: float = 1.0
    sub_steps: int = 1
    n_batches: int = 50
    seed: int = 20180607
    threads: int = 1
    chunk_size: int = 50_000  # particles per worker task
    pool_headroom: float = 2.0
    stream_id_limit: int = 1 << 40  # engine particle ids stay below this


@dataclass(frozen=True)
class BaseCaseDefaults:
    """Base-case market and contract used when a run document omits a key."""
    nu: float = 0.18
    rho_rev: float = 2.86
    kappa: float = 0.6
    v0: float = 0.04
    rho: float = -0.96
    lam: float = 0.21
    delta: float = -0.1252
    chi: float = 0.18
    r: float = 0.02
    q: float = 0.0075
    c_bar: float = 0.0
    m: float = 0.0
    f0: float = 100.0
    withdrawal_rate: float = 7.0


@dataclass(frozen=True)
class FairFeeDefaults:
    """Bisection settings for the fair base fee."""
    bracket: Tuple[float, float] = (0.0, 0.05)
    tol: float = 1e-5
    max_iter: int = 60


@dataclass(frozen=True)
class RiskDefaults:
    """Risk measure settings."""
    zeta: float = 0.90


@dataclass(frozen=True)
class OutputDefaults:
    """CSV and manifest output settings."""
    out_dir: str = "results"
    float_format: str = "%.17g"
    line_terminator: str = "\r\n"
    manifest_pattern: str = "{command}_manifest.json"
    log_file: str = "engine.log"


@dataclass(frozen=True)
class ValidationDefaults:
    """Sample sizes and tolerances for the property suite."""
    n_paths: int = 20_000
    cir_paths: int = 20_000
    branching_replications: int = 2_000
    oracle_paths: int = 20_000
    oracle_h: float = 1e-4
    weighted_nu: float = 0.1773
    horizon: float = 1.0
    h: float = 1.0 / 250.0
    n_sigma: float = 4.0
    n_sigma_pair: float = 3.0
    ks_pvalue: float = 0.01


@dataclass(frozen=True)
class DocumentSchema:
    """Allowed keys per section of a JSON run document."""
    sections: Dict[str, FrozenSet[str]] = field(default_factory=lambda: {
        "market": frozenset({
            "nu", "rho_rev", "kappa", "v0", "rho", "lambda", "delta", "chi", "r",
        }),
        "premia": frozenset({"eta_s", "eta_v", "eta_j"}),
        "fee": frozenset({"q", "c_bar", "m", "jump_loading"}),
        "contract": frozenset({"f0", "withdrawals", "rate", "preset"}),
        "sim": frozenset({
            "measure", "n_paths", "h", "seed", "epsilon", "q1", "q2",
            "branching", "sub_steps", "weights", "memory_mode", "pooled", "n_batches",
            "threads", "record_ancestry",
        }),
        "sweep": frozenset({
            "m_list", "v0_grid", "c_bar_grid", "fee_mode", "fair_fees", "zeta",
        }),
        "oracle": frozenset({"h", "scheme", "n_paths"}),
    })


@dataclass
class EngineConfig:
    """Main engine configuration."""
    version: str = "1.0.0"
    simulation: SimulationDefaults = field(default_factory=SimulationDefaults)
    base_case: BaseCaseDefaults = field(default_factory=BaseCaseDefaults)
    fair_fee: FairFeeDefaults = field(default_factory=FairFeeDefaults)
    risk: RiskDefaults = field(default_factory=RiskDefaults)
    output: OutputDefaults = field(default_factory=OutputDefaults)
    validation: ValidationDefaults = field(default_factory=ValidationDefaults)
    schema: DocumentSchema = field(default_factory=DocumentSchema)

    # Project root is parent of src/
    base_path: Path = field(default_factory=lambda: Path(__file__).parent.parent)

    @property
    def configs_path(self) -> Path:
        return self.base_path / "configs"


# Global configuration instance
config = EngineConfig()


def load_config_document(path) -> Dict[str, Dict[str, Any]]:
    """
    Load and schema-check a JSON run document.

    Args:
        path: Path to the JSON document

    Returns:
        Mapping of section name to its key/value mapping (missing sections empty)

    Raises:
        ConfigError: On unreadable files, malformed JSON (with line/column),
            unknown sections or unknown keys
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(
            f"Cannot read run document: {e.strerror}",
            path=str(path),
            code=ErrorCode.CONFIG_PARSE_ERROR
        )

    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"Malformed JSON: {e.msg}",
            path=str(path),
            line=e.lineno,
            column=e.colno,
            code=ErrorCode.CONFIG_PARSE_ERROR
        )

    # A run manifest carries its resolved document; rerun from that.
    if isinstance(data, Mapping) and "document" in data and "command" in data:
        data = data["document"]

    return check_document(data, source=str(path))


def check_document(data: Any, source: str = "<document>") -> Dict[str, Dict[str, Any]]:
    """Reject unknown sections and keys; fill absent sections with empty dicts."""
    if not isinstance(data, Mapping):
        raise ConfigError("Run document must be a JSON object", path=source)

    sections = config.schema.sections
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"Unknown section(s): {', '.join(unknown)}", path=source)

    document: Dict[str, Dict[str, Any]] = {}
    for name, allowed in sections.items():
        section = data.get(name, {})
        if not isinstance(section, Mapping):
            raise ConfigError(f"Section '{name}' must be a JSON object", path=source)
        bad_keys = sorted(set(section) - allowed)
        if bad_keys:
            raise ConfigError(
                f"Unknown key(s) in '{name}': {', '.join(bad_keys)}",
                path=source
            )
        document[name] = dict(section)
    return document
