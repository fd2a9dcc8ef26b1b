"""
Command-line front end for the GMWB Monte Carlo engine.

Loads a JSON run document, applies flag overrides, dispatches one
command and writes CSV results plus a run manifest to the output
directory. Failures print a machine-readable error record to stderr.

Usage:
    python run.py --config configs/base_case_fair_fee.json fair-fee --m 0,0.1,0.2,0.3
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from config import check_document, config, load_config_document
from exceptions import (
    ConfigError,
    EngineError,
    ErrorCode,
    ParameterError,
    UsageError,
    ValidationFailedError,
)
from kernel import WeightScheme
from logger import EngineLogger, cli_logger, set_verbosity
from model_params import (
    ContractSpec,
    FeeStructure,
    JumpLoading,
    MarketParamsQ,
    RiskPremia,
    WithdrawalSegment,
    withdrawal_preset,
)
from oracle import TruncationScheme
from pricing import (
    FeeMode,
    Measure,
    MemoryMode,
    SimConfig,
    fair_base_fee,
    fair_fee_consistency,
    fee_and_payout,
)
from risk import loss_distribution, sensitivity_sweep, summary
from utils import merge_lists, parse_float_list, to_jsonable
from validation import PropertySuite

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_ENGINE = 3


@dataclass
class RunManifest:
    """Everything needed to reproduce a command's outputs."""
    command: str
    engine_version: str
    seed: int
    document: Dict[str, Dict[str, Any]]
    derived: Dict[str, Any]
    started_at: str
    wall_time_s: float = 0.0
    outputs: List[str] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)


class _ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="gmwb",
        description="Monte Carlo pricing and risk of GMWB annuities with VIX-linked fees",
    )
    parser.add_argument("--config", type=Path, default=None, help="JSON run document or run manifest")
    parser.add_argument("--seed", type=int, default=None, help="Master seed (overrides the document)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (never changes results)")
    parser.add_argument("--paths", type=int, default=None, help="Number of initial particles N0")
    parser.add_argument("--h", type=float, default=None, help="Time step in years")
    parser.add_argument("--log-file", type=Path, default=None, help="Also write DEBUG logs here")
    parser.add_argument("-v", "--verbose", action="store_true", help="DEBUG output on the console")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only warnings on the console")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    fair = sub.add_parser("fair-fee", help="Fair base fee for each multiplier")
    fair.add_argument("--m", type=str, default=None, help="Comma separated multipliers")
    fair.add_argument("--tol", type=float, default=config.fair_fee.tol)
    fair.add_argument("--target", type=float, default=0.0, help="Net liability to solve for")

    sub.add_parser("net-liability", help="Net liability, fees and payout at the document's fee")

    curve = sub.add_parser("fee-curve", help="Fees, payout and net liability over a c_bar grid")
    curve.add_argument("--c-bar", type=str, default=None, help="Comma separated base fees")
    curve.add_argument("--m", type=str, default=None, help="Comma separated multipliers")

    loss = sub.add_parser("loss-dist", help="Real-world loss samples and summary")
    loss.add_argument("--zeta", type=float, default=None)
    loss.add_argument("--no-samples", action="store_true", help="Skip the per-sample CSV")

    sens = sub.add_parser("sensitivity", help="Net liability or loss summary over V0 x m")
    sens.add_argument("--v0", type=str, default=None, help="Comma separated V0 grid")
    sens.add_argument("--m", type=str, default=None, help="Comma separated multipliers")
    sens.add_argument("--fee-mode", choices=[m.value for m in FeeMode], default=None)
    sens.add_argument("--measure", choices=[m.value for m in Measure], default=None)

    sub.add_parser("consistency", help="Optional-stopping residual of the fair-fee identity")

    val = sub.add_parser("validate", help="Property checks and Euler oracle cross-check")
    val.add_argument("--checks", type=str, default=None, help="Comma separated check names")
    return parser


def _invalid(e: ParameterError, source: str) -> ConfigError:
    detail = f" ({e.details})" if e.details else ""
    return ConfigError(f"{e.message}{detail}", path=source, code=ErrorCode.CONFIG_INVALID)


def _contract_from(section: Dict[str, Any]) -> ContractSpec:
    base = config.base_case
    f0 = float(section.get("f0", base.f0))
    if "withdrawals" in section:
        segments = tuple(
            WithdrawalSegment(float(s["from_year"]), float(s["to_year"]), float(s["rate"]))
            for s in section["withdrawals"]
        )
        return ContractSpec(f0=f0, segments=segments)
    if "preset" in section:
        return withdrawal_preset(section["preset"], f0)
    return ContractSpec.constant(f0, float(section.get("rate", base.withdrawal_rate)))


def build_sim_config(
    document: Dict[str, Dict[str, Any]],
    args: Optional[argparse.Namespace] = None,
    source: str = "<document>"
) -> SimConfig:
    """Turn a checked run document plus flag overrides into a SimConfig."""
    base = config.base_case
    market_doc, fee_doc = document["market"], document["fee"]
    sim_doc = dict(document["sim"])
    if args is not None:
        for flag, key in (("seed", "seed"), ("threads", "threads"), ("paths", "n_paths"), ("h", "h")):
            value = getattr(args, flag, None)
            if value is not None:
                sim_doc[key] = value

    try:
        market = MarketParamsQ(
            nu=float(market_doc.get("nu", base.nu)),
            rho_rev=float(market_doc.get("rho_rev", base.rho_rev)),
            kappa=float(market_doc.get("kappa", base.kappa)),
            v0=float(market_doc.get("v0", base.v0)),
            rho=float(market_doc.get("rho", base.rho)),
            lam=float(market_doc.get("lambda", base.lam)),
            delta=float(market_doc.get("delta", base.delta)),
            chi=float(market_doc.get("chi", base.chi)),
            r=float(market_doc.get("r", base.r)),
        )
        fee = FeeStructure(
            q=float(fee_doc.get("q", base.q)),
            c_bar=float(fee_doc.get("c_bar", base.c_bar)),
            m=float(fee_doc.get("m", base.m)),
            jump_loading=fee_doc.get("jump_loading", JumpLoading.FULL.value),
        )
        premia = RiskPremia(**{k: float(v) for k, v in document["premia"].items()})
        contract = _contract_from(document["contract"])

        sim_defaults = config.simulation
        return SimConfig(
            market=market,
            fee=fee,
            contract=contract,
            premia=premia,
            measure=Measure(sim_doc.get("measure", Measure.Q.value)),
            n_paths=int(sim_doc.get("n_paths", sim_defaults.n_paths)),
            h=float(sim_doc.get("h", sim_defaults.h)),
            seed=int(sim_doc.get("seed", sim_defaults.seed)),
            epsilon=float(sim_doc.get("epsilon", sim_defaults.epsilon)),
            q1=float(sim_doc.get("q1", sim_defaults.q1)),
            q2=float(sim_doc.get("q2", sim_defaults.q2)),
            branching=bool(sim_doc.get("branching", True)),
            sub_steps=int(sim_doc.get("sub_steps", sim_defaults.sub_steps)),
            weights=WeightScheme(sim_doc.get("weights", sim_defaults.weight_scheme)),
            memory_mode=MemoryMode(sim_doc.get("memory_mode", MemoryMode.SINGLE_PASS.value)),
            pooled=bool(sim_doc.get("pooled", False)),
            n_batches=int(sim_doc.get("n_batches", sim_defaults.n_batches)),
            threads=int(sim_doc.get("threads", sim_defaults.threads)),
            record_ancestry=bool(sim_doc.get("record_ancestry", False)),
        )
    except ParameterError as e:
        raise _invalid(e, source)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"Invalid value in run document: {e}", path=source)


def resolved_document(sim: SimConfig, document: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """The run document with every default and override filled in."""
    market = sim.market
    return {
        "market": {
            "nu": market.nu, "rho_rev": market.rho_rev, "kappa": market.kappa,
            "v0": market.v0, "rho": market.rho, "lambda": market.lam,
            "delta": market.delta, "chi": market.chi, "r": market.r,
        },
        "premia": asdict(sim.premia),
        "fee": asdict(sim.fee),
        "contract": {
            "f0": sim.contract.f0,
            "withdrawals": [asdict(s) for s in sim.contract.segments],
        },
        "sim": {
            "measure": sim.measure.value, "n_paths": sim.n_paths, "h": sim.h,
            "seed": sim.seed, "epsilon": sim.epsilon, "q1": sim.q1, "q2": sim.q2,
            "branching": sim.branching, "sub_steps": sim.sub_steps,
            "weights": sim.weights.value,
            "memory_mode": sim.memory_mode.value, "pooled": sim.pooled,
            "n_batches": sim.n_batches, "threads": sim.threads,
            "record_ancestry": sim.record_ancestry,
        },
        "sweep": dict(document.get("sweep", {})),
        "oracle": dict(document.get("oracle", {})),
    }


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    out = config.output
    frame.to_csv(path, index=False, float_format=out.float_format, lineterminator=out.line_terminator)
    cli_logger.info("Wrote CSV", path=str(path), rows=len(frame))
    return path


class CommandRunner:
    """Executes one command for a resolved SimConfig and collects its outputs."""

    def __init__(self, sim: SimConfig, document: Dict[str, Dict[str, Any]], out_dir: Path):
        self.sim = sim
        self.document = document
        self.sweep = document.get("sweep", {})
        self.out_dir = out_dir
        self.outputs: List[str] = []
        self.results: Dict[str, Any] = {}

    def _write(self, frame: pd.DataFrame, name: str) -> None:
        path = write_csv(frame, self.out_dir / name)
        self.outputs.append(path.name)

    def _m_list(self, flag: Optional[str]) -> List[float]:
        return merge_lists(parse_float_list(flag, "m"), self.sweep.get("m_list"))

    def cmd_fair_fee(self, args: argparse.Namespace) -> None:
        m_list = self._m_list(args.m)
        if not m_list:
            raise UsageError("fair-fee needs at least one multiplier (--m or sweep.m_list)")
        rows = []
        for m in m_list:
            result = fair_base_fee(m, self.sim, tol=args.tol, target=args.target)
            rows.append({
                "m": m,
                "c_bar_star_pct": 100.0 * result.c_bar,
                "std_error": 100.0 * result.std_error,
                "n_paths": self.sim.n_paths,
                "h": self.sim.h,
                "seed": self.sim.seed,
            })
        self._write(pd.DataFrame(rows), "fair_fee.csv")
        self.results["fair_fees"] = {str(r["m"]): r["c_bar_star_pct"] for r in rows}

    def cmd_net_liability(self, args: argparse.Namespace) -> None:
        fp = fee_and_payout(self.sim)
        row = {
            "c_bar": self.sim.fee.c_bar,
            "m": self.sim.fee.m,
            "net_liability": fp.net.value,
            "std_error": fp.net.std_error,
            "fees": fp.fees.value,
            "fees_se": fp.fees.std_error,
            "payout": fp.payout.value,
            "payout_se": fp.payout.std_error,
            "n_effective": fp.net.n_effective,
            "n_paths": self.sim.n_paths,
            "h": self.sim.h,
            "seed": self.sim.seed,
        }
        self._write(pd.DataFrame([row]), "net_liability.csv")
        self.results["net_liability"] = fp.net.value

    def cmd_fee_curve(self, args: argparse.Namespace) -> None:
        c_grid = merge_lists(parse_float_list(args.c_bar, "c-bar"), self.sweep.get("c_bar_grid"))
        m_list = self._m_list(args.m) or [self.sim.fee.m]
        if not c_grid:
            raise UsageError("fee-curve needs a base-fee grid (--c-bar or sweep.c_bar_grid)")
        rows = []
        for m in m_list:
            for c_bar in c_grid:
                fp = fee_and_payout(self.sim.with_fee(c_bar=c_bar, m=m))
                rows.append({
                    "m": m, "c_bar": c_bar,
                    "fees": fp.fees.value, "fees_se": fp.fees.std_error,
                    "payout": fp.payout.value, "payout_se": fp.payout.std_error,
                    "net_liability": fp.net.value, "net_se": fp.net.std_error,
                })
        self._write(pd.DataFrame(rows), "fee_curve.csv")

    def cmd_loss_dist(self, args: argparse.Namespace) -> None:
        zeta = args.zeta or self.sweep.get("zeta", config.risk.zeta)
        dist = loss_distribution(self.sim.replace(measure=Measure.P))
        if not args.no_samples:
            self._write(
                pd.DataFrame({"loss": dist.values, "weight": dist.weights, "batch": dist.batch_ids}),
                "loss_samples.csv",
            )
        stats = summary(dist, zeta)
        self._write(pd.DataFrame([stats.to_record()]), "loss_summary.csv")
        self.results["loss_summary"] = stats.to_record()

    def cmd_sensitivity(self, args: argparse.Namespace) -> None:
        v0_grid = merge_lists(parse_float_list(args.v0, "v0"), self.sweep.get("v0_grid"))
        m_list = self._m_list(args.m)
        if not v0_grid or not m_list:
            raise UsageError("sensitivity needs a V0 grid and multipliers")
        fee_mode = FeeMode(args.fee_mode or self.sweep.get("fee_mode", FeeMode.FAIR.value))
        sim = self.sim if args.measure is None else self.sim.replace(measure=Measure(args.measure))
        fair_fees = self.sweep.get("fair_fees")
        if fair_fees is not None:
            fair_fees = {float(k): float(v) for k, v in fair_fees.items()}
        frame = sensitivity_sweep(
            sim, v0_grid, m_list, fee_mode=fee_mode, fair_fees=fair_fees,
            zeta=self.sweep.get("zeta", config.risk.zeta),
        )
        self._write(frame, "sensitivity.csv")

    def cmd_consistency(self, args: argparse.Namespace) -> None:
        result = fair_fee_consistency(self.sim)
        row = {
            "c_bar": self.sim.fee.c_bar,
            "m": self.sim.fee.m,
            "residual": result.residual.value,
            "residual_se": result.residual.std_error,
            "net_liability": result.net.value,
            "net_se": result.net.std_error,
            "annuity": result.annuity,
        }
        self._write(pd.DataFrame([row]), "consistency.csv")
        self.results["residual"] = result.residual.value

    def cmd_validate(self, args: argparse.Namespace) -> None:
        names = [n.strip() for n in args.checks.split(",")] if args.checks else None
        oracle_doc = self.document.get("oracle", {})
        try:
            settings = replace(
                config.validation,
                oracle_h=float(oracle_doc.get("h", config.validation.oracle_h)),
                oracle_paths=int(oracle_doc.get("n_paths", config.validation.oracle_paths)),
            )
            scheme = TruncationScheme(oracle_doc.get("scheme", TruncationScheme.FULL_TRUNCATION.value))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid oracle section: {e}")
        report = PropertySuite(self.sim, settings, scheme).run(names)
        self._write(report.to_frame(), "validation.csv")
        self.results["validation"] = {"failed": report.failed, "warnings": report.warnings}
        if not report.is_valid:
            raise ValidationFailedError(report.failed)


def _configure_logging(args: argparse.Namespace) -> None:
    if args.verbose:
        set_verbosity(logging.DEBUG)
    elif args.quiet:
        set_verbosity(logging.WARNING)
    if args.log_file is not None:
        for instance in EngineLogger._instances.values():
            instance.add_file(str(args.log_file))


def _exit_code(error: EngineError) -> int:
    if isinstance(error, ValidationFailedError):
        return EXIT_VALIDATION
    if isinstance(error, (ConfigError, UsageError)):
        return EXIT_USAGE
    return EXIT_ENGINE


def run_command(args: argparse.Namespace) -> RunManifest:
    """Resolve the document, run the command, write outputs and the manifest."""
    source = str(args.config) if args.config else "<defaults>"
    document = load_config_document(args.config) if args.config else check_document({})
    sim = build_sim_config(document, args, source)

    out_dir = args.out or Path(config.output.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = RunManifest(
        command=args.command,
        engine_version=config.version,
        seed=sim.seed,
        document=resolved_document(sim, document),
        derived=asdict(sim.derived),
        started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    runner = CommandRunner(sim, document, out_dir)
    handler = getattr(runner, "cmd_" + args.command.replace("-", "_"))

    cli_logger.info("Command started", command=args.command, seed=sim.seed, out=str(out_dir))
    start_time = time.perf_counter()
    try:
        handler(args)
    finally:
        manifest.wall_time_s = time.perf_counter() - start_time
        manifest.outputs = runner.outputs
        manifest.results = runner.results
        manifest_path = out_dir / config.output.manifest_pattern.format(command=args.command)
        manifest_path.write_text(json.dumps(to_jsonable(manifest), indent=2), encoding="utf-8")
        cli_logger.performance(args.command, manifest.wall_time_s * 1000, manifest=str(manifest_path))
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args)
        run_command(args)
    except EngineError as e:
        cli_logger.error("Command failed", error=str(e), details=e.details)
        print(json.dumps(to_jsonable(e.to_record())), file=sys.stderr)
        return _exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
