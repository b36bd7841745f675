"""
命令行入口（revsde.cli）。

    revsde check|simulate|average|study --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]

退出码：0 成功（check 时表示可逆）、2 不可逆（仅 check）、1 任何错误。
每条命令都在输出目录写 manifest.json（展开默认值后的配置）和 revsde.log；
时间戳只出现在 revsde.log 里，数据文件对相同配置逐字节一致。
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence

import numpy as np

from . import __version__
from .averaging import average_on_grid
from .config import RunConfig
from .config import build_fields
from .config import build_gibbs
from .config import build_grid
from .config import build_quadrature
from .config import build_simulation_system
from .config import build_slow_fast
from .config import load_config
from .core import RuntimeCore
from .diagnostics import EmpiricalDensity
from .diagnostics import averaging_convergence_study
from .diagnostics import balance_from_ensemble
from .diagnostics import default_burn_in
from .diagnostics import gibbs_density
from .diagnostics import stationary_distances
from .interaction import CompositeInteraction
from .interaction import HeadlessInteraction
from .interaction import LoggingInteraction
from .manifest import RunManifest
from .models import BatchFinished
from .models import SimulationReport
from .models import StageFinished
from .reversibility import check_report
from .safety import EXIT_NOT_REVERSIBLE
from .safety import EXIT_OK
from .safety import guard
from .sde import STRATONOVICH
from .sde import convert_convention
from .sde import simulate_ensemble


logger = logging.getLogger(__name__)

LOG_FILE = "revsde.log"
MANIFEST_FILE = "manifest.json"
DEGENERATE_NOISE = 1e-12


# ---------------------------------------------------------------------------
# 输出
# ---------------------------------------------------------------------------


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


class RunOutput:
    """串行写输出文件并记录文件名，最后写进 manifest。"""

    def __init__(self, directory: Path, formats: Sequence[str]) -> None:
        self.directory = directory
        self.formats = set(formats)
        self.files: List[str] = []

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
        if "csv" not in self.formats:
            return
        path = self.directory / name
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def json(self, name: str, record) -> None:
        if "json" not in self.formats:
            return
        (self.directory / name).write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")
        self.files.append(name)

    def manifest(self, command: str, cfg: RunConfig, exit_code: int) -> None:
        manifest = RunManifest(
            command=command,
            version=__version__,
            config=cfg.resolved(),
            outputs=list(self.files),
            exit_code=exit_code,
        )
        (self.directory / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _coord_names(d: int, prefix: str = "x") -> List[str]:
    return [f"{prefix}{i + 1}" for i in range(d)]


# ---------------------------------------------------------------------------
# 命令
# ---------------------------------------------------------------------------


def cmd_check(cfg: RunConfig, out: RunOutput) -> int:
    cfg.require("problem", "grid")
    fields = build_fields(cfg.problem)
    grid = build_grid(cfg.grid)
    report = check_report(fields, cfg.convention, build_gibbs(cfg, fields), grid, cfg.tolerance)
    verdict = report.verdict
    d = fields.dimension
    out.csv(
        "check.csv",
        ["quantity", "max_abs[1]"] + [f"argmax_{c}" for c in _coord_names(d)],
        [
            ["residual_" + verdict.variant.value, verdict.max_residual] + verdict.argmax_point,
            ["residual_covariant", report.covariant_max_residual] + report.covariant_argmax_point,
            ["residual_euclidean", report.euclidean_max_residual] + report.euclidean_argmax_point,
            ["generator_gap", verdict.generator_gap_max] + [float("nan")] * d,
        ],
    )
    out.json("check.json", report)
    code = EXIT_OK if verdict.reversible else EXIT_NOT_REVERSIBLE
    print(
        f"reversible={str(verdict.reversible).lower()} max_residual={verdict.max_residual:.6e} "
        f"at={verdict.argmax_point} variant={verdict.variant.value}"
    )
    return code


def cmd_simulate(cfg: RunConfig, out: RunOutput) -> int:
    cfg.require("problem", "simulation")
    sim = cfg.simulation
    fields = build_fields(cfg.problem)
    d = fields.dimension
    system = build_simulation_system(cfg, fields)
    if sim.method == "heun":
        system = convert_convention(system, STRATONOVICH)
    x0 = np.zeros(d) if sim.x0 is None else np.asarray(sim.x0, dtype=float)

    probes = x0.reshape(1, d) if cfg.grid is None else build_grid(cfg.grid).points()
    degenerate = bool(np.max(np.abs(fields.volatility_jet(probes, order=0).value)) <= DEGENERATE_NOISE)
    if degenerate:
        RuntimeCore().interaction.notify("σ 在探测点上恒为零，跳过 Gibbs 对比", title="simulate", level="warning")

    ens = simulate_ensemble(system, x0, sim.dt, sim.T, sim.n_traj, sim.seed, sim.save_stride, method=sim.method)
    out.csv(
        "ensemble.csv",
        ["traj", "t"] + _coord_names(d),
        (
            [int(tid), float(t)] + list(ens.states[k, j])
            for k, tid in enumerate(ens.traj_ids)
            for j, t in enumerate(ens.times)
        ),
    )

    burn_in = default_burn_in(sim.T) if sim.burn_in is None else sim.burn_in
    samples = ens.after(burn_in)
    ks = w1 = None
    if not degenerate and cfg.grid is not None:
        resolution = sim.density_resolution | 1
        density = gibbs_density(fields, build_gibbs(cfg, fields), (cfg.grid.lower, cfg.grid.upper), resolution)
        ks, w1 = stationary_distances(samples, density)
        if d == 1:
            target = density.marginal(0)
            hist = EmpiricalDensity.from_samples(
                samples[:, 0], bins=100, bounds=(cfg.grid.lower[0], cfg.grid.upper[0])
            )
            centers = 0.5 * (hist.edges[1:] + hist.edges[:-1])
            out.csv(
                "stationary.csv",
                ["x", "empirical_density[1/x]", "gibbs_density[1/x]"],
                zip(centers, hist.heights, target.pdf(centers)),
            )

    balance = None
    if sim.balance is not None:
        bc = sim.balance
        box = None
        if bc.lower is not None and bc.upper is not None:
            box = (bc.lower, bc.upper)
        elif cfg.grid is not None:
            box = (cfg.grid.lower, cfg.grid.upper)
        balance = balance_from_ensemble(
            ens, burn_in, bc.bins, bc.lag, bc.floor, box=box, null_resamples=bc.null_resamples, seed=sim.seed
        )

    report = SimulationReport(
        n_traj=sim.n_traj,
        rejected=ens.rejected_steps,
        dt=sim.dt,
        T=sim.T,
        seed=sim.seed,
        burn_in=burn_in,
        degenerate_noise=degenerate,
        ks_statistic=ks,
        wasserstein1=w1,
        balance=balance,
    )
    out.json("simulate.json", report)
    print(
        f"n_traj={sim.n_traj} rejected={ens.rejected_steps} ks={ks} w1={w1} "
        f"balance={None if balance is None else balance.max_flux_asymmetry}"
    )
    return EXIT_OK


def cmd_average(cfg: RunConfig, out: RunOutput) -> int:
    cfg.require("slow_fast", "averaging")
    ac = cfg.averaging
    sf, rotated = build_slow_fast(cfg.slow_fast)
    result = average_on_grid(sf, build_grid(ac.slow_grid), build_quadrature(ac), rotated=rotated)
    d = sf.slow_dimension
    names = _coord_names(d)
    header = (
        names
        + ["Z_V[1]", "mu_inf[1/x]"]
        + [f"b_eff_{i + 1}" for i in range(d)]
        + [f"sigma_eff_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
        + [f"identity_residual_{i + 1}" for i in range(d)]
    )
    if result.preservation_residual is not None:
        header += [f"preservation_residual_{i + 1}" for i in range(d)]
    rows = []
    for k in range(result.x_grid.shape[0]):
        row = (
            list(result.x_grid[k])
            + [result.Zv[k], result.mu_inf[k]]
            + list(result.b_eff[k])
            + list(result.sigma_eff[k].ravel())
            + list(result.identity_residual[k])
        )
        if result.preservation_residual is not None:
            row += list(result.preservation_residual[k])
        rows.append(row)
    out.csv("averaging.csv", header, rows)
    summary = result.summary(ac.preservation_tolerance)
    out.json("averaging.json", summary)
    if summary.max_identity_residual is not None and summary.max_identity_residual >= ac.identity_tolerance:
        RuntimeCore().interaction.notify(
            f"Klimontovich 恒等式残差 {summary.max_identity_residual:.3e} ≥ {ac.identity_tolerance:g}",
            title="average",
            level="warning",
        )
    if summary.preservation_passed is False:
        RuntimeCore().interaction.notify(
            f"平均后 σ̄₁ 的欧氏残差 {summary.preservation_max_residual:.3e} 超过容差",
            title="average",
            level="warning",
        )
    print(
        f"points={summary.n_points} identity_residual={summary.max_identity_residual:.3e} "
        f"preservation={summary.preservation_max_residual}"
    )
    return EXIT_OK


def cmd_study(cfg: RunConfig, out: RunOutput) -> int:
    cfg.require("slow_fast", "averaging", "study")
    st = cfg.study
    sf, _ = build_slow_fast(cfg.slow_fast)
    report, _ = averaging_convergence_study(
        sf,
        st.n_list,
        st.T,
        st.dt,
        st.n_traj,
        st.seed,
        x0=st.x0,
        slow_grid=build_grid(cfg.averaging.slow_grid),
        quad=build_quadrature(cfg.averaging),
        bootstrap=st.bootstrap,
    )
    out.csv(
        "study.csv",
        ["n[1]", "wasserstein1[x]", "bootstrap_std[x]", "n_samples[1]"],
        ([r.timescale, r.distance, r.bootstrap_std, r.n_samples] for r in report.rows),
    )
    out.json("study.json", report)
    for r in report.rows:
        print(f"n={r.timescale:g} W1={r.distance:.5f} ± {r.bootstrap_std:.5f}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, RunOutput], int]] = {
    "check": cmd_check,
    "simulate": cmd_simulate,
    "average": cmd_average,
    "study": cmd_study,
}


# ---------------------------------------------------------------------------
# 入口
# ---------------------------------------------------------------------------


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="revsde",
        description="λ-约定乘性噪声 SDE 的可逆性检查、模拟与平均化。",
    )
    parser.add_argument("--version", action="version", version=f"revsde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="JSON 配置文件")
        p.add_argument("--out", type=Path, default=None, help="输出目录（默认取 outputs.directory）")
        p.add_argument("--seed", type=int, default=None, help="覆盖配置里的随机种子（u64）")
        p.add_argument("--threads", type=int, default=None, help="线程数（默认 REVSDE_THREADS 或 CPU 数）")
        p.add_argument("-v", "--verbose", action="store_true", help="revsde.log 记录 DEBUG 级别")
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed 必须在 [0, 2^64) 内")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads 必须 ≥ 1")
    return args


def _apply_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return cfg
    update: Dict[str, Any] = {}
    if cfg.simulation is not None:
        update["simulation"] = cfg.simulation.model_copy(update={"seed": seed})
    if cfg.study is not None:
        update["study"] = cfg.study.model_copy(update={"seed": seed})
    return cfg.model_copy(update=update)


def _install_log_file(stack: ExitStack, directory: Path, verbose: bool) -> None:
    handler = logging.FileHandler(directory / LOG_FILE, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("revsde")
    previous = root.level
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(handler)

    def remove() -> None:
        root.removeHandler(handler)
        root.setLevel(previous)
        handler.close()

    stack.callback(remove)


def _subscribe_progress(stack: ExitStack) -> None:
    bus = RuntimeCore().events

    def on_batch(e: BatchFinished) -> None:
        logger.debug("[%s] %d/%d", e.stage, e.index + 1, e.total)

    def on_stage(e: StageFinished) -> None:
        logger.info("[%s] 完成 %s", e.stage, e.detail)

    bus.on(BatchFinished)(on_batch)
    bus.on(StageFinished)(on_stage)
    stack.callback(bus.unsubscribe, on_batch)
    stack.callback(bus.unsubscribe, on_stage)


def _run(args: argparse.Namespace, stack: ExitStack) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    directory = args.out if args.out is not None else Path(cfg.outputs.directory)
    directory.mkdir(parents=True, exist_ok=True)
    _install_log_file(stack, directory, args.verbose)
    _subscribe_progress(stack)
    core = RuntimeCore()
    core.configure_threads(args.threads)
    logger.info("revsde %s %s，配置 %s，输出 %s", __version__, args.command, args.config, directory)
    out = RunOutput(directory, cfg.outputs.formats)
    code = COMMANDS[args.command](cfg, out)
    out.manifest(args.command, cfg, code)
    logger.info("%s 结束，退出码 %d", args.command, code)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    core = RuntimeCore()
    previous = core.interaction
    core.set_interaction(CompositeInteraction([HeadlessInteraction(), LoggingInteraction()]))
    try:
        with ExitStack() as stack:
            return guard(args.command, lambda: _run(args, stack))()
    finally:
        core.set_interaction(previous)


if __name__ == "__main__":
    sys.exit(main())
