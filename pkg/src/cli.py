"""
ScaForge — Rich Terminal Interface
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~
Command-line front end for the side-channel workbench: simulate protected
AES traces, attack them with CPA, sweep the supply for a voltage-drop
attack, train and run the glitch/probe detector, replay the RO voltage
monitor and exercise the Saber KEM.

Exit codes: 0 success, 1 usage error, 2 data error, 3 negative result.
"""

import dataclasses
import logging
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np
from rich import box
from rich.align import Align
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from . import __version__
from .attack import compute_mtd, cpa_attack
from .config import load_config, save_config
from .core import RngStream
from .countermeasure import (
    effective_attenuation,
    find_voltage_drop_attack,
    parse_countermeasures,
    signal_attenuation,
    simulate_pipeline,
)
from .detect import (
    SCENARIOS,
    SensorDataset,
    evaluate_detector,
    generate_dataset,
    simulate_supply_drop,
    train_detector,
    voltage_drop_detect,
)
from .errors import (
    EXIT_NEGATIVE,
    EXIT_OK,
    EXIT_USAGE,
    NoAttackFound,
    NotDisclosed,
    ScaForgeError,
    UsageError,
)
from .polymul import (
    MemoryMeter,
    matvec_mul_eager,
    matvec_mul_lazy,
)
from .saber import (
    SABER,
    check_kat_vector,
    gen_matrix,
    gen_secret,
    generate_kat,
    read_kat,
    saber_decaps,
    saber_encaps,
    saber_keygen,
    stream_randombytes,
    write_kat,
)
from .store import (
    TraceFileReader,
    emit_report,
    labels_path,
    load_model,
    read_bytes,
    read_labels,
    read_traces,
    read_voltage_series,
    save_model,
    write_bytes,
    write_sweep,
    write_traces,
)
from .workers import get_system_info

console = Console()
err_console = Console(stderr=True)

MODEL_ALIASES = {"hw": "hamming_weight", "hd": "hamming_distance"}
ATTENUATION_SAMPLE = 2000


# ── Formatting Helpers ─────────────────────────────────────────────────────

def format_count(n: float) -> str:
    """Trace counts with thousands separators; inf as 'never'."""
    if n == float("inf"):
        return "never"
    return f"{n:,.0f}"


def format_ms(samples: int, sample_rate: float) -> str:
    return f"{1e3 * samples / sample_rate:.3f} ms"


def parse_int_list(text: Optional[str], name: str) -> Optional[list[int]]:
    """'100,200,400' -> [100, 200, 400]."""
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of integers, got {text!r}")


def parse_range(text: str) -> tuple[float, float, float]:
    """'lo:hi:step' -> (lo, hi, step)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--range must look like lo:hi:step, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"--range values must be numbers, got {text!r}")
    if not step > 0:
        raise UsageError(f"--range step must be > 0, got {step}")
    if hi < lo:
        raise UsageError(f"--range upper bound {hi} is below lower bound {lo}")
    return lo, hi, step


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _require_matplotlib():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise UsageError("--plot needs matplotlib; install scaforge[plot]")
    return plt


def _plot_rank_curve(report, path: Path) -> None:
    plt = _require_matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [p.checkpoint for p in report.rank_curve]
    ax.step(xs, [p.rank for p in report.rank_curve], where="post")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("traces")
    ax.set_ylabel("worst true-key byte rank")
    if report.mtd is not None:
        ax.axvline(report.mtd, color="tab:red", linestyle="--", label=f"MTD {report.mtd}")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_sweep(points, vdd_star: Optional[float], path: Path) -> None:
    plt = _require_matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([p.vdd for p in points], [p.mtd for p in points], marker="o")
    ax.set_yscale("log")
    ax.set_xlabel("VDD (V)")
    ax.set_ylabel("estimated MTD (traces)")
    if vdd_star is not None:
        ax.axvline(vdd_star, color="tab:red", linestyle="--", label=f"VDD* {vdd_star:.3f} V")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


BANNER = r"""
  ___  ___   _   ___
 / __|/ __| /_\ | __|__ _ _ __ _ ___
 \__ \ (__ / _ \| _/ _ \ '_/ _` / -_)
 |___/\___/_/ \_\_|\___/_| \__, \___|
                           |___/
"""


def print_banner():
    """Print the ScaForge banner."""
    console.print(
        Panel(
            Align.center(Text(BANNER, style="bold cyan")),
            subtitle="[dim]power side-channel workbench[/dim]",
            border_style="bright_blue",
            box=box.DOUBLE_EDGE,
        )
    )


# ── CLI Group ──────────────────────────────────────────────────────────────

class ScaForgeGroup(click.Group):
    """Click group that maps every failure onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(
                args=args,
                prog_name=prog_name,
                complete_var=complete_var,
                standalone_mode=False,
                **extra,
            )
            code = rv if isinstance(rv, int) else EXIT_OK
        except click.exceptions.Exit as e:
            code = e.exit_code
        except click.Abort:
            err_console.print("[red]Aborted.[/red]")
            code = EXIT_USAGE
        except click.ClickException as e:
            e.show()
            code = EXIT_USAGE
        except ScaForgeError as e:
            err_console.print(f"[red]error ({type(e).__name__}):[/red] {escape(str(e))}")
            code = e.exit_code
        if standalone_mode:
            raise SystemExit(code)
        return code


@click.group(cls=ScaForgeGroup, invoke_without_command=True)
@click.version_option(version=__version__, prog_name="ScaForge")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
@click.pass_context
def main(ctx, verbose):
    """ScaForge — power side-channel workbench.

    Simulates AES power traces under circuit countermeasures, attacks them
    with correlation power analysis, detects glitch and probing attacks,
    and benchmarks lazy-interpolation Toom-Cook for Saber.
    """
    configure_logging(verbose)
    if ctx.invoked_subcommand is None:
        print_banner()
        console.print(ctx.get_help())


# ── simulate ───────────────────────────────────────────────────────────────

@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Experiment configuration (JSON). Defaults to the shipped configs/default.json.")
@click.option("--traces", "n_traces", type=click.IntRange(min=1), default=None, help="Number of traces.")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None, help="Random seed.")
@click.option("--countermeasures", default=None, help="Comma list of dsac,bleed,tvtf ('' for none).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--dtype", type=click.Choice(["float32", "float64"]), default=None, help="Stored sample precision.")
@click.option("--ciphertexts", is_flag=True, help="Also store AES ciphertexts.")
def simulate(config_path, n_traces, seed, countermeasures, out_dir, dtype, ciphertexts):
    """Simulate AES power traces through the countermeasure pipeline."""
    cfg = load_config(config_path)
    sim = cfg.simulation
    if countermeasures is None:
        enabled = tuple(sim.countermeasures)
    else:
        enabled = parse_countermeasures(countermeasures)
    sim = dataclasses.replace(
        sim,
        n_traces=n_traces if n_traces is not None else sim.n_traces,
        seed=seed if seed is not None else sim.seed,
        countermeasures=list(enabled),
        dtype=dtype or sim.dtype,
    )
    cfg = dataclasses.replace(cfg, simulation=sim)
    cfg.validate()

    device = cfg.device()
    rng = RngStream(sim.seed)
    started = time.perf_counter()
    traces = simulate_pipeline(device, sim.n_traces, rng, enabled, with_ciphertexts=ciphertexts)
    elapsed = time.perf_counter() - started

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "traces.scat"
    write_traces(trace_path, traces.with_samples(traces.samples.astype(sim.dtype)))
    save_config(cfg, out / "config.json")

    table = Table(title="Simulation", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("Field", style="dim")
    table.add_column("Value", style="bold")
    table.add_row("Traces", format_count(traces.n_traces))
    table.add_row("Samples / trace", str(traces.n_samples))
    table.add_row("Countermeasures", ", ".join(enabled) or "none")
    table.add_row("VDD", f"{device.supply.vdd:.3f} V")
    if "dsac" in enabled:
        table.add_row("A_eff (model)", f"{effective_attenuation(device.dsac, device.supply):.2f}")
    if enabled:
        n_sample = min(sim.n_traces, ATTENUATION_SAMPLE)
        bare = simulate_pipeline(device, n_sample, rng, ())
        table.add_row("Attenuation (measured)", f"{signal_attenuation(bare, traces.head(n_sample)):.2f}")
    table.add_row("Elapsed", f"{elapsed:.2f} s")
    table.add_row("Written", str(trace_path))
    console.print(table)


# ── attack ─────────────────────────────────────────────────────────────────

@main.command()
@click.option("--traces", "trace_file", type=click.Path(dir_okay=False), required=True, help="Trace file (.scat).")
@click.option("--model", type=click.Choice(sorted(MODEL_ALIASES)), default="hw", show_default=True,
              help="Leakage model: Hamming weight or Hamming distance.")
@click.option("--mtd", is_flag=True, help="Also compute measurements-to-disclosure.")
@click.option("--checkpoints", default=None, help="Comma list of MTD checkpoints (default: geometric).")
@click.option("--stability", type=click.IntRange(min=1), default=None, help="Consecutive rank-1 checkpoints.")
@click.option("--bytes", "byte_list", default=None, help="Comma list of key bytes to attack (default: all).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--plot", is_flag=True, help="Save the rank curve as PNG (needs matplotlib).")
def attack(trace_file, model, mtd, checkpoints, stability, byte_list, config_path, out_dir, plot):
    """Correlation power analysis on a trace file."""
    cfg = load_config(config_path)
    target_bytes = parse_int_list(byte_list, "--bytes")
    settings = dataclasses.replace(
        cfg.attack,
        model=MODEL_ALIASES[model],
        target_bytes=target_bytes if target_bytes is not None else cfg.attack.target_bytes,
    )
    settings.validate()
    checkpoint_list = parse_int_list(checkpoints, "--checkpoints")

    traces = read_traces(trace_file)
    result = cpa_attack(traces, settings.model, settings.target_bytes, settings.batch_size)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(out / "cpa.csv", result, traces.key)

    table = Table(title="CPA", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("Byte", justify="right", style="dim")
    table.add_column("Guess", justify="right", style="bold")
    table.add_column("ρ", justify="right", style="cyan")
    table.add_column("Sample", justify="right")
    table.add_column("True-key rank", justify="right")
    for b in result.bytes:
        guess = b.best_guess
        rank = b.rank_of(traces.key[b.byte_index]) if traces.key is not None else None
        style = "green" if rank == 1 else "yellow"
        table.add_row(
            str(b.byte_index),
            f"0x{guess:02x}",
            f"{b.correlations[guess]:+.4f}",
            str(int(b.best_samples[guess])),
            "-" if rank is None else f"[{style}]{rank}[/{style}]",
        )
    console.print(table)
    console.print(f"Key guess: [bold]{result.key_guess().hex()}[/bold]")

    if not mtd:
        return EXIT_OK

    report = compute_mtd(traces, settings, checkpoint_list, stability)
    emit_report(out / "mtd.csv", report)
    if plot:
        _plot_rank_curve(report, out / "mtd.png")
    style = "green" if report.disclosed else "red"
    console.print(
        Panel(f"[bold {style}]{report.summary()}[/bold {style}]", border_style="bright_cyan", box=box.ROUNDED)
    )
    if not report.disclosed:
        raise NotDisclosed(report.summary())
    return EXIT_OK


# ── vdd-attack ─────────────────────────────────────────────────────────────

@main.command("vdd-attack")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--range", "range_text", default=None, help="Supply sweep lo:hi:step in volts.")
@click.option("--budget", type=click.IntRange(min=2), default=None, help="Traces per sweep point.")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--plot", is_flag=True, help="Save the MTD-vs-VDD curve as PNG (needs matplotlib).")
def vdd_attack(config_path, range_text, budget, seed, out_dir, plot):
    """Search the supply range for a voltage that defeats the DSAC."""
    cfg = load_config(config_path)
    if range_text is None:
        lo, hi, step = cfg.sweep.lo, cfg.sweep.hi, cfg.sweep.step
    else:
        lo, hi, step = parse_range(range_text)
    budget = budget if budget is not None else cfg.attack.budget
    rng = RngStream(seed if seed is not None else cfg.simulation.seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = find_voltage_drop_attack(cfg.device(), (lo, hi), step, budget, rng, cfg.attack.model)
    except NoAttackFound as e:
        write_sweep(out / "vdd_sweep.csv", e.points)
        if plot and e.points:
            _plot_sweep(e.points, None, out / "vdd_sweep.png")
        raise

    emit_report(out / "vdd_sweep.csv", result)
    if plot:
        _plot_sweep(result.points, result.vdd_star, out / "vdd_sweep.png")

    table = Table(title="Supply Sweep", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("VDD (V)", justify="right")
    table.add_column("A_eff", justify="right")
    table.add_column("min |ρ|", justify="right", style="cyan")
    table.add_column("MTD estimate", justify="right")
    for p in result.points:
        mark = "[bold green]" if p.vdd == result.vdd_star else ""
        end = "[/bold green]" if mark else ""
        table.add_row(f"{mark}{p.vdd:.3f}{end}", f"{p.attenuation:.2f}", f"{p.rho:.4f}", format_count(p.mtd))
    console.print(table)
    console.print(
        Panel(
            f"[bold]VDD* = {result.vdd_star:.3f} V[/bold]\n"
            f"MTD ≈ {format_count(result.mtd_estimate)} traces "
            f"(nominal {format_count(result.nominal_mtd)})",
            border_style="bright_cyan",
            box=box.ROUNDED,
        )
    )
    return EXIT_OK


# ── detect ─────────────────────────────────────────────────────────────────

@main.group()
def detect():
    """Sensor dataset generation, detector training and evaluation."""


def _read_sensor_dataset(path: str, start: int = 0, count: Optional[int] = None) -> SensorDataset:
    reader = TraceFileReader(path)
    if not labels_path(path).exists():
        raise UsageError(f"{path} has no label sidecar ({labels_path(path).name}); generate it with 'detect gen'")
    labels = read_labels(path)
    if len(labels) != reader.n_traces:
        raise UsageError(f"{len(labels)} labels for {reader.n_traces} traces in {path}")
    ts = reader.read(start, count)
    return SensorDataset(ts.samples.astype(np.float64), labels[start:start + ts.n_traces])


@detect.command("gen")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--count", type=click.IntRange(min=1), default=None, help="Traces (default n_train + n_test).")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
def detect_gen(config_path, count, seed, out_dir):
    """Generate a labelled sensor dataset (trace i has scenario i mod 4)."""
    cfg = load_config(config_path)
    count = count if count is not None else cfg.detector.n_train + cfg.detector.n_test
    rng = RngStream(seed if seed is not None else cfg.simulation.seed)
    dataset = generate_dataset(count, rng, cfg.sensor)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sensor.scat"
    write_traces(path, dataset.as_trace_set(), dtype="float64", labels=dataset.labels)

    table = Table(title="Sensor Dataset", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("Scenario", style="bold")
    table.add_column("Traces", justify="right", style="cyan")
    for k, name in enumerate(SCENARIOS):
        table.add_row(name, format_count(int(np.sum(dataset.labels == k))))
    console.print(table)
    console.print(f"Written: {path}")


@detect.command("train")
@click.option("--data", "data_file", type=click.Path(dir_okay=False), required=True, help="Labelled sensor traces.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--train", "n_train", type=click.IntRange(min=1), default=None, help="Use the first N traces.")
@click.option("--epochs", type=click.IntRange(min=0), default=None)
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
def detect_train(data_file, config_path, n_train, epochs, lr, seed, out_dir):
    """Train the fully-connected detector."""
    cfg = load_config(config_path)
    settings = dataclasses.replace(
        cfg.detector,
        epochs=epochs if epochs is not None else cfg.detector.epochs,
        learning_rate=lr if lr is not None else cfg.detector.learning_rate,
    )
    settings.validate()
    n_train = n_train if n_train is not None else settings.n_train
    dataset = _read_sensor_dataset(data_file, 0, n_train)
    rng = RngStream(seed if seed is not None else cfg.simulation.seed)

    with console.status("[bold cyan]Training detector..."):
        model, history = train_detector(dataset, settings, rng)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "detector.json", model)
    emit_report(out / "history.csv", history)

    if history:
        last = history[-1]
        console.print(
            f"Trained on {format_count(len(dataset))} traces for {last.epoch} epochs: "
            f"loss [cyan]{last.loss:.5f}[/cyan], train accuracy [green]{last.accuracy:.4f}[/green]"
        )
    else:
        console.print("[yellow]Zero epochs requested; saved the initial model.[/yellow]")
    console.print(f"Written: {out / 'detector.json'}")


@detect.command("eval")
@click.option("--model", "model_file", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_file", type=click.Path(dir_okay=False), required=True)
@click.option("--skip", type=click.IntRange(min=0), default=0, show_default=True,
              help="Skip the first N traces (the training portion).")
def detect_eval(model_file, data_file, skip):
    """Confusion matrix and accuracy on held-out sensor traces."""
    model = load_model(model_file)
    dataset = _read_sensor_dataset(data_file, skip)
    if len(dataset) == 0:
        raise UsageError(f"no traces left after skipping {skip}")
    evaluation = evaluate_detector(model, dataset)

    table = Table(title="Confusion Matrix (rows = true)", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("", style="bold")
    for name in model.labels:
        table.add_column(name, justify="right")
    table.add_column("Recall", justify="right", style="cyan")
    for i, name in enumerate(model.labels):
        recall = evaluation.recall[i]
        table.add_row(
            name,
            *[str(int(v)) for v in evaluation.confusion[i]],
            "-" if np.isnan(recall) else f"{recall:.3f}",
        )
    console.print(table)
    style = "green" if evaluation.accuracy >= 0.99 else "yellow"
    console.print(f"Accuracy: [{style}]{evaluation.accuracy:.4f}[/{style}] over {format_count(evaluation.n)} traces")


# ── vdd-monitor ────────────────────────────────────────────────────────────

@main.command("vdd-monitor")
@click.option("--csv", "csv_file", type=click.Path(dir_okay=False), default=None,
              help="Replay a CSV with columns vdd,v_aes (default: synthetic supply drop).")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--samples", "n_samples", type=click.IntRange(min=1), default=4000, show_default=True)
@click.option("--onset", type=click.IntRange(min=0), default=1000, show_default=True)
@click.option("--drop", "drop_fraction", type=float, default=0.2, show_default=True,
              help="Fractional VDD drop of the synthetic fixture.")
def vdd_monitor(csv_file, config_path, n_samples, onset, drop_fraction):
    """Replay the ring-oscillator voltage-drop detector."""
    cfg = load_config(config_path)
    tracker = cfg.ro_tracker
    if csv_file is not None:
        vdd, v_aes = read_voltage_series(csv_file)
        source = csv_file
    else:
        vdd, v_aes = simulate_supply_drop(n_samples, onset, drop_fraction, divider=tracker.divider)
        source = f"synthetic drop of {drop_fraction:.0%} at sample {onset}"

    alarm = voltage_drop_detect(vdd, v_aes, tracker)
    console.print(f"[dim]Source: {escape(source)}[/dim]")
    if alarm is None:
        console.print("[green]no alarm[/green]")
    else:
        console.print(
            f"[bold red]ALARM[/bold red] at sample {alarm} ({format_ms(alarm, tracker.sample_rate)})"
        )


# ── saber ──────────────────────────────────────────────────────────────────

@main.group()
def saber():
    """Saber KEM: keys, encapsulation, known answers and multiplier benchmarks."""


def _randombytes(seed: Optional[int]):
    return None if seed is None else stream_randombytes(RngStream(seed))


@saber.command("keygen")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None, help="Deterministic keys (testing only).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
def saber_keygen_cmd(seed, out_dir):
    """Generate a key pair (pk.bin, sk.bin)."""
    rb = _randombytes(seed)
    keys = saber_keygen(rb) if rb is not None else saber_keygen()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bytes(out / "pk.bin", keys.public_key)
    write_bytes(out / "sk.bin", keys.secret_key)
    console.print(f"pk: {len(keys.public_key)} bytes, sk: {len(keys.secret_key)} bytes -> {out}")


@saber.command("encaps")
@click.option("--pk", "pk_file", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
def saber_encaps_cmd(pk_file, seed, out_dir):
    """Encapsulate to a public key (ct.bin, ss.bin)."""
    pk = read_bytes(pk_file)
    rb = _randombytes(seed)
    ct, ss = saber_encaps(pk, rb) if rb is not None else saber_encaps(pk)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bytes(out / "ct.bin", ct)
    write_bytes(out / "ss.bin", ss)
    console.print(f"ct: {len(ct)} bytes")
    console.print(f"ss: [bold]{ss.hex()}[/bold]")


@saber.command("decaps")
@click.option("--sk", "sk_file", type=click.Path(dir_okay=False), required=True)
@click.option("--ct", "ct_file", type=click.Path(dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Also write ss.bin here.")
def saber_decaps_cmd(sk_file, ct_file, out_dir):
    """Decapsulate a ciphertext with a secret key."""
    ss = saber_decaps(read_bytes(sk_file), read_bytes(ct_file))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_bytes(out / "ss.bin", ss)
    console.print(f"ss: [bold]{ss.hex()}[/bold]")


@saber.command("kat")
@click.argument("rsp_file", type=click.Path(dir_okay=False), required=False)
@click.option("--generate", "generate_count", type=click.IntRange(min=1), default=None,
              help="Write N vectors instead of verifying.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default="PQCkemKAT_2304.rsp", show_default=True)
def saber_kat(rsp_file, generate_count, out_file):
    """Verify a NIST known-answer file, or generate one with --generate."""
    if generate_count is not None:
        vectors = generate_kat(generate_count)
        write_kat(out_file, vectors)
        console.print(f"Wrote {len(vectors)} vectors to {out_file}")
        return EXIT_OK
    if rsp_file is None:
        raise UsageError("give a .rsp file to verify, or --generate N")

    passed = failed = 0
    for vector in read_kat(rsp_file):
        outcome = check_kat_vector(vector)
        if outcome.passed:
            passed += 1
        else:
            failed += 1
            console.print(f"[red]count {outcome.count}: mismatch in {', '.join(outcome.mismatched)}[/red]")
    style = "green" if failed == 0 else "red"
    console.print(f"[{style}]{passed} passed, {failed} failed[/{style}]")
    return EXIT_OK if failed == 0 else EXIT_NEGATIVE


@saber.command("bench")
@click.option("--seed", type=click.IntRange(0, (1 << 64) - 1), default=1, show_default=True)
@click.option("--repeat", type=click.IntRange(min=1), default=3, show_default=True)
def saber_bench(seed, repeat):
    """Lazy versus eager Toom-4 matrix-vector multiplication."""
    gen = RngStream(seed).generator(0)
    a = gen_matrix(gen.bytes(SABER.seed_bytes))
    s = gen_secret(gen.bytes(SABER.seed_bytes))

    table = Table(title="A·s (Saber, l = 3)", box=box.SIMPLE_HEAVY, title_style="bold bright_cyan")
    table.add_column("Schedule", style="bold")
    table.add_column("Slot mult.", justify="right")
    table.add_column("Mults", justify="right", style="cyan")
    table.add_column("Interpolations", justify="right")
    table.add_column("Peak words", justify="right", style="cyan")
    table.add_column("Incl. operands", justify="right")
    table.add_column("Time", justify="right", style="dim")

    def eager(split: str):
        return lambda a_, s_, meter, karatsuba: matvec_mul_eager(a_, s_, meter, karatsuba=karatsuba, split=split)

    runs = [
        ("lazy", matvec_mul_lazy, False),
        ("lazy", matvec_mul_lazy, True),
        ("eager, striding", eager("striding"), False),
        ("eager, contiguous", eager("contiguous"), False),
        ("eager, contiguous", eager("contiguous"), True),
    ]
    reference = None
    for name, fn, karatsuba in runs:
        meter = MemoryMeter()
        started = time.perf_counter()
        for i in range(repeat):
            out = fn(a, s, meter if i == 0 else None, karatsuba=karatsuba)
        elapsed = (time.perf_counter() - started) / repeat
        if reference is None:
            reference = out
        elif not np.array_equal(out, reference):
            raise ScaForgeError(f"{name} schedule disagrees with the lazy result")
        table.add_row(
            name,
            "karatsuba" if karatsuba else "schoolbook",
            format_count(meter.multiplications),
            str(meter.interpolations),
            format_count(meter.peak_words),
            format_count(meter.peak_total_words),
            f"{elapsed * 1e3:.1f} ms",
        )
    console.print(table)

    info = get_system_info()
    console.print(
        f"[dim]{info['cpu_count']} CPUs, {info['threads']} worker threads, "
        f"{info['total_ram_gb']} GB RAM, RSS {info['rss_mb']} MB[/dim]"
    )


# ── Entry Point ────────────────────────────────────────────────────────────

if __name__ == "__main__":
    main()
