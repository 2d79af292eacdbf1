"""Experiment orchestration.

Config parsing, the training loop that wires workers, the simulated
collective, optimizers, subspace refresh and diagnostics together, CSV
emission, an independent closed-form byte predictor, and the communication
and optimizer-state scaling table.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .collective import CommLedger, CommObjectKind, all_reduce_mean
from .diagnostics import (DiagnosticsLog, DiagnosticsSample, projected_variance,
                          refresh_mismatch, subspace_error, tracking_error)
from .linalg import SeededRng
from .optimizers import (AdamHyperparams, CoreMoments, DenseMoments,
                         ProjectionPair, dense_adamw_step, one_sided_step,
                         realign_core, tsr_adam_step, tsr_project_core,
                         tsr_sgd_step)
from .refresh import RefreshConfig, RefreshMode, exact_refresh, randomized_refresh
from .tasks import (GradientSource, LayerKind, LayerSpec, TaskSpec,
                    make_lowrank_regression, run_worker_step)

__all__ = [
    "ConfigError",
    "Method",
    "NumericalFailure",
    "RunConfig",
    "RunResult",
    "StepSummary",
    "build_run_config",
    "compare_runs",
    "execute_run",
    "load_run_config",
    "predict_run_bytes",
    "predict_step_bytes",
    "run_experiment",
    "scaling_table",
    "selftest",
]


class Method(Enum):
    DENSE_ADAMW = "dense_adamw"
    ONE_SIDED = "one_sided"
    TSR_ADAM = "tsr_adam"
    TSR_SGD = "tsr_sgd"


class ConfigError(ValueError):
    """Invalid run configuration; reported before step 0."""


class NumericalFailure(RuntimeError):
    """Non-finite loss encountered mid-run."""


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec
    method: Method = Method.TSR_ADAM
    refresh_linear: RefreshConfig = RefreshConfig(rank=8, interval=50)
    refresh_embedding: RefreshConfig = RefreshConfig(rank=8, interval=50)
    hyperparams: AdamHyperparams = AdamHyperparams()
    sgd_beta: float = 0.9
    steps: int = 100
    dtype_bytes: int = 2
    omega_seed: int = 0
    out_dir: str | None = None
    diagnostics: bool = False
    worker_pool: int = 1
    pin_identity: bool = False       # debug mode: identity bases, refresh off
    moment_realignment: bool = False
    drift_angle: float = 0.0
    orthonormal_design: bool = False
    zipf_s: float = 1.1
    embedding_objective: str = "zipf"


@dataclass(frozen=True)
class StepSummary:
    step: int
    loss: float
    bytes_step: int
    cumulative_bytes: int


@dataclass
class RunResult:
    summaries: list[StepSummary]
    ledger: CommLedger
    diagnostics: DiagnosticsLog | None


# ---------------------------------------------------------------------------
# run loop


class _LayerRuntime:
    """Per-layer mutable optimizer state owned by the orchestrator."""

    def __init__(self, layer: LayerSpec, index: int, rank: int, interval: int,
                 refresh_cfg: RefreshConfig | None):
        self.layer = layer
        self.index = index
        self.rank = rank
        self.interval = interval
        self.refresh_cfg = refresh_cfg
        self.pair: ProjectionPair | None = None
        self.adam: CoreMoments | DenseMoments | None = None
        self.momentum: np.ndarray | None = None

    @property
    def moment_matrix(self) -> np.ndarray:
        return self.momentum if self.momentum is not None else self.adam.m


def _resolve_runtimes(cfg: RunConfig) -> dict[str, _LayerRuntime]:
    out = {}
    for idx, layer in enumerate(cfg.task.layers):
        dense_path = (not layer.is_matrix) or cfg.method is Method.DENSE_ADAMW
        if dense_path:
            rt = _LayerRuntime(layer, idx, 0, 0, None)
            if cfg.method is Method.TSR_SGD and not layer.is_matrix:
                rt.momentum = np.zeros((layer.rows, layer.cols))
            else:
                rt.adam = DenseMoments.zeros(layer.rows, layer.cols)
            out[layer.name] = rt
            continue

        base = (cfg.refresh_embedding if layer.kind is LayerKind.EMBEDDING
                else cfg.refresh_linear)
        rank = layer.rank or base.rank
        interval = layer.refresh_interval or base.interval
        if cfg.pin_identity:
            rank = (layer.rows if cfg.method is Method.ONE_SIDED
                    else min(layer.rows, layer.cols))
        cap = min(layer.rows, layer.cols)
        if rank < 1 or rank > cap:
            raise ConfigError(
                f"layer {layer.name}: rank {rank} invalid for shape "
                f"{layer.rows}x{layer.cols}")
        eff = replace(base, rank=rank, interval=interval)
        if (not cfg.pin_identity) and eff.mode is RefreshMode.RANDOMIZED:
            try:
                eff.validate_shape(layer.rows, layer.cols)
            except ValueError as exc:
                raise ConfigError(f"layer {layer.name}: {exc}") from exc

        rt = _LayerRuntime(layer, idx, rank, interval, eff)
        if cfg.method is Method.TSR_ADAM:
            rt.adam = CoreMoments.zeros(rank)
        elif cfg.method is Method.TSR_SGD:
            rt.momentum = np.zeros((rank, rank))
        else:  # one-sided: first/second moments live at r x n
            rt.adam = DenseMoments.zeros(rank, layer.cols)
        if cfg.pin_identity:
            rt.pair = ProjectionPair.identity(layer.rows, layer.cols, rank)
        out[layer.name] = rt
    return out


def _validate(cfg: RunConfig):
    if cfg.steps < 1:
        raise ConfigError(f"steps must be >= 1, got {cfg.steps}")
    if cfg.dtype_bytes < 1:
        raise ConfigError(f"dtype_bytes must be >= 1, got {cfg.dtype_bytes}")
    if cfg.worker_pool < 1:
        raise ConfigError(f"worker_pool must be >= 1, got {cfg.worker_pool}")
    if not 0.0 <= cfg.sgd_beta < 1.0:
        raise ConfigError(f"sgd_beta must be in [0, 1), got {cfg.sgd_beta}")
    _resolve_runtimes(cfg)  # surfaces per-layer rank/sketch violations


def _worker_grads(source: GradientSource, pool, step: int):
    workers = source.spec.workers
    if pool is None:
        return [run_worker_step(source, i, step) for i in range(workers)]
    futures = [pool.submit(run_worker_step, source, i, step) for i in range(workers)]
    return [f.result() for f in futures]


def _do_refresh(locals_, rt: _LayerRuntime, t: int, cfg: RunConfig,
                ledger: CommLedger) -> ProjectionPair:
    if rt.refresh_cfg.mode is RefreshMode.EXACT:
        return exact_refresh(locals_, rt.rank, step=t, layer=rt.layer.name,
                             ledger=ledger)
    rng = SeededRng.derive(cfg.omega_seed, rt.index, t)
    return randomized_refresh(locals_, rt.refresh_cfg, rng, step=t,
                              layer=rt.layer.name, ledger=ledger)


def _refresh_and_realign(locals_, rt: _LayerRuntime, t: int, cfg: RunConfig,
                         ledger: CommLedger, want_mismatch: bool) -> float:
    """Refresh the layer's bases in place; returns the basis-swap mismatch of
    the pre-step momentum (0.0 when not requested)."""
    old_pair = rt.pair
    new_pair = _do_refresh(locals_, rt, t, cfg, ledger)
    mismatch = 0.0
    if want_mismatch and old_pair is not None:
        mismatch = refresh_mismatch(new_pair, old_pair, rt.moment_matrix)
    if cfg.moment_realignment and old_pair is not None:
        if cfg.method is Method.TSR_SGD:
            rt.momentum = realign_core(rt.momentum, old_pair, new_pair)
        elif cfg.method is Method.TSR_ADAM:
            rt.adam.m = realign_core(rt.adam.m, old_pair, new_pair)
        else:  # one-sided: only the left basis exists
            rt.adam.m = (new_pair.U.T @ old_pair.U) @ rt.adam.m
    rt.pair = new_pair
    return mismatch


def run_experiment(cfg: RunConfig) -> list[StepSummary]:
    """Execute the configured run and return per-step summaries.

    Per step: worker gradients, subspace refresh when the layer's interval
    divides the step, projection + all-reduce, optimizer update, then ledger
    and diagnostics sampling.  An initializing refresh runs before step 1 and
    is charged to a step-0 ledger bucket.  Fully deterministic given seeds.
    """
    return execute_run(cfg).summaries


def execute_run(cfg: RunConfig) -> RunResult:
    """Like run_experiment, but also hands back the ledger and diagnostics."""
    _validate(cfg)
    source = make_lowrank_regression(
        cfg.task, orthonormal_design=cfg.orthonormal_design,
        drift_angle=cfg.drift_angle, zipf_s=cfg.zipf_s,
        embedding_objective=cfg.embedding_objective)
    ledger = CommLedger(cfg.dtype_bytes)
    diag = DiagnosticsLog() if cfg.diagnostics else None
    runtimes = _resolve_runtimes(cfg)
    hp = cfg.hyperparams
    subspace = cfg.method in (Method.TSR_ADAM, Method.TSR_SGD, Method.ONE_SIDED)
    track = cfg.diagnostics and cfg.method in (Method.TSR_ADAM, Method.TSR_SGD)

    pool = (ThreadPoolExecutor(max_workers=cfg.worker_pool)
            if cfg.worker_pool > 1 else None)
    try:
        if subspace and not cfg.pin_identity:
            grads0 = _worker_grads(source, pool, 0)
            for rt in runtimes.values():
                if rt.refresh_cfg is not None:
                    _refresh_and_realign([g[rt.layer.name] for g in grads0],
                                         rt, 0, cfg, ledger, want_mismatch=False)

        bytes0 = ledger.bytes_per_step(0)
        summaries = [StepSummary(0, source.loss(0), bytes0, bytes0)]
        cumulative = bytes0

        for t in range(1, cfg.steps + 1):
            try:
                grads = _worker_grads(source, pool, t)
            except ValueError as exc:  # non-finite weights poison the gradients
                raise NumericalFailure(f"at step {t}: {exc}") from exc
            true_grads = source.true_gradient(t) if track else None
            pending: list[tuple] = []

            for layer in cfg.task.layers:
                name = layer.name
                rt = runtimes[name]
                locals_ = [g[name] for g in grads]
                W = source.weights[name]

                if rt.refresh_cfg is None:
                    kind = (CommObjectKind.NON_MATRIX_DENSE if not layer.is_matrix
                            else CommObjectKind.DENSE_GRAD)
                    g_bar = all_reduce_mean(locals_, step=t, layer=name,
                                            kind=kind, ledger=ledger)
                    if rt.momentum is not None:  # dense momentum SGD fallback
                        rt.momentum = (cfg.sgd_beta * rt.momentum
                                       + (1.0 - cfg.sgd_beta) * g_bar)
                        source.weights[name] = W - hp.eta * rt.momentum
                    else:
                        source.weights[name], rt.adam = dense_adamw_step(
                            W, g_bar, rt.adam, hp)
                    continue

                mismatch = 0.0
                if not cfg.pin_identity and t % rt.interval == 0:
                    mismatch = _refresh_and_realign(locals_, rt, t, cfg, ledger,
                                                    want_mismatch=track)

                if cfg.method is Method.ONE_SIDED:
                    source.weights[name], rt.adam = one_sided_step(
                        W, locals_, rt.pair.U, rt.adam, hp,
                        step=t, layer=name, ledger=ledger)
                    continue

                cores = [tsr_project_core(G, rt.pair) for G in locals_]
                c_bar = all_reduce_mean(cores, step=t, layer=name,
                                        kind=CommObjectKind.CORE, ledger=ledger)
                if cfg.method is Method.TSR_ADAM:
                    source.weights[name], rt.adam = tsr_adam_step(
                        W, c_bar, rt.adam, rt.pair, hp)
                else:
                    source.weights[name], rt.momentum = tsr_sgd_step(
                        W, c_bar, rt.momentum, rt.pair, hp.eta, cfg.sgd_beta)

                if track:
                    tg = true_grads[name]
                    lifted = rt.pair.U @ rt.moment_matrix @ rt.pair.V.T
                    sigma2, _ = projected_variance(cores)
                    pending.append((t, name, tracking_error(lifted, tg),
                                    subspace_error(tg, rt.pair), sigma2, mismatch))

            loss = source.loss(t)
            if not np.isfinite(loss):
                raise NumericalFailure(f"non-finite loss {loss!r} at step {t}")
            bytes_step = ledger.bytes_per_step(t)
            cumulative += bytes_step
            summaries.append(StepSummary(t, loss, bytes_step, cumulative))
            if diag is not None:
                for row in pending:
                    diag.add(DiagnosticsSample(*row, loss=loss))
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out / "summary.csv", summaries)
        ledger.write_records_csv(out / "ledger.csv")
        ledger.write_summary_csv(out / "ledger_summary.csv")
        if diag is not None:
            diag.write_csv(out / "diagnostics.csv")

    return RunResult(summaries, ledger, diag)


def write_summary_csv(path, summaries):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "bytes_step", "cumulative_bytes"])
        for s in summaries:
            w.writerow([s.step, repr(s.loss), s.bytes_step, s.cumulative_bytes])


# ---------------------------------------------------------------------------
# closed-form byte predictor (independent of the ledger path)


def predict_step_bytes(cfg: RunConfig, t: int) -> int:
    """Symbolic per-step byte count derived from the configuration alone.

    Counts exactly what each method synchronizes: the dense gradient, the
    r x r core or r x n factor, plus sketch (or dense) refresh objects when
    the layer's interval divides the step; step 0 carries only the
    initializing refresh.
    """
    elems = 0
    for layer in cfg.task.layers:
        full = layer.rows * layer.cols
        if not layer.is_matrix or cfg.method is Method.DENSE_ADAMW:
            if t >= 1:
                elems += full
            continue
        if cfg.pin_identity:
            if t >= 1:
                if cfg.method is Method.ONE_SIDED:
                    elems += layer.rows * layer.cols
                else:
                    r = min(layer.rows, layer.cols)
                    elems += r * r
            continue
        base = (cfg.refresh_embedding if layer.kind is LayerKind.EMBEDDING
                else cfg.refresh_linear)
        rank = layer.rank or base.rank
        interval = layer.refresh_interval or base.interval
        if t == 0 or t % interval == 0:
            if base.mode is RefreshMode.EXACT:
                elems += full
            else:
                k = rank + base.oversample
                elems += k * layer.cols + layer.rows * k
        if t >= 1:
            if cfg.method is Method.ONE_SIDED:
                elems += rank * layer.cols
            else:
                elems += rank * rank
    return elems * cfg.dtype_bytes


def predict_run_bytes(cfg: RunConfig) -> list[int]:
    """Predicted bytes for steps 0..T inclusive."""
    return [predict_step_bytes(cfg, t) for t in range(cfg.steps + 1)]


# ---------------------------------------------------------------------------
# scaling table

_TABLE_METHODS = ("AdamW", "LoRA", "One-sided", "TSR")


@dataclass(frozen=True)
class ScalingTable:
    m: int
    n: int
    r: int
    r_emb: int
    vocab: int
    dtype_bytes: int
    comm_elements: dict
    comm_bytes: dict
    linear_weights: dict
    linear_state: dict
    embedding_weights: dict
    embedding_state: dict

    def format(self) -> str:
        lines = [
            f"scaling laws for one m x n = {self.m} x {self.n} matrix gradient, "
            f"rank r = {self.r}, embedding rank r_e = {self.r_emb}, "
            f"vocab = {self.vocab}, dtype bytes = {self.dtype_bytes}",
            "",
            f"{'method':<12}{'sync object elems':>20}{'sync bytes':>16}"
            f"{'linear weights':>16}{'linear state':>14}"
            f"{'emb weights':>14}{'emb state':>12}",
        ]
        for meth in _TABLE_METHODS:
            lines.append(
                f"{meth:<12}{self.comm_elements[meth]:>20}{self.comm_bytes[meth]:>16}"
                f"{self.linear_weights[meth]:>16}{self.linear_state[meth]:>14}"
                f"{self.embedding_weights[meth]:>14}{self.embedding_state[meth]:>12}")
        dense, core = self.comm_elements["AdamW"], self.comm_elements["TSR"]
        lines.append("")
        lines.append(f"dense/core object ratio: {dense}/{core}"
                     + (f" = {dense // core}" if dense % core == 0 else ""))
        return "\n".join(lines)


def scaling_table(m: int, n: int, r: int, r_emb: int, vocab: int,
                  dtype_bytes: int = 2) -> ScalingTable:
    """Element counts for the synchronized objects and optimizer state of each
    method, for one m x n linear layer and one vocab x m embedding layer."""
    for name, val in (("m", m), ("n", n), ("r", r), ("r_emb", r_emb), ("vocab", vocab)):
        if val < 1:
            raise ConfigError(f"{name} must be >= 1, got {val}")
    if r > min(m, n) or r_emb > min(vocab, m):
        raise ConfigError("rank exceeds layer dimensions")
    comm = {
        "AdamW": m * n,
        "LoRA": r * (m + n),
        "One-sided": r * n,
        "TSR": r * r,
    }
    return ScalingTable(
        m=m, n=n, r=r, r_emb=r_emb, vocab=vocab, dtype_bytes=dtype_bytes,
        comm_elements=comm,
        comm_bytes={k: v * dtype_bytes for k, v in comm.items()},
        linear_weights={
            "AdamW": m * n,
            "LoRA": m * n + r * m + r * n,
            "One-sided": m * n,
            "TSR": m * n,
        },
        linear_state={
            "AdamW": 2 * m * n,
            "LoRA": 2 * m * r + 2 * n * r,
            "One-sided": m * r + 2 * n * r,
            "TSR": m * r + n * r + 2 * r * r,
        },
        embedding_weights={meth: vocab * m for meth in _TABLE_METHODS},
        embedding_state={
            "AdamW": 3 * vocab * m,
            "LoRA": 3 * vocab * m,
            "One-sided": 3 * vocab * m,
            "TSR": vocab * r_emb + r_emb * m + 2 * r_emb * r_emb,
        },
    )


# ---------------------------------------------------------------------------
# multi-run comparison


def compare_runs(cfgs, out_dir=None) -> dict[str, list[StepSummary]]:
    """Run several configs over one shared task and emit aligned bytes-to-loss
    data plus per-method final-loss/bytes Pareto rows."""
    if not cfgs:
        raise ConfigError("compare_runs needs at least one config")
    first = cfgs[0]
    for cfg in cfgs[1:]:
        if cfg.task != first.task:
            raise ConfigError("compare_runs: configs target different tasks")
        if cfg.steps != first.steps:
            raise ConfigError("compare_runs: configs disagree on step count")

    labels = []
    for cfg in cfgs:
        label = cfg.method.value
        if label in labels:
            label = f"{label}_{labels.count(label) + sum(1 for L in labels if L.startswith(label))}"
        labels.append(label)

    results: dict[str, list[StepSummary]] = {}
    ledgers: dict[str, CommLedger] = {}
    for label, cfg in zip(labels, cfgs):
        sub_out = str(Path(out_dir) / label) if out_dir else None
        res = execute_run(replace(cfg, out_dir=sub_out))
        results[label] = res.summaries
        ledgers[label] = res.ledger

    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step"]
            for label in labels:
                header += [f"{label}_loss", f"{label}_bytes_step",
                           f"{label}_cumulative_bytes"]
            w.writerow(header)
            for i in range(first.steps + 1):
                row = [i]
                for label in labels:
                    s = results[label][i]
                    row += [repr(s.loss), s.bytes_step, s.cumulative_bytes]
                w.writerow(row)
        with open(out / "pareto.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "final_loss", "avg_bytes_per_step",
                        "peak_bytes", "cumulative_bytes"])
            for label in labels:
                summ = results[label]
                led = ledgers[label]
                w.writerow([label, repr(summ[-1].loss),
                            repr(led.average_bytes_per_step(first.steps)),
                            led.peak_bytes(), summ[-1].cumulative_bytes])
    return results


# ---------------------------------------------------------------------------
# flat key=value configs


_CONFIG_DEFAULTS = {
    "layers": "fc1:linear:64x64",
    "workers": "1",
    "noise_std": "0.0",
    "target_rank": "4",
    "minibatch": "32",
    "data_seed": "0",
    "method": "tsr_adam",
    "rank": "8",
    "rank_emb": "8",
    "refresh_k": "50",
    "refresh_k_emb": "50",
    "oversample": "4",
    "power_iters": "1",
    "refresh_mode": "randomized",
    "reorthonormalize_qbar": "true",
    "eta": "0.01",
    "weight_decay": "0.0",
    "beta1": "0.9",
    "beta2": "0.999",
    "epsilon": "1e-8",
    "scale": "1.0",
    "sgd_beta": "0.9",
    "steps": "100",
    "dtype_bytes": "2",
    "omega_seed": "0",
    "out": "",
    "diagnostics": "false",
    "worker_pool": "1",
    "pin_identity": "false",
    "moment_realignment": "false",
    "drift_angle": "0.0",
    "orthonormal_design": "false",
    "zipf_s": "1.1",
    "embedding_objective": "zipf",
}

_KIND_NAMES = {k.value: k for k in LayerKind}


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = val
    return values


def _parse_bool(key: str, val: str) -> bool:
    low = val.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {val!r}")


def _parse_int(key: str, val: str) -> int:
    try:
        return int(val)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {val!r}") from exc


def _parse_float(key: str, val: str) -> float:
    try:
        return float(val)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {val!r}") from exc


def _parse_layers(val: str) -> tuple[LayerSpec, ...]:
    """Layer list syntax: ``name:kind:RxC[:rank=R][:interval=K]``, comma separated."""
    layers = []
    for entry in val.split(","):
        entry = entry.strip()
        if not entry:
            continue
        parts = entry.split(":")
        if len(parts) < 3:
            raise ConfigError(f"layer entry {entry!r}: expected name:kind:RxC")
        name, kind_s, shape = parts[0], parts[1].lower(), parts[2].lower()
        if kind_s not in _KIND_NAMES:
            raise ConfigError(f"layer entry {entry!r}: unknown kind {kind_s!r}")
        if "x" not in shape:
            raise ConfigError(f"layer entry {entry!r}: shape must be RxC")
        rows_s, cols_s = shape.split("x", 1)
        rank = 0
        interval = 0
        for extra in parts[3:]:
            if "=" not in extra:
                raise ConfigError(f"layer entry {entry!r}: bad option {extra!r}")
            opt, opt_val = extra.split("=", 1)
            if opt == "rank":
                rank = _parse_int("layer rank", opt_val)
            elif opt == "interval":
                interval = _parse_int("layer interval", opt_val)
            else:
                raise ConfigError(f"layer entry {entry!r}: unknown option {opt!r}")
        try:
            layers.append(LayerSpec(name, _parse_int("rows", rows_s),
                                    _parse_int("cols", cols_s),
                                    _KIND_NAMES[kind_s], rank, interval))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not layers:
        raise ConfigError("layers: no layer entries")
    return tuple(layers)


def build_run_config(values: dict[str, str]) -> RunConfig:
    merged = dict(_CONFIG_DEFAULTS)
    for key, val in values.items():
        if key not in _CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = val

    try:
        method = Method(merged["method"].strip().lower())
    except ValueError as exc:
        raise ConfigError(
            f"method must be one of {[m.value for m in Method]}, "
            f"got {merged['method']!r}") from exc
    try:
        mode = RefreshMode(merged["refresh_mode"].strip().lower())
    except ValueError as exc:
        raise ConfigError(
            f"refresh_mode must be one of {[m.value for m in RefreshMode]}, "
            f"got {merged['refresh_mode']!r}") from exc

    try:
        task = TaskSpec(
            layers=_parse_layers(merged["layers"]),
            workers=_parse_int("workers", merged["workers"]),
            noise_std=_parse_float("noise_std", merged["noise_std"]),
            target_rank=_parse_int("target_rank", merged["target_rank"]),
            minibatch=_parse_int("minibatch", merged["minibatch"]),
            data_seed=_parse_int("data_seed", merged["data_seed"]),
        )
        reorth = _parse_bool("reorthonormalize_qbar", merged["reorthonormalize_qbar"])
        refresh_linear = RefreshConfig(
            rank=_parse_int("rank", merged["rank"]),
            oversample=_parse_int("oversample", merged["oversample"]),
            power_iters=_parse_int("power_iters", merged["power_iters"]),
            interval=_parse_int("refresh_k", merged["refresh_k"]),
            mode=mode, reorthonormalize_qbar=reorth)
        refresh_embedding = RefreshConfig(
            rank=_parse_int("rank_emb", merged["rank_emb"]),
            oversample=_parse_int("oversample", merged["oversample"]),
            power_iters=_parse_int("power_iters", merged["power_iters"]),
            interval=_parse_int("refresh_k_emb", merged["refresh_k_emb"]),
            mode=mode, reorthonormalize_qbar=reorth)
        hyper = AdamHyperparams(
            eta=_parse_float("eta", merged["eta"]),
            weight_decay=_parse_float("weight_decay", merged["weight_decay"]),
            beta1=_parse_float("beta1", merged["beta1"]),
            beta2=_parse_float("beta2", merged["beta2"]),
            epsilon=_parse_float("epsilon", merged["epsilon"]),
            scale=_parse_float("scale", merged["scale"]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cfg = RunConfig(
        task=task, method=method,
        refresh_linear=refresh_linear, refresh_embedding=refresh_embedding,
        hyperparams=hyper,
        sgd_beta=_parse_float("sgd_beta", merged["sgd_beta"]),
        steps=_parse_int("steps", merged["steps"]),
        dtype_bytes=_parse_int("dtype_bytes", merged["dtype_bytes"]),
        omega_seed=_parse_int("omega_seed", merged["omega_seed"]),
        out_dir=merged["out"].strip() or None,
        diagnostics=_parse_bool("diagnostics", merged["diagnostics"]),
        worker_pool=_parse_int("worker_pool", merged["worker_pool"]),
        pin_identity=_parse_bool("pin_identity", merged["pin_identity"]),
        moment_realignment=_parse_bool("moment_realignment",
                                       merged["moment_realignment"]),
        drift_angle=_parse_float("drift_angle", merged["drift_angle"]),
        orthonormal_design=_parse_bool("orthonormal_design",
                                       merged["orthonormal_design"]),
        zipf_s=_parse_float("zipf_s", merged["zipf_s"]),
        embedding_objective=merged["embedding_objective"].strip().lower(),
    )
    if cfg.embedding_objective not in ("zipf", "quadratic"):
        raise ConfigError(
            f"embedding_objective must be zipf or quadratic, "
            f"got {cfg.embedding_objective!r}")
    _validate(cfg)
    return cfg


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text)
    for key, val in (overrides or {}).items():
        if key not in _CONFIG_DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = val
    return build_run_config(values)


# ---------------------------------------------------------------------------
# selftest


def _selftest_checks():
    from .linalg import frob_norm, orth, svd_small

    def check_orth():
        rng = SeededRng(123)
        M = rng.normal(40, 12)
        Q = orth(M)
        assert frob_norm(Q.T @ Q - np.eye(Q.shape[1])) < 1e-10
        assert frob_norm(Q @ (Q.T @ M) - M) < 1e-9 * frob_norm(M)

    def check_svd():
        rng = SeededRng(7)
        B = rng.normal(6, 9)
        U, s, V = svd_small(B)
        assert frob_norm(U @ np.diag(s) @ V.T - B) < 1e-9 * frob_norm(B)
        assert all(s[i] >= s[i + 1] for i in range(len(s) - 1))

    def check_all_reduce_linear():
        rng = SeededRng(5)
        xs = [rng.normal(4, 3) for _ in range(4)]
        ys = [rng.normal(4, 3) for _ in range(4)]
        led = CommLedger(2)
        lhs = all_reduce_mean([2 * x + 3 * y for x, y in zip(xs, ys)],
                              step=1, layer="a", kind=CommObjectKind.CORE, ledger=led)
        rhs = 2 * all_reduce_mean(xs, step=1, layer="a",
                                  kind=CommObjectKind.CORE, ledger=led) \
            + 3 * all_reduce_mean(ys, step=1, layer="a",
                                  kind=CommObjectKind.CORE, ledger=led)
        assert np.abs(lhs - rhs).max() < 1e-12

    def check_core_linearity():
        rng = SeededRng(11)
        P = ProjectionPair(orth(rng.normal(8, 3)), orth(rng.normal(6, 3)))
        gs = [rng.normal(8, 6) for _ in range(5)]
        mean_core = sum(tsr_project_core(g, P) for g in gs) / 5
        core_mean = tsr_project_core(sum(gs) / 5, P)
        assert np.abs(mean_core - core_mean).max() < 1e-12

    def check_identity_equivalence():
        layer = LayerSpec("fc", 10, 10, LayerKind.LINEAR)
        spec = TaskSpec(layers=(layer,), workers=2, noise_std=0.1,
                        target_rank=3, minibatch=8, data_seed=3)
        base = dict(steps=30, dtype_bytes=2, omega_seed=1,
                    hyperparams=AdamHyperparams(eta=0.05))
        dense = run_experiment(RunConfig(task=spec, method=Method.DENSE_ADAMW, **base))
        pinned = run_experiment(RunConfig(task=spec, method=Method.TSR_ADAM,
                                          pin_identity=True, **base))
        for a, b in zip(dense, pinned):
            assert abs(a.loss - b.loss) <= 1e-8 * max(1.0, abs(a.loss))

    def check_ledger_vs_predictor():
        layers = (LayerSpec("fc1", 16, 12, LayerKind.LINEAR),
                  LayerSpec("emb", 40, 10, LayerKind.EMBEDDING))
        spec = TaskSpec(layers=layers, workers=2, noise_std=0.05,
                        target_rank=3, minibatch=8, data_seed=9)
        cfg = RunConfig(task=spec, method=Method.TSR_ADAM,
                        refresh_linear=RefreshConfig(rank=3, oversample=2, interval=5),
                        refresh_embedding=RefreshConfig(rank=2, oversample=2, interval=5),
                        steps=12, dtype_bytes=2, omega_seed=4)
        ledger = execute_run(cfg).ledger
        predicted = predict_run_bytes(cfg)
        for t, want in enumerate(predicted):
            assert ledger.bytes_per_step(t) == want, (t, ledger.bytes_per_step(t), want)

    def check_determinism():
        layer = LayerSpec("fc", 12, 9, LayerKind.LINEAR)
        spec = TaskSpec(layers=(layer,), workers=3, noise_std=0.1,
                        target_rank=2, minibatch=6, data_seed=2)
        cfg = RunConfig(task=spec, method=Method.TSR_ADAM,
                        refresh_linear=RefreshConfig(rank=2, oversample=2, interval=4),
                        steps=10, omega_seed=8)
        a = run_experiment(cfg)
        b = run_experiment(replace(cfg, worker_pool=3))
        assert a == b

    def check_decay_decoupling():
        hp = AdamHyperparams(eta=0.1, weight_decay=0.5)
        W = np.full((3, 3), 2.0)
        st = CoreMoments.zeros(3)
        P = ProjectionPair.identity(3, 3, 3)
        for i in range(4):
            W_new, st = tsr_adam_step(W, np.zeros((3, 3)), st, P, hp)
            assert np.allclose(W_new, W * (1 - hp.eta * hp.weight_decay), atol=0)
            W = W_new

    return [
        ("orth orthonormality and span", check_orth),
        ("svd reconstruction and ordering", check_svd),
        ("all-reduce linearity", check_all_reduce_linear),
        ("core linearity under averaging", check_core_linearity),
        ("identity-basis equivalence", check_identity_equivalence),
        ("ledger matches byte predictor", check_ledger_vs_predictor),
        ("determinism across pool sizes", check_determinism),
        ("decoupled weight decay", check_decay_decoupling),
    ]


def selftest(verbose: bool = True) -> bool:
    """Run the invariant suite; prints one line per check."""
    ok = True
    for name, fn in _selftest_checks():
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report and keep going
            ok = False
            if verbose:
                print(f"FAIL {name}: {exc}")
        else:
            if verbose:
                print(f"ok   {name}")
    return ok
