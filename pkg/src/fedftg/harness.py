"""Outer federated loop, per-round metrics, ablation matrices and rounds-to-target."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedftg.clients import ClientState, local_update, update_global_control
from fedftg.config import ExperimentConfig
from fedftg.datasets import (
    LabeledDataset,
    dirichlet_partition,
    load_idx,
    make_synthetic_split,
    perturb_label_stats,
)
from fedftg.models import ParamVector, accuracy, init_params
from fedftg.server import DivergenceError, ServerState, ServerStats, aggregate, server_update

log = logging.getLogger(__name__)

CSV_HEADER = ("round", "test_acc", "local_loss", "l_md", "l_cls", "l_dis", "seconds")

BUILTIN_VARIANTS: dict[str, dict[str, str]] = {
    "full": {},
    "-hsm": {"server.hsm": "false"},
    "-cls": {"server.cls_sampling": "false"},
    "-abe": {"server.class_ensemble": "false"},
    "-hsm&cls": {"server.hsm": "false", "server.cls_sampling": "false"},
    "-hsm&abe": {"server.hsm": "false", "server.class_ensemble": "false"},
    "-cls&abe": {"server.cls_sampling": "false", "server.class_ensemble": "false"},
    "-hsm&cls&abe": {"server.hsm": "false", "server.cls_sampling": "false", "server.class_ensemble": "false"},
    "-L_cls": {"server.lambda_cls": "0"},
    "-L_dis": {"server.lambda_dis": "0"},
    "kl->mse": {"server.md_metric": "mse"},
}


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    test_acc: float
    local_loss: float
    l_md: float
    l_cls: float
    l_dis: float
    seconds: float

    def row(self, wall_clock: bool = True) -> list[str]:
        secs = f"{self.seconds:.3f}" if wall_clock else "0"
        return [str(self.round), repr(self.test_acc), repr(self.local_loss),
                repr(self.l_md), repr(self.l_cls), repr(self.l_dis), secs]


@dataclass
class RunReport:
    config_hash: str
    metrics: list[RoundMetrics] = field(default_factory=list)
    rounds_to_target: dict[float, int | None] = field(default_factory=dict)
    params: ParamVector | None = None
    generator: ParamVector | None = None
    error: str | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_acc if self.metrics else float("nan")

    @property
    def accuracies(self) -> list[float]:
        return [m.test_acc for m in self.metrics]

    def csv_text(self, wall_clock: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for m in self.metrics:
            w.writerow(m.row(wall_clock))
        return buf.getvalue()


class RunAborted(RuntimeError):
    """Raised from run_experiment with the round that failed and the partial report."""

    def __init__(self, round_index: int, report: RunReport, cause: BaseException):
        self.round = round_index
        self.report = report
        self.divergence = isinstance(cause, (DivergenceError, FloatingPointError))
        super().__init__(f"round {round_index}: {cause}")


def rounds_to_target(report: RunReport | Sequence[float], target_acc: float) -> int | None:
    """First 1-indexed round whose test accuracy reaches ``target_acc``."""
    accs = report.accuracies if isinstance(report, RunReport) else list(report)
    for i, acc in enumerate(accs, start=1):
        if acc >= target_acc:
            return i
    return None


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if cfg.dataset == "synthetic":
        return make_synthetic_split(cfg.classes, cfg.train_per_class, cfg.test_per_class,
                                    cfg.dims, cfg.spread, cfg.data_seed)
    train = load_idx(cfg.train_images, cfg.train_labels)
    test = load_idx(cfg.test_images, cfg.test_labels, train.num_classes)
    return train, test


def select_clients(num_clients: int, per_round: int, seed: int, round_index: int) -> np.ndarray:
    """Uniform draw of ``per_round`` distinct client ids, returned sorted."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, round_index, 0x5E1]))
    return np.sort(rng.choice(num_clients, size=per_round, replace=False))


def initial_server_state(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> ServerState:
    """Round-zero global model and generator, both seeded from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed & 0xFFFFFFFFFFFFFFFF).generate_state(2, dtype=np.uint64)
    server = ServerState(
        params=init_params(cfg.classifier_config(input_dim, num_classes), int(seeds[0])),
        generator=init_params(cfg.generator_config(input_dim, num_classes), int(seeds[1])),
        eta_g=cfg.eta_g,
        classifier_sgd=cfg.classifier_sgd(),
        generator_sgd=cfg.generator_sgd(),
    )
    if cfg.optimizer == "scaffold":
        server = replace(server, control=ParamVector.zeros_like(server.params))
    return server


def _finite(*values: float) -> bool:
    return all(np.isfinite(v) for v in values)


def run_experiment(cfg: ExperimentConfig, out_dir=None, serial: bool = True,
                   targets: Iterable[float] = (), data=None, max_workers: int | None = None) -> RunReport:
    """Run the outer federated loop and return per-round metrics.

    With ``out_dir`` set, ``metrics.csv`` (one row per round, written as the
    run progresses) and ``config.ini`` are written there. ``serial=False``
    runs the round's client updates on a thread pool; results are combined
    in client-id order, so the trajectory is the same either way. In serial
    mode the ``seconds`` column is written as 0 so reruns are byte-identical.
    """
    cfg.validate()
    train, test = data if data is not None else load_data(cfg)
    shards = dirichlet_partition(train, cfg.partition_spec())
    reported = np.stack([s.counts for s in shards])
    if cfg.noise_ratio > 0:
        reported = perturb_label_stats(reported, cfg.noise_ratio, cfg.seed)

    server = initial_server_state(cfg, train.dim, train.num_classes)
    states = [ClientState(s.client_id, s) for s in shards]
    local_cfg = cfg.local_config()
    hyper = cfg.hyper()
    per_round = cfg.clients_per_round

    report = RunReport(cfg.digest())
    csv_fh = None
    writer = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.dump())
        csv_fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)

    pool = None if serial else ThreadPoolExecutor(max_workers=max_workers)
    try:
        for t in range(cfg.rounds):
            start = time.perf_counter()
            try:
                selected = select_clients(cfg.clients, per_round, cfg.seed, t)

                def work(cid, _t=t):
                    return local_update(server.params, states[cid], train, local_cfg, _t, cfg.seed,
                                        c_global=server.control)

                results = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
                local_loss = float(np.mean([r.loss for r in results]))
                if not _finite(local_loss) or not all(np.all(np.isfinite(r.params.values)) for r in results):
                    raise DivergenceError(f"non-finite local training loss {local_loss}")
                for cid, r in zip(selected, results):
                    states[cid] = r.state
                locals_ = [r.params for r in results]
                stats = ServerStats()
                if cfg.finetune:
                    server = server_update(server, locals_, reported[selected], hyper, t, cfg.seed, stats)
                else:
                    server = replace(server, params=aggregate(server.params, locals_, server.eta_g))
                if server.control is not None:
                    server = replace(server, control=update_global_control(
                        server.control, [r.control_delta for r in results], cfg.clients))
                if not np.all(np.isfinite(server.params.values)):
                    raise DivergenceError("non-finite global parameters")
            except Exception as exc:
                report.error = f"round {t + 1}: {exc}"
                report.params, report.generator = server.params, server.generator
                raise RunAborted(t + 1, report, exc) from exc
            acc = accuracy(test.features, test.labels, server.params)
            md, cls, dis = stats.means()
            m = RoundMetrics(t + 1, acc, local_loss, md, cls, dis, time.perf_counter() - start)
            report.metrics.append(m)
            if writer is not None:
                writer.writerow(m.row(wall_clock=not serial))
                csv_fh.flush()
            log.info("round %d acc=%.4f local_loss=%.4f l_md=%.4g", t + 1, acc, local_loss, md)
    finally:
        if pool is not None:
            pool.shutdown()
        if csv_fh is not None:
            csv_fh.close()

    report.params, report.generator = server.params, server.generator
    report.rounds_to_target = {float(a): rounds_to_target(report, a) for a in targets}
    if out_dir is not None:
        server.params.save(Path(out_dir) / "global.params")
        server.generator.save(Path(out_dir) / "generator.params")
    return report


def read_metrics(path) -> list[RoundMetrics]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        RoundMetrics(int(r["round"]), float(r["test_acc"]), float(r["local_loss"]), float(r["l_md"]),
                     float(r["l_cls"]), float(r["l_dis"]), float(r["seconds"]))
        for r in rows
    ]


@dataclass(frozen=True)
class MatrixRow:
    variant: str
    accuracies: tuple[float, ...]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        """Sample standard deviation; 0 for a single seed."""
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0


def run_matrix(base: ExperimentConfig, variants: dict[str, dict[str, str]], seeds: Sequence[int],
               out_path=None, serial: bool = True) -> list[MatrixRow]:
    """Final accuracy of every (variant, seed) pair, summarised as mean and sample std."""
    rows = []
    for name, overrides in variants.items():
        accs = []
        for seed in seeds:
            cfg = base.with_overrides({**overrides, "run.seed": str(seed)})
            accs.append(run_experiment(cfg, serial=serial).final_accuracy)
        rows.append(MatrixRow(name, tuple(accs)))
        log.info("variant %s: %s", name, accs)
    if out_path is not None:
        Path(out_path).write_text(matrix_csv(rows, seeds))
    return rows


def matrix_csv(rows: Sequence[MatrixRow], seeds: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mean_acc", "std_acc", *[f"seed_{s}" for s in seeds]])
    for r in rows:
        w.writerow([r.variant, f"{r.mean:.6f}", f"{r.std:.6f}", *[f"{a:.6f}" for a in r.accuracies]])
    return buf.getvalue()
