"""Bottleneck sweep: compression ratio against localization error."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .codec import Channel, CodecPair, remaining_ratio, train_codec_pair
from .config import ConfigError, ExperimentConfig
from .csi import Dataset, room_walls, Scene, derive_seed, generate_dataset, load_dataset, split_dataset
from .localization import ErrorReport, KnnOracle, LocalizerModel, evaluate, train_localizer
from .sim import ORanSimulation, bandwidth_report, build_topology, deploy_all, run_localization, vae_pair_factory
from .sim.topology import NodeKind

log = logging.getLogger(__name__)

# operating point and accuracies reported for the real-data experiment
REFERENCE_BOTTLENECK = 270
REFERENCE_RATIO = 0.09
REFERENCE_RAW_ERROR_M = 0.6
REFERENCE_SEMANTIC_ERROR_M = 0.7

CSV_COLUMNS = (
    "bottleneck",
    "snr_db",
    "remaining_ratio",
    "reference_ratio",
    "mean_error_m",
    "p50_m",
    "p90_m",
    "min_mean_error_m",
    "max_mean_error_m",
    "knn_mean_error_m",
    "bytes_on_air",
    "trace_digest",
)


def sweep_seeds(config: ExperimentConfig) -> list[int]:
    return [derive_seed(config.seed, 100, j) for j in range(config.sweep.seeds_per_point)]


def sweep_bottlenecks(config: ExperimentConfig) -> list[int]:
    """Sorted, de-duplicated bottlenecks; the reference operating point is always included."""
    return sorted(set(config.sweep.bottlenecks) | {REFERENCE_BOTTLENECK})


def prepare_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.data.path:
        ds = load_dataset(config.data.path)
    else:
        ds = generate_dataset(make_scene(config), config.data.n_samples, config.seed)
    return split_dataset(ds, config.data.train_fraction, derive_seed(config.seed, 1))


def make_scene(config: ExperimentConfig) -> Scene:
    """Default scene with any ``data.scene`` overrides; changing the room size moves the walls too."""
    overrides = dict(config.data.scene)
    d = Scene().to_dict()
    unknown = sorted(set(overrides) - set(d))
    if unknown:
        raise ConfigError(f"unknown key(s) in 'data.scene': {', '.join(unknown)}")
    d.update(overrides)
    if ("width" in overrides or "length" in overrides) and "reflectors" not in overrides:
        d["reflectors"] = room_walls(float(d["width"]), float(d["length"]))
    try:
        return Scene.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene: {exc}") from None


@dataclass
class PointRun:
    """One trained (bottleneck, seed) point and its evaluations per SNR."""

    bottleneck: int | None  # None is the raw baseline
    seed: int
    reports: dict[Any, ErrorReport]
    knn: ErrorReport | None = None
    pair: CodecPair | None = None
    localizer: LocalizerModel | None = None


def _snr_key(snr: float | None) -> str:
    return "off" if snr is None else repr(float(snr))


def train_point(
    config: ExperimentConfig, train: Dataset, bottleneck: int, seed: int, raw_localizer: LocalizerModel | None = None
) -> tuple[CodecPair, LocalizerModel]:
    vcfg = replace(config.vae, bottleneck=bottleneck, seed=derive_seed(seed, bottleneck))
    pair = train_codec_pair(train, vcfg)
    if config.sweep.localizer_fit == "raw" and raw_localizer is not None:
        return pair, raw_localizer
    recon = pair.reconstruct_batch(train.flat())
    lcfg = replace(config.localizer, seed=derive_seed(seed, bottleneck, 1))
    return pair, train_localizer(train, lcfg, recon)


def evaluate_point(
    test: Dataset,
    localizer,
    codec,
    snrs: list[float | None],
    seed: int,
    name: str,
) -> dict[str, ErrorReport]:
    out = {}
    for snr in snrs:
        channel = Channel(snr, derive_seed(seed, 2)) if snr is not None else None
        out[_snr_key(snr)] = evaluate(localizer, test, codec, channel, name=name)
    return out


def simulate_point(
    config: ExperimentConfig, test: Dataset, localizer: LocalizerModel, pair: CodecPair | None, n: int
) -> tuple[int, str, ORanSimulation]:
    """Push ``n`` test samples through the simulated RAN; returns (bytes per request on UE<->O_RU, digest, sim)."""
    topo = build_topology(config.sim.topology)
    if pair is None:
        sim = ORanSimulation(topo, decode_at=config.sim.decode_at)
        models = {"localizer": ("localizer", localizer)}
    else:
        sim = ORanSimulation(
            topo, ("codec_amplitude", "codec_phase"), vae_pair_factory, decode_at=config.sim.decode_at
        )
        models = {
            "codec_amplitude": ("codec_amplitude", pair.amplitude_model.copy()),
            "codec_phase": ("codec_phase", pair.phase_model.copy()),
            "localizer": ("localizer", localizer),
        }
    deploy_all(sim, models)
    run_localization(sim, list(test)[:n], config.sim.interval_us)
    air = (topo.first(NodeKind.UE_EDGE), topo.first(NodeKind.O_RU))
    per_request = bandwidth_report(sim.trace, air, topo, ("SEMANTIC_PAYLOAD",)) // max(n, 1)
    return per_request, sim.trace.digest(), sim


@dataclass
class SweepRow:
    bottleneck: int | None
    snr_db: float | None
    remaining_ratio: float
    mean_error_m: float
    p50_m: float
    p90_m: float
    min_mean_error_m: float
    max_mean_error_m: float
    knn_mean_error_m: float | None
    bytes_on_air: int
    trace_digest: str = ""

    @property
    def reference_ratio(self) -> float | None:
        if self.bottleneck is None:
            return 1.0
        return REFERENCE_RATIO if self.bottleneck == REFERENCE_BOTTLENECK else None

    def as_dict(self) -> dict[str, Any]:
        return {
            "bottleneck": "raw" if self.bottleneck is None else self.bottleneck,
            "snr_db": "off" if self.snr_db is None else self.snr_db,
            "remaining_ratio": self.remaining_ratio,
            "reference_ratio": self.reference_ratio,
            "mean_error_m": self.mean_error_m,
            "p50_m": self.p50_m,
            "p90_m": self.p90_m,
            "min_mean_error_m": self.min_mean_error_m,
            "max_mean_error_m": self.max_mean_error_m,
            "knn_mean_error_m": self.knn_mean_error_m,
            "bytes_on_air": self.bytes_on_air,
            "trace_digest": self.trace_digest,
        }


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class SweepReport:
    baseline: SweepRow
    rows: list[SweepRow]
    config: dict[str, Any]
    cdfs: dict[str, ErrorReport] = field(default_factory=dict)
    runs: list[PointRun] = field(default_factory=list)
    best_trace: str = ""

    def best(self, snr: float | None = None) -> SweepRow:
        candidates = [r for r in self.rows if r.snr_db == snr] or self.rows
        return min(candidates, key=lambda r: (r.mean_error_m, r.bottleneck))

    def row(self, bottleneck: int, snr: float | None = None) -> SweepRow:
        for r in self.rows:
            if r.bottleneck == bottleneck and r.snr_db == snr:
                return r
        raise KeyError((bottleneck, snr))

    def csv_body(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in [self.baseline, *self.rows]:
            d = r.as_dict()
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def footer(self) -> str:
        best = self.best()
        return (
            f"# best bottleneck {best.bottleneck}: remaining_ratio={best.remaining_ratio!r} "
            f"mean_error_m={best.mean_error_m!r} raw_mean_error_m={self.baseline.mean_error_m!r}\n"
            f"# reference anchor: optimum near bottleneck {REFERENCE_BOTTLENECK} at remaining ratio "
            f"{REFERENCE_RATIO} (its own counting convention); raw ~{REFERENCE_RAW_ERROR_M} m vs "
            f"semantic ~{REFERENCE_SEMANTIC_ERROR_M} m on real CSI\n"
        )

    def to_csv(self, header_comment: str = "") -> str:
        head = "".join(f"# {line}\n" for line in header_comment.splitlines())
        return head + self.csv_body() + self.footer()

    def summary_lines(self) -> list[dict[str, Any]]:
        lines = [{"type": "config", **self.config}]
        lines.extend({"type": "row", **r.as_dict()} for r in [self.baseline, *self.rows])
        best = self.best()
        lines.append(
            {
                "type": "best",
                "bottleneck": best.bottleneck,
                "mean_error_m": best.mean_error_m,
                "raw_mean_error_m": self.baseline.mean_error_m,
                "error_ratio": best.mean_error_m / self.baseline.mean_error_m,
            }
        )
        return lines


def _aggregate(
    bottleneck: int | None,
    snr: float | None,
    reports: list[ErrorReport],
    knn: list[ErrorReport],
    ratio: float,
    bytes_on_air: int,
    digest: str,
) -> SweepRow:
    means = [r.mean for r in reports]
    return SweepRow(
        bottleneck,
        snr,
        ratio,
        float(np.mean(means)),
        float(np.mean([r.p50 for r in reports])),
        float(np.mean([r.p90 for r in reports])),
        float(min(means)),
        float(max(means)),
        float(np.mean([r.mean for r in knn])) if knn else None,
        bytes_on_air,
        digest,
    )


def pooled(reports: list[ErrorReport], name: str) -> ErrorReport:
    return ErrorReport(np.concatenate([r.errors for r in reports]), name=name)


_WORKER: dict[str, Any] = {}


def _point_job(args: tuple[int, int]) -> PointRun:
    bottleneck, seed = args
    return _run_point(_WORKER["config"], _WORKER["train"], _WORKER["test"], bottleneck, seed, _WORKER["raw"].get(seed))


def _run_point(config, train, test, bottleneck, seed, raw_localizer) -> PointRun:
    log.info("training point b=%d seed=%d", bottleneck, seed)
    pair, loc = train_point(config, train, bottleneck, seed, raw_localizer)
    reports = evaluate_point(test, loc, pair, config.sweep.snr_db, seed, f"b{bottleneck}")
    knn = None
    if config.sweep.knn_k:
        knn = evaluate(KnnOracle(train, config.sweep.knn_k), test, pair, name=f"knn_b{bottleneck}")
    return PointRun(bottleneck, seed, reports, knn, pair, loc)


def run_sweep(
    config: ExperimentConfig,
    train: Dataset | None = None,
    test: Dataset | None = None,
    keep_models: bool = False,
) -> SweepReport:
    if train is None or test is None:
        train, test = prepare_data(config)
    seeds = sweep_seeds(config)
    snrs = config.sweep.snr_db

    raw_runs: list[PointRun] = []
    raw_localizers: dict[int, LocalizerModel] = {}
    for seed in seeds:
        loc = train_localizer(train, replace(config.localizer, seed=derive_seed(seed, 0, 1)))
        raw_localizers[seed] = loc
        raw_runs.append(PointRun(None, seed, {"off": evaluate(loc, test, name="raw")}, localizer=loc))
    knn_raw = [evaluate(KnnOracle(train, config.sweep.knn_k), test, name="knn_raw")] if config.sweep.knn_k else []

    bottlenecks = sweep_bottlenecks(config)
    jobs = [(b, s) for b in bottlenecks for s in seeds]
    if config.sweep.jobs > 1:
        _WORKER.update(config=config, train=train, test=test, raw=raw_localizers)
        try:
            import multiprocessing

            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(config.sweep.jobs, mp_context=ctx) as pool:
                runs = list(pool.map(_point_job, jobs))
        finally:
            _WORKER.clear()
    else:
        runs = [_run_point(config, train, test, b, s, raw_localizers.get(s)) for b, s in jobs]

    n_sim = min(config.sweep.sim_requests, len(test))
    raw_bytes, raw_digest, _ = simulate_point(config, test, raw_localizers[seeds[0]], None, n_sim)
    baseline = _aggregate(
        None, None, [r.reports["off"] for r in raw_runs], knn_raw, 1.0, raw_bytes, raw_digest
    )

    rows = []
    traces: dict[int, str] = {}
    for b in bottlenecks:
        point_runs = [r for r in runs if r.bottleneck == b]
        first = point_runs[0]
        b_bytes, b_digest, sim = simulate_point(config, test, first.localizer, first.pair, n_sim)
        traces[b] = sim.trace.to_jsonl()
        knn = [r.knn for r in point_runs if r.knn is not None]
        for snr in snrs:
            reports = [r.reports[_snr_key(snr)] for r in point_runs]
            rows.append(
                _aggregate(b, snr, reports, knn if snr is None else [], remaining_ratio(first.pair), b_bytes, b_digest)
            )

    report = SweepReport(baseline, rows, config.to_dict())
    best = report.best(snrs[0] if None not in snrs else None)
    report.cdfs["raw"] = pooled([r.reports["off"] for r in raw_runs], "raw")
    best_key = _snr_key(best.snr_db)
    report.cdfs[f"b{best.bottleneck}"] = pooled(
        [r.reports[best_key] for r in runs if r.bottleneck == best.bottleneck], f"b{best.bottleneck}"
    )
    report.best_trace = traces[best.bottleneck]
    if keep_models:
        report.runs = raw_runs + runs
    else:
        report.runs = [replace(r, pair=None, localizer=None) for r in raw_runs + runs]
    return report
