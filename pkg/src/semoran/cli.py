"""``semoran`` command line.

Every command writes its outputs atomically under ``--out``, prints one JSON
summary line on stdout and, on failure, one JSON error object on stderr with
a nonzero exit status:

* 2: bad configuration or flags
* 3: missing, corrupt or incompatible input files
* 4: training diverged
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, container
from .codec import Channel, CodecPair, TrainingDiverged, load_vae, save_vae, train_codec_pair
from .config import ConfigError, ExperimentConfig, load_config, parse_int_list, parse_snr, parse_snr_list
from .csi import Dataset, derive_seed, generate_dataset, load_dataset, save_dataset, split_dataset
from .localization import ErrorReport, error_report, load_localizer, save_localizer, train_localizer
from .nn import NonFiniteError
from .sim import (
    ORanSimulation,
    TopologyError,
    bandwidth_report,
    build_topology,
    bytes_by_link,
    deploy_all,
    run_localization,
    vae_pair_factory,
)
from .sim.topology import NodeKind
from .sweep import make_scene, run_sweep

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4

DATASET_FILE = "dataset.sem"
AMPLITUDE_FILE = "codec_amplitude.sem"
PHASE_FILE = "codec_phase.sem"
LOCALIZER_FILE = "localizer.sem"


class InputError(RuntimeError):
    pass


# --- output helpers ---------------------------------------------------------


def write_text(path: Path, text: str) -> Path:
    container.atomic_write_bytes(path, text.encode("utf-8"))
    return path


def check_cdf_csv(path: Path) -> None:
    """Re-read an emitted CDF and confirm it is non-decreasing and ends at 1."""
    rows = list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))
    fracs = [float(r["fraction"]) for r in rows]
    errs = [float(r["error_m"]) for r in rows]
    if not fracs or fracs[-1] != 1.0 or np.any(np.diff(fracs) < 0) or np.any(np.diff(errs) < 0):
        raise InputError(f"emitted CDF {path} failed validation")


def write_report_files(out: Path, report: ErrorReport) -> list[Path]:
    errs = write_text(out / f"errors_{report.name}.csv", report.per_sample_csv())
    cdf = write_text(out / f"cdf_{report.name}.csv", report.cdf_csv())
    check_cdf_csv(cdf)
    return [errs, cdf]


def jsonl(lines: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)


def header_comment(command: str) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return f"semoran {__version__} {command}\ngenerated {stamp}"


# --- data and model loading -------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InputError(f"missing {what}: {path}")
    return path


def obtain_dataset(config: ExperimentConfig) -> Dataset:
    if config.data.path:
        return load_dataset(_require(Path(config.data.path), "dataset"))
    return generate_dataset(make_scene(config), config.data.n_samples, config.seed)


def obtain_split(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return split_dataset(obtain_dataset(config), config.data.train_fraction, derive_seed(config.seed, 1))


def load_pair(codec_dir: Path) -> CodecPair:
    amp = load_vae(_require(codec_dir / AMPLITUDE_FILE, "amplitude codec checkpoint"))
    ph = load_vae(_require(codec_dir / PHASE_FILE, "phase codec checkpoint"))
    if amp.data_kind != "amplitude" or ph.data_kind != "phase":
        raise InputError(f"codec checkpoints in {codec_dir} have the wrong data kinds")
    if amp.bottleneck != ph.bottleneck:
        raise InputError("amplitude and phase codecs disagree on the bottleneck size")
    return CodecPair(amp, ph)


# --- commands ---------------------------------------------------------------


def cmd_gen_data(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = Path(config.out)
    ds = generate_dataset(make_scene(config), config.data.n_samples, config.seed)
    path = out / DATASET_FILE
    save_dataset(ds, path, {"n_samples": config.data.n_samples, "seed": config.seed})
    if load_dataset(path).digest() != ds.digest():
        raise InputError("dataset round-trip check failed")
    return {"dataset": str(path), "n": len(ds), "digest": ds.digest()}


def cmd_train_codec(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = Path(config.out)
    train, _ = obtain_split(config)
    vcfg = replace(config.vae, seed=derive_seed(config.seed, config.vae.bottleneck))
    pair = train_codec_pair(train, vcfg)
    paths = [out / AMPLITUDE_FILE, out / PHASE_FILE]
    save_vae(pair.amplitude_model, paths[0])
    save_vae(pair.phase_model, paths[1])
    loaded = load_pair(out)
    if loaded.amplitude_model.checksum() != pair.amplitude_model.checksum():
        raise InputError("codec checkpoint round-trip check failed")
    return {
        "checkpoints": [str(p) for p in paths],
        "bottleneck": pair.bottleneck,
        "payload_bytes": pair.payload_bytes,
        "best_epoch": [m.training_meta.get("best_epoch") for m in (pair.amplitude_model, pair.phase_model)],
    }


def cmd_train_localizer(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = Path(config.out)
    train, test = obtain_split(config)
    features = None
    if args.codec_dir:
        features = load_pair(Path(args.codec_dir)).reconstruct_batch(train.flat())
    model = train_localizer(train, replace(config.localizer, seed=derive_seed(config.seed, 0, 1)), features)
    path = out / LOCALIZER_FILE
    save_localizer(model, path)
    load_localizer(path)
    return {"checkpoint": str(path), "fit_on": "reconstructed" if features is not None else "raw"}


def cmd_simulate(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = Path(config.out)
    _, test = obtain_split(config)
    localizer = load_localizer(_require(Path(args.localizer or out / LOCALIZER_FILE), "localizer checkpoint"))
    topo = build_topology(config.sim.topology)
    channel = Channel(config.sim.snr_db, derive_seed(config.seed, 2))
    models: dict[str, tuple[str, Any]] = {}
    if config.sim.codec == "vae":
        pair = load_pair(Path(args.codec_dir or out))
        sim = ORanSimulation(
            topo, ("codec_amplitude", "codec_phase"), vae_pair_factory, channel, decode_at=config.sim.decode_at
        )
        models["codec_amplitude"] = ("codec_amplitude", pair.amplitude_model)
        models["codec_phase"] = ("codec_phase", pair.phase_model)
    else:
        sim = ORanSimulation(topo, channel=channel, decode_at=config.sim.decode_at)
    models["localizer"] = ("localizer", localizer)
    deploy_all(sim, models)
    n = min(config.sim.requests, len(test))
    results = run_localization(sim, list(test)[:n], config.sim.interval_us)
    missing = [i for i, r in enumerate(results) if r is None]
    if missing:
        raise InputError(f"{len(missing)} localization requests produced no result")
    pred = np.array([r.position for r in results], dtype=np.float64)
    report = error_report(pred, test.labels[:n], name="sim")

    written = [write_text(out / "trace.jsonl", sim.trace.to_jsonl())]
    written += write_report_files(out, report)
    ue, ru = topo.first(NodeKind.UE_EDGE), topo.first(NodeKind.O_RU)
    air = bandwidth_report(sim.trace, (ue, ru), topo, ("SEMANTIC_PAYLOAD",))
    summary = {
        **report.summary(),
        "codec": config.sim.codec,
        "requests": n,
        "bytes_on_air": air,
        "bytes_per_request_on_air": air // n,
        "bytes_by_link": bytes_by_link(sim.trace),
        "trace_digest": sim.trace.digest(),
    }
    written.append(write_text(out / "summary.jsonl", jsonl([{"type": "config", **config.to_dict()}, summary])))
    return {"outputs": [str(p) for p in written], **{k: summary[k] for k in ("mean_error_m", "bytes_per_request_on_air", "trace_digest")}}


def cmd_sweep(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = Path(config.out)
    train, test = obtain_split(config)
    report = run_sweep(config, train, test)
    written = [write_text(out / "sweep.csv", report.to_csv(header_comment("sweep")))]
    for name, rep in report.cdfs.items():
        path = write_text(out / f"cdf_{name}.csv", rep.cdf_csv())
        check_cdf_csv(path)
        written.append(path)
    written.append(write_text(out / "trace.jsonl", report.best_trace))
    written.append(write_text(out / "summary.jsonl", jsonl(report.summary_lines())))
    best = report.best()
    return {
        "outputs": [str(p) for p in written],
        "best_bottleneck": best.bottleneck,
        "best_mean_error_m": best.mean_error_m,
        "raw_mean_error_m": report.baseline.mean_error_m,
    }


def cmd_report(config: ExperimentConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Turn per-sample error CSVs into CDF CSVs plus one summary line each."""
    out = Path(config.out)
    if not args.inputs:
        raise InputError("report needs at least one per-sample error CSV")
    written, lines = [], []
    for item in args.inputs:
        path = _require(Path(item), "per-sample error CSV")
        name = path.stem.removeprefix("errors_")
        try:
            rep = ErrorReport.from_per_sample_csv(path.read_text(encoding="utf-8"), name=name)
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path} is not a per-sample error CSV: {exc}") from None
        cdf = write_text(out / f"cdf_{name}.csv", rep.cdf_csv())
        check_cdf_csv(cdf)
        written.append(cdf)
        lines.append(rep.summary())
    written.append(write_text(out / "summary.jsonl", jsonl(lines)))
    return {"outputs": [str(p) for p in written], "reports": len(lines)}


COMMANDS: dict[str, Callable[[ExperimentConfig, argparse.Namespace], dict[str, Any]]] = {
    "gen-data": cmd_gen_data,
    "train-codec": cmd_train_codec,
    "train-localizer": cmd_train_localizer,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# --- argument handling ------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors become structured config errors
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (u64)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset file to use instead of generating one")
    common.add_argument("--n-samples", type=int, help="samples to generate")
    common.add_argument("--snr-db", help="SNR in dB, comma list for sweep, or 'off'")
    common.add_argument("--bottlenecks", help="comma-separated bottleneck sizes")
    common.add_argument("--bottleneck", type=int, help="bottleneck for train-codec and simulate")
    common.add_argument("--epochs", type=int, help="epochs for both codec and localizer")
    common.add_argument("--seeds-per-point", type=int)
    common.add_argument("--jobs", type=int, help="parallel sweep workers")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="semoran", description="Semantic-aware Open RAN simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic CSI dataset")
    sub.add_parser("train-codec", parents=[common], help="train the amplitude and phase VAEs")
    p = sub.add_parser("train-localizer", parents=[common], help="train the localization network")
    p.add_argument("--codec-dir", help="fit on reconstructions from the codecs in this directory")
    p = sub.add_parser("simulate", parents=[common], help="run localization requests through the RAN")
    p.add_argument("--codec", choices=("vae", "identity"))
    p.add_argument("--codec-dir", help="directory holding codec checkpoints (default: --out)")
    p.add_argument("--localizer", help="localizer checkpoint (default: <out>/localizer.sem)")
    p.add_argument("--requests", type=int)
    sub.add_parser("sweep", parents=[common], help="bottleneck sweep against the raw baseline")
    p = sub.add_parser("report", parents=[common], help="CDFs and summaries from per-sample error CSVs")
    p.add_argument("inputs", nargs="*")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    o: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {}

    def put(section: str, key: str, value: Any) -> None:
        sections.setdefault(section, {})[key] = value

    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    if args.data is not None:
        put("data", "path", args.data)
    if args.n_samples is not None:
        put("data", "n_samples", args.n_samples)
    if args.bottlenecks is not None:
        put("sweep", "bottlenecks", parse_int_list(args.bottlenecks))
    if args.snr_db is not None:
        if args.command == "sweep":
            put("sweep", "snr_db", parse_snr_list(args.snr_db))
        else:
            put("sim", "snr_db", parse_snr(args.snr_db))
    if args.bottleneck is not None:
        put("vae", "bottleneck", args.bottleneck)
        put("sim", "bottleneck", args.bottleneck)
    if args.epochs is not None:
        put("vae", "epochs", args.epochs)
        put("localizer", "epochs", args.epochs)
    if args.seeds_per_point is not None:
        put("sweep", "seeds_per_point", args.seeds_per_point)
    if args.jobs is not None:
        put("sweep", "jobs", args.jobs)
    if getattr(args, "codec", None):
        put("sim", "codec", args.codec)
    if getattr(args, "requests", None) is not None:
        put("sim", "requests", args.requests)
    o.update(sections)
    return o


def _fail(code: int, kind: str, message: str, **extra: Any) -> int:
    print(json.dumps({"status": "error", "error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        config = load_config(args.config, overrides_from_args(args))
        os.makedirs(config.out, exist_ok=True)
        result = COMMANDS[command](config, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), command=command)
    except container.ContainerError as exc:
        return _fail(EXIT_INPUT, exc.code, str(exc), command=command, offset=exc.offset)
    except (InputError, TopologyError, FileNotFoundError) as exc:
        return _fail(EXIT_INPUT, "input", str(exc), command=command)
    except (TrainingDiverged, NonFiniteError) as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc), command=command)
    print(json.dumps({"status": "ok", "command": command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
