"""Command-line entry point: ``iass <verb> ...``.

Verbs: labels, train, separate, evaluate, ablate, make-fixtures, report.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bsseval import METRICS, EvalConfig, EvalReport, aggregate, ibm_from_stems, metrics_frame
from .datapipe import (AugmentConfig, EvalSong, RemixSampler, build_pools, load_manifest, make_eval_set,
                       songs_with)
from .dsp import AudioClip, FrameConfig, read_wav
from .errors import CheckpointError, ConfigurationError, IngestionError, NumericalError
from .fixtures import DEFAULT_INSTRUMENTS, make_fixtures
from .labels import binarize, energy_activation, read_curve_csv, write_curve_csv
from .model import ModelConfig, load_checkpoint
from .separator import InferenceConfig, batch_separate, estimate_path
from .trainer import TrainConfig, train

log = logging.getLogger("iass")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_ROWS = (
    ("train_without_labels/test_without_labels", "without_labels", "all_ones"),
    ("train_with_labels/test_without_labels", "with_labels", "all_ones"),
    ("train_with_labels/test_with_labels", "with_labels", "predicted"),
)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- experiment config

@dataclass
class ExperimentConfig:
    dataset_root: str = "data"
    target_instrument: str = "vocals"
    output_dir: str = "runs"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    frame: FrameConfig = field(default_factory=FrameConfig)
    validation_split: str = "validation"
    test_split: str = "test"

    SECTIONS = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig,
                "inference": InferenceConfig, "eval": EvalConfig, "frame": FrameConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        kwargs = {}
        for key, value in doc.items():
            if key in cls.SECTIONS:
                section = cls.SECTIONS[key]
                names = {f.name for f in dataclasses.fields(section)}
                unknown = set(value) - names
                if unknown:
                    raise ConfigurationError(f"unknown {key} settings: {sorted(unknown)}")
                kwargs[key] = section(**value)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigurationError(f"unknown experiment setting {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v)
        return out

    def replace_section(self, name: str, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        if changes:
            setattr(self, name, dataclasses.replace(getattr(self, name), **changes))

    def run_dir(self, variant: str) -> Path:
        return Path(self.output_dir) / self.target_instrument / variant


def _variant(alpha: float) -> str:
    return "with_labels" if alpha > 0 else "without_labels"


def desk_scale_config(dataset_root, output_dir, instrument="vocals") -> dict:
    """Small settings that train in minutes on one CPU core."""
    return {
        "dataset_root": str(dataset_root),
        "target_instrument": instrument,
        "output_dir": str(output_dir),
        "seed": 0,
        "model": {"channel_widths": [8, 16, 32]},
        "train": {"batch_size": 4, "steps_per_epoch": 20, "max_epochs": 20, "patience_epochs": 10,
                  "validation_examples": 4},
        "augment": {"chunk_seconds": 1.0},
    }


@contextlib.contextmanager
def output_lock(directory):
    """Exclusive advisory lock on ``<directory>/.iass.lock``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / ".iass.lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise UsageError(f"{directory} is in use by another iass process") from exc
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _apply_workers():
    n = os.environ.get("IASS_NUM_WORKERS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"IASS_NUM_WORKERS must be an integer, got {n!r}") from None


# --------------------------------------------------------------------------- labels

def cmd_labels(args) -> int:
    manifest = load_manifest(args.dataset, args.split)
    frame_cfg = FrameConfig()
    failures = 0
    out = Path(args.out)
    for entry in manifest.entries:
        try:
            clip = read_wav(entry.audio_path, frame_cfg.sample_rate, mono=True)
            conf = energy_activation(clip, frame_cfg, entry.instrument)
            write_curve_csv(out / entry.song_id / f"{entry.instrument}_confidence.csv", conf)
            write_curve_csv(out / entry.song_id / f"{entry.instrument}_binary.csv", binarize(conf))
        except (OSError, ValueError) as exc:
            log.error("labels for %s/%s failed: %s", entry.song_id, entry.instrument, exc)
            failures += 1
    print(f"wrote activation labels for {len(manifest) - failures} stems to {out}")
    return EXIT_DATA if failures else EXIT_OK


# --------------------------------------------------------------------------- train

def _load_experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for attr, key in (("dataset", "dataset_root"), ("instrument", "target_instrument"),
                      ("out", "output_dir"), ("seed", "seed")):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(exp, key, v)
    exp.replace_section("train", max_epochs=getattr(args, "max_epochs", None),
                        steps_per_epoch=getattr(args, "steps_per_epoch", None),
                        batch_size=getattr(args, "batch_size", None),
                        alpha=getattr(args, "alpha", None))
    if getattr(args, "seed", None) is not None:
        exp.replace_section("train", seed=args.seed)
        exp.replace_section("augment", seed=args.seed)
    if not Path(exp.dataset_root).exists():
        raise IngestionError("dataset root does not exist", [exp.dataset_root])
    return exp


def cmd_train(args) -> int:
    exp = _load_experiment(args)
    _seed_everything(exp.seed)
    alpha = exp.model.alpha if exp.train.alpha is None else exp.train.alpha
    run_dir = Path(args.run_dir) if args.run_dir else exp.run_dir(_variant(alpha))
    pools = build_pools(load_manifest(exp.dataset_root, "train"), exp.target_instrument)
    try:
        val_pools = build_pools(load_manifest(exp.dataset_root, exp.validation_split),
                                exp.target_instrument)
    except IngestionError:
        log.warning("no %s songs with %s; validating on fixed training chunks",
                    exp.validation_split, exp.target_instrument)
        val_pools = pools
    sampler = RemixSampler(pools, exp.augment, exp.frame)
    val_set = RemixSampler(val_pools, exp.augment, exp.frame).fixed_set(
        exp.train.validation_examples, exp.seed + 1)
    with output_lock(run_dir):
        (run_dir / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=2))
        result = train(exp.train, dataclasses.replace(exp.model), sampler, val_set, run_dir,
                       resume=args.resume)
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint}; "
          f"history {run_dir / 'history.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------- separate

def _inference_config(exp_cfg: InferenceConfig, args) -> InferenceConfig:
    changes = {}
    if args.no_activation_weight:
        changes["use_activation_weight"] = False
    if args.smooth_kernel is not None:
        changes["smooth_kernel_frames"] = args.smooth_kernel
    if args.oracle_labels:
        changes["activation_source"] = "ground_truth"
    if args.activation_source:
        changes["activation_source"] = args.activation_source
    return dataclasses.replace(exp_cfg, **changes)


def _oracle_for(path: Path, song: str, instrument: str):
    if path.is_dir():
        return read_curve_csv(path / song / f"{instrument}_binary.csv")
    return read_curve_csv(path)


def cmd_separate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = ck.model.eval()
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = _inference_config(exp.inference, args)
    instrument = args.instrument or exp.target_instrument
    out = Path(args.out)
    source = Path(args.input)
    oracle_path = Path(args.oracle_labels) if args.oracle_labels else None
    if source.is_dir():
        songs = songs_with(make_eval_set(load_manifest(source, args.split), [instrument]), instrument)
        if not songs:
            raise IngestionError(f"no {args.split} songs contain {instrument}", [source])
    elif source.is_file():
        clip = read_wav(source)
        songs = [EvalSong(source.stem, clip, {})]
    else:
        raise IngestionError("input does not exist", [source])
    oracles = None
    if oracle_path is not None:
        oracles = {s.song_id: _oracle_for(oracle_path, s.song_id, instrument) for s in songs}
    with output_lock(out):
        res = batch_separate(model, songs, cfg, out, instrument, exp.frame, oracles)
    print(f"wrote {len(res['written'])} estimates to {out}")
    for song, msg in res["failed"].items():
        print(f"failed {song}: {msg}", file=sys.stderr)
    return EXIT_DATA if res["failed"] else EXIT_OK


# --------------------------------------------------------------------------- evaluate

def _refs(song: EvalSong, instrument: str) -> list[np.ndarray]:
    target = song.stems[instrument].samples
    return [target, song.mixture.samples - target]


def evaluate_estimates(estimates_dir, eval_set: list[EvalSong], instruments, eval_cfg: EvalConfig,
                       frame_cfg: FrameConfig, baselines: bool = True) -> dict:
    """Framewise reports for estimates found on disk, plus optional baselines.

    References are the target stem and the sum of the other stems.
    """
    reports = {"estimate": EvalReport(method="estimate")}
    if baselines:
        reports["ibm"] = EvalReport(method="ibm")
        reports["input_sdr"] = EvalReport(method="input_sdr")
    found = 0
    for song in eval_set:
        for inst in instruments:
            if inst not in song.stems:
                continue
            refs = _refs(song, inst)
            path = estimate_path(estimates_dir, song.song_id, inst)
            if path.is_file():
                est = read_wav(path, song.mixture.sample_rate)
                if est.num_samples != song.mixture.num_samples:
                    log.warning("%s has %d samples, reference %d; skipped", path, est.num_samples,
                                song.mixture.num_samples)
                else:
                    reports["estimate"].add(song.song_id, inst, metrics_frame(est.samples, refs, eval_cfg,
                                                                              song.mixture.sample_rate))
                    found += 1
            if baselines:
                sr = song.mixture.sample_rate
                ibm = _ibm_estimate(song, inst, frame_cfg)
                reports["ibm"].add(song.song_id, inst, metrics_frame(ibm, refs, eval_cfg, sr))
                reports["input_sdr"].add(song.song_id, inst,
                                         metrics_frame(song.mixture.samples, refs, eval_cfg, sr))
    return {"reports": reports, "found": found}


def _ibm_estimate(song: EvalSong, inst: str, frame_cfg: FrameConfig) -> np.ndarray:
    channels = []
    for c in range(song.mixture.num_channels):
        target = song.stems[inst].channel(c)
        rest = AudioClip(song.mixture.channel(c).samples - target.samples, target.sample_rate)
        channels.append(ibm_from_stems([target, rest], frame_cfg)[0].mono)
    return np.stack(channels)


def write_summary(path, reports: dict) -> Path:
    """Table-3 style CSV: one row per instrument, one SDR column per method."""
    per_method = {name: aggregate(r)[1] for name, r in reports.items()}
    instruments = sorted({i for agg in per_method.values() for i in agg})
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instrument", *[f"{m}_SDR" for m in per_method]])
        for inst in instruments:
            row = [inst]
            for m in per_method:
                v = per_method[m].get(inst, {}).get("SDR")
                row.append("" if v is None else f"{v:.4f}")
            w.writerow(row)
    return Path(path)


def cmd_evaluate(args) -> int:
    est_dir = Path(args.estimates)
    if not est_dir.is_dir() or not any(est_dir.glob("*/*_estimate.wav")):
        raise IngestionError("no estimates found", [est_dir])
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    instruments = sorted({p.name[: -len("_estimate.wav")] for p in est_dir.glob("*/*_estimate.wav")})
    eval_set = make_eval_set(load_manifest(args.references, args.split), instruments)
    res = evaluate_estimates(est_dir, eval_set, instruments, exp.eval, exp.frame, not args.no_baselines)
    if res["found"] == 0:
        raise IngestionError("no estimate matched a reference song", [est_dir])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, report in res["reports"].items():
        report.to_json(out / f"{name}.json")
        report.to_csv(out / f"{name}.csv")
    write_summary(out / "summary.csv", res["reports"])
    print((out / "summary.csv").read_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------------- ablate

def ablation_rows(exp: ExperimentConfig, checkpoints: dict, eval_set: list, work_dir: Path) -> list[dict]:
    """Three rows per instrument; a missing checkpoint marks its rows absent."""
    inst = exp.target_instrument
    rows = []
    models = {}
    for variant, path in checkpoints.items():
        if path is not None and Path(path).is_file():
            models[variant] = load_checkpoint(path).model.eval()
    for name, variant, source in ABLATION_ROWS:
        row = {"instrument": inst, "row": name, "checkpoint_variant": variant,
               "activation_source": source, "present": variant in models}
        if variant in models:
            cfg = dataclasses.replace(exp.inference, activation_source=source, use_activation_weight=True)
            out = work_dir / name.replace("/", "__")
            batch_separate(models[variant], eval_set, cfg, out, inst, exp.frame)
            res = evaluate_estimates(out, eval_set, [inst], exp.eval, exp.frame, baselines=False)
            med = aggregate(res["reports"]["estimate"])[1].get(inst, {})
            vals = [med.get(m) for m in ("SDR", "SIR", "SAR")]
            row.update({"SDR": vals[0], "SIR": vals[1], "SAR": vals[2],
                        "Avg": float(np.mean(vals)) if None not in vals else None})
        else:
            row.update({"SDR": None, "SIR": None, "SAR": None, "Avg": None})
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    exp = _load_experiment(args)
    ck = {"with_labels": args.with_labels or exp.run_dir("with_labels") / "best.ckpt",
          "without_labels": args.without_labels or exp.run_dir("without_labels") / "best.ckpt"}
    eval_set = songs_with(make_eval_set(load_manifest(exp.dataset_root, exp.test_split),
                                        [exp.target_instrument]), exp.target_instrument)
    if not eval_set:
        raise IngestionError(f"no {exp.test_split} songs contain {exp.target_instrument}",
                             [exp.dataset_root])
    out = Path(args.out_table) if args.out_table else Path(exp.output_dir) / "ablation"
    with output_lock(out):
        rows = ablation_rows(exp, ck, eval_set, out / "estimates")
        fields = ["instrument", "row", "checkpoint_variant", "activation_source", "present",
                  "SDR", "SIR", "SAR", "Avg"]
        with (out / "ablation.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r[k] is None else (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]))
                            for k in fields})
        (out / "ablation.json").write_text(json.dumps(
            {"rows": rows, "note": "Avg is the arithmetic mean of SDR, SIR and SAR"}, indent=2))
    print(format_ablation(rows))
    return EXIT_OK


def format_ablation(rows: list[dict]) -> str:
    fmt = lambda v: "absent" if v is None else f"{v:7.2f}"  # noqa: E731
    lines = [f"{'row':45s} {'SDR':>7s} {'SIR':>7s} {'SAR':>7s} {'Avg':>7s}"]
    for r in rows:
        lines.append(f"{r['row']:45s} " + " ".join(fmt(r[m]) for m in ("SDR", "SIR", "SAR", "Avg")))
    return "\n".join(lines)


# --------------------------------------------------------------------------- make-fixtures / report

def cmd_make_fixtures(args) -> int:
    instruments = tuple(args.instruments.split(",")) if args.instruments else DEFAULT_INSTRUMENTS
    try:
        root = make_fixtures(args.out, args.songs, args.seconds, args.seed, instruments)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg_path = root / "experiment.json"
    cfg_path.write_text(json.dumps(desk_scale_config(root, root / "runs", instruments[0]), indent=2))
    print(f"wrote {args.songs} songs to {root}; example config {cfg_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    eval_dir = Path(args.eval_dir)
    lines = ["# Evaluation report", ""]
    summary = eval_dir / "summary.csv"
    if summary.is_file():
        rows = list(csv.reader(summary.open()))
        lines += ["## SDR by method (median over frames, then songs)", "",
                  "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines.append("")
    reports = sorted(eval_dir.glob("*.json"))
    for path in reports:
        report = EvalReport.from_json(path)
        _, per_inst = aggregate(report)
        lines += [f"## {report.method}", "", "| instrument | " + " | ".join(METRICS) + " |",
                  "|---|" + "---|" * len(METRICS)]
        for inst in sorted(per_inst):
            vals = [per_inst[inst][m] for m in METRICS]
            lines.append(f"| {inst} | " + " | ".join("-" if v is None else f"{v:.2f}" for v in vals) + " |")
        lines.append("")
    if args.ablation and Path(args.ablation).is_file():
        doc = json.loads(Path(args.ablation).read_text())
        lines += ["## Ablation", "", "```", format_ablation(doc["rows"]), "```", ""]
    if not summary.is_file() and not reports:
        raise IngestionError("no evaluation outputs found", [eval_dir])
    text = "\n".join(lines)
    out = Path(args.out) if args.out else eval_dir / "report.md"
    out.write_text(text)
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iass", description="Instrument-aware source separation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-fixtures", help="synthesize a deterministic toy dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--songs", type=int, default=8)
    s.add_argument("--seconds", type=float, default=8.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instruments", help="comma-separated, from: vocals,bass,drums,piano")
    s.set_defaults(func=cmd_make_fixtures)

    s = sub.add_parser("labels", help="energy-based activation labels for every stem")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="all")
    s.set_defaults(func=cmd_labels)

    def experiment_flags(s):
        s.add_argument("--config", help="experiment JSON; flags override its values")
        s.add_argument("--dataset")
        s.add_argument("--instrument")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)

    s = sub.add_parser("train", help="train one separation model")
    experiment_flags(s)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--steps-per-epoch", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--alpha", type=float, help="BCE weight; 0 trains without activation labels")
    s.add_argument("--run-dir", help="override <out>/<instrument>/<variant>")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate a WAV file or the test songs of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="WAV file or dataset root")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--instrument")
    s.add_argument("--split", default="test")
    s.add_argument("--no-activation-weight", action="store_true")
    s.add_argument("--oracle-labels", help="binary label CSV, or a labels directory")
    s.add_argument("--smooth-kernel", type=int)
    s.add_argument("--activation-source", choices=("predicted", "ground_truth", "all_ones"))
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("evaluate", help="BSS-eval metrics with IBM and input-SDR baselines")
    s.add_argument("--estimates", required=True)
    s.add_argument("--references", required=True, help="dataset root holding the stems")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--split", default="test")
    s.add_argument("--no-baselines", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="with/without activation label table")
    experiment_flags(s)
    s.add_argument("--with-labels", help="checkpoint trained with alpha > 0")
    s.add_argument("--without-labels", help="checkpoint trained with alpha = 0")
    s.add_argument("--out-table", help="directory for ablation.csv/json")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="markdown summary of evaluation outputs")
    s.add_argument("--eval-dir", required=True)
    s.add_argument("--ablation", help="ablation.json to include")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_workers()
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"iass: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestionError as exc:
        extra = f" ({', '.join(map(str, exc.offenders[:5]))})" if exc.offenders else ""
        print(f"iass: data error: {exc}{extra}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"iass: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"iass: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
