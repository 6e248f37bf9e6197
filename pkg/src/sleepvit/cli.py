"""``sleepvit`` command line: synth -> prepare -> train -> eval -> explain.

Every command writes ``run_config.json`` (the resolved configuration and
root seed) into its output directory.  Failures exit non-zero with one
line on stderr of the form ``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import evaluation as ev
from .explain import explain, render_overlay
from .model import ModelConfig, load_checkpoint, predict
from .signal_pipeline import (
    CHANNELS,
    Apnea,
    DatasetArchive,
    Disorder,
    Segment,
    SignalRecord,
    Stage,
    assemble_dataset,
    read_archive,
    read_split,
    split_by_subject,
    write_archive,
    write_split,
)
from .synthetic import GeneratorProfile, generate_cohort
from .training import TrainConfig, TrainingDiverged, derive_seed, train

log = logging.getLogger("sleepvit")

_TOP_KEYS = {"seed", "precision", "generator", "split", "model", "train", "explain"}


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    generator: GeneratorProfile = field(default_factory=GeneratorProfile)
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explain_channels: tuple[str, ...] = ("RF", "RC", "RA")

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise CLIError("config", f"unknown config keys: {sorted(unknown)}")
        try:
            gen = dict(d.get("generator") or {})
            gen_known = set(GeneratorProfile().to_dict())
            if set(gen) - gen_known:
                raise ValueError(f"unknown generator keys: {sorted(set(gen) - gen_known)}")
            split = dict(d.get("split") or {})
            if set(split) - {"fractions"}:
                raise ValueError(f"unknown split keys: {sorted(set(split) - {'fractions'})}")
            expl = dict(d.get("explain") or {})
            if set(expl) - {"channels"}:
                raise ValueError(f"unknown explain keys: {sorted(set(expl) - {'channels'})}")
            cfg = cls(
                seed=int(d.get("seed", 0)),
                precision=str(d.get("precision", "f32")),
                generator=GeneratorProfile(**gen),
                split_fractions=tuple(split.get("fractions", (0.70, 0.15, 0.15))),
                model=ModelConfig.from_dict(dict(d.get("model") or {})),
                train=TrainConfig.from_dict(dict(d.get("train") or {})),
                explain_channels=tuple(expl.get("channels", ("RF", "RC", "RA"))),
            )
            cfg.generator.validate()
        except (TypeError, ValueError) as err:
            raise CLIError("config", str(err)) from None
        if cfg.precision not in ("f32", "f64"):
            raise CLIError("config", f"precision must be f32 or f64, got {cfg.precision}")
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one root seed into every random substream."""
        self.seed = seed
        self.generator.seed = derive_seed(seed, "generation")
        self.train.seed = seed
        return self

    @property
    def split_seed(self) -> int:
        return derive_seed(self.seed, "split")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "precision": self.precision,
            "generator": self.generator.to_dict(),
            "split": {"fractions": list(self.split_fractions), "seed": self.split_seed},
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "explain": {"channels": list(self.explain_channels)},
        }


def load_config(path: str | None, seed: int | None, precision: str | None) -> RunConfig:
    raw = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise CLIError("missing-file", f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as err:
            raise CLIError("config", f"cannot parse {p}: {err}".replace("\n", " ")) from None
    cfg = RunConfig.from_dict(raw)
    if precision:
        cfg.precision = precision
    return cfg.with_seed(cfg.seed if seed is None else seed)


def _write_provenance(out: Path, cfg: RunConfig, command: str, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "inputs": inputs, "config": cfg.to_dict()}
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError("missing-file", f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# raw recording files
# ---------------------------------------------------------------------------


def write_raw_record(record: SignalRecord, out_dir: Path) -> Path:
    windows = record.event_windows or [None] * record.n_epochs
    win = np.array([[np.nan, np.nan] if w is None else list(w) for w in windows], dtype=np.float64)
    path = out_dir / f"{record.subject_id}.npz"
    np.savez(
        path,
        subject_id=np.array(record.subject_id),
        sampling_rate_hz=np.array(record.sampling_rate_hz),
        disorder=np.array(Disorder(record.disorder).value),
        stage=np.array([int(s) for s, _ in record.epoch_annotations], dtype=np.int64),
        apnea=np.array([int(a) for _, a in record.epoch_annotations], dtype=np.int64),
        event_windows=win.reshape(-1, 2),
        **{ch: np.asarray(record.channels[ch]) for ch in CHANNELS},
    )
    return path


def read_raw_record(path: Path) -> SignalRecord:
    with np.load(path, allow_pickle=False) as z:
        win = z["event_windows"]
        return SignalRecord(
            str(z["subject_id"]),
            float(z["sampling_rate_hz"]),
            {ch: z[ch] for ch in CHANNELS},
            Disorder(str(z["disorder"])),
            [(Stage(s), Apnea(a)) for s, a in zip(z["stage"], z["apnea"])],
            [None if np.isnan(w[0]) else (float(w[0]), float(w[1])) for w in win],
        )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cfg.generator)
    paths = []
    for i in range(len(cohort)):
        paths.append(write_raw_record(cohort[i], out))
    index = {"subjects": cohort.subject_ids,
             "disorders": [d.value for d in cohort.disorders]}
    (out / "cohort.json").write_text(json.dumps(index, indent=2) + "\n")
    _write_provenance(out, cfg, "synth", {})
    log.info("wrote %d recordings to %s", len(paths), out)
    return paths


def cmd_prepare(cfg: RunConfig, raw_dir, out_archive) -> DatasetArchive:
    raw = _require(raw_dir, "raw directory")
    files = sorted(raw.glob("*.npz"))
    if not files:
        raise CLIError("missing-file", f"no recordings (*.npz) in {raw}")
    archive = assemble_dataset(read_raw_record(f) for f in files)
    split = split_by_subject(archive.subjects, cfg.split_fractions, cfg.split_seed)
    out = Path(out_archive)
    write_archive(archive, out)
    write_split(split, out / "split.json")
    _write_provenance(out, cfg, "prepare", {"raw_dir": str(raw_dir)})
    log.info("archive %s: %d examples, split %d/%d/%d subjects", out, len(archive),
             len(split.train_subjects), len(split.val_subjects), len(split.test_subjects))
    return archive


def _load_archive(path):
    root = _require(path, "archive")
    if not (root / "manifest.json").is_file():
        raise CLIError("missing-file", f"archive manifest not found: {root / 'manifest.json'}")
    split_path = _require(str(root / "split.json"), "split file")
    return read_archive(root), read_split(split_path)


def cmd_train(cfg: RunConfig, archive_path, out_dir):
    archive, split = _load_archive(archive_path)
    out = Path(out_dir)
    _write_provenance(out, cfg, "train", {"archive": str(archive_path)})
    params, history = train(cfg.model, cfg.train, archive, split, dtype=cfg.dtype,
                            checkpoint_dir=out)
    history.write_csv(out / "history.csv")
    summary = {"selected_epoch": history.selected_epoch, "stop_reason": history.stop_reason,
               "epochs_run": len(history.rows), "parameters": params.count()}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_time_s": history.wall_time_s}) + "\n")
    return params, history


def _load_params(checkpoint, cfg: RunConfig):
    ck = _require(checkpoint, "checkpoint")
    params = load_checkpoint(ck, expected_config=cfg.model)
    return params.astype(cfg.dtype) if params.dtype != cfg.dtype else params


def cmd_eval(cfg: RunConfig, archive_path, checkpoint, out_dir, part: str = "test"):
    archive, split = _load_archive(archive_path)
    params = _load_params(checkpoint, cfg)
    subset = archive.subset(split.subjects(part))
    if len(subset) == 0:
        raise CLIError("data", f"no segments in the {part} split")
    ps, pa = predict(params, subset.x.astype(cfg.dtype))
    reports = ev.evaluate_predictions(subset.stage, ps.argmax(1), subset.apnea, pa.argmax(1),
                                      subset.example_disorders())
    out = Path(out_dir)
    _write_provenance(out, cfg, "eval", {"archive": str(archive_path),
                                         "checkpoint": str(checkpoint), "part": part})
    (out / "reports.json").write_text(ev.reports_to_json(reports))
    tables = [
        ev.format_table("Sleep stage classification", {"PPG, RF, RC, RA": reports["stage"]}),
        ev.format_table("Sleep stage classification by disorder", reports["stage_by_disorder"]),
        ev.format_table("Sleep apnea type classification", {"PPG, RF, RC, RA": reports["apnea"]}),
        ev.format_table("Sleep apnea type classification by disorder",
                        reports["apnea_by_disorder"]),
    ]
    (out / "tables.txt").write_text("\n".join(tables))
    (out / "confusion_stage.csv").write_text(reports["stage"].confusion.to_csv())
    (out / "confusion_apnea.csv").write_text(reports["apnea"].confusion.to_csv())
    return reports


def select_segment(archive: DatasetArchive, split, selector: str, part: str = "test") -> int:
    """Resolve ``apnea`` (first apnea-labeled segment), ``SUBJECT:INDEX`` or a row number."""
    pool = archive.indices_for(split.subjects(part)) if split is not None else np.arange(len(archive))
    if selector == "apnea":
        hits = [i for i in pool if archive.apnea[i] != Apnea.NoApnea]
        if not hits:
            raise CLIError("data", f"no apnea-labeled segment in the {part} split")
        return int(hits[0])
    if ":" in selector:
        sid, idx = selector.rsplit(":", 1)
        hits = np.flatnonzero((archive.subject_ids == sid) & (archive.segment_index == int(idx)))
        if hits.size == 0:
            raise CLIError("data", f"segment {selector} not found")
        return int(hits[0])
    row = int(selector)
    if not 0 <= row < len(archive):
        raise CLIError("data", f"segment row {row} out of range")
    return row


def cmd_explain(cfg: RunConfig, archive_path, checkpoint, selector, out_dir, part: str = "test"):
    archive, split = _load_archive(archive_path)
    params = _load_params(checkpoint, cfg)
    row = select_segment(archive, split, selector, part)
    windows = archive.event_windows or [None] * len(archive)
    seg = Segment(str(archive.subject_ids[row]), int(archive.segment_index[row]), archive.x[row],
                  Stage(archive.stage[row]), Apnea(archive.apnea[row]), windows[row])
    imap = explain(params, archive.x[row].astype(cfg.dtype), f"{seg.subject_id}:{seg.index}")
    out = Path(out_dir)
    _write_provenance(out, cfg, "explain", {"archive": str(archive_path),
                                            "checkpoint": str(checkpoint), "segment": selector,
                                            "part": part})
    return render_overlay(seg, imap, cfg.explain_channels, out)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed; overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="sleepvit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p = sub.add_parser("prepare", parents=[common], help="build the dataset archive and split")
    p.add_argument("raw_dir")
    p = sub.add_parser("train", parents=[common], help="train the model")
    p.add_argument("archive")
    p = sub.add_parser("eval", parents=[common], help="metrics reports on a split")
    p.add_argument("archive")
    p.add_argument("checkpoint")
    p.add_argument("--part", default="test", choices=("train", "val", "test"))
    p = sub.add_parser("explain", parents=[common], help="attention importance overlays")
    p.add_argument("archive")
    p.add_argument("checkpoint")
    p.add_argument("--segment", default="apnea",
                   help="'apnea', SUBJECT:INDEX, or an archive row number")
    p.add_argument("--part", default="test", choices=("train", "val", "test"),
                   help="split searched by the 'apnea' selector")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.precision)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "prepare":
            cmd_prepare(cfg, args.raw_dir, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.archive, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.archive, args.checkpoint, args.out, args.part)
        elif args.command == "explain":
            cmd_explain(cfg, args.archive, args.checkpoint, args.segment, args.out, args.part)
    except CLIError as err:
        print(f"error: {err.kind}: {err}", file=sys.stderr)
        return 1
    except TrainingDiverged as err:
        print(f"error: diverged: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as err:
        print(f"error: {type(err).__name__}: {str(err).splitlines()[0]}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
