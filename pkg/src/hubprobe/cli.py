"""Command-line interface: ``hubprobe <subcommand> [options]``.

Options may also come from a YAML file given with ``--config``; its
top-level keys apply to every subcommand and a mapping named after the
subcommand overrides them. Flags given on the command line win. Option
names in the file use the flag spelling with or without dashes
(``max-epochs`` or ``max_epochs``).

Every subcommand needs a seed: ``--seed``, the config file, or the
``HUBPROBE_SEED`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import __version__
from . import analysis as an
from . import probing as pr
from .data import (
    RETRIEVAL_TASKS,
    EmbeddingBank,
    atomic_write_bytes,
    build_common_dataset,
    load_bank,
    load_dataset,
    save_bank,
    save_dataset,
    split_by_image,
)
from .encoder import EncoderDims
from .errors import ConfigError, HubProbeError, IoError, NoRuns
from .synthetic import SyntheticSpec, generate_synthetic
from .training import (
    Checkpoint,
    RunSetting,
    TrainConfig,
    evaluate_foil,
    evaluate_retrieval,
    load_checkpoint,
    pretrain_task,
    save_checkpoint,
    train_foil_probe,
)

SEED_ENV = "HUBPROBE_SEED"
TASK_NAMES = {"vqa": "VQA", "referit": "ReferIt", "guesswhat": "GuessWhat", "foil": "FOIL"}
SETTING_ORDER = [s.value for s in RunSetting]
SETTING_ALIASES = {"fully": RunSetting.FULLY_FOIL.value, "fully-trained": RunSetting.FULLY_FOIL.value}
CHECKPOINT_NAME = "model.hubc"
REPORT_NAME = "report.json"


# ---------------------------------------------------------------------------
# option handling
# ---------------------------------------------------------------------------

class _Options:
    """Registers flags with a ``None`` argparse default so that config-file
    values can sit between built-in defaults and explicit flags."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, Any] = {}

    def add(self, *flags, default=None, **kw):
        action = self.parser.add_argument(*flags, default=None, **kw)
        self.defaults[action.dest] = default
        return action


def _csv_list(cast: Callable) -> Callable[[str], list]:
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [cast(t) for t in text]
        return [cast(t) for t in str(text).split(",") if t.strip()]
    return parse


def _load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    section = raw.get(command) if isinstance(raw.get(command), dict) else {}
    merged = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    merged.update(section)
    return {k.replace("-", "_"): v for k, v in merged.items()}


def resolve_options(args: argparse.Namespace, defaults: dict, config: dict,
                    casts: dict[str, Callable] | None = None) -> dict:
    """Built-in defaults < config file < command-line flags."""
    casts = casts or {}
    unknown = sorted(set(config) - set(defaults) - {"config"})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for name, default in defaults.items():
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
        elif name in config:
            val = config[name]
            out[name] = casts[name](val) if name in casts and val is not None else val
        else:
            out[name] = default
    if out.get("seed") is None and "seed" in defaults:
        env = os.environ.get(SEED_ENV)
        if env is None:
            raise ConfigError(f"a seed is required: pass --seed, set it in the config, or export {SEED_ENV}")
        try:
            out["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return out


def _require_files(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        if not Path(p).is_file():
            raise IoError(f"{p}: no such file")


def _require(opts: dict, *names) -> None:
    missing = [n for n in names if opts.get(n) in (None, [], "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class AnalysisReport:
    run_id: str
    setting: str
    metrics: dict[str, float]
    files: list[str]
    version: str = __version__
    config_hash: str = ""
    config: dict = field(default_factory=dict)

    @classmethod
    def create(cls, command: str, setting: str, metrics: dict, files: Sequence[str], config: dict):
        digest = config_hash(config)
        return cls(f"{command}-{setting}-{digest[:10]}" if setting else f"{command}-{digest[:10]}",
                   setting, metrics, sorted(files), __version__, digest, config)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, default=str) + "\n"

    def write(self, out_dir: Path) -> None:
        atomic_write_bytes(out_dir / REPORT_NAME, self.to_json().encode("utf-8"))


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# shared option groups
# ---------------------------------------------------------------------------

def _seed_opt(o: _Options) -> None:
    o.add("--seed", type=int, help=f"global seed (falls back to ${SEED_ENV})")


def _bank_opts(o: _Options) -> None:
    o.add("--visual", help="visual embedding bank")
    o.add("--language", help="language embedding bank")


def _train_opts(o: _Options) -> None:
    o.add("--batch-size", type=int, default=256)
    o.add("--lr", type=float, default=1e-4)
    o.add("--patience", type=int, default=10)
    o.add("--max-epochs", type=int, default=100)
    o.add("--margin", type=float, default=0.1)
    o.add("--proj-dim", type=int, default=512, help="per-modality projection width")
    o.add("--hub-dim", type=int, default=1024, help="hub representation width")
    o.add("--hidden-dim", type=int, help="retrieval MLP width (default: hub width)")
    o.add("--no-bias", action="store_const", const=True, default=False,
          help="encoder without bias terms")


def _replica_opt(o: _Options) -> None:
    o.add("--replicas", type=int, default=1,
          help="independent runs with seeds seed..seed+R-1, written to <out>/r<i>")


def _train_config(opts: dict) -> TrainConfig:
    cfg = TrainConfig(batch_size=opts["batch_size"], lr=opts["lr"], patience=opts["patience"],
                      max_epochs=opts["max_epochs"], seed=opts["seed"], margin=opts["margin"],
                      d_hid=opts["hidden_dim"], use_bias=not opts["no_bias"])
    cfg.validate()
    return cfg


def _banks(opts: dict) -> tuple[EmbeddingBank, EmbeddingBank]:
    _require(opts, "visual", "language")
    return load_bank(opts["visual"]), load_bank(opts["language"])


def _dims(opts: dict, visual: EmbeddingBank, language: EmbeddingBank) -> EncoderDims:
    dims = EncoderDims(visual.dim, language.dim, opts["proj_dim"], opts["hub_dim"])
    dims.validate()
    return dims


def parse_setting(text: str) -> RunSetting:
    name = SETTING_ALIASES.get(text, text)
    try:
        return RunSetting(name)
    except ValueError as exc:
        choices = ", ".join(SETTING_ORDER + ["pretrained"] + sorted(SETTING_ALIASES))
        raise ConfigError(f"unknown setting {text!r}; choose from {choices}") from exc


def _checkpoint_label(ckpt: Checkpoint, taken: set) -> str:
    label = ckpt.setting
    k = 2
    while label in taken:
        label = f"{ckpt.setting}#{k}"
        k += 1
    taken.add(label)
    return label


# ---------------------------------------------------------------------------
# gen / build-dataset / split
# ---------------------------------------------------------------------------

GEN_FLAGS = {
    "images": "n_images",
    "foil_images": "n_foil_images",
    "vqa_per_image": "vqa_per_image",
    "referit_per_image": "referit_per_image",
    "guesswhat_per_image": "guesswhat_per_image",
    "foil_captions": "foil_captions_per_image",
    "visual_dim": "visual_dim",
    "language_dim": "language_dim",
    "latent_dim": "latent_dim",
    "categories": "n_categories",
    "signal": "cross_modal_signal",
    "foil_scale": "foil_perturbation_scale",
}


def _setup_gen(o: _Options) -> None:
    base = SyntheticSpec()
    o.add("--out", default="data", help="output directory")
    _seed_opt(o)
    for flag, attr in GEN_FLAGS.items():
        default = getattr(base, attr)
        kind = float if isinstance(default, float) else int
        o.add("--" + flag.replace("_", "-"), type=kind, default=default, help=f"default {default}")


def cmd_gen(opts: dict) -> int:
    spec = SyntheticSpec(seed=opts["seed"], **{attr: opts[flag] for flag, attr in GEN_FLAGS.items()})
    corpus = generate_synthetic(spec)
    out = _out_dir(opts["out"])
    save_bank(corpus.visual, out / "visual.hube")
    save_bank(corpus.language, out / "language.hube")
    for task, records in corpus.datasets.items():
        save_dataset(records, out / f"{task.lower()}.jsonl")
    save_dataset(corpus.foil, out / "foil.jsonl")
    cats = {c: {"language": corpus.category_language[c], "visual": corpus.category_visual[c]}
            for c in sorted(corpus.category_visual)}
    atomic_write_bytes(out / "categories.json", (json.dumps(cats, indent=1, sort_keys=True) + "\n").encode())
    counts = ", ".join(f"{t} {len(r)}" for t, r in corpus.datasets.items())
    print(f"gen: {spec.n_images} images, {spec.foil_images} FOIL images; {counts}, FOIL {len(corpus.foil)}; "
          f"visual bank {corpus.visual.rows}x{corpus.visual.dim}, "
          f"language bank {corpus.language.rows}x{corpus.language.dim} -> {out}")
    return 0


def _setup_build(o: _Options) -> None:
    o.add("--data", default="data", help="directory holding vqa/referit/guesswhat .jsonl")
    o.add("--out", help="output directory (default: --data)")
    _seed_opt(o)


def cmd_build_dataset(opts: dict) -> int:
    data = Path(opts["data"])
    paths = {t: data / f"{t.lower()}.jsonl" for t in RETRIEVAL_TASKS}
    _require_files(*paths.values())
    raw = {t: load_dataset(p) for t, p in paths.items()}
    common = build_common_dataset(raw, seed=opts["seed"])
    out = _out_dir(opts["out"] or data)
    for t, records in common.items():
        save_dataset(records, out / f"common_{t.lower()}.jsonl")
    n_img = len({r.image_id for r in common[RETRIEVAL_TASKS[0]]})
    print(f"build-dataset: {n_img} common images; "
          + ", ".join(f"{t} {len(common[t])}" for t in RETRIEVAL_TASKS))
    return 0


def _setup_split(o: _Options) -> None:
    o.add("--input", help="dataset .jsonl to split by image")
    o.add("--fractions", type=_csv_list(float), default=[0.8, 0.1, 0.1],
          help="comma-separated train[,val[,test]] fractions")
    o.add("--out", help="output directory (default: next to --input)")
    _seed_opt(o)


def cmd_split(opts: dict) -> int:
    _require(opts, "input")
    src = Path(opts["input"])
    _require_files(src)
    split = split_by_image(load_dataset(src), opts["fractions"], opts["seed"])
    out = _out_dir(opts["out"] or src.parent)
    parts = [("train", split.train), ("val", split.validation), ("test", split.test)]
    written = []
    for name, records in parts[:len(opts["fractions"])]:
        save_dataset(records, out / f"{src.stem}_{name}.jsonl")
        written.append(f"{name} {len(records)}")
    print(f"split: {src.name} -> " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------
# train / probe
# ---------------------------------------------------------------------------

def _setup_train(o: _Options) -> None:
    o.add("--task", choices=sorted(TASK_NAMES), help="vqa, referit, guesswhat (pre-training) or foil")
    o.add("--setting", help="pretrained (retrieval tasks); random2, random, fully-foil, "
                            "or pretrained-<task> with --encoder-from (foil)")
    o.add("--train", help="training .jsonl")
    o.add("--val", help="validation .jsonl")
    o.add("--test", help="optional test .jsonl, evaluated with the best checkpoint")
    o.add("--encoder-from", help="checkpoint supplying a pre-trained encoder")
    o.add("--out", help="run directory")
    _bank_opts(o)
    _train_opts(o)
    _replica_opt(o)
    _seed_opt(o)


def _setup_probe(o: _Options) -> None:
    o.add("--from", dest="from_", help="pre-training checkpoint whose encoder is probed")
    o.add("--train", help="FOIL training .jsonl")
    o.add("--val", help="FOIL validation .jsonl")
    o.add("--test", help="optional FOIL test .jsonl")
    o.add("--out", help="run directory")
    _bank_opts(o)
    _train_opts(o)
    _replica_opt(o)
    _seed_opt(o)


def _foil_metrics(ckpt: Checkpoint, test, visual, language) -> dict:
    acc = evaluate_foil(ckpt, test, visual, language)
    return {"overall": acc.overall, "original": acc.original, "foiled": acc.foiled, "n_test": acc.n}


def _finish_run(command: str, opts: dict, ckpt: Checkpoint, metrics: dict) -> int:
    out = _out_dir(opts["out"])
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    atomic_write_bytes(out / "metrics.csv", ckpt.metrics_csv().encode("utf-8"))
    metrics = {"optimizer_steps": ckpt.optimizer_steps, "epochs": ckpt.epoch,
               "best_epoch": ckpt.best_epoch, "best_val_loss": ckpt.best_val_loss, **metrics}
    report = AnalysisReport.create(command, ckpt.setting, metrics, [CHECKPOINT_NAME, "metrics.csv", REPORT_NAME],
                                   opts)
    report.write(out)
    shown = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items())
    print(f"{command}: {ckpt.task} {ckpt.setting}: {shown} -> {out}")
    return 0


def _probe_run(command: str, opts: dict, setting: RunSetting, encoder_ckpt: Checkpoint | None) -> int:
    _require(opts, "train", "val", "out")
    _require_files(opts["train"], opts["val"], opts["test"])
    visual, language = _banks(opts)
    cfg = _train_config(opts)
    if encoder_ckpt is not None:
        dims = encoder_ckpt.encoder.dims
        encoder = encoder_ckpt.encoder
    else:
        dims, encoder = _dims(opts, visual, language), None
    ckpt = train_foil_probe(setting, load_dataset(opts["train"]), load_dataset(opts["val"]),
                            visual, language, cfg, dims, encoder)
    metrics = _foil_metrics(ckpt, load_dataset(opts["test"]), visual, language) if opts["test"] else {}
    return _finish_run(command, opts, ckpt, metrics)


def _replicated(fn: Callable[[dict], int]) -> Callable[[dict], int]:
    def run(opts: dict) -> int:
        reps = opts.get("replicas") or 1
        if reps < 1:
            raise ConfigError("--replicas must be >= 1")
        if reps == 1:
            return fn(opts)
        _require(opts, "out")
        for i in range(reps):
            code = fn({**opts, "seed": opts["seed"] + i, "replicas": 1, "out": str(Path(opts["out"]) / f"r{i}")})
            if code:
                return code
        return 0
    return run


@_replicated
def cmd_train(opts: dict) -> int:
    _require(opts, "task", "setting")
    task = TASK_NAMES[opts["task"]]
    if task != "FOIL":
        if opts["setting"] not in ("pretrained", RunSetting.pretrained_for(task).value):
            raise ConfigError(f"task {opts['task']} trains a retrieval model; use --setting pretrained")
        _require(opts, "train", "val", "out")
        _require_files(opts["train"], opts["val"], opts["test"])
        visual, language = _banks(opts)
        cfg = _train_config(opts)
        dims = _dims(opts, visual, language)
        ckpt = pretrain_task(task, load_dataset(opts["train"]), load_dataset(opts["val"]),
                             visual, language, cfg, dims)
        metrics = evaluate_retrieval(ckpt, load_dataset(opts["test"]), visual, language) if opts["test"] else {}
        return _finish_run("train", opts, ckpt, metrics)
    setting = parse_setting(opts["setting"]) if opts["setting"] != "pretrained" else None
    encoder_ckpt = None
    if opts["encoder_from"]:
        _require_files(opts["encoder_from"])
        encoder_ckpt = load_checkpoint(opts["encoder_from"])
        if setting is None:
            setting = RunSetting.pretrained_for(encoder_ckpt.task)
    if setting is None:
        raise ConfigError("--setting pretrained on foil needs --encoder-from")
    if setting.pretrain_task is not None and encoder_ckpt is None:
        raise ConfigError(f"setting {setting.value} needs --encoder-from")
    return _probe_run("train", opts, setting, encoder_ckpt)


@_replicated
def cmd_probe(opts: dict) -> int:
    _require(opts, "from_")
    _require_files(opts["from_"])
    source = load_checkpoint(opts["from_"])
    if source.task not in RETRIEVAL_TASKS:
        raise ConfigError(f"{opts['from_']}: expected a pre-training checkpoint, got task {source.task}")
    return _probe_run("probe", opts, RunSetting.pretrained_for(source.task), source)


# ---------------------------------------------------------------------------
# curve / ablate
# ---------------------------------------------------------------------------

def _setup_series(o: _Options) -> None:
    o.add("--setting", action="append", help="random2, random or fully-foil (repeatable)")
    o.add("--from", dest="from_", action="append", help="pre-training checkpoint (repeatable)")
    o.add("--train", help="FOIL training .jsonl")
    o.add("--val", help="FOIL validation .jsonl")
    o.add("--test", help="FOIL test .jsonl")
    o.add("--out", help="output directory")
    o.add("--jobs", type=int, default=1, help="cells run concurrently")
    _bank_opts(o)
    _train_opts(o)
    _seed_opt(o)


def _series(opts: dict, visual, language):
    """``(setting, encoder or None, dims)`` per requested series."""
    out = []
    for name in opts["setting"] or []:
        setting = parse_setting(name)
        if setting.pretrain_task is not None:
            raise ConfigError(f"{name}: give pre-trained encoders with --from")
        out.append((setting, None))
    for path in opts["from_"] or []:
        _require_files(path)
        ck = load_checkpoint(path)
        out.append((RunSetting.pretrained_for(ck.task), ck.encoder))
    if not out:
        raise ConfigError("give at least one --setting or --from")
    dims = {enc.dims for _, enc in out if enc is not None}
    if len(dims) > 1:
        raise ConfigError("pre-trained encoders have different dimensions")
    dims = dims.pop() if dims else _dims(opts, visual, language)
    return out, dims


def _curve_cell(args):
    setting, encoder, data, visual, language, cfg, dims, horizon = args
    train, val, test = data
    return pr.learning_curve(setting, train, val, test, visual, language, cfg, dims, encoder, horizon)


def _setup_curve(o: _Options) -> None:
    _setup_series(o)
    o.add("--horizon", type=int, default=50, help="epochs after epoch 0")


def _series_data(opts: dict):
    _require(opts, "train", "val", "test", "out")
    _require_files(opts["train"], opts["val"], opts["test"])
    return tuple(load_dataset(opts[k]) for k in ("train", "val", "test"))


def cmd_curve(opts: dict) -> int:
    data = _series_data(opts)
    visual, language = _banks(opts)
    cfg = _train_config(opts)
    series, dims = _series(opts, visual, language)
    cells = [(s, enc, data, visual, language, cfg, dims, opts["horizon"]) for s, enc in series]
    points = [p for res in pr.run_cells(_curve_cell, cells, opts["jobs"]) for p in res]
    out = _out_dir(opts["out"])
    pr.write_curve_csv(out / "epochs.csv", points)
    metrics = {f"{p.series}@{p.x}": p.y for p in points if p.x in (0, 1, opts["horizon"])}
    AnalysisReport.create("curve", "", metrics, ["epochs.csv", REPORT_NAME], opts).write(out)
    print(f"curve: {len(series)} series x {opts['horizon'] + 1} points -> {out / 'epochs.csv'}")
    return 0


def _setup_ablate(o: _Options) -> None:
    _setup_series(o)
    o.add("--fractions", type=_csv_list(float), default=list(pr.DEFAULT_FRACTIONS))


def cmd_ablate(opts: dict) -> int:
    data = _series_data(opts)
    visual, language = _banks(opts)
    cfg = _train_config(opts)
    series, dims = _series(opts, visual, language)
    fractions = pr._check_fractions(opts["fractions"])
    train, val, test = data
    cells = [(s, f, train, val, test, visual, language, cfg, dims, enc) for s, enc in series for f in fractions]
    points = pr.run_cells(pr._ablation_cell, cells, opts["jobs"])
    out = _out_dir(opts["out"])
    pr.write_curve_csv(out / "datasize.csv", points)
    metrics = {f"{p.series}@{p.x}": p.y for p in points}
    AnalysisReport.create("ablate", "", metrics, ["datasize.csv", REPORT_NAME], opts).write(out)
    print(f"ablate: {len(series)} series x {len(fractions)} fractions -> {out / 'datasize.csv'}")
    return 0


# ---------------------------------------------------------------------------
# confidence / correlate / regress
# ---------------------------------------------------------------------------

def _setup_eval(o: _Options, multi: bool = True) -> None:
    if multi:
        o.add("--ckpt", action="append", help="FOIL probe checkpoint (repeatable)")
    else:
        o.add("--ckpt", help="FOIL probe checkpoint")
    o.add("--test", help="FOIL test .jsonl")
    o.add("--out", help="output directory")
    _bank_opts(o)
    _seed_opt(o)


def _load_ckpts(paths) -> list[Checkpoint]:
    paths = paths if isinstance(paths, list) else [paths]
    _require_files(*paths)
    return [load_checkpoint(p) for p in paths]


def cmd_confidence(opts: dict) -> int:
    _require(opts, "ckpt", "test", "out")
    _require_files(opts["test"])
    visual, language = _banks(opts)
    test = load_dataset(opts["test"])
    points, metrics, taken = [], {}, set()
    for ck in _load_ckpts(opts["ckpt"]):
        sweep = pr.confidence_sweep(ck, test, visual, language)
        sweep.series = _checkpoint_label(ck, taken)
        points += sweep.points()
        metrics[f"{sweep.series}.auc"] = sweep.auc
    out = _out_dir(opts["out"])
    pr.write_curve_csv(out / "confidence.csv", points)
    AnalysisReport.create("confidence", "", metrics, ["confidence.csv", REPORT_NAME], opts).write(out)
    for k, v in metrics.items():
        print(f"confidence: {k} = {v:.4f}")
    return 0


def _setup_correlate(o: _Options) -> None:
    _setup_eval(o)
    o.add("--covariates", type=_csv_list(str), default=["caption_length"])


def cmd_correlate(opts: dict) -> int:
    _require(opts, "ckpt", "test", "out")
    _require_files(opts["test"])
    visual, language = _banks(opts)
    test = load_dataset(opts["test"])
    rows, taken = [], set()
    for ck in _load_ckpts(opts["ckpt"]):
        label = _checkpoint_label(ck, taken)
        bits = pr.success_bits(ck, test, visual, language)
        for cov in opts["covariates"]:
            rows.append((label, cov, pr.correlate_success(bits, cov, [r.meta for r in test])))
    out = _out_dir(opts["out"])
    pr.write_correlations_csv(out / "correlations.csv", rows)
    metrics = {f"{s}.{c}.{k}": r[k] for s, c, r in rows for k in ("pearson", "spearman")}
    AnalysisReport.create("correlate", "", metrics, ["correlations.csv", REPORT_NAME], opts).write(out)
    for s, c, r in rows:
        print(f"correlate: {s} {c}: pearson={r['pearson']:.4f} spearman={r['spearman']:.4f} n={r['n']}")
    return 0


def _setup_regress(o: _Options) -> None:
    _setup_eval(o, multi=False)
    o.add("--features", type=_csv_list(str), default=["caption_length", "num_objects"])


def cmd_regress(opts: dict) -> int:
    _require(opts, "ckpt", "test", "out")
    _require_files(opts["test"])
    visual, language = _banks(opts)
    test = load_dataset(opts["test"])
    (ck,) = _load_ckpts(opts["ckpt"])
    bits = pr.success_bits(ck, test, visual, language)
    for r in test:
        for f in opts["features"]:
            if f not in r.meta:
                raise pr.MissingCovariate(f"feature {f!r} missing on {r.language_id}")
    X = np.array([[float(r.meta[f]) for f in opts["features"]] for r in test])
    fit = pr.logistic_success_regression(bits, X, feature_names=opts["features"])
    out = _out_dir(opts["out"])
    rows = [("(intercept)", fit.intercept)] + list(zip(opts["features"], map(float, fit.coefficients)))
    _write_csv(out / "regression.csv", ("feature", "coefficient"), rows)
    metrics = {name: v for name, v in rows}
    metrics.update(separated=fit.separated, converged=fit.converged, steps=fit.steps)
    AnalysisReport.create("regress", ck.setting, metrics, ["regression.csv", REPORT_NAME], opts).write(out)
    print(f"regress: {ck.setting}: " + ", ".join(f"{n}={v:+.4f}" for n, v in rows)
          + (" [separated]" if fit.separated else ""))
    return 0


# ---------------------------------------------------------------------------
# rsa / nn-overlap / density
# ---------------------------------------------------------------------------

def _setup_rsa(o: _Options) -> None:
    o.add("--ckpt", action="append", help="checkpoint whose encoder is compared (repeatable)")
    o.add("--data", help="FOIL .jsonl supplying image/caption pairs")
    o.add("--sample-size", type=int, default=5000, help="records with distinct images")
    o.add("--perturb", choices=an.PERTURBATIONS, help="also compare against perturbed inputs")
    o.add("--out", help="output directory")
    _bank_opts(o)
    _seed_opt(o)


def cmd_rsa(opts: dict) -> int:
    _require(opts, "ckpt", "data", "out")
    _require_files(opts["data"])
    visual, language = _banks(opts)
    records = load_dataset(opts["data"])
    sample = an.unique_image_sample(records, opts["sample_size"], opts["seed"])
    ckpts = _load_ckpts(opts["ckpt"])
    taken: set = set()
    sets = [an.encode_records(sample, ck.encoder, visual, language, _checkpoint_label(ck, taken)) for ck in ckpts]
    sets.append(an.RepresentationSet("visual", visual.gather(r.image_id for r in sample)))
    sets.append(an.RepresentationSet("language", language.gather(r.language_id for r in sample)))
    mat = an.rsa_matrix(sets)
    out = _out_dir(opts["out"])
    labels = [s.label for s in sets]
    _write_csv(out / "rsa_matrix.csv", [""] + labels,
               ([labels[i]] + [float(v) for v in mat[i]] for i in range(len(labels))))
    files = ["rsa_matrix.csv", REPORT_NAME]
    metrics = {f"{labels[i]}~{labels[j]}": float(mat[i, j])
               for i in range(len(labels)) for j in range(i + 1, len(labels))}
    if opts["perturb"]:
        variant = an.perturb_inputs(sample, opts["perturb"], opts["seed"], pool=records)
        rows = []
        for ck, base in zip(ckpts, sets):
            other = an.encode_records(variant, ck.encoder, visual, language, base.label)
            rows.append((base.label, opts["perturb"], an.rsa(base, other), an.mean_paired_cosine(base, other)))
            metrics[f"{base.label}.{opts['perturb']}.rsa"] = rows[-1][2]
            metrics[f"{base.label}.{opts['perturb']}.mean_cosine"] = rows[-1][3]
        _write_csv(out / "rsa_perturb.csv", ("space", "perturbation", "rsa", "mean_cosine"), rows)
        files.append("rsa_perturb.csv")
    AnalysisReport.create("rsa", "", metrics, files, opts).write(out)
    print(f"rsa: {len(sample)} items, {len(labels)} spaces -> {out / 'rsa_matrix.csv'}")
    return 0


def _setup_nn(o: _Options) -> None:
    o.add("--ckpt", action="append", help="checkpoint whose encoder is analysed (repeatable)")
    o.add("--categories", help="categories.json: name -> {language: id, visual: [ids]}")
    o.add("--k", type=_csv_list(int), default=[1, 10])
    o.add("--out", help="output directory")
    _bank_opts(o)
    _seed_opt(o)


def cmd_nn_overlap(opts: dict) -> int:
    _require(opts, "ckpt", "categories", "out")
    _require_files(opts["categories"])
    visual, language = _banks(opts)
    try:
        cats = json.loads(Path(opts["categories"]).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{opts['categories']}: {exc}") from exc
    lang = {c: language.vector(v["language"]) for c, v in cats.items()}
    vis = {c: visual.gather(v["visual"]) if v["visual"] else np.empty((0, visual.dim)) for c, v in cats.items()}
    rows, taken = [], set()
    for ck in _load_ckpts(opts["ckpt"]):
        label = _checkpoint_label(ck, taken)
        spaces = an.nn_category_protocol(lang, vis, ck.encoder, label)
        for space, by_k in spaces.overlaps(opts["k"]).items():
            rows += [(label, space, k, v) for k, v in by_k.items()]
    out = _out_dir(opts["out"])
    _write_csv(out / "nn_overlap.csv", ("encoder", "space", "k", "overlap"), rows)
    metrics = {f"{e}.{s}.k{k}": v for e, s, k, v in rows}
    AnalysisReport.create("nn-overlap", "", metrics, ["nn_overlap.csv", REPORT_NAME], opts).write(out)
    for e, s, k, v in rows:
        print(f"nn-overlap: {e} vs {s} k={k}: {v:.4f}")
    return 0


def _setup_density(o: _Options) -> None:
    o.add("--bank", action="append", help="embedding bank to measure (repeatable)")
    o.add("--ckpt", action="append", help="checkpoint whose hub space is measured on --data (repeatable)")
    o.add("--data", help=".jsonl supplying image/caption pairs for --ckpt")
    o.add("--sample-size", type=int, default=5000)
    o.add("--out", help="output directory")
    _bank_opts(o)
    _seed_opt(o)


def cmd_density(opts: dict) -> int:
    _require(opts, "out")
    rows = []
    for path in opts["bank"] or []:
        _require_files(path)
        bank = load_bank(path)
        rows.append((Path(path).stem, an.density(bank.data, opts["sample_size"], opts["seed"]),
                     min(bank.rows, opts["sample_size"])))
    if opts["ckpt"]:
        _require(opts, "data")
        _require_files(opts["data"])
        visual, language = _banks(opts)
        sample = an.unique_image_sample(load_dataset(opts["data"]), opts["sample_size"], opts["seed"], label=None)
        taken: set = set()
        for ck in _load_ckpts(opts["ckpt"]):
            reps = an.encode_records(sample, ck.encoder, visual, language, _checkpoint_label(ck, taken))
            rows.append((reps.label, an.density(reps, opts["sample_size"], opts["seed"]), len(reps)))
    if not rows:
        raise ConfigError("give at least one --bank or --ckpt")
    out = _out_dir(opts["out"])
    _write_csv(out / "density.csv", ("space", "density", "n"), rows)
    AnalysisReport.create("density", "", {r[0]: r[1] for r in rows}, ["density.csv", REPORT_NAME], opts).write(out)
    for label, d, n in rows:
        print(f"density: {label}: {d:.4f} (n={n})")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _setup_report(o: _Options) -> None:
    o.add("--runs", help="directory of run directories")
    o.add("--out", help="output directory (default: --runs)")
    _seed_opt(o)


def collect_runs(root: Path) -> dict[str, list[dict]]:
    """Completed FOIL runs under ``root`` grouped by setting, best first.

    The best run of a setting is the one with the lowest validation loss.
    """
    groups: dict[str, list[dict]] = {}
    for path in sorted(root.rglob(REPORT_NAME)):
        rep = json.loads(path.read_text(encoding="utf-8"))
        m = rep.get("metrics", {})
        if rep.get("setting") not in SETTING_ORDER or "overall" not in m:
            continue
        rep["dir"] = path.parent.relative_to(root).as_posix()
        groups.setdefault(rep["setting"], []).append(rep)
    for runs in groups.values():
        runs.sort(key=lambda r: (r["metrics"].get("best_val_loss", float("inf")), r["dir"]))
    return groups


def format_table(groups: dict[str, list[dict]]) -> str:
    lines = [f"{'setting':<22}{'overall':>9}{'original':>10}{'foiled':>9}"]
    for s in SETTING_ORDER:
        if s in groups:
            m = groups[s][0]["metrics"]
            lines.append(f"{s:<22}{100 * m['overall']:>9.2f}{100 * m['original']:>10.2f}{100 * m['foiled']:>9.2f}")
    return "\n".join(lines) + "\n"


def cmd_report(opts: dict) -> int:
    _require(opts, "runs")
    root = Path(opts["runs"])
    if not root.is_dir():
        raise IoError(f"{root}: no such directory")
    groups = collect_runs(root)
    if not groups:
        raise NoRuns(f"{root}: no completed FOIL runs")
    out = _out_dir(opts["out"] or root)
    table = format_table(groups)
    atomic_write_bytes(out / "table.txt", table.encode("utf-8"))
    ordered = [s for s in SETTING_ORDER if s in groups]
    keys = ("overall", "original", "foiled")
    rows = []
    for s in ordered:
        best = groups[s][0]
        mean_overall = float(np.mean([r["metrics"]["overall"] for r in groups[s]]))
        rows.append((s, *(float(best["metrics"][k]) for k in keys), len(groups[s]), mean_overall, best["dir"]))
    _write_csv(out / "table.csv", ("setting", *keys, "runs", "mean_overall", "best_run"), rows)
    metrics = {f"{r[0]}.{k}": v for r in rows for k, v in zip(keys + ("runs", "mean_overall"), r[1:6])}
    config = {"runs": {s: [r["config_hash"] for r in groups[s]] for s in ordered}}
    summary = AnalysisReport.create("report", "", metrics, ["table.txt", "table.csv", "summary.json"], config)
    atomic_write_bytes(out / "summary.json", summary.to_json().encode("utf-8"))
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable[[_Options], None], Callable[[dict], int], str]] = {
    "gen": (_setup_gen, cmd_gen, "generate a synthetic corpus"),
    "build-dataset": (_setup_build, cmd_build_dataset, "balance the retrieval tasks over common images"),
    "split": (_setup_split, cmd_split, "split a dataset by image"),
    "train": (_setup_train, cmd_train, "pre-train a retrieval model or train a FOIL probe"),
    "probe": (_setup_probe, cmd_probe, "train a FOIL probe on a pre-trained encoder"),
    "curve": (_setup_curve, cmd_curve, "FOIL test accuracy per training epoch"),
    "ablate": (_setup_ablate, cmd_ablate, "FOIL accuracy versus training-set fraction"),
    "confidence": (_setup_eval, cmd_confidence, "accuracy across confidence thresholds"),
    "rsa": (_setup_rsa, cmd_rsa, "representation similarity analysis"),
    "nn-overlap": (_setup_nn, cmd_nn_overlap, "category nearest-neighbour overlap"),
    "density": (_setup_density, cmd_density, "average pairwise cosine of a space"),
    "correlate": (_setup_correlate, cmd_correlate, "correlate FOIL success with covariates"),
    "regress": (_setup_regress, cmd_regress, "logistic regression of FOIL success"),
    "report": (_setup_report, cmd_report, "accuracy table over completed runs"),
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Options]]:
    parser = argparse.ArgumentParser(prog="hubprobe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}
    for name, (setup, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML file of option values")
        o = _Options(p)
        setup(o)
        registry[name] = o
    return parser, registry


def _casts(parser: argparse.ArgumentParser) -> dict[str, Callable]:
    out = {}
    for action in parser._actions:
        if callable(action.type):
            out[action.dest] = action.type
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser, registry = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    opts_spec = registry[args.command]
    try:
        config = _load_config(args.config, args.command)
        opts = resolve_options(args, opts_spec.defaults, config, _casts(opts_spec.parser))
        return COMMANDS[args.command][1](opts)
    except HubProbeError as exc:
        print(f"hubprobe {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
