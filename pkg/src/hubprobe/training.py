"""Training protocols: retrieval pre-training, FOIL probing under the
four settings, early stopping, evaluation and checkpoint files.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core_math as cm
from . import heads as hd
from .data import DatapointRecord, EmbeddingBank, atomic_write_bytes
from .encoder import EncoderDims, EncoderParams, encode, encode_backward, encoder_from_seed
from .errors import (
    BadMagic,
    ConfigError,
    CorruptIndex,
    DataError,
    EmptyDataset,
    IoError,
    NumericError,
    VersionUnsupported,
)


class RunSetting(str, Enum):
    RANDOM2 = "random2"
    RANDOM = "random"
    PRETRAINED_VQA = "pretrained-vqa"
    PRETRAINED_REFERIT = "pretrained-referit"
    PRETRAINED_GUESSWHAT = "pretrained-guesswhat"
    FULLY_FOIL = "fully-foil"

    @property
    def pretrain_task(self) -> str | None:
        return {
            RunSetting.PRETRAINED_VQA: "VQA",
            RunSetting.PRETRAINED_REFERIT: "ReferIt",
            RunSetting.PRETRAINED_GUESSWHAT: "GuessWhat",
        }.get(self)

    @property
    def encoder_frozen(self) -> bool:
        return self is not RunSetting.FULLY_FOIL

    @property
    def trains_head(self) -> bool:
        return self is not RunSetting.RANDOM2

    @classmethod
    def pretrained_for(cls, task: str) -> "RunSetting":
        return {"VQA": cls.PRETRAINED_VQA, "ReferIt": cls.PRETRAINED_REFERIT,
                "GuessWhat": cls.PRETRAINED_GUESSWHAT}[task]


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-4
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    margin: float = 0.1
    aggregation: str = "mean"
    d_hid: int | None = None  # retrieval MLP width; defaults to d_h
    use_bias: bool = True
    eval_every: int = 1

    def validate(self) -> None:
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("batch_size, patience, max_epochs and eval_every must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    @property
    def loss(self) -> hd.LossConfig:
        return hd.LossConfig(self.margin, self.aggregation)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopState:
    patience: int = 10
    max_epochs: int = 100
    best_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    epoch: int = 0
    improved: bool = False


def early_stop_update(state: EarlyStopState, validation_loss: float) -> str:
    """Record one epoch's validation loss; return ``"continue"`` or ``"stop"``.

    Only a strictly lower loss counts as improvement.
    """
    if not math.isfinite(validation_loss):
        raise NumericError(f"non-finite validation loss {validation_loss}")
    state.epoch += 1
    state.improved = validation_loss < state.best_loss
    if state.improved:
        state.best_loss = validation_loss
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= state.patience or state.epoch >= state.max_epochs:
        return "stop"
    return "continue"


# ---------------------------------------------------------------------------
# array views of datasets
# ---------------------------------------------------------------------------

@dataclass
class RetrievalArrays:
    V: np.ndarray
    L: np.ndarray
    candidates: np.ndarray  # (n, C, d)
    gt: np.ndarray
    mask: np.ndarray  # (n, C) real candidates

    def __len__(self) -> int:
        return len(self.gt)

    def take(self, idx) -> "RetrievalArrays":
        return RetrievalArrays(self.V[idx], self.L[idx], self.candidates[idx], self.gt[idx], self.mask[idx])


@dataclass
class FoilArrays:
    V: np.ndarray
    L: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "FoilArrays":
        return FoilArrays(self.V[idx], self.L[idx], self.y[idx])


def retrieval_arrays(records: Sequence[DatapointRecord], visual: EmbeddingBank,
                     language: EmbeddingBank) -> RetrievalArrays:
    if not records:
        raise EmptyDataset("no retrieval records")
    task = records[0].task
    if task == "FOIL" or any(r.task != task for r in records):
        raise DataError("retrieval arrays need records of a single retrieval task")
    cand_bank = language if task == "VQA" else visual
    n = len(records)
    c_max = max(len(r.candidate_ids) for r in records)
    cands = np.ones((n, c_max, cand_bank.dim))
    mask = np.zeros((n, c_max), dtype=bool)
    for i, r in enumerate(records):
        c = len(r.candidate_ids)
        cands[i, :c] = cand_bank.gather(r.candidate_ids)
        mask[i, :c] = True
    return RetrievalArrays(
        visual.gather(r.image_id for r in records),
        language.gather(r.language_id for r in records),
        cands,
        np.array([r.gt_index for r in records], dtype=np.int64),
        mask,
    )


def foil_arrays(records: Sequence[DatapointRecord], visual: EmbeddingBank,
                language: EmbeddingBank) -> FoilArrays:
    if not records:
        raise EmptyDataset("no FOIL records")
    if any(r.task != "FOIL" for r in records):
        raise DataError("FOIL arrays need FOIL records")
    return FoilArrays(
        visual.gather(r.image_id for r in records),
        language.gather(r.language_id for r in records),
        np.array([r.label_index for r in records], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _chunks(n: int, size: int = 4096):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


class RetrievalModel:
    def __init__(self, encoder: EncoderParams, head: hd.RetrievalHead, loss_cfg: hd.LossConfig):
        self.encoder = encoder
        self.head = head
        self.loss_cfg = loss_cfg

    def params(self) -> dict[str, np.ndarray]:
        out = {f"enc.{k}": self.encoder.tensors[k] for k in self.encoder.trainable_names()}
        out.update({f"head.{k}": v for k, v in self.head.tensors.items()})
        return out

    def loss_and_grads(self, batch: RetrievalArrays):
        h, ecache = encode(batch.V, batch.L, self.encoder)
        g, hcache = hd.head_forward(h, self.head)
        loss, gg = hd.retrieval_loss_batch(g, batch.candidates, batch.gt, self.loss_cfg, batch.mask)
        head_grads, gh = hd.head_backward(gg, hcache)
        enc_grads, _, _ = encode_backward(gh, ecache)
        grads = {f"enc.{k}": v for k, v in enc_grads.items()}
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return loss, grads

    def generate(self, V, L) -> np.ndarray:
        h, _ = encode(V, L, self.encoder)
        return hd.head_forward(h, self.head)[0]

    def loss(self, data: RetrievalArrays) -> float:
        total = 0.0
        for sl in _chunks(len(data)):
            b = data.take(sl)
            g = self.generate(b.V, b.L)
            total += hd.retrieval_loss_batch(g, b.candidates, b.gt, self.loss_cfg, b.mask)[0] * len(b)
        return total / len(data)

    def ranks(self, data: RetrievalArrays) -> np.ndarray:
        out = []
        for sl in _chunks(len(data)):
            b = data.take(sl)
            cos = hd.candidate_cosines(self.generate(b.V, b.L), b.candidates, b.mask)
            out.append(hd.gt_ranks(cos, b.gt))
        return np.concatenate(out)

    def metric(self, data: RetrievalArrays) -> float:
        return float(np.mean(self.ranks(data) == 1))

    def touch(self) -> None:
        self.encoder.touch()
        self.head.touch()


class FoilModel:
    """Encoder + FOIL head. A frozen encoder's outputs are computed once."""

    def __init__(self, encoder: EncoderParams, head: hd.FoilHead, frozen: bool):
        self.encoder = encoder
        self.head = head
        self.frozen = frozen
        self._h_cache: dict[int, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        out = {f"head.{k}": v for k, v in self.head.tensors.items()}
        if not self.frozen:
            out.update({f"enc.{k}": self.encoder.tensors[k] for k in self.encoder.trainable_names()})
        return out

    def hidden(self, V, L) -> np.ndarray:
        return np.concatenate([encode(V[sl], L[sl], self.encoder)[0] for sl in _chunks(len(V))])

    def _frozen_hidden(self, data: FoilArrays) -> np.ndarray:
        key = id(data.V)
        if key not in self._h_cache:
            self._h_cache[key] = (data, self.hidden(data.V, data.L))
        return self._h_cache[key][1]

    def loss_and_grads(self, batch):
        if self.frozen:
            h, y = batch
            _, logits, hcache = hd.foil_forward(h, self.head)
            loss, gl = hd.foil_loss(logits, y)
            head_grads, _ = hd.foil_backward(gl, hcache)
            return loss, {f"head.{k}": v for k, v in head_grads.items()}
        h, ecache = encode(batch.V, batch.L, self.encoder)
        _, logits, hcache = hd.foil_forward(h, self.head)
        loss, gl = hd.foil_loss(logits, batch.y)
        head_grads, gh = hd.foil_backward(gl, hcache)
        enc_grads, _, _ = encode_backward(gh, ecache)
        grads = {f"head.{k}": v for k, v in head_grads.items()}
        grads.update({f"enc.{k}": v for k, v in enc_grads.items()})
        return loss, grads

    def batches_from(self, data: FoilArrays):
        """Return a ``take(idx)`` view suited to ``loss_and_grads``."""
        if not self.frozen:
            return data
        H = self._frozen_hidden(data)
        return _HiddenView(H, data.y)

    def probabilities(self, data: FoilArrays) -> np.ndarray:
        H = self._frozen_hidden(data) if self.frozen else self.hidden(data.V, data.L)
        return hd.foil_forward(H, self.head)[0]

    def loss(self, data: FoilArrays) -> float:
        H = self._frozen_hidden(data) if self.frozen else self.hidden(data.V, data.L)
        _, logits, _ = hd.foil_forward(H, self.head)
        return hd.foil_loss(logits, data.y)[0]

    def metric(self, data: FoilArrays) -> float:
        return foil_accuracy(self.probabilities(data), data.y).overall

    def touch(self) -> None:
        self.head.touch()
        if not self.frozen:
            self.encoder.touch()


@dataclass
class _HiddenView:
    H: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx):
        return self.H[idx], self.y[idx]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class Checkpoint:
    setting: str
    task: str
    seed: int
    encoder: EncoderParams
    head: hd.RetrievalHead | hd.FoilHead
    optimizer: cm.AdamState
    epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    log: list[EpochRecord] = field(default_factory=list)
    optimizer_steps: int = 0
    frozen_encoder: bool = False
    config: dict = field(default_factory=dict)

    def metrics_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_metric"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_metric!r}" for r in self.log]
        return "\n".join(lines) + "\n"


CKPT_MAGIC = b"HUBC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")


def _ckpt_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {f"enc.{k}": v for k, v in ckpt.encoder.tensors.items()}
    out.update({f"head.{k}": v for k, v in ckpt.head.tensors.items()})
    out.update({f"adam.m.{k}": v for k, v in ckpt.optimizer.m.items()})
    out.update({f"adam.v.{k}": v for k, v in ckpt.optimizer.v.items()})
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _ckpt_tensors(ckpt)
    header = {
        "setting": ckpt.setting,
        "task": ckpt.task,
        "seed": ckpt.seed,
        "dims": asdict(ckpt.encoder.dims),
        "use_bias": ckpt.encoder.use_bias,
        "head_kind": "foil" if isinstance(ckpt.head, hd.FoilHead) else "retrieval",
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_val_loss": ckpt.best_val_loss if math.isfinite(ckpt.best_val_loss) else None,
        "log": [asdict(r) for r in ckpt.log],
        "optimizer_steps": ckpt.optimizer_steps,
        "frozen_encoder": ckpt.frozen_encoder,
        "config": ckpt.config,
        "adam": {k: getattr(ckpt.optimizer, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)) + blob + payload


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    try:
        atomic_write_bytes(path, checkpoint_bytes(ckpt))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise BadMagic(f"{path}: too short for a checkpoint")
    magic, version, hlen = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version} not supported")
    try:
        header = json.loads(raw[_CKPT_HEADER.size:_CKPT_HEADER.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptIndex(f"{path}: unreadable header") from exc
    try:
        return _checkpoint_from(header, raw, _CKPT_HEADER.size + hlen, path)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptIndex(f"{path}: malformed checkpoint header ({exc})") from exc


def _checkpoint_from(header: dict, raw: bytes, offset: int, path) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CorruptIndex(f"{path}: payload shorter than the tensor table")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CorruptIndex(f"{path}: {len(raw) - offset} trailing bytes after payload")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    encoder = EncoderParams(EncoderDims(**header["dims"]), group("enc."), header["use_bias"])
    head_t = group("head.")
    head = hd.FoilHead(head_t) if header["head_kind"] == "foil" else hd.RetrievalHead(head_t)
    adam = cm.AdamState(**header["adam"], m=group("adam.m."), v=group("adam.v."))
    best = header["best_val_loss"]
    return Checkpoint(
        setting=header["setting"], task=header["task"], seed=header["seed"],
        encoder=encoder, head=head, optimizer=adam,
        epoch=header["epoch"], best_epoch=header["best_epoch"],
        best_val_loss=math.inf if best is None else best,
        log=[EpochRecord(**r) for r in header["log"]],
        optimizer_steps=header["optimizer_steps"], frozen_encoder=header["frozen_encoder"],
        config=header["config"],
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _copy_optimizer(state: cm.AdamState) -> cm.AdamState:
    return cm.AdamState(state.lr, state.beta1, state.beta2, state.eps, state.t,
                        {k: v.copy() for k, v in state.m.items()},
                        {k: v.copy() for k, v in state.v.items()})


def run_epoch(model, train_view, optimizer: cm.AdamState, cfg: TrainConfig, epoch: int) -> tuple[float, int]:
    """One shuffled pass; the last short batch is kept. Returns (mean loss, steps)."""
    n = len(train_view)
    order = cm.rng_for(cfg.seed, "shuffle", epoch).permutation(n)
    params = model.params()
    total = 0.0
    steps = 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        loss, grads = model.loss_and_grads(train_view.take(idx))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        cm.adam_step(params, grads, optimizer)
        model.touch()
        total += loss * len(idx)
        steps += 1
    return total / n, steps


def fit(
    model,
    train_view,
    val_data,
    cfg: TrainConfig,
    snapshot: Callable[[], tuple],
    on_epoch: Callable[[int], None] | None = None,
    early_stopping: bool = True,
    max_epochs: int | None = None,
):
    """Adam training with validation-loss early stopping.

    Returns ``(best_snapshot, optimizer, stop_state, log, steps)`` where the
    snapshot is whatever ``snapshot()`` returned at the best epoch.
    """
    cfg.validate()
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    optimizer = cm.AdamState(lr=cfg.lr)
    stop = EarlyStopState(patience=cfg.patience if early_stopping else max_epochs + 1, max_epochs=max_epochs)
    log: list[EpochRecord] = []
    best = (snapshot(), _copy_optimizer(optimizer))
    steps = 0
    for epoch in range(1, max_epochs + 1):
        train_loss, n_steps = run_epoch(model, train_view, optimizer, cfg, epoch)
        steps += n_steps
        val_loss = model.loss(val_data)
        metric = model.metric(val_data) if epoch % cfg.eval_every == 0 else float("nan")
        log.append(EpochRecord(epoch, train_loss, val_loss, metric))
        decision = early_stop_update(stop, val_loss)
        if stop.improved:
            best = (snapshot(), _copy_optimizer(optimizer))
        if on_epoch is not None:
            on_epoch(epoch)
        if decision == "stop":
            break
    return best[0], best[1], stop, log, steps


def pretrain_task(
    task: str,
    train: Sequence[DatapointRecord],
    validation: Sequence[DatapointRecord],
    visual: EmbeddingBank,
    language: EmbeddingBank,
    cfg: TrainConfig,
    dims: EncoderDims,
) -> Checkpoint:
    """Train encoder + retrieval head on one task from the shared seed."""
    if not train or not validation:
        raise EmptyDataset(f"{task}: empty training or validation set")
    train_arr = retrieval_arrays(train, visual, language)
    val_arr = retrieval_arrays(validation, visual, language)
    _check_dims(dims, visual, language)
    encoder = encoder_from_seed(dims, cfg.seed, cfg.use_bias)
    head = hd.init_retrieval_head(dims.d_h, cfg.d_hid or dims.d_h, train_arr.candidates.shape[-1],
                                  cm.rng_for(cfg.seed, "head", task))
    model = RetrievalModel(encoder, head, cfg.loss)
    (enc_best, head_best), opt, stop, log, steps = fit(
        model, train_arr, val_arr, cfg, lambda: (encoder.copy(), head.copy()))
    return Checkpoint(
        setting=RunSetting.pretrained_for(task).value, task=task, seed=cfg.seed,
        encoder=enc_best, head=head_best, optimizer=opt,
        epoch=stop.epoch, best_epoch=stop.best_epoch, best_val_loss=stop.best_loss,
        log=log, optimizer_steps=steps, frozen_encoder=False, config=asdict(cfg),
    )


def _check_dims(dims: EncoderDims, visual: EmbeddingBank, language: EmbeddingBank) -> None:
    if dims.d_v != visual.dim or dims.d_l != language.dim:
        raise ConfigError(
            f"encoder dims ({dims.d_v}, {dims.d_l}) do not match banks ({visual.dim}, {language.dim})"
        )


def probe_model(setting: RunSetting, dims: EncoderDims, cfg: TrainConfig,
                encoder: EncoderParams | None = None) -> FoilModel:
    """Encoder + fresh FOIL head for ``setting``; ``encoder`` is copied if given."""
    if setting.pretrain_task is not None and encoder is None:
        raise ConfigError(f"setting {setting.value} needs a pre-trained encoder")
    enc = encoder.copy() if encoder is not None else encoder_from_seed(dims, cfg.seed, cfg.use_bias)
    if enc.dims != dims:
        raise ConfigError(f"encoder dims {enc.dims} do not match {dims}")
    head = hd.init_foil_head(dims.d_h, cm.rng_for(cfg.seed, "head", "FOIL"))
    return FoilModel(enc, head, frozen=setting.encoder_frozen)


def train_foil_probe(
    setting: RunSetting,
    train: Sequence[DatapointRecord],
    validation: Sequence[DatapointRecord],
    visual: EmbeddingBank,
    language: EmbeddingBank,
    cfg: TrainConfig,
    dims: EncoderDims,
    encoder: EncoderParams | None = None,
) -> Checkpoint:
    """Fit the FOIL classifier under ``setting``.

    Random2 performs no optimisation. Random and the pre-trained settings
    keep the encoder frozen; FullyFoil trains every parameter.
    """
    setting = RunSetting(setting)
    _check_dims(dims, visual, language)
    model = probe_model(setting, dims, cfg, encoder)
    val_arr = foil_arrays(validation, visual, language)
    common = dict(setting=setting.value, task="FOIL", seed=cfg.seed,
                  frozen_encoder=setting.encoder_frozen, config=asdict(cfg))
    if not setting.trains_head:
        return Checkpoint(encoder=model.encoder, head=model.head, optimizer=cm.AdamState(lr=cfg.lr),
                          best_val_loss=model.loss(val_arr), **common)
    train_arr = foil_arrays(train, visual, language)
    (enc_best, head_best), opt, stop, log, steps = fit(
        model, model.batches_from(train_arr), val_arr, cfg,
        lambda: (model.encoder.copy(), model.head.copy()))
    return Checkpoint(encoder=enc_best, head=head_best, optimizer=opt, epoch=stop.epoch,
                      best_epoch=stop.best_epoch, best_val_loss=stop.best_loss, log=log,
                      optimizer_steps=steps, **common)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class FoilAccuracy:
    overall: float
    original: float
    foiled: float
    n: int


def foil_predictions(probs: np.ndarray) -> np.ndarray:
    # argmax; an exact 0.5/0.5 tie goes to class 0 (original)
    return np.argmax(probs, axis=1)


def foil_accuracy(probs: np.ndarray, y: np.ndarray) -> FoilAccuracy:
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDataset("no FOIL datapoints to score")
    correct = foil_predictions(np.asarray(probs)) == y

    def recall(cls):
        sel = y == cls
        return float(correct[sel].mean()) if sel.any() else float("nan")

    return FoilAccuracy(float(correct.mean()), recall(hd.ORIGINAL), recall(hd.FOILED), int(len(y)))


def evaluate_foil(ckpt: Checkpoint, records: Sequence[DatapointRecord], visual: EmbeddingBank,
                  language: EmbeddingBank) -> FoilAccuracy:
    if not isinstance(ckpt.head, hd.FoilHead):
        raise ConfigError("checkpoint does not hold a FOIL head")
    arr = foil_arrays(records, visual, language)
    model = FoilModel(ckpt.encoder, ckpt.head, frozen=False)
    return foil_accuracy(model.probabilities(arr), arr.y)


def evaluate_retrieval(ckpt: Checkpoint, records: Sequence[DatapointRecord], visual: EmbeddingBank,
                       language: EmbeddingBank, ks: Sequence[int] = (1, 3)) -> dict[str, float]:
    if not isinstance(ckpt.head, hd.RetrievalHead):
        raise ConfigError("checkpoint does not hold a retrieval head")
    if records and records[0].task != ckpt.task:
        raise ConfigError(f"checkpoint task {ckpt.task} does not match dataset task {records[0].task}")
    arr = retrieval_arrays(records, visual, language)
    return retrieval_metrics(RetrievalModel(ckpt.encoder, ckpt.head, hd.LossConfig()).ranks(arr), ks)


def retrieval_metrics(ranks: np.ndarray, ks: Sequence[int] = (1, 3)) -> dict[str, float]:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EmptyDataset("no retrieval datapoints to score")
    out = {f"p_at_{k}": float(np.mean(ranks <= k)) for k in ks}
    out["mean_rank"] = float(ranks.mean())
    out["n"] = int(ranks.size)
    return out
