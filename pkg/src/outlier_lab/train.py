"""MLM pre-training, probe fine-tuning and checkpoint files."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import CLS, N_SPECIAL, PAD, SEP, TrainingStream, mask_batch
from .model import (
    AblationMask,
    ModelConfig,
    Params,
    backward,
    init_parameters,
    param_shapes,
    probe_backward,
    probe_forward,
)

log = logging.getLogger(__name__)

FORMAT_MAGIC = "OUTLIER-LAB-CHECKPOINT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 20000
    batch_size: int = 32
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    checkpoint_interval: int = 2000
    mask_rate: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        # a zero-step run performs no updates, so its schedule is never read
        if self.warmup_steps < 0 or (self.total_steps > 0 and self.warmup_steps > self.total_steps):
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.batch_size <= 0 or self.checkpoint_interval <= 0:
            raise ValueError("batch_size and checkpoint_interval must be positive")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.adam_eps > 0 or self.weight_decay < 0:
            raise ValueError("adam_eps must be > 0 and weight_decay >= 0")


def default_finetune_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(total_steps=2000, batch_size=32, peak_lr=3e-4, warmup_steps=200,
                       checkpoint_interval=2000, seed=seed)


@dataclass
class AdamState:
    m: Params
    v: Params

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.peak_lr
    return cfg.peak_lr * max(0.0, (cfg.total_steps - step) / span)


def adam_step(params: Params, grads: Params, moments: AdamState, step: int, cfg: TrainConfig) -> tuple[Params, AdamState]:
    """One in-place Adam update with decoupled weight decay scaled by the scheduled lr."""
    if step < 1:
        raise ValueError("Adam steps are numbered from 1")
    lr = learning_rate(step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads[name]
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay:
            update += cfg.weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, moments


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Params
    moments: AdamState | None
    step: int
    scheme: str = ""
    running_loss: float = float("nan")

    def copy(self) -> "Checkpoint":
        mom = None
        if self.moments is not None:
            mom = AdamState({k: v.copy() for k, v in self.moments.m.items()},
                            {k: v.copy() for k, v in self.moments.v.items()})
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, moments=mom)


def _batches(n_rows: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n_rows)
        for i in range(0, n_rows - batch_size + 1 if n_rows >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def train_mlm(
    train_config: TrainConfig,
    model_config: ModelConfig,
    stream: TrainingStream,
    params: Params | None = None,
    loss_log: list | None = None,
    on_checkpoint: Callable[[Checkpoint], None] | None = None,
) -> list[Checkpoint]:
    """Masked-LM pre-training; returns checkpoints at step 0, every interval, and the final step."""
    train_config.validate()
    model_config.validate()
    if len(stream) == 0:
        raise ValueError("training stream is empty")
    if stream.max_seq_len > model_config.max_seq_len:
        raise ValueError("stream rows are longer than the model's max_seq_len")
    params = init_parameters(model_config) if params is None else {k: v.copy() for k, v in params.items()}
    moments = AdamState.zeros(params)
    rng = np.random.default_rng([train_config.seed, 7])
    batches = _batches(len(stream), train_config.batch_size, rng)
    scheme = stream.scheme.value if hasattr(stream.scheme, "value") else str(stream.scheme)

    checkpoints: list[Checkpoint] = []

    def emit(step: int, loss: float):
        ck = Checkpoint(model_config, train_config, {k: v.copy() for k, v in params.items()},
                        AdamState({k: v.copy() for k, v in moments.m.items()},
                                  {k: v.copy() for k, v in moments.v.items()}),
                        step, scheme, loss)
        checkpoints.append(ck)
        if on_checkpoint is not None:
            on_checkpoint(ck)

    pending = []
    idx = next(batches)
    first = mask_batch(stream.rows[idx], train_config.mask_rate, [train_config.seed, 0], model_config.vocab_size)
    initial_loss = backward(params, model_config, first)[0] if first.n_targets else float("nan")
    emit(0, initial_loss)

    for step in range(1, train_config.total_steps + 1):
        if step > 1:
            idx = next(batches)
        batch = mask_batch(stream.rows[idx], train_config.mask_rate, [train_config.seed, step], model_config.vocab_size)
        if batch.n_targets:  # a batch with nothing masked contributes no update
            loss, grads = backward(params, model_config, batch)
            adam_step(params, grads, moments, step, train_config)
            pending.append(loss)
            if loss_log is not None:
                loss_log.append(loss)
        if step % train_config.checkpoint_interval == 0 or step == train_config.total_steps:
            emit(step, float(np.mean(pending)) if pending else float("nan"))
            log.info("step %d  mlm loss %.4f  lr %.2e", step, checkpoints[-1].running_loss,
                     learning_rate(step, train_config))
            pending = []
    return checkpoints


# -- probe task -----------------------------------------------------------------

@dataclass(frozen=True)
class ProbeTask:
    """Marker-pair detection: label 1 iff ``m1`` and ``m2`` occur within ``window`` tokens."""

    m1: int = 25
    m2: int = 26
    window: int = 4
    n_train: int = 32000
    n_eval: int = 1000
    far_fraction: float = 0.25
    seed: int = 0

    def validate(self, vocab_size: int | None = None) -> None:
        if self.m1 == self.m2:
            raise ValueError("probe markers must differ")
        if min(self.m1, self.m2) < N_SPECIAL or (vocab_size is not None and max(self.m1, self.m2) >= vocab_size):
            raise ValueError("probe markers must be content tokens")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.n_train < 0 or self.n_eval < 0:
            raise ValueError("example counts must be >= 0")


@dataclass
class ProbeData:
    rows: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def probe_label(row, task: ProbeTask) -> int:
    row = np.asarray(row)
    p1 = np.flatnonzero(row == task.m1)
    p2 = np.flatnonzero(row == task.m2)
    if p1.size == 0 or p2.size == 0:
        return 0
    return int(np.abs(p1[:, None] - p2[None, :]).min() <= task.window)


def _make_examples(task: ProbeTask, source: np.ndarray, n: int, vocab_size: int, rng: np.random.Generator) -> ProbeData:
    rows = source[rng.integers(0, len(source), n)].copy()
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    rng.shuffle(labels)
    hits = (rows == task.m1) | (rows == task.m2)
    others = np.setdiff1d(np.arange(N_SPECIAL, vocab_size), [task.m1, task.m2])
    rows[hits] = others[rng.integers(0, others.size, int(hits.sum()))]
    for r in range(n):
        pos = np.flatnonzero(rows[r] >= N_SPECIAL)
        if pos.size < 2:
            raise ValueError("probe source rows need at least two content tokens")
        pair = rng.permutation([task.m1, task.m2])
        i = pos[rng.integers(pos.size)]
        if labels[r] == 1:
            near = pos[(np.abs(pos - i) <= task.window) & (pos != i)]
            if near.size == 0:
                near = pos[pos != i]
                i = near[np.argmin(np.abs(near - i))]
                near = pos[(np.abs(pos - i) <= task.window) & (pos != i)]
            j = near[rng.integers(near.size)]
            rows[r, i], rows[r, j] = pair
        else:
            far = pos[np.abs(pos - i) > task.window]
            if far.size and rng.random() < task.far_fraction:
                rows[r, i], rows[r, far[rng.integers(far.size)]] = pair
            else:
                rows[r, i] = pair[0]
    return ProbeData(rows, labels)


def make_probe_data(task: ProbeTask, stream: TrainingStream) -> tuple[ProbeData, ProbeData]:
    """Balanced train/eval probe sets built from rows of ``stream``."""
    task.validate(stream.vocab_size)
    rng = np.random.default_rng([task.seed, 11])
    usable = stream.rows[(stream.rows >= N_SPECIAL).sum(axis=1) >= task.window + 2]
    if len(usable) == 0:
        raise ValueError("stream has no rows long enough for the probe task")
    train = _make_examples(task, usable, task.n_train, stream.vocab_size, rng)
    evals = _make_examples(task, usable, task.n_eval, stream.vocab_size, rng)
    return train, evals


def write_probe_data(path: str | Path, data: ProbeData) -> None:
    with open(path, "w") as fh:
        for row, lab in zip(data.rows, data.labels):
            fh.write(" ".join(str(int(t)) for t in row))
            fh.write(f" {int(lab)}\n")


def read_probe_data(path: str | Path) -> ProbeData:
    with open(path) as fh:
        vals = [[int(t) for t in line.split()] for line in fh if line.strip()]
    arr = np.asarray(vals, dtype=np.int64)
    return ProbeData(arr[:, :-1].astype(np.int32), arr[:, -1])


def probe_accuracy(params: Params, cfg: ModelConfig, data: ProbeData, ablation: AblationMask | None = None,
                   batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = probe_forward(params, cfg, data.rows[i:i + batch_size], ablation=ablation)
        correct += int((logits.argmax(axis=1) == data.labels[i:i + batch_size]).sum())
    return correct / len(data)


def fine_tune_probe(checkpoint: Checkpoint, train: ProbeData, evals: ProbeData,
                    config: TrainConfig | None = None) -> tuple[Checkpoint, float]:
    """Fine-tune every parameter on the CLS classifier; returns the tuned checkpoint and eval accuracy."""
    config = config or default_finetune_config()
    config.validate()
    cfg = checkpoint.model_config
    params = {k: v.copy() for k, v in checkpoint.params.items()}
    moments = AdamState.zeros(params)
    rng = np.random.default_rng([config.seed, 13])
    batches = _batches(len(train), config.batch_size, rng)
    for step in range(1, config.total_steps + 1):
        idx = next(batches)
        _, grads = probe_backward(params, cfg, train.rows[idx], train.labels[idx])
        adam_step(params, grads, moments, step, config)
    tuned = Checkpoint(cfg, config, params, moments, config.total_steps, checkpoint.scheme, checkpoint.running_loss)
    return tuned, probe_accuracy(params, cfg, evals)


# -- checkpoint files -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def _tensor_items(ck: Checkpoint):
    for name, arr in ck.params.items():
        yield name, arr
    if ck.moments is not None:
        for name, arr in ck.moments.m.items():
            yield "adam.m." + name, arr
        for name, arr in ck.moments.v.items():
            yield "adam.v." + name, arr


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Text header terminated by a blank line, then little-endian float32 tensors in manifest order."""
    items = list(_tensor_items(checkpoint))
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        "model_config: " + json.dumps(asdict(checkpoint.model_config), sort_keys=True),
        "train_config: " + json.dumps(asdict(checkpoint.train_config), sort_keys=True),
        f"step: {checkpoint.step}",
        f"scheme: {checkpoint.scheme}",
        f"running_loss: {checkpoint.running_loss!r}",
        f"optimizer: {'adam' if checkpoint.moments is not None else 'none'}",
        f"tensors: {len(items)}",
    ]
    offset = 0
    blobs = []
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor: {name} {shape} {offset}")
        offset += len(data)
        blobs.append(data)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def _parse_header(raw: bytes):
    end = raw.find(b"\n\n")
    if end < 0:
        raise CorruptHeaderError("header is not terminated by a blank line")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError(f"header is not ASCII: {exc}") from None
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != FORMAT_MAGIC:
        raise CorruptHeaderError("bad magic line")
    if magic[1] != str(FORMAT_VERSION):
        raise CorruptHeaderError(f"unsupported format version {magic[1]}")
    fields: dict[str, str] = {}
    tensors = []
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise CorruptHeaderError(f"malformed header line {line!r}")
        if key == "tensor":
            parts = value.split(" ")
            if len(parts) != 3:
                raise CorruptHeaderError(f"malformed tensor line {line!r}")
            try:
                shape = tuple(int(s) for s in parts[1].split(",")) if parts[1] else ()
                tensors.append((parts[0], shape, int(parts[2])))
            except ValueError:
                raise CorruptHeaderError(f"malformed tensor line {line!r}") from None
        else:
            fields[key] = value
    return fields, tensors, end + 2


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    fields, tensors, start = _parse_header(raw)
    try:
        model_cfg = ModelConfig(**json.loads(fields["model_config"]))
        train_cfg = TrainConfig(**json.loads(fields["train_config"]))
        step = int(fields["step"])
        scheme = fields.get("scheme", "")
        running_loss = float(fields["running_loss"])
        has_adam = fields["optimizer"] == "adam"
        count = int(fields["tensors"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptHeaderError(f"bad header field: {exc}") from None

    expected = param_shapes(model_cfg)
    names = list(expected)
    if has_adam:
        names += ["adam.m." + n for n in expected] + ["adam.v." + n for n in expected]
    if count != len(tensors) or count != len(names):
        raise ShapeMismatchError(
            f"header declares {count} tensors, manifest lists {len(tensors)}, config needs {len(names)}")
    payload = memoryview(raw)[start:]
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for (name, shape, off), want in zip(tensors, names):
        base = name.split(".", 2)[2] if name.startswith("adam.") else name
        if name != want or shape != expected[base]:
            raise ShapeMismatchError(f"tensor {name} {shape} does not match expected {want} {expected[base]}")
        if off != offset:
            raise ShapeMismatchError(f"tensor {name} offset {off} != expected {offset}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"payload holds {len(payload)} bytes, tensor {name} needs up to {offset + nbytes}")
        arrays[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise ShapeMismatchError(f"payload has {len(payload) - offset} trailing bytes")
    params = {n: arrays[n] for n in expected}
    moments = None
    if has_adam:
        moments = AdamState({n: arrays["adam.m." + n] for n in expected},
                            {n: arrays["adam.v." + n] for n in expected})
    return Checkpoint(model_cfg, train_cfg, params, moments, step, scheme, running_loss)
