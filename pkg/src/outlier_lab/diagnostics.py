"""Correlation and distribution analyses over hidden states, attention maps and MLM predictions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import CLS, IGNORE, PAD, SEP, FrequencyTable, MaskedBatch, mask_batch
from .model import AblationMask, ModelConfig, Params, encode, mlm_logits_at
from .outlier import mlm_eval_loss
from .train import Checkpoint, ProbeData, TrainConfig, fine_tune_probe, probe_accuracy

FREQ_BINS = 20
FREQ_RANGE = (-6.0, 0.0)


# -- Pearson ------------------------------------------------------------------

def pearson(xs, ys) -> float | None:
    """Sample Pearson r, or None when n < 2 or either input is constant."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2 or x.min() == x.max() or y.min() == y.max():
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt((dx @ dx) * (dy @ dy))
    if not denom > 0 or not np.isfinite(denom):  # spread too small (or large) to represent
        return None
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def spearman(xs, ys) -> float | None:
    return pearson(rankdata(np.asarray(xs, dtype=np.float64)), rankdata(np.asarray(ys, dtype=np.float64)))


class PearsonAccumulator:
    """Streaming co-moments for an array of independent correlations.

    Each :meth:`add` takes ``xs`` and ``ys`` broadcastable to ``[n, *shape]``;
    batches are folded in with the pairwise (Chan et al.) update so the result
    does not depend on how the stream is chunked beyond rounding.
    """

    def __init__(self, shape: tuple[int, ...] = ()):
        self.shape = tuple(shape)
        self.n = 0
        z = lambda: np.zeros(self.shape)  # noqa: E731
        self.mx, self.my, self.sxx, self.syy, self.sxy = z(), z(), z(), z(), z()
        self.lo_x = np.full(self.shape, np.inf)
        self.hi_x = np.full(self.shape, -np.inf)
        self.lo_y = np.full(self.shape, np.inf)
        self.hi_y = np.full(self.shape, -np.inf)

    def add(self, xs, ys) -> None:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        n = xs.shape[0] if xs.ndim else 0
        if n == 0:
            return
        full = (n,) + self.shape
        xs = np.broadcast_to(xs, full)
        ys = np.broadcast_to(ys, full)
        other = PearsonAccumulator(self.shape)
        other.n = n
        other.mx = xs.mean(axis=0)
        other.my = ys.mean(axis=0)
        dx = xs - other.mx
        dy = ys - other.my
        other.sxx = np.einsum("i...,i...->...", dx, dx)
        other.syy = np.einsum("i...,i...->...", dy, dy)
        other.sxy = np.einsum("i...,i...->...", dx, dy)
        other.lo_x, other.hi_x = xs.min(axis=0), xs.max(axis=0)
        other.lo_y, other.hi_y = ys.min(axis=0), ys.max(axis=0)
        self.merge(other)

    def merge(self, other: "PearsonAccumulator") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.__dict__.update({k: np.copy(v) if isinstance(v, np.ndarray) else v for k, v in other.__dict__.items()})
            return
        na, nb = self.n, other.n
        n = na + nb
        ddx = other.mx - self.mx
        ddy = other.my - self.my
        w = na * nb / n
        self.sxx = self.sxx + other.sxx + ddx * ddx * w
        self.syy = self.syy + other.syy + ddy * ddy * w
        self.sxy = self.sxy + other.sxy + ddx * ddy * w
        self.mx = self.mx + ddx * (nb / n)
        self.my = self.my + ddy * (nb / n)
        self.n = n
        self.lo_x = np.minimum(self.lo_x, other.lo_x)
        self.hi_x = np.maximum(self.hi_x, other.hi_x)
        self.lo_y = np.minimum(self.lo_y, other.lo_y)
        self.hi_y = np.maximum(self.hi_y, other.hi_y)

    def result(self) -> np.ndarray:
        """r per entry; NaN where undefined."""
        ok = (self.n >= 2) & (self.lo_x < self.hi_x) & (self.lo_y < self.hi_y)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.sxy / np.sqrt(self.sxx * self.syy)
        return np.where(ok, np.clip(r, -1.0, 1.0), np.nan)


# -- tables -------------------------------------------------------------------

def _r_or_none(r: float) -> float | None:
    return None if r is None or not np.isfinite(r) else float(r)


def _fmt(x) -> str:
    return "" if x is None or not np.isfinite(x) else format(float(x), ".8g")


@dataclass
class CorrelationTable:
    """(layer, dim, include_special) -> (r or None, n), plus random-dim controls."""

    entries: dict[tuple[int, int, bool], tuple[float | None, int]] = field(default_factory=dict)
    control_dims: list[int] = field(default_factory=list)
    special_pairs: int = 0  # pairs taken from CLS/SEP positions

    def r(self, layer: int, dim: int, include_special: bool = False) -> float | None:
        return self.entries[(layer, dim, include_special)][0]

    def control_mean_abs(self, layer: int, include_special: bool = False) -> float | None:
        vals = [abs(v) for v in (self.r(layer, d, include_special) for d in self.control_dims) if v is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self):
        for (l, d, s), (r, n) in sorted(self.entries.items()):
            yield l, "", d, int(s), r, n
        for l, s in sorted({(l, s) for l, _, s in self.entries}):
            if self.control_dims:
                yield l, "", "random_mean_abs", int(s), self.control_mean_abs(l, s), len(self.control_dims)


@dataclass
class AttentionCorrelationTable:
    """(layer, head, dim, include_special) -> (r or None, n)."""

    entries: dict[tuple[int, int, int, bool], tuple[float | None, int]] = field(default_factory=dict)
    control_dims: list[int] = field(default_factory=list)

    def r(self, layer: int, head: int, dim: int, include_special: bool = False) -> float | None:
        return self.entries[(layer, head, dim, include_special)][0]

    def control_mean_abs(self, layer: int, head: int, include_special: bool = False) -> float | None:
        vals = [abs(v) for v in (self.r(layer, head, d, include_special) for d in self.control_dims) if v is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self):
        for (l, h, d, s), (r, n) in sorted(self.entries.items()):
            yield l, h, d, int(s), r, n
        for l, h, s in sorted({(l, h, s) for l, h, _, s in self.entries}):
            if self.control_dims:
                yield l, h, "random_mean_abs", int(s), self.control_mean_abs(l, h, s), len(self.control_dims)


CORRELATION_COLUMNS = ["layer", "head", "dim", "include_special", "r", "n"]


def write_correlation_csv(path: str | Path, table: CorrelationTable | AttentionCorrelationTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CORRELATION_COLUMNS)
        for l, h, d, s, r, n in table.rows():
            w.writerow([l, h, d, s, _fmt(r), n])


def control_dims_for(hidden_dim: int, exclude: Iterable[int], n_control: int, seed: int) -> list[int]:
    pool = np.array(sorted(set(range(hidden_dim)) - {int(d) for d in exclude}))
    n_control = min(n_control, pool.size)
    rng = np.random.default_rng([seed, 23])
    return sorted(int(d) for d in rng.choice(pool, n_control, replace=False))


def _position_mask(ids: np.ndarray, include_special: bool) -> np.ndarray:
    sel = ids != PAD
    if not include_special:
        sel &= (ids != CLS) & (ids != SEP)
    return sel


def _check_dims(cfg: ModelConfig, dims: Sequence[int]) -> None:
    bad = [d for d in dims if not 0 <= d < cfg.hidden_dim]
    if bad:
        raise ValueError(f"dims out of range [0, {cfg.hidden_dim}): {bad}")


def _batches(rows: np.ndarray, batch_size: int):
    for i in range(0, rows.shape[0], batch_size):
        b = rows[i:i + batch_size]
        keep = (b != PAD).any(axis=1)
        if keep.any():
            yield b[keep]


# -- frequency vs magnitude ---------------------------------------------------

def freq_magnitude_correlation(params: Params, cfg: ModelConfig, rows, freq_table: FrequencyTable,
                               dims: Sequence[int], include_special: bool | Sequence[bool] = (False, True),
                               n_control: int = 10, seed: int = 0, per_type: bool = False,
                               method: str = "pearson", ablation: AblationMask | None = None,
                               batch_size: int = 64) -> CorrelationTable:
    """Correlate |hidden state| at each dim with log10 token frequency, per layer 1..L.

    Pairs are taken per token occurrence unless ``per_type``, which first
    averages the magnitude over occurrences of each token type.  Tokens with
    zero count in ``freq_table`` are skipped.
    """
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("no sequences given")
    if method not in ("pearson", "spearman"):
        raise ValueError(f"unknown correlation method {method!r}")
    dims = [int(d) for d in dims]
    _check_dims(cfg, dims)
    flags = [include_special] if isinstance(include_special, bool) else list(include_special)
    controls = control_dims_for(cfg.hidden_dim, dims, n_control, seed)
    cols = np.array(sorted(set(dims) | set(controls)), dtype=np.int64)
    L = cfg.n_layers
    V = cfg.vocab_size
    with np.errstate(divide="ignore"):
        logf = np.log10(freq_table.relative_array(V))
    streaming = method == "pearson" and not per_type

    accs = {s: PearsonAccumulator((L, cols.size)) for s in flags}
    pairs = {s: ([], []) for s in flags}  # for rank or per-type modes
    type_sum = {s: np.zeros((V, L, cols.size)) for s in flags}
    type_cnt = {s: np.zeros(V) for s in flags}
    special_pairs = 0
    for ids in _batches(rows, batch_size):
        trace, _ = encode(params, cfg, ids, ablation=ablation)
        mags = np.abs(np.stack([h[..., cols] for h in trace.hidden_states[1:]], axis=2))  # [B, T, L, C]
        for s in flags:
            sel = _position_mask(ids, s) & np.isfinite(logf[ids])
            tok = ids[sel]
            if not s:
                special_pairs += int(((tok == CLS) | (tok == SEP)).sum())
            x = mags[sel].astype(np.float64)
            if per_type:
                flat = x.reshape(len(tok), -1)
                for j in range(flat.shape[1]):
                    type_sum[s].reshape(V, -1)[:, j] += np.bincount(tok, flat[:, j], minlength=V)
                type_cnt[s] += np.bincount(tok, minlength=V)
            elif streaming:
                accs[s].add(x, logf[tok][:, None, None])
            else:
                pairs[s][0].append(x)
                pairs[s][1].append(logf[tok])

    table = CorrelationTable(control_dims=controls, special_pairs=special_pairs)
    for s in flags:
        if per_type:
            seen = type_cnt[s] > 0
            x = type_sum[s][seen] / type_cnt[s][seen][:, None, None]
            y = logf[seen]
        elif not streaming:
            x = np.concatenate(pairs[s][0]) if pairs[s][0] else np.zeros((0, L, cols.size))
            y = np.concatenate(pairs[s][1]) if pairs[s][1] else np.zeros(0)
        if streaming:
            r, n = accs[s].result(), accs[s].n
        else:
            corr = spearman if method == "spearman" else pearson
            r = np.array([[np.nan if (v := corr(x[:, l, c], y)) is None else v for c in range(cols.size)]
                          for l in range(L)])
            n = x.shape[0]
        for l in range(L):
            for c, d in enumerate(cols):
                table.entries[(l + 1, int(d), s)] = (_r_or_none(r[l, c]), int(n))
    return table


# -- attention column means ---------------------------------------------------

def attention_column_means(A: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Mean attention each key receives over the valid query rows; ``A`` is [B, H, T, T]."""
    w = valid.astype(np.float64)
    return np.einsum("bhij,bi->bhj", A, w) / w.sum(axis=1)[:, None, None]


def attention_query_correlation(params: Params, cfg: ModelConfig, rows, dims: Sequence[int],
                                include_special: bool | Sequence[bool] = (False, True), n_control: int = 10,
                                seed: int = 0, ablation: AblationMask | None = None,
                                batch_size: int = 64) -> AttentionCorrelationTable:
    """Correlate |hidden state| of token j at layer l with the column mean of layer l's attention map."""
    rows = np.asarray(rows)
    if rows.size == 0:
        raise ValueError("no sequences given")
    dims = [int(d) for d in dims]
    _check_dims(cfg, dims)
    flags = [include_special] if isinstance(include_special, bool) else list(include_special)
    controls = control_dims_for(cfg.hidden_dim, dims, n_control, seed)
    cols = np.array(sorted(set(dims) | set(controls)), dtype=np.int64)
    L, H = cfg.n_layers, cfg.n_heads
    accs = {s: PearsonAccumulator((L, H, cols.size)) for s in flags}
    for ids in _batches(rows, batch_size):
        valid = ids != PAD
        trace, _ = encode(params, cfg, ids, ablation=ablation)
        mags = np.abs(np.stack([h[..., cols] for h in trace.hidden_states[1:]], axis=2))  # [B, T, L, C]
        cm = np.stack([attention_column_means(A, valid) for A in trace.attention_maps], axis=1)  # [B, L, H, T]
        cm = cm.transpose(0, 3, 1, 2)  # [B, T, L, H]
        for s in flags:
            sel = _position_mask(ids, s)
            accs[s].add(mags[sel][:, :, None, :], cm[sel][:, :, :, None])
    table = AttentionCorrelationTable(control_dims=controls)
    for s in flags:
        r = accs[s].result()
        for l in range(L):
            for h in range(H):
                for c, d in enumerate(cols):
                    table.entries[(l + 1, h, int(d), s)] = (_r_or_none(r[l, h, c]), accs[s].n)
    return table


# -- generated-token frequency ------------------------------------------------

@dataclass
class GenerationShift:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    n_predicted: int
    mean_log_freq: dict[str, float]

    def rows(self):
        for cond, c in self.counts.items():
            for i, k in enumerate(c):
                yield cond, self.edges[i], self.edges[i + 1], int(k)


def write_shift_csv(path: str | Path, shift: GenerationShift) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "bin_lo", "bin_hi", "count"])
        for cond, lo, hi, k in shift.rows():
            w.writerow([cond, _fmt(lo), _fmt(hi), k])


def _as_mask(a) -> AblationMask:
    return a if isinstance(a, AblationMask) else AblationMask(a)


def generation_frequency_shift(params: Params, cfg: ModelConfig, rows, ablations: Mapping[str, object],
                               freq_table: FrequencyTable, mask_rate: float = 0.15, bins: int = FREQ_BINS,
                               seed: int = 0, value_range: tuple[float, float] = FREQ_RANGE,
                               batch_size: int = 128) -> GenerationShift:
    """Histogram of argmax MLM predictions by log10 corpus frequency, per condition.

    Condition ``full`` is always first; every condition sees the same masks.
    Frequencies outside ``value_range`` (including zero) fall into the end bins.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo, hi = value_range
    rows = np.asarray(rows)
    batch = mask_batch(rows, mask_rate, [seed, 29], cfg.vocab_size)
    with np.errstate(divide="ignore"):
        logf = np.clip(np.log10(freq_table.relative_array(cfg.vocab_size)), lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    conds = {"full": AblationMask()}
    for name, a in ablations.items():
        if name == "full":
            raise ValueError("condition name 'full' is reserved")
        conds[name] = _as_mask(a)
    counts, means = {}, {}
    for name, mask in conds.items():
        preds = _predict(params, cfg, batch, mask, batch_size)
        v = logf[preds]
        counts[name] = np.histogram(v, bins=edges)[0].astype(np.int64)
        means[name] = float(v.mean()) if v.size else float("nan")
    return GenerationShift(edges, counts, batch.n_targets, means)


def _predict(params: Params, cfg: ModelConfig, batch: MaskedBatch, mask: AblationMask, batch_size: int) -> np.ndarray:
    out = []
    for i in range(0, batch.inputs.shape[0], batch_size):
        ids = batch.inputs[i:i + batch_size]
        sel = batch.labels[i:i + batch_size] != IGNORE
        if sel.any():
            out.append(mlm_logits_at(params, cfg, ids, sel, ablation=mask).argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- checkpoint dynamics ------------------------------------------------------

@dataclass
class DynamicsSeries:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)

    def conditions(self) -> list[str]:
        return list(dict.fromkeys(c for _, c, _, _ in self.rows))

    def series(self, condition: str) -> list[tuple[int, float, float]]:
        return [(s, a, m) for s, c, a, m in self.rows if c == condition]


def write_dynamics_csv(path: str | Path, series: DynamicsSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "condition", "probe_acc", "mlm_loss"])
        for s, c, a, m in series.rows:
            w.writerow([s, c, _fmt(a), _fmt(m)])


def dynamics_conditions(dims: Sequence[int]) -> dict[str, AblationMask]:
    """full, each single dim, and all dims together (the last only when it differs from a single)."""
    dims = sorted(int(d) for d in dims)
    conds = {"full": AblationMask()}
    for d in dims:
        conds[f"minus_{d}"] = AblationMask([d])
    if len(dims) != 1:
        conds["minus_all"] = AblationMask(dims)
    return conds


def checkpoint_dynamics(checkpoints: Sequence[Checkpoint], probe_train: ProbeData, probe_eval: ProbeData,
                        mlm_batch: MaskedBatch, dims: Sequence[int],
                        finetune_config: TrainConfig | None = None) -> DynamicsSeries:
    """Fine-tune the probe from every checkpoint, then score each ablation condition.

    Ablations are applied after fine-tuning; MLM loss is measured on the
    pre-trained checkpoint itself.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    steps = [c.step for c in checkpoints]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"checkpoint steps must be strictly increasing, got {steps}")
    conds = dynamics_conditions(dims)
    out = DynamicsSeries()
    for ck in checkpoints:
        cfg = ck.model_config
        tuned, _ = fine_tune_probe(ck, probe_train, probe_eval, finetune_config)
        for name, mask in conds.items():
            acc = 100.0 * probe_accuracy(tuned.params, cfg, probe_eval, mask)
            loss = mlm_eval_loss(ck.params, cfg, mlm_batch, mask)
            out.rows.append((ck.step, name, acc, loss))
    return out
