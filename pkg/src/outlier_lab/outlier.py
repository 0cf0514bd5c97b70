"""Candidate detection from output-LayerNorm weights, ablation, and damage verification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import IGNORE, MaskedBatch
from .model import AblationMask, ModelConfig, Params, _cross_entropy, mlm_logits_at
from .train import ProbeData, probe_accuracy

DAMAGE_FLOOR = 0.1  # accuracy points


def n_layers_of(params: Params) -> int:
    n = 0
    while f"layers.{n + 1}.out_ln.weight" in params:
        n += 1
    return n


@dataclass
class CandidateOutlier:
    dim: int
    per_layer_z: dict[int, float]
    coverage: float

    @property
    def max_abs_z(self) -> float:
        vals = [abs(z) for z in self.per_layer_z.values() if np.isfinite(z)]
        return max(vals) if vals else 0.0


def weight_zscores(params: Params) -> np.ndarray:
    """z-scores of each layer's output-LayerNorm weight, shape ``[L, d]``; NaN rows where the layer sigma is 0."""
    L = n_layers_of(params)
    rows = []
    for l in range(1, L + 1):
        w = params[f"layers.{l}.out_ln.weight"].astype(np.float64)
        sd = w.std()
        rows.append((w - w.mean()) / sd if sd > 0 else np.full_like(w, np.nan))
    return np.vstack(rows)


def find_candidates(params: Params, k_sigma: float = 3.0, min_coverage: float = 0.5) -> list[CandidateOutlier]:
    """Dims whose output-LayerNorm weight lies beyond ``k_sigma`` in at least ``min_coverage`` of layers."""
    if not k_sigma > 0:
        raise ValueError("k_sigma must be > 0")
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must lie in (0, 1]")
    z = weight_zscores(params)
    L = z.shape[0]
    with np.errstate(invalid="ignore"):
        exceed = np.nan_to_num(np.abs(z), nan=0.0) > k_sigma
    coverage = exceed.sum(axis=0) / L
    out = [
        CandidateOutlier(int(d), {l + 1: float(z[l, d]) for l in range(L)}, float(coverage[d]))
        for d in np.flatnonzero(coverage >= min_coverage - 1e-12)
    ]
    out.sort(key=lambda c: (-c.coverage, -c.max_abs_z, c.dim))
    return out


def ablate(params: Params, dims: Iterable[int], layers: Iterable[int] | None = None) -> Params:
    """Copy of ``params`` with both per-layer LayerNorms zeroed (weight and bias) at ``dims``."""
    dims = sorted({int(d) for d in dims})
    L = n_layers_of(params)
    d_model = params["layers.1.out_ln.weight"].shape[0]
    layers = range(1, L + 1) if layers is None else sorted({int(l) for l in layers})
    if any(not 0 <= d < d_model for d in dims):
        raise ValueError(f"dims out of range [0, {d_model}): {dims}")
    if any(not 1 <= l <= L for l in layers):
        raise ValueError(f"layers out of range [1, {L}]: {list(layers)}")
    out = {k: v.copy() for k, v in params.items()}
    if not dims:
        return out
    for l in layers:
        for ln in ("attn_ln", "out_ln"):
            for leaf in ("weight", "bias"):
                out[f"layers.{l}.{ln}.{leaf}"][dims] = 0
    return out


def mlm_eval_loss(params: Params, cfg: ModelConfig, batch: MaskedBatch, ablation: AblationMask | None = None,
                  batch_size: int = 128) -> float:
    """Mean cross-entropy over every labelled position of ``batch``."""
    total, count = 0.0, 0
    for i in range(0, batch.inputs.shape[0], batch_size):
        ids = batch.inputs[i:i + batch_size]
        labels = batch.labels[i:i + batch_size]
        sel = labels != IGNORE
        if not sel.any():
            continue
        logits = mlm_logits_at(params, cfg, ids, sel, ablation=ablation)
        loss, _ = _cross_entropy(logits, labels[sel])
        n = int(sel.sum())
        total += loss * n
        count += n
    if count == 0:
        raise ValueError("evaluation batch has no labelled positions")
    return total / count


@dataclass
class Evaluator:
    """Fixed evaluation sets plus the models they are scored on.

    MLM loss is measured on ``mlm_params`` (the pre-trained model) and probe
    accuracy on ``probe_params`` (the fine-tuned one); ablations are applied
    to whichever model a metric uses.
    """

    cfg: ModelConfig
    mlm_params: Params
    mlm_batch: MaskedBatch
    probe_params: Params | None = None
    probe_eval: ProbeData | None = None
    _full: dict = field(default_factory=dict, repr=False)

    def mlm_loss(self, ablation: AblationMask | None = None) -> float:
        return mlm_eval_loss(self.mlm_params, self.cfg, self.mlm_batch, ablation)

    def probe_accuracy(self, ablation: AblationMask | None = None) -> float:
        if self.probe_params is None or self.probe_eval is None:
            return float("nan")
        return 100.0 * probe_accuracy(self.probe_params, self.cfg, self.probe_eval, ablation)

    def full(self) -> tuple[float, float]:
        if not self._full:
            self._full["mlm"] = self.mlm_loss()
            self._full["probe"] = self.probe_accuracy()
        return self._full["mlm"], self._full["probe"]

    def deltas(self, dims: Iterable[int], layers: Iterable[int] | None = None) -> tuple[float, float]:
        """(ablated - full) MLM loss in nats and probe accuracy in points."""
        dims = list(dims)
        full_mlm, full_acc = self.full()
        if not dims:
            return 0.0, 0.0
        mask = AblationMask(dims, layers)
        return self.mlm_loss(mask) - full_mlm, self.probe_accuracy(mask) - full_acc


@dataclass
class BaselineStats:
    dims: list[int]
    delta_mlm: np.ndarray
    delta_probe: np.ndarray

    @property
    def mlm_mean(self) -> float:
        return float(self.delta_mlm.mean())

    @property
    def mlm_sigma(self) -> float:
        return float(self.delta_mlm.std())

    @property
    def drop_mean(self) -> float:
        """Mean probe-accuracy drop (points, positive = worse)."""
        return float(-self.delta_probe.mean()) + 0.0

    @property
    def drop_sigma(self) -> float:
        return float(self.delta_probe.std())


def random_baseline_damage(evaluator: Evaluator, n_random: int = 10, excluded_dims: Iterable[int] = (),
                           seed: int = 0, layers: Iterable[int] | None = None) -> BaselineStats:
    if n_random < 10:
        raise ValueError("the random baseline needs at least 10 dims")
    excluded = set(int(d) for d in excluded_dims)
    pool = np.array([d for d in range(evaluator.cfg.hidden_dim) if d not in excluded])
    if n_random > pool.size:
        raise ValueError(f"cannot sample {n_random} dims from {pool.size} non-excluded dims")
    rng = np.random.default_rng([seed, 17])
    dims = sorted(int(d) for d in rng.choice(pool, n_random, replace=False))
    layers = None if layers is None else list(layers)
    mlm, probe = zip(*(evaluator.deltas([d], layers) for d in dims))
    return BaselineStats(dims, np.asarray(mlm), np.asarray(probe))


@dataclass
class DamageReport:
    dims: tuple[int, ...]
    layers: tuple[int, ...] | None
    delta_mlm_loss: float
    delta_probe_acc: float
    baseline: BaselineStats | None
    damage_ratio: float
    verified: bool = False

    @property
    def layer_label(self) -> str:
        return "all" if self.layers is None else "+".join(str(l) for l in self.layers)


def damage_ratio(delta_probe_acc: float, baseline: BaselineStats, floor: float = DAMAGE_FLOOR) -> float:
    """Probe-accuracy drop relative to the mean random-dim drop (floored)."""
    if np.isnan(delta_probe_acc):
        return float("nan")
    return max(0.0, -delta_probe_acc) / max(baseline.drop_mean, floor)


def measure_damage(evaluator: Evaluator, dims: Iterable[int], layers: Iterable[int] | None = None,
                   baseline: BaselineStats | None = None, n_random: int = 10, seed: int = 0) -> DamageReport:
    dims = tuple(sorted(int(d) for d in dims))
    layers = None if layers is None else tuple(sorted(int(l) for l in layers))
    d_mlm, d_acc = evaluator.deltas(dims, layers)
    if baseline is None:
        baseline = random_baseline_damage(evaluator, n_random, dims, seed)
    return DamageReport(dims, layers, d_mlm, d_acc, baseline, damage_ratio(d_acc, baseline))


@dataclass
class Outlier:
    candidate: CandidateOutlier
    report: DamageReport


def assess_candidates(candidates: Sequence[CandidateOutlier], evaluator: Evaluator, ratio_threshold: float = 5.0,
                      baseline: BaselineStats | None = None, n_random: int = 10, seed: int = 0) -> list[Outlier]:
    """Damage report for every candidate, with ``verified`` set by the ratio rule."""
    if not candidates:
        return []
    if baseline is None:
        baseline = random_baseline_damage(evaluator, n_random, [c.dim for c in candidates], seed)
    out = []
    for c in candidates:
        rep = measure_damage(evaluator, [c.dim], baseline=baseline)
        rep.verified = bool(rep.damage_ratio >= ratio_threshold)
        out.append(Outlier(c, rep))
    return out


def verify_outliers(candidates: Sequence[CandidateOutlier], evaluator: Evaluator, ratio_threshold: float = 5.0,
                    baseline: BaselineStats | None = None, n_random: int = 10, seed: int = 0) -> list[Outlier]:
    return [o for o in assess_candidates(candidates, evaluator, ratio_threshold, baseline, n_random, seed)
            if o.report.verified]


def layerwise_sweep(evaluator: Evaluator, dim: int, baseline: BaselineStats | None = None,
                    n_random: int = 10, seed: int = 0) -> list[DamageReport]:
    """One report per single-layer ablation of ``dim``, then the all-layers report."""
    if baseline is None:
        baseline = random_baseline_damage(evaluator, n_random, [dim], seed)
    reps = [measure_damage(evaluator, [dim], [l], baseline) for l in range(1, evaluator.cfg.n_layers + 1)]
    reps.append(measure_damage(evaluator, [dim], None, baseline))
    return reps


DAMAGE_COLUMNS = ["dim", "layer", "delta_mlm_loss", "delta_probe_acc", "baseline_mean", "baseline_sigma",
                  "damage_ratio", "verified"]


def _fmt(x: float) -> str:
    return "" if x is None or not np.isfinite(x) else format(float(x) + 0.0, ".8g")  # + 0.0 folds -0 into 0


def write_damage_csv(path: str | Path, reports: Iterable[DamageReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DAMAGE_COLUMNS)
        for r in reports:
            b = r.baseline
            w.writerow([
                "+".join(str(d) for d in r.dims), r.layer_label, _fmt(r.delta_mlm_loss), _fmt(r.delta_probe_acc),
                _fmt(b.drop_mean if b else None), _fmt(b.drop_sigma if b else None), _fmt(r.damage_ratio),
                int(r.verified),
            ])
