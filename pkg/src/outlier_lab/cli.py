"""Experiment driver: corpus -> train -> detect -> verify -> diagnose, into one artifact directory."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, ExperimentConfig, resolve_config, write_config_ini
from .corpus import (Corpus, FrequencyTable, Scheme, TrainingStream, apply_tokenization_scheme, estimate_frequency,
                     generate_corpus, mask_batch, read_corpus, write_corpus)
from .diagnostics import (attention_query_correlation, checkpoint_dynamics, dynamics_conditions,
                          freq_magnitude_correlation, generation_frequency_shift, write_correlation_csv,
                          write_dynamics_csv, write_shift_csv)
from .outlier import (DAMAGE_FLOOR, Evaluator, assess_candidates, find_candidates, layerwise_sweep, measure_damage,
                      random_baseline_damage, write_damage_csv)
from .train import Checkpoint, fine_tune_probe, load_checkpoint, make_probe_data, save_checkpoint, train_mlm

log = logging.getLogger("outlier_lab")

MANIFEST = "manifest.json"
LOCK = ".lock"


class StageError(RuntimeError):
    pass


# -- artifact directory -------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._stream = None
        self._eval_stream = None

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageError(f"missing {name}; run `{stage}` first")
        return p

    # manifest

    def load_manifest(self) -> dict | None:
        p = self.path(MANIFEST)
        return json.loads(p.read_text()) if p.exists() else None

    def check_manifest(self) -> None:
        m = self.load_manifest()
        if m is not None and m.get("config_hash") != self.cfg.digest():
            raise StageError(f"{self.out} holds artifacts from a different config (hash {m.get('config_hash')})")

    def write_manifest(self, stage: str) -> dict:
        m = self.load_manifest() or {"stages": {}}
        m["config_hash"] = self.cfg.digest()
        m["version"] = __version__
        m["stages"][stage] = True
        files = {}
        for p in sorted(self.out.rglob("*")):
            rel = p.relative_to(self.out).as_posix()
            if p.is_file() and rel not in (MANIFEST, LOCK):
                files[rel] = _sha256(p)
        m["files"] = files
        m["stages"] = dict(sorted(m["stages"].items()))
        self.path(MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return m

    def echo_config(self) -> None:
        write_config_ini(self.path("config.ini"), self.cfg)
        self.path("config.json").write_text(self.cfg.to_json() + "\n")

    # shared state

    def corpus(self) -> Corpus:
        return read_corpus(self.require("corpus.txt", "gen-corpus"), self.cfg.corpus.vocab_size)

    def stream(self, scheme: str | None = None) -> TrainingStream:
        s = self.cfg.scheme
        name = scheme or s.name
        if scheme is None and self._stream is not None:
            return self._stream
        st = apply_tokenization_scheme(self.corpus(), Scheme(name), s.max_seq_len, s.freq_threshold,
                                       s.replace_prob, s.seed)
        if scheme is None:
            self._stream = st
        return st

    def eval_stream(self) -> TrainingStream:
        """Evaluation always uses the unmodified, sentence-split rows."""
        if self._eval_stream is None:
            s = self.cfg.scheme
            self._eval_stream = (self.stream() if s.name == Scheme.SPLIT.value
                                 else apply_tokenization_scheme(self.corpus(), Scheme.SPLIT, s.max_seq_len))
        return self._eval_stream

    def sample_rows(self, n: int, seed: int) -> np.ndarray:
        rows = self.eval_stream().rows
        order = np.random.default_rng([seed, 37]).permutation(len(rows))[:n]
        return rows[np.sort(order)]

    def checkpoints(self, sub: str = "") -> list[Path]:
        d = self.path(sub, "checkpoints") if sub else self.path("checkpoints")
        found = sorted(d.glob("step_*.ckpt")) if d.exists() else []
        if not found:
            raise StageError("no checkpoints found; run `train` first")
        return found


# -- stages -------------------------------------------------------------------

def cmd_gen_corpus(run: Run, args) -> dict:
    corpus = generate_corpus(run.cfg.corpus)
    write_corpus(run.path("corpus.txt"), corpus)
    stream = run.stream()
    estimate_frequency(stream, include_special=True).to_csv(run.path("frequency.csv"))
    return {"documents": corpus.n_documents, "sentences": corpus.n_sentences, "rows": len(stream),
            "truncated": stream.truncated}


def _train_into(run: Run, stream: TrainingStream, sub: str = "") -> list[Checkpoint]:
    d = run.path(sub, "checkpoints") if sub else run.path("checkpoints")
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("step_*.ckpt"):
        old.unlink()
    losses: list[float] = []
    cks = train_mlm(run.cfg.train, run.cfg.model, stream, loss_log=losses,
                    on_checkpoint=lambda ck: save_checkpoint(ck, d / f"step_{ck.step:07d}.ckpt"))
    with open(d.parent / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mlm_loss"])
        for ck in cks:
            w.writerow([ck.step, format(ck.running_loss, ".8g")])
    with open(d.parent / "step_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mlm_loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, format(loss, ".8g")])
    return cks


def cmd_train(run: Run, args) -> dict:
    cks = _train_into(run, run.stream())
    return {"checkpoints": len(cks), "initial_loss": cks[0].running_loss, "final_loss": cks[-1].running_loss}


def _evaluator(run: Run, pretrained: Checkpoint, tuned: Checkpoint | None) -> Evaluator:
    c = run.cfg.detect
    rows = run.sample_rows(c.eval_rows, c.seed)
    batch = mask_batch(rows, c.mask_rate, [c.seed, 31], run.cfg.model.vocab_size)
    _, probe_eval = make_probe_data(run.cfg.probe, run.eval_stream())
    return Evaluator(pretrained.model_config, pretrained.params, batch,
                     tuned.params if tuned is not None else None, probe_eval)


def _detect(run: Run, sub: str = "") -> dict:
    cfg = run.cfg
    base = run.path(sub) if sub else run.out
    final = load_checkpoint(run.checkpoints(sub)[-1])
    train, evals = make_probe_data(cfg.probe, run.eval_stream())
    tuned, acc = fine_tune_probe(final, train, evals, cfg.finetune)
    save_checkpoint(tuned, base / "finetuned.ckpt")
    ev = _evaluator(run, final, tuned)
    full_mlm, full_acc = ev.full()

    cands = find_candidates(final.params, cfg.detect.k_sigma, cfg.detect.min_coverage)
    baseline = random_baseline_damage(ev, cfg.detect.n_random, [c.dim for c in cands], cfg.detect.seed)
    assessed = assess_candidates(cands, ev, cfg.detect.ratio_threshold, baseline)

    L = cfg.model.n_layers
    with open(base / "candidates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "coverage", "max_abs_z"] + [f"z_layer{l}" for l in range(1, L + 1)])
        for c in cands:
            w.writerow([c.dim, format(c.coverage, ".8g"), format(c.max_abs_z, ".8g")]
                       + [format(c.per_layer_z[l], ".8g") for l in range(1, L + 1)])
    with open(base / "baseline.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "delta_mlm_loss", "delta_probe_acc"])
        for d, m, p in zip(baseline.dims, baseline.delta_mlm, baseline.delta_probe):
            w.writerow([d, format(m, ".8g"), format(p, ".8g")])
    write_damage_csv(base / "outliers.csv", [o.report for o in assessed])
    verified = [o.report.dims[0] for o in assessed if o.report.verified]
    summary = {
        "step": final.step,
        "full_mlm_loss": full_mlm,
        "full_probe_acc": full_acc,
        "candidates": [c.dim for c in cands],
        "verified": verified,
        "no_verified_outlier": not verified,
        "damage_ratios": {str(o.report.dims[0]): o.report.damage_ratio for o in assessed},
        "max_damage_ratio": max((o.report.damage_ratio for o in assessed), default=0.0),
        "baseline_dims": baseline.dims,
        "baseline_drop_mean": baseline.drop_mean,
        "baseline_drop_sigma": baseline.drop_sigma,
        "n_random": len(baseline.dims),
        "n_probe_eval": len(evals),
    }
    (base / "detect.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if not verified:
        log.warning("no verified outlier: no candidate reaches damage ratio %.1f", cfg.detect.ratio_threshold)
    return summary


def cmd_detect(run: Run, args) -> dict:
    return _detect(run)


def _loaded_evaluator(run: Run) -> Evaluator:
    final = load_checkpoint(run.checkpoints()[-1])
    tuned = load_checkpoint(run.require("finetuned.ckpt", "detect"))
    return _evaluator(run, final, tuned)


def _detect_summary(run: Run) -> dict:
    return json.loads(run.require("detect.json", "detect").read_text())


def _int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_ablate(run: Run, args) -> dict:
    dims = _int_list(getattr(args, "dims", None))
    if dims is None:
        dims = _detect_summary(run)["candidates"]
    layers = _int_list(getattr(args, "layers", None))
    ev = _loaded_evaluator(run)
    rep = measure_damage(ev, dims, layers, n_random=run.cfg.detect.n_random, seed=run.cfg.detect.seed)
    rep.verified = bool(rep.damage_ratio >= run.cfg.detect.ratio_threshold)
    write_damage_csv(run.path("ablation.csv"), [rep])
    return {"dims": list(rep.dims), "delta_mlm_loss": rep.delta_mlm_loss, "delta_probe_acc": rep.delta_probe_acc,
            "damage_ratio": rep.damage_ratio}


def cmd_sweep(run: Run, args) -> dict:
    summary = _detect_summary(run)
    dims = _int_list(getattr(args, "dims", None)) or summary["verified"] or summary["candidates"]
    ev = _loaded_evaluator(run)
    baseline = random_baseline_damage(ev, run.cfg.detect.n_random, summary["candidates"], run.cfg.detect.seed)
    reports = [r for d in dims for r in layerwise_sweep(ev, d, baseline)]
    write_damage_csv(run.path("sweep.csv"), reports)
    return {"dims": dims, "rows": len(reports)}


def cmd_diagnose(run: Run, args) -> dict:
    cfg = run.cfg
    dc = cfg.diagnostics
    summary = _detect_summary(run)
    dims = summary["candidates"]
    final = load_checkpoint(run.checkpoints()[-1])
    freq = FrequencyTable.from_csv(run.require("frequency.csv", "gen-corpus"))
    rows = run.sample_rows(dc.n_rows, dc.seed)
    fc = freq_magnitude_correlation(final.params, cfg.model, rows, freq, dims, (False, True), dc.n_control,
                                    dc.seed, dc.per_type, dc.method)
    write_correlation_csv(run.path("freq_corr.csv"), fc)
    ac = attention_query_correlation(final.params, cfg.model, rows, dims, (False, True), dc.n_control, dc.seed)
    write_correlation_csv(run.path("attn_corr.csv"), ac)
    conds = {k: v for k, v in dynamics_conditions(dims).items() if k != "full"}
    shift = generation_frequency_shift(final.params, cfg.model, rows, conds, freq, dc.mask_rate, dc.bins, dc.seed)
    write_shift_csv(run.path("generation_shift.csv"), shift)
    pattern = {}
    for d in summary["verified"]:
        ratios = {}
        for l in range(1, cfg.model.n_layers + 1):
            r = fc.r(l, d, False)
            ctrl = fc.control_mean_abs(l, False)
            ratios[l] = None if r is None or not ctrl else abs(r) / ctrl
        pattern[str(d)] = {"abs_r_over_random": ratios,
                           "exceeds_3x": any(v is not None and v > 3 for v in ratios.values())}
    out = {"dims": dims, "mean_log_freq": shift.mean_log_freq, "n_predicted": shift.n_predicted,
           "special_pairs_excluded": fc.special_pairs, "frequency_pattern": pattern}
    run.path("diagnose.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def cmd_dynamics(run: Run, args) -> dict:
    cfg = run.cfg
    dims = _detect_summary(run)["candidates"]
    paths = run.checkpoints()
    keep = paths[::cfg.diagnostics.dynamics_every]
    if keep[-1] != paths[-1]:
        keep.append(paths[-1])
    cks = [load_checkpoint(p) for p in keep]
    train, evals = make_probe_data(cfg.probe, run.eval_stream())
    batch = _evaluator(run, cks[-1], None).mlm_batch
    series = checkpoint_dynamics(cks, train, evals, batch, dims, cfg.finetune)
    write_dynamics_csv(run.path("dynamics.csv"), series)
    return {"checkpoints": [c.step for c in cks], "conditions": series.conditions()}


def _ratio_noise(summary: dict, ratio: float) -> float:
    """Standard error of a damage ratio from eval-set size and baseline spread."""
    base = max(summary["baseline_drop_mean"], DAMAGE_FLOOR)
    p = min(max(summary["full_probe_acc"] / 100.0, 0.0), 1.0)
    acc_se = 100.0 * np.sqrt(2.0 * max(p * (1 - p), 1.0 / summary["n_probe_eval"]) / summary["n_probe_eval"])
    base_se = summary["baseline_drop_sigma"] / np.sqrt(summary["n_random"])
    return float(np.hypot(acc_se / base, ratio * base_se / base))


def cmd_compare_schemes(run: Run, args) -> dict:
    rows = {}
    for name in run.cfg.compare.scheme_list():
        sub = f"schemes/{name}"
        cks = _train_into(run, run.stream(name), sub)
        summary = _detect(run, sub) if run.cfg.train.total_steps > 0 else None
        rows[name] = (cks, summary)
    with open(run.path("compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "initial_mlm_loss", "final_mlm_loss", "probe_acc", "n_candidates", "n_verified",
                    "max_damage_ratio", "ratio_noise"])
        for name, (cks, s) in rows.items():
            if s is None:
                w.writerow([name, format(cks[0].running_loss, ".8g"), format(cks[-1].running_loss, ".8g"),
                            "", 0, 0, "", ""])
                continue
            w.writerow([name, format(cks[0].running_loss, ".8g"), format(cks[-1].running_loss, ".8g"),
                        format(s["full_probe_acc"], ".8g"), len(s["candidates"]), len(s["verified"]),
                        format(s["max_damage_ratio"], ".8g"), format(_ratio_noise(s, s["max_damage_ratio"]), ".8g")])
    out = {"schemes": list(rows)}
    sp, rz = rows.get("SPLIT", (None, None))[1], rows.get("RANDOMIZE", (None, None))[1]
    if sp is not None and rz is not None:
        a, b = sp["max_damage_ratio"], rz["max_damage_ratio"]
        noise = 2.0 * float(np.hypot(_ratio_noise(sp, a), _ratio_noise(rz, b)))
        out.update(split_max_ratio=a, randomize_max_ratio=b, noise=noise,
                   randomize_within_noise=bool(b <= a + noise),
                   randomize_less_damaging=bool(b < a))
    run.path("compare.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def cmd_report(run: Run, args) -> dict:
    m = run.load_manifest()
    if m is None:
        raise StageError("no manifest found")
    bad = [f for f, d in m["files"].items() if not run.path(f).exists() or _sha256(run.path(f)) != d]
    report: dict = {"config_hash": m["config_hash"], "version": m["version"], "stages": m["stages"],
                    "files_ok": not bad, "bad_files": bad}
    if run.path("train_loss.csv").exists():
        with open(run.path("train_loss.csv")) as fh:
            losses = [(int(r["step"]), float(r["mlm_loss"])) for r in csv.DictReader(fh)]
        report["train"] = {"initial_loss": losses[0][1], "final_loss": losses[-1][1],
                           "final_over_initial": losses[-1][1] / losses[0][1]}
    for name in ("detect", "diagnose", "compare"):
        p = run.path(f"{name}.json")
        if p.exists():
            report[name] = json.loads(p.read_text())
    run.path("report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if bad:
        raise StageError(f"manifest digests do not verify: {bad}")
    return report


PIPELINE = ["gen-corpus", "train", "detect", "sweep", "diagnose", "dynamics", "report"]

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "detect": cmd_detect,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "dynamics": cmd_dynamics,
    "compare-schemes": cmd_compare_schemes,
    "report": cmd_report,
}


def cmd_run(run: Run, args) -> dict:
    done = {}
    for stage in PIPELINE:
        if stage == "dynamics" and not run.cfg.diagnostics.dynamics:
            continue
        done[stage] = _execute(run, stage, args)
    return {"stages": list(done)}


def _execute(run: Run, command: str, args) -> dict:
    log.info("stage %s", command)
    result = COMMANDS[command](run, args)
    # report too: it rewrites report.json, whose digest must stay current
    run.write_manifest(command)
    return result


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage text for humans, then the machine-parsable line
        self.print_usage(sys.stderr)
        sys.exit(_fail(2, "usage", message))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="outlier-lab", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.total_steps=0 (repeatable)")
    common.add_argument("--out", default="runs/default", help="artifact directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name in list(COMMANDS) + ["run"]:
        sp = sub.add_parser(name, parents=[common])
        if name in ("ablate", "sweep"):
            sp.add_argument("--dims", help="comma-separated dims (default: detected)")
        if name == "ablate":
            sp.add_argument("--layers", help="comma-separated layers 1..L (default: all)")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    if args.command == "report" and not (out / MANIFEST).exists():
        return _fail(1, "stage", "no manifest found")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
    except ConfigError as e:
        return _fail(3, "config", str(e))
    threads = os.environ.get("OUTLIER_LAB_THREADS")
    try:
        out.mkdir(parents=True, exist_ok=True)
        with ExitStack() as stack:
            stack.enter_context(FileLock(str(out / LOCK), timeout=0))
            if threads:
                stack.enter_context(threadpool_limits(int(threads)))
            run = Run(cfg, out)
            run.check_manifest()
            run.echo_config()
            if args.command == "run":
                result = cmd_run(run, args)
            else:
                result = _execute(run, args.command, args)
    except Timeout:
        return _fail(1, "lock", f"{out} is in use by another command")
    except (StageError, ValueError, OSError) as e:
        return _fail(1, "stage", " ".join(str(e).split()))
    except Exception as e:  # anything else is still a stage failure, reported on one line
        log.debug("stage failure", exc_info=True)
        return _fail(1, "stage", f"{type(e).__name__}: {' '.join(str(e).split())}")
    sys.stdout.write(json.dumps({"command": args.command, "out": str(out), "result": result},
                                sort_keys=True, default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
