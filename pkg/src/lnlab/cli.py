"""Command-line experiment driver.

    lnlab gradcheck [--dim 8 --length 4 --layers 2] [--variant V ...] [--seed N ...]
    lnlab gradscan  --config exp.json [--out DIR] [--seed N ...] [--variant V ...]
    lnlab train     --config exp.json [--out DIR] [--seed N ...] [--variant V ...]
    lnlab simscan   --config exp.json --checkpoint best.npz [--out DIR]

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime or
numeric failure (including I/O), 3 gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .diagnostics import (
    decay_fit,
    layer_gradient_norms,
    layer_output_cosine_matrix,
    write_gradient_report,
    write_similarity,
)
from .model import Batch, CheckpointError, ConfigError, ModelConfig, build_model, forward_loss, load_checkpoint
from .nn import Variant
from .train import TaskSpec, TrainConfig, make_batch, train_run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

GRADCHECK_MAX_DIM = 16
GRADCHECK_MAX_LENGTH = 6
GRADCHECK_TOL = 1e-5

SIDES = ("encoder", "decoder")
SUMMARY_COLUMNS = ["variant", "seed", "steps", "final_train_nll", "final_valid_nll", "final_valid_accuracy",
                   "best_valid_nll", "diverged", "skipped_steps"]


def _strict(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs"
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=list)  # empty: use model.variant
    probe_batch: int = 32
    sides: list = field(default_factory=lambda: list(SIDES))
    workers: int = 1

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown experiment config keys {unknown}")
        kw = dict(data)
        kw["model"] = _strict(ModelConfig, data.get("model", {}), "model")
        kw["task"] = _strict(TaskSpec, data.get("task", {}), "task")
        train = dict(data.get("train", {})) if isinstance(data.get("train", {}), dict) else data.get("train")
        if isinstance(train, dict) and "betas" in train:
            train["betas"] = tuple(train["betas"])
        kw["train"] = _strict(TrainConfig, train, "train")
        return cls(**kw).validate()

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def run_variants(self):
        return [Variant.parse(v) for v in self.variants] if self.variants else [self.model.variant]

    def validate(self):
        if not isinstance(self.seeds, list) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of integers")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool) or s < 0:
                raise ConfigError(f"seeds must be non-negative integers, got {s!r}")
        try:
            self.variants = [Variant.parse(v).value for v in self.variants]
        except ValueError as exc:
            raise ConfigError(f"variants: {exc}") from exc
        if not self.sides or any(s not in SIDES for s in self.sides):
            raise ConfigError(f"sides must be a non-empty subset of {list(SIDES)}, got {self.sides!r}")
        if not isinstance(self.probe_batch, int) or self.probe_batch < 1:
            raise ConfigError(f"probe_batch must be a positive integer, got {self.probe_batch!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out must be a non-empty path string")
        for v in self.run_variants():
            dataclasses.replace(self.model, variant=v).validate()
        self.task.validate(self.model.max_len)
        if self.task.vocab != self.model.vocab:
            raise ConfigError(f"task vocab {self.task.vocab} != model vocab {self.model.vocab}")
        self.train.validate()
        return self

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "task": dataclasses.asdict(self.task),
            "train": self.train.to_dict(),
            "out": self.out,
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "probe_batch": self.probe_batch,
            "sides": list(self.sides),
            "workers": self.workers,
        }

    def for_run(self, variant, seed):
        """Model config and task spec of a single (variant, seed) run."""
        cfg = dataclasses.replace(self.model, variant=variant, seed=seed)
        return cfg, dataclasses.replace(self.task, seed=seed)


def probe_batch(spec, size):
    """Fixed diagnostic batch for a task; independent of the training stream."""
    return make_batch(spec, np.random.default_rng([spec.seed, 7]), size)


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fan_out(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_batch(length):
    """Two sequences framed to ``length`` and ``length - 1`` tokens, so padding is exercised."""
    body = list(range(3, 3 + length - 1))
    short = body[:-1] or body
    return Batch.from_sequences([body, short], [body[::-1], short[::-1]])


def gradcheck_variant(variant, seed, dim=8, length=4, layers=2):
    """Max relative gradient error of a tiny float64 model for one variant."""
    heads = 2 if dim % 2 == 0 else 1
    cfg = ModelConfig(n_enc=layers, n_dec=layers, d=dim, heads=heads, d_ff=2 * dim, vocab=3 + length,
                      max_len=length, variant=variant, seed=seed, dtype="float64")
    model = build_model(cfg)
    # move parameters off their symmetric init so every path carries gradient
    rng = np.random.default_rng([seed, 99])
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    batch = gradcheck_batch(length)
    return ad.grad_check(lambda *_: forward_loss(model, batch)[0], model.parameters())


def cmd_gradcheck(args):
    if args.dim > GRADCHECK_MAX_DIM or args.dim < 2:
        raise ConfigError(f"gradcheck dim must lie in [2, {GRADCHECK_MAX_DIM}], got {args.dim}")
    if args.length > GRADCHECK_MAX_LENGTH or args.length < 2:
        raise ConfigError(f"gradcheck length must lie in [2, {GRADCHECK_MAX_LENGTH}], got {args.length}")
    if not 1 <= args.layers <= 4:
        raise ConfigError(f"gradcheck layers must lie in [1, 4], got {args.layers}")
    variants = [Variant.parse(v) for v in args.variant] if args.variant else list(Variant)
    seeds = args.seed or [0]
    results = []
    for v in variants:
        worst = float(max(gradcheck_variant(v, s, args.dim, args.length, args.layers) for s in seeds))
        ok = bool(worst < GRADCHECK_TOL)
        results.append({"variant": v.value, "max_rel_error": worst, "passed": ok})
        print(f"gradcheck {v.value:<9} max_rel_error={worst:.3e} {'PASS' if ok else 'FAIL'}")
    if args.out:
        out = _prepare_out(args.out)
        _write_json(out / "gradcheck.json", {"dim": args.dim, "length": args.length, "layers": args.layers,
                                             "seeds": seeds, "tolerance": GRADCHECK_TOL, "results": results})
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# gradscan


def _gradscan_one(exp, out, variant, seed):
    cfg, spec = exp.for_run(variant, seed)
    model = build_model(cfg)
    report = layer_gradient_norms(model, probe_batch(spec, exp.probe_batch))
    write_gradient_report(report, out, f"{variant.value}_seed{seed}")
    return report


def cmd_gradscan(exp):
    out = _prepare_out(exp.out)
    _write_json(out / "config.json", exp.to_dict())
    jobs = [(exp, out, v, s) for v in exp.run_variants() for s in exp.seeds]
    for report in _fan_out(_gradscan_one, jobs, exp.workers):
        fit = decay_fit(report.decoder) if len(report.decoder) > 1 else None
        extra = f" decoder_ratio={fit.ratio:.4g} decay_rate={fit.rate:+.4f}" if fit else ""
        print(f"gradscan {report.variant:<9} seed={report.seed}{extra}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_one(exp, out, variant, seed):
    cfg, spec = exp.for_run(variant, seed)
    run_dir = _prepare_out(out / f"{variant.value}_seed{seed}")
    _write_json(run_dir / "config.json", exp.to_dict())
    run = train_run(cfg, spec, hp=exp.train, out_dir=run_dir)
    curves = {
        "steps": run.steps,
        "valid_steps": run.valid_steps,
        "valid_nll": [_finite(x) for x in run.valid_nll],
        "valid_accuracy": run.valid_accuracy,
    }
    _write_json(run_dir / "run.json", {"summary": _clean(run.summary()), "curves": curves})
    return run.summary()


def cmd_train(exp):
    out = _prepare_out(exp.out)
    _write_json(out / "config.json", exp.to_dict())
    jobs = [(exp, out, v, s) for v in exp.run_variants() for s in exp.seeds]
    rows = _fan_out(_train_one, jobs, exp.workers)
    for r in rows:
        acc = r["final_valid_accuracy"]
        nll = r["final_valid_nll"]
        print(f"train {r['variant']:<9} seed={r['seed']} steps={r['steps']} "
              f"valid_nll={_fmt(nll)} valid_acc={_fmt(acc)} diverged={r['diverged']}")
    _write_json(out / "summary.json", [_clean(r) for r in rows])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in SUMMARY_COLUMNS])
    (out / "summary.csv").write_text(buf.getvalue())
    return EXIT_OK


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


def _clean(d):
    return {k: (_finite(v) if isinstance(v, float) else v) for k, v in d.items()}


def _fmt(x):
    return "nan" if x is None else f"{x:.4f}"


# ---------------------------------------------------------------------------
# simscan


def cmd_simscan(exp, checkpoint):
    if checkpoint is None:
        raise ConfigError("simscan needs --checkpoint")
    model = load_checkpoint(checkpoint)
    spec = dataclasses.replace(exp.task, seed=exp.seeds[0])
    spec.validate(model.cfg.max_len)
    if spec.vocab != model.cfg.vocab:
        raise ConfigError(f"task vocab {spec.vocab} != checkpoint vocab {model.cfg.vocab}")
    batch = probe_batch(spec, exp.probe_batch)
    sims = [layer_output_cosine_matrix(model, batch, side) for side in exp.sides]
    out = _prepare_out(exp.out)
    _write_json(out / "config.json", exp.to_dict())
    meta = {"checkpoint": Path(checkpoint).name, "variant": model.cfg.variant.value, "seed": spec.seed,
            "probe_batch": exp.probe_batch}
    write_similarity(sims, out, meta)
    for s in sims:
        print(f"simscan {s.side:<8} {s.matrix.shape[0]}x{s.matrix.shape[0]} final_vs_first3={s.lower_left_mean():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="lnlab", description="Layer-normalization placement experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, action="append", help="seed; repeat for a sweep (overrides config)")
        p.add_argument("--variant", action="append", help="postln, preln, b2t or b2t_noln; repeatable")

    g = sub.add_parser("gradcheck", help="finite-difference check of every variant on a tiny model")
    common(g, config=False)
    g.add_argument("--dim", type=int, default=8)
    g.add_argument("--length", type=int, default=4)
    g.add_argument("--layers", type=int, default=2)

    common(sub.add_parser("gradscan", help="per-layer and per-probe gradient norms at init"))
    common(sub.add_parser("train", help="train on the synthetic task and log curves"))
    s = sub.add_parser("simscan", help="layer-output cosine similarity of a checkpoint")
    common(s)
    s.add_argument("--checkpoint", type=Path)
    return parser


def load_experiment(args):
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if args.out:
        exp.out = args.out
    if args.seed:
        exp.seeds = list(args.seed)
    if args.variant:
        exp.variants = list(args.variant)
    return exp.validate()


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that slot means a runtime failure
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        exp = load_experiment(args)
        if args.command == "gradscan":
            return cmd_gradscan(exp)
        if args.command == "train":
            return cmd_train(exp)
        return cmd_simscan(exp, args.checkpoint)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
