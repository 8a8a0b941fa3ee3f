"""Command-line front end: generate, train, register, eval, sweep, inspect.

Every command writes a ``resolved_config.json`` next to its artifacts. Numeric
artifacts are deterministic for a fixed seed; wall-clock information only goes
to the ``run.log`` sidecar.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import (SHAPE_FAMILIES, GenConfig, GenerationError, generate_pair,
                      list_samples, load_sample, overlap_ratio, sample_rng, save_sample)
from .geom3d import PointCloud, load_cloud, save_ply
from .network import CheckpointError, ModelConfig, UTOPICNet, load_checkpoint
from .registration import RegistrationResult, register_pair
from .training import (METRIC_COLUMNS, TrainConfig, eval_metrics, evaluate_model, failed_result, pair_result,
                       prepare_pairs, score_pair, train)

log = logging.getLogger("utopic")

# keep counts out of 1024 points for the overlap-ratio sweep
SWEEP_KEEP_COUNTS = (768, 700, 640, 600, 560)
SWEEP_BASE_POINTS = 1024


class CliError(RuntimeError):
    """Hard failure: reported on stderr, exit code 2."""


# ---------------------------------------------------------------- config

@dataclass
class DataConfig:
    n_samples: int = 16
    n_eval: int = 8
    fresh_per_epoch: bool = False      # train on n_samples new pairs every epoch instead of a fixed set
    families: list = field(default_factory=lambda: list(SHAPE_FAMILIES))


@dataclass
class SweepConfig:
    keep_counts: list = field(default_factory=lambda: list(SWEEP_KEEP_COUNTS))
    base_points: int = SWEEP_BASE_POINTS
    points_per_cloud: int = SWEEP_BASE_POINTS     # cloud size used for the model runs
    n_pairs: int = 40


_SECTIONS = {"generation": GenConfig, "training": TrainConfig, "model": ModelConfig,
             "data": DataConfig, "sweep": SweepConfig}


@dataclass
class RunConfig:
    generation: GenConfig = field(default_factory=GenConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0
    out: str = "out"
    has_model_section: bool = False     # a checkpoint is checked against the model section only if given

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls) if f.name != "has_model_section"}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise CliError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise CliError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kw[name] = typ(**sub)
            except (TypeError, ValueError) as exc:
                raise CliError(f"invalid {name!r} section: {exc}") from exc
        return cls(seed=int(d.get("seed", 0)), out=str(d.get("out", "out")),
                   has_model_section="model" in d, **kw)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["model"] = self.model.to_dict()
        d["seed"], d["out"] = self.seed, self.out
        return d


def load_run_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = RunConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.training.seed = cfg.seed
    # one K for the whole run: the training section owns it
    cfg.model.k_samples = cfg.training.k_samples
    return cfg


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def setup_logging(out_dir: Path | None):
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("UTOPIC_LOG", "error").lower(), logging.ERROR)
    root = logging.getLogger("utopic")
    root.setLevel(logging.DEBUG)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        side = logging.FileHandler(out_dir / "run.log")
        side.setLevel(logging.DEBUG if level == logging.DEBUG else logging.INFO)
        side.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(side)


def _map(fn, items, jobs: int):
    """Ordered map, optionally across worker processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _model_for(cfg: RunConfig, args, required: bool = True) -> UTOPICNet | None:
    if not args.checkpoint:
        if required:
            raise CliError("--checkpoint is required for this command")
        return None
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    expected = cfg.model if cfg.has_model_section else None
    try:
        return load_checkpoint(path, expected)
    except CheckpointError as exc:
        raise CliError(str(exc)) from exc


# ---------------------------------------------------------------- generate

def _gen_one(job):
    gen, family, seed, index = job
    s = generate_pair(family, gen, sample_rng(seed, index))
    s.meta["seed"] = [int(seed), int(index)]
    return s


def generate_samples(gen: GenConfig, n: int, seed: int, families, jobs: int = 1, start: int = 0):
    jobs_list = [(gen, families[k % len(families)], seed, k) for k in range(start, start + n)]
    return _map(_gen_one, jobs_list, jobs)


def cmd_generate(cfg: RunConfig, args) -> dict:
    out = Path(cfg.out)
    data_dir = out / "dataset"
    try:
        data_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {data_dir}: {exc}") from exc
    n = cfg.data.n_samples if args.n is None else args.n
    samples = generate_samples(cfg.generation, n, cfg.seed, cfg.data.families, args.jobs)
    ratios = []
    for k, s in enumerate(samples):
        try:
            save_sample(data_dir / f"sample_{k:05d}", s, cfg.generation)
        except OSError as exc:
            raise CliError(f"writing sample {k} under {data_dir}: {exc}") from exc
        ratios.append(overlap_ratio(s))
    summary = {"n_samples": n, "mean_overlap_ratio": float(np.mean(ratios)) if ratios else None,
               "overlap_ratios": ratios, "points_per_cloud": cfg.generation.points_per_cloud,
               "keep_fraction": cfg.generation.keep_fraction, "seed": cfg.seed}
    write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- train

def _load_or_generate(cfg: RunConfig, directory: str | None, n: int, offset: int, jobs: int):
    if directory:
        paths = list_samples(directory)
        if not paths:
            raise CliError(f"no samples found under {directory}")
        return [load_sample(p) for p in paths]
    return generate_samples(cfg.generation, n, cfg.seed + offset, cfg.data.families, jobs)


def cmd_train(cfg: RunConfig, args) -> dict:
    out = Path(cfg.out)
    if cfg.data.fresh_per_epoch and not cfg.training.train_dir:
        n = cfg.data.n_samples

        def train_set(epoch):
            return generate_samples(cfg.generation, n, cfg.seed, cfg.data.families, args.jobs, start=epoch * n)
    else:
        train_set = _load_or_generate(cfg, cfg.training.train_dir, cfg.data.n_samples, 0, args.jobs)
    eval_set = _load_or_generate(cfg, cfg.training.eval_dir, cfg.data.n_eval, 1, args.jobs) \
        if (cfg.training.eval_dir or cfg.data.n_eval > 0) else None
    if args.checkpoint:
        model = _model_for(cfg, args)
    else:
        model = UTOPICNet(cfg.model, seed=cfg.seed)
    loss_csv = out / "loss.csv"
    if loss_csv.exists():
        loss_csv.unlink()        # a fresh run starts a fresh log; appends happen within the run
    t0 = time.perf_counter()
    history = train(model, train_set, cfg.training, eval_set, out)
    log.info("training finished in %.1f s", time.perf_counter() - t0)
    write_json(out / "history.json", history)
    return {"epochs": len(history), "final": history[-1] if history else {}}


# ---------------------------------------------------------------- register

def _read_cloud(path) -> PointCloud:
    p = Path(path)
    if not p.exists():
        raise CliError(f"cloud file not found: {p}")
    try:
        return load_cloud(p)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read {p}: {exc}") from exc


def cmd_register(cfg: RunConfig, args) -> dict:
    model = _model_for(cfg, args)
    p, q = _read_cloud(args.source), _read_cloud(args.target)
    res = register_pair(p, q, model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(res.to_json() + "\n")
    return {"failed": res.failed, "n_correspondences": len(res.weights)}


# ---------------------------------------------------------------- eval

_WORKER_MODEL = None


def _init_worker(model):
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _score_in_worker(sample):
    return score_pair(_WORKER_MODEL, sample)


def _eval_samples(model: UTOPICNet, samples, jobs: int = 1):
    """Score every sample; with jobs > 1 each worker holds its own copy of the model."""
    samples = list(samples)
    if jobs <= 1 or len(samples) <= 1:
        return evaluate_model(model, prepare_pairs(samples, model))
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
        return eval_metrics(list(pool.map(_score_in_worker, samples)))


def _results_from_predictions(pred_dir: Path, samples, names):
    results = []
    for name, s in zip(names, samples):
        f = pred_dir / f"{name}.json"
        if not f.exists():
            log.warning("no prediction for %s", name)
            results.append(failed_result(s))
            continue
        try:
            res = RegistrationResult.from_dict(json.loads(f.read_text()))
        except (KeyError, ValueError) as exc:
            raise CliError(f"malformed prediction {f}: {exc}") from exc
        results.append(pair_result(s, res))
    return results


def cmd_eval(cfg: RunConfig, args) -> dict:
    data_dir = args.data or cfg.training.eval_dir
    if data_dir:
        paths = list_samples(data_dir)
        if not paths:
            raise CliError(f"no samples found under {data_dir}")
        samples, names = [load_sample(p) for p in paths], [p.name for p in paths]
    else:
        samples = generate_samples(cfg.generation, cfg.data.n_eval, cfg.seed + 1, cfg.data.families, args.jobs)
        names = [f"sample_{k:05d}" for k in range(len(samples))]
    if args.predictions:
        report = eval_metrics(_results_from_predictions(Path(args.predictions), samples, names))
    else:
        report = _eval_samples(_model_for(cfg, args), samples, args.jobs)
    report.write(cfg.out)
    return report.aggregate


# ---------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("bucket", "keep_count", "keep_fraction", "overlap_ratio", "n_pairs",
                 *METRIC_COLUMNS, "failed")


def cmd_sweep(cfg: RunConfig, args) -> list[dict]:
    """One row per crop bucket: mean overlap ratio and, with a checkpoint, registration errors."""
    sw = cfg.sweep
    model = _model_for(cfg, args, required=False)
    rows = []
    for b, count in enumerate(sw.keep_counts):
        frac = count / sw.base_points
        seed = cfg.seed + 1000 * (b + 1)
        base = dict(asdict(cfg.generation), keep_fraction=frac)
        # ratios come from the literal schedule (count points out of base_points) ...
        ratio_set = generate_samples(GenConfig(**dict(base, points_per_cloud=sw.base_points)),
                                     sw.n_pairs, seed, cfg.data.families, args.jobs)
        row = {"bucket": b, "keep_count": count, "keep_fraction": frac,
               "overlap_ratio": float(np.mean([overlap_ratio(s) for s in ratio_set])),
               "n_pairs": len(ratio_set)}
        # ... while the model sees the same keep fraction at its own cloud size
        if sw.points_per_cloud == sw.base_points:
            samples = ratio_set
        else:
            samples = generate_samples(GenConfig(**dict(base, points_per_cloud=sw.points_per_cloud)),
                                       sw.n_pairs, seed, cfg.data.families, args.jobs)
        if model is not None:
            rep = _eval_samples(model, samples, args.jobs)
            row.update({k: rep.aggregate[k] for k in METRIC_COLUMNS})
            row["failed"] = rep.aggregate["failed"]
        rows.append(row)
        log.info("bucket %d %s", b, row)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in SWEEP_COLUMNS])
    write_json(out / "sweep.json", rows)
    return rows


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return int(x)
    return repr(float(x))


# ---------------------------------------------------------------- inspect

def _overlap_colors(scores: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) ramp."""
    s = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), 0.0, 1.0)
    return np.stack([255 * s, np.zeros_like(s), 255 * (1 - s)], axis=1).round().astype(np.uint8)


def cmd_inspect(cfg: RunConfig, args) -> dict:
    model = _model_for(cfg, args)
    p, q = _read_cloud(args.source), _read_cloud(args.target)
    res = register_pair(p, q, model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "points.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cloud", "index", "x", "y", "z", "overlap", "uncertainty"])
        for tag, pc, o, u in (("source", p, res.overlap_p, res.uncertainty_p),
                              ("target", q, res.overlap_q, res.uncertainty_q)):
            for i, (pt, oi, ui) in enumerate(zip(pc.points, o, u)):
                w.writerow([tag, i, repr(float(pt[0])), repr(float(pt[1])), repr(float(pt[2])),
                            repr(float(oi)), repr(float(ui))])
    for tag, pc, o, u in (("source", p, res.overlap_p, res.uncertainty_p),
                          ("target", q, res.overlap_q, res.uncertainty_q)):
        save_ply(out / f"{tag}_overlap.ply", pc, colors=_overlap_colors(o),
                 scalars={"overlap": o, "uncertainty": u})
    return {"n_source": len(p), "n_target": len(q)}


# ---------------------------------------------------------------- entry point

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "register": cmd_register,
            "eval": cmd_eval, "sweep": cmd_sweep, "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint")
    ap = argparse.ArgumentParser(prog="utopic", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="synthesise a dataset")
    g.add_argument("--n", type=int, help="number of samples (overrides data.n_samples)")
    sub.add_parser("train", parents=[common], help="train a model")
    for name in ("register", "inspect"):
        r = sub.add_parser(name, parents=[common],
                           help="register two clouds" if name == "register" else
                           "dump per-point overlap and uncertainty")
        r.add_argument("source")
        r.add_argument("target")
    e = sub.add_parser("eval", parents=[common], help="evaluate on a dataset")
    e.add_argument("--data", help="dataset directory (sample_* folders)")
    e.add_argument("--predictions", help="directory of <sample>.json registration results")
    sub.add_parser("sweep", parents=[common], help="overlap-ratio sweep")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        out = Path(cfg.out)
        setup_logging(out)
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1")
        resolved = {"command": args.command, **cfg.to_dict()}
        resolved.pop("out")       # the location is not part of the run; keeps the file reproducible
        write_json(out / "resolved_config.json", resolved)
        log.info("command %s", args.command)
        result = COMMANDS[args.command](cfg, args)
        log.info("done: %s", result if not isinstance(result, list) else f"{len(result)} rows")
    except (CliError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        for h in list(logging.getLogger("utopic").handlers):
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
