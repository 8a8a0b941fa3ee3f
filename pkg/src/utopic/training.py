"""Losses, optimisers, the training loop and evaluation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .dataset import PairSample
from .diffmath import Tensor
from .geom3d import PointCloud, euler_from_rotation, pairwise_sq_dists, rotation_error_deg
from .network import CloudInputs, OverlapDistribution, UTOPICNet, prepare_cloud, save_checkpoint
from .registration import register_pair

log = logging.getLogger("utopic.training")

CLAMP = 1e-9
LOSS_COLUMNS = ("epoch", "step", "L_r", "L_o", "L_u", "L_c", "total")
METRIC_COLUMNS = ("rmse_r", "mae_r", "rmse_t", "mae_t", "err_r", "err_t", "oa")


class TrainingDiverged(RuntimeError):
    """A loss term became NaN or infinite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1
    learning_rate: float = 0.001
    lam: float = 0.5
    eta: float = 0.1
    k_samples: int = 50
    match_radius: float = 0.075
    seed: int = 0
    optimizer: str = "sgd"
    reg_reduction: str = "sum"
    use_completion: bool = True
    uncertainty_warmup: int = 0          # optimiser steps with the uncertainty weighting off
    lr_decay_step: int = 0               # from this step on the rate is scaled by lr_decay_factor (0: never)
    lr_decay_factor: float = 0.1
    train_dir: str | None = None
    eval_dir: str | None = None

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("balance factors must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.reg_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reg_reduction!r}")
        if not 0.0 < self.lr_decay_factor <= 1.0 or self.lr_decay_step < 0:
            raise ValueError("lr_decay_factor must lie in (0, 1] and lr_decay_step be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses

def _bce(pred, target, reduce: str) -> Tensor:
    p = dm.clamp(dm.tensor(pred), CLAMP, 1.0 - CLAMP)
    y = dm.tensor(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
                  .reshape(p.shape))
    ll = y * dm.log(p) + (1.0 - y) * dm.log(1.0 - p)
    return -(dm.tsum(ll) if reduce == "sum" else dm.mean(ll))


def registration_loss(c_bar, c_gt, reduction: str = "sum") -> Tensor:
    """Binary cross entropy between soft and ground-truth correspondences on the non-slack block."""
    c_bar = dm.tensor(c_bar)
    c_gt = np.asarray(c_gt, dtype=np.float64)
    if c_bar.shape != c_gt.shape:
        raise dm.DimensionError(f"registration_loss: {c_bar.shape} vs {c_gt.shape}")
    n, m = c_gt.shape[0] - 1, c_gt.shape[1] - 1
    return _bce(c_bar[:n, :m], c_gt[:n, :m], reduction)


def _pairs(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def overlap_loss(scores, labels) -> Tensor:
    """Mean negated BCE per cloud, summed over clouds.

    ``scores`` and ``labels`` are either one cloud's arrays or matching
    sequences (P, Q).
    """
    scores, labels = _pairs(scores), _pairs(labels)
    if len(scores) != len(labels):
        raise ValueError("overlap_loss: scores and labels differ in cloud count")
    total = None
    for s, y in zip(scores, labels):
        term = _bce(s, y, "mean")
        total = term if total is None else total + term
    return total


def gaussian_kl(mu, sigma) -> Tensor:
    """Mean over points of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = dm.tensor(mu), dm.tensor(sigma)
    var = sigma * sigma
    return dm.mean((var + mu * mu - 1.0 - dm.log(var)) * 0.5)


def uncertainty_loss(dist, labels, lam: float = 0.5, eta: float = 0.1,
                     rng: np.random.Generator | None = None) -> Tensor:
    """lam * BCE(sigmoid(fresh draw), labels) + eta * KL, summed over clouds."""
    if rng is None:
        rng = np.random.default_rng(0)
    dists, labels = _pairs(dist), _pairs(labels)
    total = None
    for d, y in zip(dists, labels):
        eps = Tensor(rng.standard_normal(d.mu.shape))
        draw = d.mu + eps * d.sigma
        term = _bce(dm.sigmoid(draw), y, "mean") * lam + gaussian_kl(d.mu, d.sigma) * eta
        total = term if total is None else total + term
    return total


def chamfer_loss(pred, gt) -> Tensor:
    """Symmetric mean of squared nearest-neighbour distances."""
    a = dm.tensor(pred.points if isinstance(pred, PointCloud) else pred)
    b = dm.tensor(gt.points if isinstance(gt, PointCloud) else gt)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer_loss needs non-empty clouds")
    diff = dm.reshape(a, (a.shape[0], 1, 3)) - dm.reshape(b, (1, b.shape[0], 3))
    d2 = dm.tsum(diff * diff, axis=2)
    return dm.mean(dm.tmin(d2, axis=1)) + dm.mean(dm.tmin(d2, axis=0))


def chamfer_value(a: np.ndarray, b: np.ndarray) -> float:
    d2 = pairwise_sq_dists(np.asarray(a), np.asarray(b))
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


# ---------------------------------------------------------------- optimisers

class SGD:
    def __init__(self, params, lr: float = 0.001):
        self.params, self.lr = list(params), lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}


class Adam:
    def __init__(self, params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr = list(params), lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "t": self.t}


def make_optimizer(model: UTOPICNet, cfg: TrainConfig):
    cls = Adam if cfg.optimizer == "adam" else SGD
    return cls(model.parameters(), lr=cfg.learning_rate)


# ---------------------------------------------------------------- loop

@dataclass
class PreparedPair:
    sample: PairSample
    xp: CloudInputs
    xq: CloudInputs


def prepare_pairs(samples, model: UTOPICNet) -> list[PreparedPair]:
    """Precompute neighbourhoods, descriptors and embeddings once per sample."""
    return [PreparedPair(s, prepare_cloud(s.source, model.cfg), prepare_cloud(s.target, model.cfg))
            for s in samples]


def pair_losses(model: UTOPICNet, pair: PreparedPair, cfg: TrainConfig,
                rng: np.random.Generator, step: int | None = None) -> dict[str, Tensor]:
    s = pair.sample
    use_u = None
    if step is not None and step < cfg.uncertainty_warmup:
        use_u = False
    out = model.forward(pair.xp, pair.xq, rng=rng, training=True, with_completion=cfg.use_completion,
                        use_uncertainty=use_u)
    labels = (s.gt_overlap_p, s.gt_overlap_q)
    terms = {
        "L_r": registration_loss(out["c_bar"], s.gt_correspondence, cfg.reg_reduction),
        "L_o": overlap_loss((out["overlap_p"], out["overlap_q"]), labels),
        "L_u": uncertainty_loss((out["dist_p"], out["dist_q"]), labels, cfg.lam, cfg.eta, rng),
    }
    if cfg.use_completion:
        terms["L_c"] = (chamfer_loss(out["completion_p"], s.complete_source)
                        + chamfer_loss(out["completion_q"], s.complete_target))
    else:
        terms["L_c"] = Tensor(np.zeros(()))
    return terms


def _check_finite(terms: dict, index: int):
    for name, t in terms.items():
        if not np.isfinite(t.item()):
            raise TrainingDiverged(f"loss term {name} is {t.item()} on sample {index}")


def train_epoch(model: UTOPICNet, dataset, cfg: TrainConfig, optimizer=None, epoch: int = 0,
                log_path=None, step0: int = 0) -> dict:
    """One pass over ``dataset`` (PairSamples or PreparedPairs); returns per-term means.

    Each batch averages the member gradients, then takes one optimiser step.
    """
    if len(dataset) == 0:
        raise ValueError("train_epoch needs a non-empty dataset")
    pairs = [p if isinstance(p, PreparedPair) else prepare_pairs([p], model)[0] for p in dataset]
    params = model.parameters()
    if optimizer is None:
        optimizer = make_optimizer(model, cfg)
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(pairs))
    sums = dict.fromkeys(LOSS_COLUMNS[2:], 0.0)
    rows = []
    step = step0
    for b0 in range(0, len(order), cfg.batch_size):
        batch = order[b0:b0 + cfg.batch_size]
        acc = [np.zeros_like(p.data) for p in params]
        batch_terms = dict.fromkeys(LOSS_COLUMNS[2:], 0.0)
        for idx in batch:
            rng = np.random.default_rng([cfg.seed, epoch, int(idx), 2])
            terms = pair_losses(model, pairs[idx], cfg, rng, step)
            _check_finite(terms, int(idx))
            total = terms["L_r"] + terms["L_o"] + terms["L_u"] + terms["L_c"]
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"total loss is {total.item()} on sample {int(idx)}")
            grads = dm.backward(total, params)
            for a, g in zip(acc, grads):
                a += g
            for k in ("L_r", "L_o", "L_u", "L_c"):
                batch_terms[k] += terms[k].item()
            batch_terms["total"] += total.item()
        optimizer.lr = learning_rate_at(cfg, step)
        optimizer.step([a / len(batch) for a in acc])
        step += 1
        rows.append([epoch, step] + [batch_terms[k] / len(batch) for k in LOSS_COLUMNS[2:]])
        for k in sums:
            sums[k] += batch_terms[k]
    if log_path is not None:
        append_loss_log(log_path, rows)
    stats = {k: v / len(pairs) for k, v in sums.items()}
    stats["steps"] = step
    return stats


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_decay_step and step >= cfg.lr_decay_step:
        return cfg.learning_rate * cfg.lr_decay_factor
    return cfg.learning_rate


def append_loss_log(path, rows):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])


def train(model: UTOPICNet, train_set, cfg: TrainConfig, eval_set=None, out_dir=None,
          max_seconds: float | None = None, clock=None) -> list[dict]:
    """Run ``cfg.epochs`` epochs; keeps the best checkpoint by held-out Error(R).

    ``train_set`` is a list of samples, or a callable ``epoch -> samples`` for
    a fresh stream every epoch. ``max_seconds`` stops after the epoch that
    crosses the budget (``clock`` supplies the time, so tests can keep runs
    deterministic).
    """
    import time
    clock = clock or time.perf_counter
    start = clock()
    model.cfg.k_samples = cfg.k_samples     # K is part of the model config stored in checkpoints
    fixed_pairs = None if callable(train_set) else prepare_pairs(train_set, model)
    eval_pairs = prepare_pairs(eval_set, model) if eval_set else None
    opt = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history, step, best = [], 0, math.inf
    for epoch in range(cfg.epochs):
        train_pairs = fixed_pairs if fixed_pairs is not None else prepare_pairs(train_set(epoch), model)
        stats = train_epoch(model, train_pairs, cfg, opt, epoch,
                            None if out is None else out / "loss.csv", step)
        step = stats["steps"]
        stats["epoch"] = epoch
        if eval_pairs:
            rep = evaluate_model(model, eval_pairs)
            stats["eval_err_r"] = rep.aggregate["err_r"]
            stats["eval_err_t"] = rep.aggregate["err_t"]
            if out is not None and rep.aggregate["err_r"] < best:
                best = rep.aggregate["err_r"]
                save_checkpoint(out / "best.ckpt", model, {"epoch": epoch, "err_r": best})
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in stats.items()})
        history.append(stats)
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, {"epoch": epoch})
        if max_seconds is not None and clock() - start > max_seconds:
            break
    return history


# ---------------------------------------------------------------- metrics

@dataclass
class PairResult:
    r_pred: np.ndarray
    t_pred: np.ndarray
    r_gt: np.ndarray
    t_gt: np.ndarray
    scores_p: np.ndarray | None = None
    scores_q: np.ndarray | None = None
    labels_p: np.ndarray | None = None
    labels_q: np.ndarray | None = None
    chamfer: float | None = None
    failed: bool = False


@dataclass
class MetricReport:
    rows: list
    aggregate: dict

    def to_json(self) -> str:
        return json.dumps({"aggregate": self.aggregate, "rows": self.rows}, indent=1, sort_keys=True)

    def write(self, out_dir, stem: str = "metrics"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json())
        cols = ["pair", *METRIC_COLUMNS, "chamfer", "failed"]
        with (out / f"{stem}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i, r in enumerate(self.rows):
                w.writerow([i] + [_fmt(r.get(c)) for c in cols[1:]])
            w.writerow(["mean"] + [_fmt(self.aggregate.get(c)) for c in cols[1:]])


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return int(x)
    return repr(float(x))


def _wrap180(a):
    return (np.asarray(a) + 180.0) % 360.0 - 180.0


def overlap_accuracy(scores, labels, threshold: float = 0.5) -> tuple[int, int]:
    pred = np.asarray(scores).reshape(-1) >= threshold
    y = np.asarray(labels).reshape(-1).astype(bool)
    return int((pred == y).sum()), len(y)


def eval_metrics(results) -> MetricReport:
    """Anisotropic Euler/translation RMSE and MAE, isotropic errors and overlap accuracy."""
    rows = []
    sq_r = ab_r = sq_t = ab_t = 0.0
    correct = total_pts = 0
    for res in results:
        de = _wrap180(euler_from_rotation(res.r_pred) - euler_from_rotation(res.r_gt))
        dt = np.asarray(res.t_pred) - np.asarray(res.t_gt)
        row = {"rmse_r": float(np.sqrt(np.mean(de ** 2))), "mae_r": float(np.mean(np.abs(de))),
               "rmse_t": float(np.sqrt(np.mean(dt ** 2))), "mae_t": float(np.mean(np.abs(dt))),
               "err_r": rotation_error_deg(res.r_pred, res.r_gt),
               "err_t": float(np.linalg.norm(dt)), "oa": None,
               "chamfer": res.chamfer, "failed": bool(res.failed)}
        sq_r += float(np.sum(de ** 2))
        ab_r += float(np.sum(np.abs(de)))
        sq_t += float(np.sum(dt ** 2))
        ab_t += float(np.sum(np.abs(dt)))
        c = n = 0
        for s, y in ((res.scores_p, res.labels_p), (res.scores_q, res.labels_q)):
            if s is not None and y is not None:
                ci, ni = overlap_accuracy(s, y)
                c, n = c + ci, n + ni
        if n:
            row["oa"] = c / n
            correct, total_pts = correct + c, total_pts + n
        rows.append(row)
    k = max(len(rows), 1)
    chamfers = [r["chamfer"] for r in rows if r["chamfer"] is not None]
    agg = {"rmse_r": math.sqrt(sq_r / (3 * k)), "mae_r": ab_r / (3 * k),
           "rmse_t": math.sqrt(sq_t / (3 * k)), "mae_t": ab_t / (3 * k),
           "err_r": float(np.mean([r["err_r"] for r in rows])) if rows else 0.0,
           "err_t": float(np.mean([r["err_t"] for r in rows])) if rows else 0.0,
           "oa": correct / total_pts if total_pts else None,
           "chamfer": float(np.mean(chamfers)) if chamfers else None,
           "failed": sum(r["failed"] for r in rows), "n_pairs": len(rows)}
    return MetricReport(rows, agg)


def pair_result(sample: PairSample, res) -> PairResult:
    """Score one :class:`RegistrationResult` against its sample's ground truth."""
    moved = sample.source.points @ res.transform.rotation.T + res.transform.translation
    return PairResult(res.transform.rotation, res.transform.translation,
                      sample.gt_transform.rotation, sample.gt_transform.translation,
                      res.overlap_p, res.overlap_q, sample.gt_overlap_p, sample.gt_overlap_q,
                      chamfer_value(moved, sample.target.points), res.failed)


def failed_result(sample: PairSample) -> PairResult:
    """Identity estimate flagged as failed, for pairs that raised or had no prediction."""
    return PairResult(np.eye(3), np.zeros(3), sample.gt_transform.rotation,
                      sample.gt_transform.translation, failed=True)


def score_pair(model: UTOPICNet, pair) -> PairResult:
    """Register one pair in inference mode; numerical failures become a failed row."""
    if not isinstance(pair, PreparedPair):
        pair = prepare_pairs([pair], model)[0]
    s = pair.sample
    try:
        res = register_pair(s.source, s.target, model, inputs=(pair.xp, pair.xq))
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("pair failed: %s", exc)
        return failed_result(s)
    return pair_result(s, res)


def evaluate_model(model: UTOPICNet, pairs) -> MetricReport:
    """Register every pair with ``model`` (inference mode) and score it."""
    return eval_metrics([score_pair(model, p) for p in pairs])


def config_dict(cfg) -> dict:
    return asdict(cfg)
