"""Learnable blocks: local-graph extractor, geometry transformer, uncertainty
heads, uncertainty-aware weighting, overlap head and coarse completion head.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import MLP, ContractError, DimensionError, Linear, Tensor
from .embedding import RelationEmbedding, relation_embedding, triangle_perimeter, two_nn
from .geom3d import PointCloud, knn_all
from .matching import affinity, sinkhorn_slack


@dataclass
class ModelConfig:
    feat_dim: int = 64                       # V
    d_t: int = 64                            # transformer width
    n_iter: int = 3                          # self/cross alternations per transformer
    k_samples: int = 50                      # K draws for the uncertainty map
    k_local: int = 16                        # graph neighbours in the extractor
    extractor_channels: tuple = (64, 64, 128, 256)
    descriptor_scales: tuple = (8, 16, 32)
    descriptor_gain: float = 1.0
    standardize_descriptors: bool = True
    coord_gain: float = 0.0                  # > 0 appends centred xyz (breaks rigid invariance)
    ffn_mult: int = 2
    ln_eps: float = 1e-2
    pre_norm: bool = False
    n_completion: int = 64
    sinkhorn_iters: int = 5
    slack_init: float = 0.0
    use_geometry: bool = True                # False pins W^G to zero (ablation)
    use_uncertainty: bool = True
    detach_uncertainty: bool = True

    def __post_init__(self):
        self.extractor_channels = tuple(self.extractor_channels)
        self.descriptor_scales = tuple(self.descriptor_scales)
        if self.n_iter < 1:
            raise ContractError("n_iter must be at least 1")
        if self.k_samples < 2:
            raise ContractError("k_samples must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor_channels"] = list(self.extractor_channels)
        d["descriptor_scales"] = list(self.descriptor_scales)
        return d


# ---------------------------------------------------------------- per-cloud inputs

def local_descriptors(points: np.ndarray, scales=(8, 16, 32), gain: float = 10.0,
                      standardize: bool = False) -> np.ndarray:
    """Rigid-invariant per-point input channels.

    For each neighbourhood size k: the three sorted principal standard
    deviations of the k-NN patch and the offset of the point from the patch
    centroid. One extra channel holds the 2-NN triangle perimeter.
    """
    n = len(points)
    order = knn_all(points, min(max(scales), n - 1), exclude_self=True)
    cols = []
    for k in scales:
        k = min(k, n - 1)
        patch = np.concatenate([points[:, None, :], points[order[:, :k]]], axis=1)
        centroid = patch.mean(axis=1)
        centered = patch - centroid[:, None, :]
        cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
        ev = np.linalg.eigvalsh(cov)[:, ::-1]
        cols.append(np.sqrt(np.clip(ev, 0.0, None)))
        cols.append(np.linalg.norm(points - centroid, axis=1, keepdims=True))
    cols.append(triangle_perimeter(points, order[:, :2])[:, None])
    d = np.concatenate(cols, axis=1)
    if standardize:
        # per-cloud channel standardisation; still invariant to rigid motion and point order
        d = (d - d.mean(axis=0)) / (d.std(axis=0) + 1e-9)
    return gain * d


def descriptor_dim(scales) -> int:
    return 4 * len(scales) + 1


@dataclass
class CloudInputs:
    """Everything the network needs from a cloud that does not depend on weights."""
    points: np.ndarray
    descriptors: np.ndarray
    neighbors: np.ndarray
    embedding: RelationEmbedding
    g_flat: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.points)


def prepare_cloud(pc, cfg: ModelConfig) -> CloudInputs:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise ContractError("clouds need at least 3 points")
    k = min(cfg.k_local, n - 1)
    nbr = knn_all(pts, k, exclude_self=True)
    emb = relation_embedding(pts, nbr[:, :2] if k >= 2 else two_nn(pts))
    desc = local_descriptors(pts, cfg.descriptor_scales, cfg.descriptor_gain, cfg.standardize_descriptors)
    if cfg.coord_gain > 0:
        desc = np.concatenate([desc, cfg.coord_gain * (pts - pts.mean(axis=0))], axis=1)
    return CloudInputs(pts, desc,
                       nbr, emb, emb.g.reshape(n * n, 3))


# ---------------------------------------------------------------- blocks

class EdgeLayer:
    """h_i = max_j lrelu(W [f_i, f_j - f_i] + b) over the graph neighbours j of i.

    Because lrelu is monotone and the edge map is affine, this equals
    lrelu(f_i (W_top - W_bot) + b + max_j f_j W_bot), which is what runs.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.c_in = c_in
        self.edge = Linear(2 * c_in, c_out, rng)

    def __call__(self, f, nbr: np.ndarray) -> Tensor:
        w = self.edge.W
        w_top, w_bot = w[: self.c_in], w[self.c_in:]
        center = dm.matmul(f, w_top - w_bot) + self.edge.b
        return dm.leaky_relu(center + dm.neighbor_max(dm.matmul(f, w_bot), nbr))

    def named_parameters(self, prefix):
        return self.edge.named_parameters(f"{prefix}.edge")


class Extractor:
    def __init__(self, d_in: int, cfg: ModelConfig, rng: np.random.Generator):
        chans = (d_in,) + cfg.extractor_channels
        self.layers = [EdgeLayer(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        total = sum(cfg.extractor_channels)
        self.head = MLP([total, 2 * cfg.feat_dim, cfg.feat_dim], rng)

    def __call__(self, x: CloudInputs) -> Tensor:
        f = Tensor(x.descriptors)
        levels = []
        for layer in self.layers:
            f = layer(f, x.neighbors)
            levels.append(f)
        return self.head(dm.concat(levels, axis=1))

    def named_parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layer{i}"))
        out.update(self.head.named_parameters(f"{prefix}.head"))
        return out


class AttentionWeights:
    def __init__(self, d: int, rng: np.random.Generator, geometric: bool):
        self.WQ = dm.parameter(dm.init_uniform(rng, d, (d, d)))
        self.WK = dm.parameter(dm.init_uniform(rng, d, (d, d)))
        self.WV = dm.parameter(dm.init_uniform(rng, d, (d, d)))
        self.WG = dm.parameter(dm.init_uniform(rng, 3, (3, 1))) if geometric else None

    def named_parameters(self, prefix):
        out = {f"{prefix}.WQ": self.WQ, f"{prefix}.WK": self.WK, f"{prefix}.WV": self.WV}
        if self.WG is not None:
            out[f"{prefix}.WG"] = self.WG
        return out


def self_attention_logits(f, g_flat, w: AttentionWeights) -> Tensor:
    """e[i, j] = ((f_i WQ)(f_j WK)^T + g_ij WG) / sqrt(d_t)."""
    f = dm.tensor(f)
    n, d = f.shape
    if w.WQ.shape[0] != d:
        raise DimensionError(f"attention expects width {w.WQ.shape[0]}, got {d}")
    scores = dm.matmul(dm.matmul(f, w.WQ), dm.transpose(dm.matmul(f, w.WK)))
    if w.WG is not None and g_flat is not None:
        g_flat = np.asarray(g_flat.data if isinstance(g_flat, Tensor) else g_flat)
        if g_flat.shape != (n * n, 3):
            raise DimensionError(f"relation embedding of shape {g_flat.shape} does not match N={n}")
        scores = scores + dm.reshape(dm.matmul(Tensor(g_flat), w.WG), (n, n))
    return scores * (1.0 / math.sqrt(d))


def geometry_self_attention(f, g_flat, w: AttentionWeights) -> Tensor:
    a = dm.softmax_rows(self_attention_logits(f, g_flat, w))
    return dm.matmul(a, dm.matmul(f, w.WV))


def feature_cross_attention(fp, fq, w: AttentionWeights) -> Tensor:
    fp, fq = dm.tensor(fp), dm.tensor(fq)
    d = w.WQ.shape[0]
    if fp.shape[1] != d or fq.shape[1] != d:
        raise DimensionError(f"cross attention expects width {d}, got {fp.shape[1]} and {fq.shape[1]}")
    e = dm.matmul(dm.matmul(fp, w.WQ), dm.transpose(dm.matmul(fq, w.WK))) * (1.0 / math.sqrt(d))
    return dm.matmul(dm.softmax_rows(e), dm.matmul(fq, w.WV))


class AttentionBlock:
    """Attention and a two-layer feed-forward, each behind a residual connection.

    ``pre_norm=False``: x -> LN(x + attn(x)) -> LN(h + ffn(h)).
    ``pre_norm=True``: x -> x + attn(LN(x)) -> h + ffn(LN(h)).
    """

    def __init__(self, d: int, ffn_mult: int, rng: np.random.Generator, geometric: bool,
                 ln_eps: float = 1e-5, pre_norm: bool = False):
        self.ln_eps = ln_eps
        self.pre_norm = pre_norm
        self.attn = AttentionWeights(d, rng, geometric)
        self.ffn = MLP([d, ffn_mult * d, d], rng)

    def _ln(self, x):
        return dm.layer_norm(x, self.ln_eps)

    def _finish(self, f, z) -> Tensor:
        if self.pre_norm:
            h = f + z
            return h + self.ffn(self._ln(h))
        h = self._ln(f + z)
        return self._ln(h + self.ffn(h))

    def self_block(self, f, g_flat) -> Tensor:
        x = self._ln(f) if self.pre_norm else f
        return self._finish(f, geometry_self_attention(x, g_flat, self.attn))

    def cross_block(self, fp, fq) -> Tensor:
        if self.pre_norm:
            return self._finish(fp, feature_cross_attention(self._ln(fp), self._ln(fq), self.attn))
        return self._finish(fp, feature_cross_attention(fp, fq, self.attn))

    def named_parameters(self, prefix):
        out = self.attn.named_parameters(f"{prefix}.attn")
        out.update(self.ffn.named_parameters(f"{prefix}.ffn"))
        return out


class GeometryTransformer:
    """n_iter rounds of (self attention per cloud) then (cross attention both ways)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, v = cfg.d_t, cfg.feat_dim
        self.final_eps = cfg.ln_eps if cfg.pre_norm else None
        self.proj_in = Linear(v, d, rng) if d != v else None
        self.proj_out = Linear(d, v, rng) if d != v else None
        self.self_blocks = [AttentionBlock(d, cfg.ffn_mult, rng, cfg.use_geometry, cfg.ln_eps, cfg.pre_norm)
                            for _ in range(cfg.n_iter)]
        self.cross_blocks = [AttentionBlock(d, cfg.ffn_mult, rng, False, cfg.ln_eps, cfg.pre_norm)
                             for _ in range(cfg.n_iter)]

    def __call__(self, fp, fq, gp_flat, gq_flat):
        if self.proj_in is not None:
            fp, fq = self.proj_in(fp), self.proj_in(fq)
        for sb, cb in zip(self.self_blocks, self.cross_blocks):
            fp, fq = sb.self_block(fp, gp_flat), sb.self_block(fq, gq_flat)
            fp, fq = cb.cross_block(fp, fq), cb.cross_block(fq, fp)
        if self.final_eps is not None:
            fp, fq = dm.layer_norm(fp, self.final_eps), dm.layer_norm(fq, self.final_eps)
        if self.proj_out is not None:
            fp, fq = self.proj_out(fp), self.proj_out(fq)
        return fp, fq

    def named_parameters(self, prefix):
        out = {}
        if self.proj_in is not None:
            out.update(self.proj_in.named_parameters(f"{prefix}.proj_in"))
            out.update(self.proj_out.named_parameters(f"{prefix}.proj_out"))
        for i, (sb, cb) in enumerate(zip(self.self_blocks, self.cross_blocks)):
            out.update(sb.named_parameters(f"{prefix}.self{i}"))
            out.update(cb.named_parameters(f"{prefix}.cross{i}"))
        return out


# ---------------------------------------------------------------- uncertainty

@dataclass
class OverlapDistribution:
    mu: Tensor
    sigma: Tensor
    samples: Tensor
    uncertainty: Tensor


def minmax_normalize(v, eps: float = 1e-12) -> Tensor:
    """(v - min) / (max - min); all zeros when the spread is below eps."""
    v = dm.tensor(v)
    lo, hi = dm.tmin(v), dm.tmax(v)
    if hi.item() - lo.item() < eps:
        return Tensor(np.zeros(v.shape))
    return (v - lo) / (hi - lo)


def sample_variance(samples) -> Tensor:
    """Unbiased variance across the draws (axis 1) of an N x K tensor."""
    s = dm.tensor(samples)
    k = s.shape[1]
    centered = s - dm.mean(s, axis=1, keepdims=True)
    return dm.tsum(centered * centered, axis=1, keepdims=True) * (1.0 / (k - 1))


def overlap_distribution(mu, sigma, rng: np.random.Generator, k: int) -> OverlapDistribution:
    """Reparameterised draws mu + eps * sigma and the min-max normalised sample variance."""
    if k < 2:
        raise ContractError("need at least two draws")
    mu, sigma = dm.tensor(mu), dm.tensor(sigma)
    eps = rng.standard_normal((mu.shape[0], k))
    samples = mu + Tensor(eps) * sigma
    return OverlapDistribution(mu, sigma, samples, minmax_normalize(sample_variance(samples)))


def uncertainty_weighting(fp_hat, fq_hat, c_hat, u_p, mlp: MLP) -> Tensor:
    """MLP([F^P, C_ns F^Q]) scaled row-wise by (1 - U^P); slack mass is dropped."""
    fp_hat, fq_hat, c_hat = dm.tensor(fp_hat), dm.tensor(fq_hat), dm.tensor(c_hat)
    n, m = fp_hat.shape[0], fq_hat.shape[0]
    if c_hat.shape != (n + 1, m + 1):
        raise DimensionError(f"correspondence {c_hat.shape} does not match {n}x{m} clouds")
    gathered = dm.matmul(c_hat[:n, :m], fq_hat)
    f_tilde = mlp(dm.concat([fp_hat, gathered], axis=1))
    return f_tilde * (1.0 - dm.tensor(u_p))


def random_mask(f_bar, u, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Training: zero row i when U_i exceeds a fresh Uniform(0,1) draw. Inference: identity."""
    f_bar = dm.tensor(f_bar)
    if not training:
        return f_bar
    u = np.asarray(u.data if isinstance(u, Tensor) else u).reshape(-1)
    keep = (u <= rng.uniform(0.0, 1.0, size=u.shape)).astype(np.float64)
    return f_bar * Tensor(keep[:, None])


# ---------------------------------------------------------------- full network

class UTOPICNet:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        v = cfg.feat_dim
        h = max(v // 2, 1)
        self.extractor = Extractor(descriptor_dim(cfg.descriptor_scales) + (3 if cfg.coord_gain > 0 else 0), cfg, rng)
        self.transformer1 = GeometryTransformer(cfg, rng)
        self.transformer2 = GeometryTransformer(cfg, rng)
        self.affinity1 = dm.parameter(dm.init_uniform(rng, v, (v, v)))
        self.affinity2 = dm.parameter(dm.init_uniform(rng, v, (v, v)))
        self.mean_head = MLP([v, h, 1], rng)
        self.std_head = MLP([v, h, 1], rng)
        self.weighting = MLP([2 * v, v, v], rng)
        self.overlap_head = MLP([v, h, 1], rng, final="sigmoid")
        self.completion_head = MLP([v, 4 * v, 3 * cfg.n_completion], rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.extractor.named_parameters("extractor"))
        out.update(self.transformer1.named_parameters("transformer1"))
        out.update(self.transformer2.named_parameters("transformer2"))
        out["affinity1.W"] = self.affinity1
        out["affinity2.W"] = self.affinity2
        out.update(self.mean_head.named_parameters("mean_head"))
        out.update(self.std_head.named_parameters("std_head"))
        out.update(self.weighting.named_parameters("weighting"))
        out.update(self.overlap_head.named_parameters("overlap_head"))
        out.update(self.completion_head.named_parameters("completion_head"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    # individual stages, exposed for tests and diagnostics
    def extract_features(self, x: CloudInputs) -> Tensor:
        return self.extractor(x)

    def predict_overlap_distribution(self, f_hat, rng: np.random.Generator, k: int | None = None):
        mu = self.mean_head(f_hat)
        sigma = dm.softplus(self.std_head(f_hat)) + 1e-6
        return overlap_distribution(mu, sigma, rng, k or self.cfg.k_samples)

    def coarse_completion(self, f) -> Tensor:
        pooled = dm.tmax(dm.tensor(f), axis=0, keepdims=True)
        return dm.reshape(self.completion_head(pooled), (self.cfg.n_completion, 3))

    def predict_overlap_scores(self, fp_bar, fq_bar, gp_flat, gq_flat):
        fp, fq = self.transformer2(fp_bar, fq_bar, gp_flat, gq_flat)
        return self.overlap_head(fp), self.overlap_head(fq), fp, fq

    def forward(self, xp: CloudInputs, xq: CloudInputs, rng: np.random.Generator | None = None,
                training: bool = False, with_completion: bool | None = None,
                use_uncertainty: bool | None = None) -> dict:
        """Run the whole network on one pair; returns every intermediate a loss needs.

        ``rng`` drives the reparameterised draws and (in training) the random
        mask. Without it a fixed stream is used so inference is repeatable.
        ``use_uncertainty`` overrides the config flag for this call (the
        trainer switches the uncertainty weighting off during warm-up).
        """
        cfg = self.cfg
        use_u = cfg.use_uncertainty if use_uncertainty is None else use_uncertainty
        if rng is None:
            rng = np.random.default_rng(0)
        fp, fq = self.extractor(xp), self.extractor(xq)
        fp_hat, fq_hat = self.transformer1(fp, fq, xp.g_flat, xq.g_flat)
        c_hat = sinkhorn_slack(affinity(fp_hat, fq_hat, self.affinity1), cfg.sinkhorn_iters, cfg.slack_init)
        dist_p = self.predict_overlap_distribution(fp_hat, rng)
        dist_q = self.predict_overlap_distribution(fq_hat, rng)
        if use_u:
            u_p, u_q = dist_p.uncertainty, dist_q.uncertainty
            if cfg.detach_uncertainty:
                # U reaches the weighting as data only; the uncertainty heads learn from L_u
                u_p, u_q = Tensor(u_p.data), Tensor(u_q.data)
        else:
            u_p = u_q = Tensor(np.zeros((1, 1)))
        fp_bar = uncertainty_weighting(fp_hat, fq_hat, c_hat, u_p, self.weighting)
        fq_bar = uncertainty_weighting(fq_hat, fp_hat, dm.transpose(c_hat), u_q, self.weighting)
        if use_u:
            fp_bar = random_mask(fp_bar, u_p, rng, training)
            fq_bar = random_mask(fq_bar, u_q, rng, training)
        o_p, o_q, fp_o, fq_o = self.predict_overlap_scores(fp_bar, fq_bar, xp.g_flat, xq.g_flat)
        c_bar = sinkhorn_slack(affinity(fp_o, fq_o, self.affinity2), cfg.sinkhorn_iters, cfg.slack_init)
        out = {"c_hat": c_hat, "c_bar": c_bar, "overlap_p": o_p, "overlap_q": o_q,
               "dist_p": dist_p, "dist_q": dist_q, "feat_p": fp, "feat_q": fq}
        if with_completion if with_completion is not None else training:
            out["completion_p"] = self.coarse_completion(fp)
            out["completion_q"] = self.coarse_completion(fq)
        return out


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"UTPCKPT\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: UTOPICNet, extra: dict | None = None) -> None:
    """Magic, version, JSON header (dims + tensor index), then named float64 tensors."""
    params = model.named_parameters()
    header = {"version": CHECKPOINT_VERSION,
              "dims": {"V": model.cfg.feat_dim, "d_t": model.cfg.d_t,
                       "N_iter": model.cfg.n_iter, "K": model.cfg.k_samples},
              "model_config": model.cfg.to_dict(),
              "tensors": [{"name": k, "shape": list(t.shape)} for k, t in params.items()],
              "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, t in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        return json.loads(fh.read(hlen))


def load_checkpoint(path, expected: ModelConfig | None = None) -> UTOPICNet:
    try:
        return _load_checkpoint(path, expected)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


def _load_checkpoint(path, expected: ModelConfig | None) -> UTOPICNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    header = json.loads(raw[off:off + hlen])
    off += hlen
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected is not None:
        for key in ("feat_dim", "d_t", "n_iter", "k_samples", "use_geometry"):
            if getattr(expected, key) != getattr(cfg, key):
                raise CheckpointError(f"{path}: {key}={getattr(cfg, key)} but config asks for "
                                      f"{getattr(expected, key)}")
    model = UTOPICNet(cfg)
    params = model.named_parameters()
    seen = set()
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        if name not in params:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, model expects {params[name].shape}")
        params[name].data = data.astype(np.float64).copy()
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    return model
