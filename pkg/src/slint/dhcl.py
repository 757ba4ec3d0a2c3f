"""Dynamic hard contrastive learning.

Per query: sample a slice of the pool, mine the most and least cosine-similar
rows, collapse each set into a randomly weighted prototype, interpolate the
prototypes toward the raw query and score the interpolants with a log-sigmoid
distance margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, topk


@dataclass
class DHCLConfig:
    sample_size: int = 50
    hard_count: int = 10
    interp_low: float = 0.3
    interp_high: float = 0.7
    weight_low: float = 0.01
    weight_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.hard_count > self.sample_size:
            raise ValueError("hard_count must not exceed sample_size")
        if not 0.0 <= self.interp_low < self.interp_high <= 1.0:
            raise ValueError("need 0 <= interp_low < interp_high <= 1")
        if not 0.0 < self.weight_low < self.weight_high:
            raise ValueError("need 0 < weight_low < weight_high")


@dataclass
class ContrastiveBatch:
    positives: torch.Tensor
    negatives: torch.Tensor
    proto_pos: torch.Tensor
    proto_neg: torch.Tensor
    interp_pos: torch.Tensor
    interp_neg: torch.Tensor
    # sampling record, kept for replay and auditing
    sample_ids: np.ndarray
    pos_ids: np.ndarray
    neg_ids: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    w_pos: np.ndarray
    w_neg: np.ndarray


def _as_vec(x) -> torch.Tensor:
    v = getattr(x, "vec", x)
    return torch.as_tensor(v, dtype=DTYPE)


def build_contrastive_batch(q_enh, q_raw, pool: torch.Tensor, cfg: DHCLConfig, rng: np.random.Generator) -> ContrastiveBatch:
    q = _as_vec(q_enh)
    q_raw = _as_vec(q_raw)
    pool = torch.as_tensor(pool, dtype=DTYPE)
    n_c, k_c = cfg.sample_size, cfg.hard_count
    if 2 * k_c > n_c:
        raise ValueError(f"2*k_c={2 * k_c} exceeds N_c={n_c}; positive and negative sets would overlap")
    if pool.shape[-1] != q.shape[-1] or q_raw.shape != q.shape:
        raise ValueError("query vectors and pool rows must share the same width")
    with torch.no_grad():
        norms = pool.norm(dim=1).numpy()
    usable = np.flatnonzero(norms > 0)
    if usable.size < n_c:
        raise ValueError(f"pool has {usable.size} non-zero rows, need N_c={n_c}")

    sample_ids = rng.choice(usable, size=n_c, replace=False)
    with torch.no_grad():
        qd = q.detach()
        rows = pool[sample_ids].detach()
        sims = (rows @ qd / (rows.norm(dim=1) * qd.norm())).numpy()
    pos_ids = sample_ids[topk(sims, k_c, "highest")]
    neg_ids = sample_ids[topk(sims, k_c, "lowest")]

    w_pos = rng.uniform(cfg.weight_low, cfg.weight_high, size=k_c)
    w_neg = rng.uniform(cfg.weight_low, cfg.weight_high, size=k_c)
    alpha = rng.uniform(cfg.interp_low, cfg.interp_high, size=k_c)
    beta = rng.uniform(cfg.interp_low, cfg.interp_high, size=k_c)

    positives = pool[pos_ids]
    negatives = pool[neg_ids]
    wp = torch.from_numpy(w_pos)
    wn = torch.from_numpy(w_neg)
    proto_pos = (wp[:, None] * positives).sum(0) / wp.sum()
    proto_neg = (wn[:, None] * negatives).sum(0) / wn.sum()
    a = torch.from_numpy(alpha)[:, None]
    b = torch.from_numpy(beta)[:, None]
    interp_pos = a * proto_pos + (1 - a) * q_raw
    interp_neg = b * proto_neg + (1 - b) * q_raw
    return ContrastiveBatch(
        positives, negatives, proto_pos, proto_neg, interp_pos, interp_neg,
        sample_ids, pos_ids, neg_ids, alpha, beta, w_pos, w_neg,
    )


def contrastive_margins(q_enh, batch: ContrastiveBatch, normalize: bool = True) -> torch.Tensor:
    """Z_j = ||q - n_j|| - ||q - p_j|| for every interpolated pair."""
    q = _as_vec(q_enh)
    p, n = batch.interp_pos, batch.interp_neg
    if normalize:
        q = F.normalize(q, dim=-1)
        p = F.normalize(p, dim=-1)
        n = F.normalize(n, dim=-1)
    return (q - n).norm(dim=-1) - (q - p).norm(dim=-1)


def contrastive_loss(q_enh, batch: ContrastiveBatch, normalize: bool = True, per_term: bool = False):
    """Sum over pairs of -log sigmoid(Z_j); ``per_term`` returns the vector instead."""
    z = contrastive_margins(q_enh, batch, normalize)
    terms = F.softplus(-z)
    bad = ~torch.isfinite(terms)
    if bad.any():
        j = int(torch.nonzero(bad)[0])
        raise FloatingPointError(f"non-finite contrastive term at j={j}")
    return terms if per_term else terms.sum()
