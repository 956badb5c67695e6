"""NT-Xent contrastive loss over mined triplets.

``as_printed`` keeps only the negatives in the softmax denominator, so the
loss can go negative; ``standard`` adds the positive term (InfoNCE form).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

AS_PRINTED = "as_printed"
STANDARD = "standard"


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    denominator: str = AS_PRINTED

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.denominator not in (AS_PRINTED, STANDARD):
            raise ValueError(f"unknown denominator {self.denominator!r}")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _normalize(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding")
    return z / norms


def nt_xent_logits(pos_sim: torch.Tensor, neg_sim: torch.Tensor, cfg: LossConfig = LossConfig()):
    """Per-triplet loss from similarities: ``pos_sim`` (M,), ``neg_sim`` (M, N)."""
    pos = pos_sim / cfg.temperature
    neg = neg_sim / cfg.temperature
    if cfg.denominator == STANDARD:
        neg = torch.cat([pos[:, None], neg], dim=1)
    return torch.logsumexp(neg, dim=1) - pos


def nt_xent(z_a, z_p, z_negs, temperature: float = 0.1, denominator: str = AS_PRINTED):
    """Loss for one anchor: vectors ``z_a``, ``z_p`` and an (N, D) stack of negatives."""
    cfg = LossConfig(temperature, denominator)
    as_tensor = not isinstance(z_a, torch.Tensor)
    z_a, z_p, z_negs = (torch.as_tensor(np.asarray(v, dtype=np.float64)) if as_tensor else v
                        for v in (z_a, z_p, z_negs))
    z_negs = z_negs.reshape(-1, z_a.shape[-1])
    if z_negs.shape[0] < 1:
        raise ValueError("need at least one negative")
    a, p, n = _normalize(z_a), _normalize(z_p), _normalize(z_negs)
    loss = nt_xent_logits((a * p).sum()[None], (n @ a)[None], cfg)[0]
    return float(loss) if as_tensor else loss


def gather_triplets(batches):
    """Flatten mining batches into (clip, anchor, positive, negatives) index arrays."""
    clip_idx, anchors, positives, negatives = [], [], [], []
    for b, batch in enumerate(batches):
        for tr in batch.triplets:
            clip_idx.append(b)
            anchors.append(tr.anchor_frame)
            positives.append(tr.positive_frame)
            negatives.append([f for f, _ in tr.negative_frames])
    return (np.array(clip_idx, dtype=np.int64), np.array(anchors, dtype=np.int64),
            np.array(positives, dtype=np.int64), np.array(negatives, dtype=np.int64))


def batch_loss(batches, embeddings, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean NT-Xent over every triplet of every clip.

    ``embeddings`` is a (B, T, D) tensor or a list of (T_b, D) tensors,
    aligned with ``batches``.
    """
    clip_idx, anchors, positives, negatives = gather_triplets(batches)
    if len(anchors) == 0:
        raise ValueError("batch contains no triplets")
    if isinstance(embeddings, (list, tuple)):
        lengths = [e.shape[0] for e in embeddings]
        pad = max(lengths)
        embeddings = torch.stack([torch.nn.functional.pad(e, (0, 0, 0, pad - e.shape[0]))
                                  for e in embeddings])
    else:
        lengths = [embeddings.shape[1]] * embeddings.shape[0]
    limit = np.array(lengths)[clip_idx]
    if np.any(anchors >= limit) or np.any(positives >= limit) or np.any(negatives >= limit[:, None]):
        raise IndexError("triplet frame outside embedding length")

    ci = torch.as_tensor(clip_idx)
    z_a = _normalize(embeddings[ci, torch.as_tensor(anchors)])
    z_p = _normalize(embeddings[ci, torch.as_tensor(positives)])
    z_n = _normalize(embeddings[ci[:, None], torch.as_tensor(negatives)])
    pos_sim = (z_a * z_p).sum(-1)
    neg_sim = (z_n * z_a[:, None, :]).sum(-1)
    return nt_xent_logits(pos_sim, neg_sim, cfg).mean()
