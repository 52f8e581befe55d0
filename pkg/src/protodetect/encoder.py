"""Window encoder trained on (anchor, augmented view, pseudo-negative) triples.

The encoder flattens a window, passes it through a two-hidden-layer MLP and
L2-normalizes the output, so every embedding lives on the unit sphere and
all pairwise distances are bounded by 2. Training pulls the anchor toward
its lightly augmented view and pushes it from its boundary pseudo-negative
by a margin, with a small compactness term on the anchor/view pair.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .data import augment_batch
from .numerics import ParamSet, Tensor

_NORM_EPS = 1e-18  # inside the sqrt of both the unit-norm and distance terms


@dataclass
class EncoderConfig:
    width: int
    dims: int = 1
    hidden: int = 64
    embed_dim: int = 16

    def __post_init__(self):
        if min(self.width, self.dims, self.hidden, self.embed_dim) < 1:
            raise ValueError("all EncoderConfig fields must be >= 1")


class TripletEncoder:
    """f(X): flatten(w x D) -> MLP -> unit vector of dimension embed_dim."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamSet()
        in_dim = cfg.width * cfg.dims
        # nonzero biases so no input maps to an exactly-zero vector ahead of
        # the unit normalization (whose gradient blows up at the origin)
        self.params.register("enc.w1", nm.xavier_uniform(rng, in_dim, cfg.hidden))
        self.params.register("enc.b1", np.full(cfg.hidden, 0.01))
        self.params.register("enc.w2", nm.xavier_uniform(rng, cfg.hidden, cfg.hidden))
        self.params.register("enc.b2", np.full(cfg.hidden, 0.01))
        self.params.register("enc.w3", nm.xavier_uniform(rng, cfg.hidden, cfg.embed_dim))
        self.params.register("enc.b3", np.full(cfg.embed_dim, 0.01))

    def forward(self, batch: np.ndarray) -> Tensor:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        b, w, d = batch.shape
        if (w, d) != (self.cfg.width, self.cfg.dims):
            raise nm.ShapeError(
                f"expected windows of shape ({self.cfg.width}, {self.cfg.dims}), got ({w}, {d})"
            )
        p = self.params
        x = nm.reshape(Tensor(batch), (b, w * d))
        x = nm.relu(nm.linear(x, p["enc.w1"], p["enc.b1"]))
        x = nm.relu(nm.linear(x, p["enc.w2"], p["enc.b2"]))
        x = nm.linear(x, p["enc.w3"], p["enc.b3"])
        return nm.l2_normalize(x, eps=_NORM_EPS)

    def embed(self, windows: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings as a plain (N, embed_dim) array."""
        out = self.forward(windows).data
        nm.assert_finite(out, "embedding output")
        return out


def _row_norm(delta: Tensor) -> Tensor:
    return nm.sqrt(nm.add(nm.tsum(nm.square(delta), axis=1), _NORM_EPS))


def triplet_loss(z_a: Tensor, z_p: Tensor, z_n: Tensor, margin: float) -> Tensor:
    """Mean hinge on ||z_a - z_p|| - ||z_a - z_n|| + margin."""
    d_pos = _row_norm(nm.sub(z_a, z_p))
    d_neg = _row_norm(nm.sub(z_a, z_n))
    return nm.tmean(nm.relu(nm.add(nm.sub(d_pos, d_neg), margin)))


def compactness_loss(z_a: Tensor, z_p: Tensor) -> Tensor:
    """Mean squared distance between anchors and their augmented views."""
    return nm.tmean(nm.tsum(nm.square(nm.sub(z_a, z_p)), axis=1))


@dataclass
class TripletTrainConfig:
    epochs: int = 30
    margin: float = 0.5
    compact_weight: float = 0.1  # lambda on the compactness term
    lr: float = 1e-3
    batch_size: int = 64
    jitter_sigma: float = 0.01
    scale_sigma: float = 0.05


def train_stage2(
    encoder: TripletEncoder,
    pos_pool: np.ndarray,
    neg_pool: np.ndarray,
    cfg: TripletTrainConfig,
    rng: np.random.Generator,
) -> list[dict]:
    """Optimize triplet + weighted compactness losses over the pools.

    Returns one history row per epoch with mean 'triplet', 'compact', and
    'total' values.
    """
    if len(pos_pool) == 0 or len(neg_pool) == 0:
        raise ValueError("stage-2 training requires non-empty pools")
    if len(pos_pool) != len(neg_pool):
        raise ValueError(f"pools must be aligned, got {len(pos_pool)} vs {len(neg_pool)}")
    opt = nm.Adam(cfg.lr)
    history: list[dict] = []
    n = len(pos_pool)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        tri_vals, com_vals = [], []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            anchors = pos_pool[idx]
            views = augment_batch(anchors, rng, cfg.jitter_sigma, cfg.scale_sigma)
            negatives = neg_pool[idx]

            encoder.params.zero_grad()
            z_a = encoder.forward(anchors)
            z_p = encoder.forward(views)
            z_n = encoder.forward(negatives)
            tri = triplet_loss(z_a, z_p, z_n, cfg.margin)
            com = compactness_loss(z_a, z_p)
            total = nm.add(tri, nm.mul(cfg.compact_weight, com))
            value = total.item()
            if not np.isfinite(value):
                raise nm.NonFiniteError("stage-2 triplet training diverged")
            nm.backward(total, encoder.params)
            opt.step(encoder.params)
            tri_vals.append(tri.item())
            com_vals.append(com.item())
        history.append(
            {
                "triplet": float(np.mean(tri_vals)),
                "compact": float(np.mean(com_vals)),
                "total": float(np.mean(tri_vals) + cfg.compact_weight * np.mean(com_vals)),
            }
        )
    return history


def save_encoder(encoder: TripletEncoder, path) -> None:
    save_checkpoint(path, "encoder", asdict(encoder.cfg), encoder.params.as_arrays())


def load_encoder(path) -> TripletEncoder:
    meta, arrays = load_checkpoint(path, expect_kind="encoder")
    cfg = EncoderConfig(**{k: meta[k] for k in ("width", "dims", "hidden", "embed_dim")})
    enc = TripletEncoder(cfg, np.random.default_rng(0))
    enc.params.restore(arrays)
    return enc
