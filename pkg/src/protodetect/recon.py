"""Window reconstruction model and its pretraining loop.

Architecture, applied per window of shape (w, D): a per-position linear map
into a hidden width, a two-layer feed-forward feature block (a named slot so
an alternative block can be dropped in), fixed sinusoidal positional
encoding, a stack of pre-norm self-attention blocks, and a per-position
linear map back to D. The model is deterministic: same input, same output.

Reconstruction error here is a training signal and later a control signal;
it is deliberately not the anomaly score.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import ParamSet, Tensor


@dataclass
class ReconConfig:
    width: int  # window length w
    dims: int = 1
    hidden: int = 32
    blocks: int = 2
    heads: int = 2
    ff_mult: int = 2

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} must be divisible by heads={self.heads}")
        if min(self.width, self.dims, self.hidden, self.blocks, self.heads, self.ff_mult) < 1:
            raise ValueError("all ReconConfig fields must be >= 1")


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    """Fixed sin/cos positional table of shape (length, width)."""
    position = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, width, 2, dtype=np.float64)
    div = np.power(10000.0, idx / width)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(position / div)
    table[:, 1::2] = np.cos(position / div[: table[:, 1::2].shape[1]])
    return table


def _layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mean = nm.tmean(x, axis=-1, keepdims=True)
    centered = nm.sub(x, mean)
    var = nm.tmean(nm.square(centered), axis=-1, keepdims=True)
    return nm.add(nm.mul(nm.div(centered, nm.sqrt(nm.add(var, eps))), gamma), beta)


class ReconModel:
    """Reconstruction network M(X) with all weights in one ParamSet."""

    def __init__(self, cfg: ReconConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamSet()
        self.pos = sinusoidal_encoding(cfg.width, cfg.hidden)
        p, h, d = self.params, cfg.hidden, cfg.dims
        p.register("in.w", nm.xavier_uniform(rng, d, h))
        p.register("in.b", np.zeros(h))
        p.register("feat.w1", nm.xavier_uniform(rng, h, h))
        p.register("feat.b1", np.zeros(h))
        p.register("feat.w2", nm.xavier_uniform(rng, h, h))
        p.register("feat.b2", np.zeros(h))
        for i in range(cfg.blocks):
            for proj in ("q", "k", "v", "o"):
                p.register(f"block{i}.attn.w{proj}", nm.xavier_uniform(rng, h, h))
                p.register(f"block{i}.attn.b{proj}", np.zeros(h))
            p.register(f"block{i}.ln1.g", np.ones(h))
            p.register(f"block{i}.ln1.b", np.zeros(h))
            p.register(f"block{i}.ln2.g", np.ones(h))
            p.register(f"block{i}.ln2.b", np.zeros(h))
            p.register(f"block{i}.ff.w1", nm.xavier_uniform(rng, h, cfg.ff_mult * h))
            p.register(f"block{i}.ff.b1", np.zeros(cfg.ff_mult * h))
            p.register(f"block{i}.ff.w2", nm.xavier_uniform(rng, cfg.ff_mult * h, h))
            p.register(f"block{i}.ff.b2", np.zeros(h))
        p.register("out.w", nm.xavier_uniform(rng, h, d))
        p.register("out.b", np.zeros(d))

    def _attention(self, x: Tensor, i: int, batch: int) -> Tensor:
        cfg, p = self.cfg, self.params
        w, h, a = cfg.width, cfg.hidden, cfg.heads
        dh = h // a
        flat = nm.reshape(x, (batch * w, h))
        heads = []
        for proj in ("q", "k", "v"):
            y = nm.linear(flat, p[f"block{i}.attn.w{proj}"], p[f"block{i}.attn.b{proj}"])
            y = nm.transpose(nm.reshape(y, (batch, w, a, dh)), (0, 2, 1, 3))  # B,A,w,dh
            heads.append(y)
        q, k, v = heads
        scores = nm.div(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), float(np.sqrt(dh)))
        attn = nm.softmax(scores, axis=-1)
        ctx = nm.transpose(nm.matmul(attn, v), (0, 2, 1, 3))  # B,w,A,dh
        ctx = nm.reshape(ctx, (batch * w, h))
        out = nm.linear(ctx, p[f"block{i}.attn.wo"], p[f"block{i}.attn.bo"])
        return nm.reshape(out, (batch, w, h))

    def forward(self, batch: np.ndarray) -> Tensor:
        """Reconstruct a stack of windows; returns a graph tensor (B, w, D)."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 2:
            batch = batch[None]
        b, w, d = batch.shape
        cfg, p = self.cfg, self.params
        if (w, d) != (cfg.width, cfg.dims):
            raise nm.ShapeError(f"expected windows of shape ({cfg.width}, {cfg.dims}), got ({w}, {d})")
        x = nm.reshape(Tensor(batch), (b * w, d))
        x = nm.linear(x, p["in.w"], p["in.b"])
        x = nm.linear(nm.relu(nm.linear(x, p["feat.w1"], p["feat.b1"])), p["feat.w2"], p["feat.b2"])
        x = nm.add(nm.reshape(x, (b, w, cfg.hidden)), self.pos)
        for i in range(cfg.blocks):
            normed = _layer_norm(x, p[f"block{i}.ln1.g"], p[f"block{i}.ln1.b"])
            x = nm.add(x, self._attention(normed, i, b))
            normed = _layer_norm(x, p[f"block{i}.ln2.g"], p[f"block{i}.ln2.b"])
            flat = nm.reshape(normed, (b * w, cfg.hidden))
            ff = nm.linear(nm.relu(nm.linear(flat, p[f"block{i}.ff.w1"], p[f"block{i}.ff.b1"])),
                           p[f"block{i}.ff.w2"], p[f"block{i}.ff.b2"])
            x = nm.add(x, nm.reshape(ff, (b, w, cfg.hidden)))
        out = nm.linear(nm.reshape(x, (b * w, cfg.hidden)), p["out.w"], p["out.b"])
        return nm.reshape(out, (b, w, d))

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        """Plain-array reconstruction for inference paths."""
        out = self.forward(windows).data
        nm.assert_finite(out, "reconstruction output")
        return out


def recon_loss(model: ReconModel, batch: np.ndarray) -> Tensor:
    """Mean over the batch of per-window squared L2 reconstruction error."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise ValueError("recon_loss on an empty batch")
    out = model.forward(batch)
    per_window = nm.tsum(nm.square(nm.sub(out, Tensor(batch))), axis=(1, 2))
    return nm.tmean(per_window)


def batch_recon_error(reconstruction: np.ndarray, batch: np.ndarray) -> float:
    """Same objective computed from a finished reconstruction (no graph)."""
    diff = reconstruction - batch
    return float((diff * diff).sum(axis=(1, 2)).mean())


def pretrain(
    model: ReconModel,
    windows: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    optimizer: str = "adam",
) -> list[float]:
    """Minimize reconstruction error; returns per-epoch mean loss history.

    Aborts with a diagnostic if the loss goes non-finite (divergence).
    """
    opt = nm.make_optimizer(optimizer, lr)
    history: list[float] = []
    n = windows.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            model.params.zero_grad()
            loss = recon_loss(model, windows[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise nm.NonFiniteError(
                    f"stage-1 pretraining diverged (loss={value}) at epoch {epoch + 1}; "
                    "reduce the learning rate"
                )
            nm.backward(loss, model.params)
            opt.step(model.params)
            losses.append(value)
        history.append(float(np.mean(losses)))
    return history


def save_recon(model: ReconModel, path) -> None:
    save_checkpoint(path, "recon", asdict(model.cfg), model.params.as_arrays())


def load_recon(path) -> ReconModel:
    meta, arrays = load_checkpoint(path, expect_kind="recon")
    cfg = ReconConfig(**{k: meta[k] for k in ("width", "dims", "hidden", "blocks", "heads", "ff_mult")})
    model = ReconModel(cfg, np.random.default_rng(0))
    model.params.restore(arrays)
    return model
