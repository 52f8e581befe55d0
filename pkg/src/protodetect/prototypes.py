"""Learnable prototype bank: joint refinement of encoder and prototypes.

K unit-norm prototype vectors summarize the modes of normal behavior in the
embedding space. Training balances four pulls: normal embeddings stay close
to prototypes (soft-assignment-weighted distance), pseudo-anomalies keep at
least a margin from every prototype, prototypes keep a margin from each
other, and prototype usage stays near uniform (KL). Prototypes are
renormalized to the unit sphere after every optimizer step.

The anomaly score of an embedding is its squared distance to the nearest
prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, TripletEncoder
from .numerics import ParamSet, Tensor

_DIAG_MASK = 1e6  # pushed onto the diagonal before sqrt so i==j pairs never fire
_DIST_EPS = 1e-12  # inside the dispersion sqrt; keeps duplicate prototypes differentiable
_USAGE_FLOOR = 1e-12  # clamp on prototype usage before the log


@dataclass
class PrototypeConfig:
    count: int = 8  # K
    temperature: float = 0.1
    margin: float = 0.5  # shared margin; per-term overrides below
    margin_anomaly: float | None = None
    margin_dispersion: float | None = None
    weight_normal: float = 1.0
    weight_anomaly: float = 1.0
    weight_dispersion: float = 0.1
    weight_balance: float = 0.1
    epochs: int = 30
    lr: float = 5e-3
    encoder_lr_scale: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("need at least 2 prototypes")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.margin_anomaly is None:
            self.margin_anomaly = self.margin
        if self.margin_dispersion is None:
            self.margin_dispersion = self.margin
        for name in ("weight_normal", "weight_anomaly", "weight_dispersion", "weight_balance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def init_prototypes(embeddings: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point selection of ``count`` distinct pool embeddings.

    The first pick is the embedding farthest from the pool mean; each
    further pick maximizes the minimum distance to the picks so far. The rng
    only shuffles candidate order, which breaks exact ties deterministically.
    """
    m = embeddings.shape[0]
    if m < count:
        raise ValueError(f"pool of {m} embeddings cannot seed {count} prototypes")
    order = rng.permutation(m)
    cand = embeddings[order]
    center = cand.mean(axis=0)
    first = int(np.argmax(((cand - center) ** 2).sum(axis=1)))
    chosen = [first]
    min_d = ((cand - cand[first]) ** 2).sum(axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(min_d))
        if min_d[nxt] == 0.0:  # duplicates exhausted the geometry; keep indices distinct
            taken = set(chosen)
            nxt = next(i for i in range(m) if i not in taken)
        chosen.append(nxt)
        min_d = np.minimum(min_d, ((cand - cand[nxt]) ** 2).sum(axis=1))
    protos = cand[chosen].copy()
    norms = np.sqrt((protos**2).sum(axis=1, keepdims=True))
    return protos / np.where(norms == 0.0, 1.0, norms)


class PrototypeBank:
    """Encoder + K learnable unit-norm prototypes; owns the anomaly score."""

    def __init__(
        self,
        encoder: TripletEncoder,
        prototypes: np.ndarray,
        cfg: PrototypeConfig,
        renormalize: bool = True,
    ):
        if prototypes.ndim != 2 or prototypes.shape[0] != cfg.count:
            raise ValueError(f"expected {cfg.count} prototype rows, got {prototypes.shape}")
        if prototypes.shape[1] != encoder.cfg.embed_dim:
            raise ValueError("prototype dimension does not match the encoder embedding")
        self.encoder = encoder
        self.cfg = cfg
        self.params = ParamSet()
        self.prototypes = self.params.register("prototypes", prototypes)
        if renormalize:  # checkpoints are stored post-normalization; reloading skips
            self.renormalize()

    def renormalize(self) -> None:
        data = self.prototypes.data
        norms = np.sqrt((data**2).sum(axis=1, keepdims=True))
        self.prototypes.data = data / np.where(norms == 0.0, 1.0, norms)

    def prototype_matrix(self) -> np.ndarray:
        return self.prototypes.data.copy()

    # -- inference-path (plain numpy) ------------------------------------

    def distances_np(self, z: np.ndarray) -> np.ndarray:
        """Squared Euclidean distance of each embedding row to each prototype."""
        z = np.atleast_2d(z)
        c = self.prototypes.data
        d = (z**2).sum(axis=1, keepdims=True) + (c**2).sum(axis=1)[None, :] - 2.0 * z @ c.T
        return np.maximum(d, 0.0)

    def soft_assign_np(self, z: np.ndarray) -> np.ndarray:
        return soft_assign_from_distances(self.distances_np(z), self.cfg.temperature)

    def score_embeddings(self, z: np.ndarray) -> np.ndarray:
        return self.distances_np(z).min(axis=1)

    def score_batch(self, windows: np.ndarray) -> np.ndarray:
        return self.score_embeddings(self.encoder.embed(windows))


def soft_assign_from_distances(distances: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax over negative distances, max-shifted for stability."""
    logits = -np.atleast_2d(distances) / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


# -- graph-path losses (differentiable w.r.t. encoder and prototypes) ------


def distances_graph(z: Tensor, protos: Tensor) -> Tensor:
    z2 = nm.tsum(nm.square(z), axis=1, keepdims=True)
    c2 = nm.reshape(nm.tsum(nm.square(protos), axis=1), (1, protos.shape[0]))
    cross = nm.matmul(z, nm.transpose(protos, (1, 0)))
    return nm.clip_min(nm.sub(nm.add(z2, c2), nm.mul(2.0, cross)), 0.0)


def soft_assign_graph(distances: Tensor, temperature: float) -> Tensor:
    return nm.softmax(nm.div(nm.neg(distances), temperature), axis=-1)


def loss_normal_graph(distances: Tensor, temperature: float) -> Tensor:
    """Soft-assignment-weighted mean distance of normal embeddings."""
    assign = soft_assign_graph(distances, temperature)
    return nm.tmean(nm.tsum(nm.mul(assign, distances), axis=1))


def score_graph(distances: Tensor) -> Tensor:
    return nm.min_along(distances, axis=1)


def loss_anomaly_graph(distances: Tensor, margin: float) -> Tensor:
    """Mean hinge pushing pseudo-anomaly scores above the margin."""
    return nm.tmean(nm.relu(nm.sub(margin, score_graph(distances))))


def loss_dispersion_graph(protos: Tensor, margin: float) -> Tensor:
    """Squared hinge on pairwise prototype distances below the margin,
    averaged over ordered pairs i != j."""
    k = protos.shape[0]
    sq = distances_graph(protos, protos)
    masked = nm.add(sq, np.eye(k) * _DIAG_MASK)
    dist = nm.sqrt(nm.add(masked, _DIST_EPS))
    hinge = nm.relu(nm.sub(margin, dist))
    return nm.div(nm.tsum(nm.square(hinge)), float(k * (k - 1)))


def loss_balance_graph(assign: Tensor) -> Tensor:
    """KL(mean usage || uniform) over the batch, natural log."""
    k = assign.shape[1]
    usage = nm.tmean(assign, axis=0)
    return nm.tsum(nm.mul(usage, nm.log(nm.mul(nm.clip_min(usage, _USAGE_FLOOR), float(k)))))


def stage3_losses(
    bank: PrototypeBank, normal_batch: np.ndarray, pseudo_batch: np.ndarray
) -> tuple[Tensor, dict]:
    """Total stage-3 objective and its term values for one batch pair."""
    cfg = bank.cfg
    z_n = bank.encoder.forward(normal_batch)
    z_a = bank.encoder.forward(pseudo_batch)
    d_n = distances_graph(z_n, bank.prototypes)
    d_a = distances_graph(z_a, bank.prototypes)
    assign = soft_assign_graph(d_n, cfg.temperature)
    l_normal = nm.tmean(nm.tsum(nm.mul(assign, d_n), axis=1))
    l_anomaly = loss_anomaly_graph(d_a, cfg.margin_anomaly)
    l_dispersion = loss_dispersion_graph(bank.prototypes, cfg.margin_dispersion)
    l_balance = loss_balance_graph(assign)
    total = nm.add(
        nm.add(nm.mul(cfg.weight_normal, l_normal), nm.mul(cfg.weight_anomaly, l_anomaly)),
        nm.add(nm.mul(cfg.weight_dispersion, l_dispersion), nm.mul(cfg.weight_balance, l_balance)),
    )
    terms = {
        "normal": l_normal.item(),
        "anomaly": l_anomaly.item(),
        "dispersion": l_dispersion.item(),
        "balance": l_balance.item(),
        "total": total.item(),
    }
    return total, terms


def train_stage3(
    bank: PrototypeBank,
    pos_pool: np.ndarray,
    neg_pool: np.ndarray,
    rng: np.random.Generator,
) -> list[dict]:
    """Jointly refine encoder and prototypes; one history row per epoch.

    The encoder moves at ``encoder_lr_scale`` times the prototype rate so
    stage-2 geometry is adjusted, not discarded. Prototype rows are
    renormalized after every step.
    """
    if len(pos_pool) == 0 or len(neg_pool) == 0:
        raise ValueError("stage-3 training requires non-empty pools")
    cfg = bank.cfg
    proto_opt = nm.Adam(cfg.lr)
    enc_opt = nm.Adam(cfg.lr * cfg.encoder_lr_scale)
    history: list[dict] = []
    n = min(len(pos_pool), len(neg_pool))
    for _ in range(cfg.epochs):
        pos_order = rng.permutation(len(pos_pool))[:n]
        neg_order = rng.permutation(len(neg_pool))[:n]
        sums = {"normal": 0.0, "anomaly": 0.0, "dispersion": 0.0, "balance": 0.0, "total": 0.0}
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            normal_batch = pos_pool[pos_order[lo : lo + cfg.batch_size]]
            pseudo_batch = neg_pool[neg_order[lo : lo + cfg.batch_size]]
            bank.params.zero_grad()
            bank.encoder.params.zero_grad()
            total, terms = stage3_losses(bank, normal_batch, pseudo_batch)
            if not np.isfinite(terms["total"]):
                raise nm.NonFiniteError("stage-3 training diverged (non-finite total loss)")
            nm.backward(total)
            for params in (bank.params, bank.encoder.params):
                for _, p in params.items():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
            proto_opt.step(bank.params)
            enc_opt.step(bank.encoder.params)
            bank.renormalize()
            for key in sums:
                sums[key] += terms[key]
            batches += 1
        history.append({key: sums[key] / batches for key in sums})
    return history


def save_bank(bank: PrototypeBank, path, extra_meta: dict | None = None) -> None:
    """Bank checkpoint: encoder weights + prototype matrix + hyperparameters."""
    cfg = bank.cfg
    meta = {
        "encoder": {
            "width": bank.encoder.cfg.width,
            "dims": bank.encoder.cfg.dims,
            "hidden": bank.encoder.cfg.hidden,
            "embed_dim": bank.encoder.cfg.embed_dim,
        },
        "prototype_cfg": {
            "count": cfg.count,
            "temperature": cfg.temperature,
            "margin": cfg.margin,
            "margin_anomaly": cfg.margin_anomaly,
            "margin_dispersion": cfg.margin_dispersion,
            "weight_normal": cfg.weight_normal,
            "weight_anomaly": cfg.weight_anomaly,
            "weight_dispersion": cfg.weight_dispersion,
            "weight_balance": cfg.weight_balance,
            "epochs": cfg.epochs,
            "lr": cfg.lr,
            "encoder_lr_scale": cfg.encoder_lr_scale,
            "batch_size": cfg.batch_size,
        },
        **(extra_meta or {}),
    }
    arrays = {f"enc:{k}": v for k, v in bank.encoder.params.as_arrays().items()}
    arrays["prototypes"] = bank.prototype_matrix()
    save_checkpoint(path, "bank", meta, arrays)


def load_bank(path) -> tuple[PrototypeBank, dict]:
    meta, arrays = load_checkpoint(path, expect_kind="bank")
    enc = TripletEncoder(EncoderConfig(**meta["encoder"]), np.random.default_rng(0))
    enc.params.restore({k[len("enc:") :]: v for k, v in arrays.items() if k.startswith("enc:")})
    cfg = PrototypeConfig(**meta["prototype_cfg"])
    bank = PrototypeBank(enc, arrays["prototypes"], cfg, renormalize=False)
    return bank, meta
