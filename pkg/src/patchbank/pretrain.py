"""Desk-scale pretraining mechanisms, numerically verified.

Implements the training-time machinery around a toy linear patch encoder:

* a FIFO memory of spatially averaged image features and their MLP-mapped
  values, filled from the slow-moving target network;
* contextualization: every patch feature attends over that memory and is
  mixed with the retrieved value before a linear map;
* attention pooling of the contextualized grid into one image vector
  (uniform / learned-logits / learned-logits-plus-value-head variants);
* projection and prediction heads rescaled to a fixed norm, a contrastive
  loss between views, and a retrieval-based classification loss against a
  labeled memory;
* an EMA target-parameter update and a single-step gradient-descent trainer.

All forward passes run on the autodiff tape in float64; memory entries are
constants (no gradient flows into stored keys or values).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, l2_normalize_rows, logsumexp, rescale_rows, softmax

POOLING_MODES = ("mean", "qk", "qkv")
_BN_EPS = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2                  # contextual mixing weight
    tau: float = 0.1                  # contrastive temperature (norm = 1/sqrt(tau))
    alpha: float = 0.05               # supervised loss weight
    ema_decay: float = 0.99
    pooling_mode: str = "qkv"
    context_temperature: float = 1.0  # temperature of the memory cross-attention
    lr: float = 1e-3
    bank_capacity: int = 256
    batchnorm: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if self.tau <= 0 or self.context_temperature <= 0 or self.lr <= 0:
            raise ValueError("tau, context_temperature, lr must be > 0")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"pooling_mode must be one of {POOLING_MODES}")
        if self.bank_capacity < 1:
            raise ValueError("bank_capacity must be >= 1")


_CONFIG_KEYS = {
    "lambda": ("lam", float), "tau": ("tau", float), "alpha": ("alpha", float),
    "ema_decay": ("ema_decay", float), "pooling_mode": ("pooling_mode", str),
    "beta_p": ("context_temperature", float), "lr": ("lr", float),
    "bank_capacity": ("bank_capacity", int), "batchnorm": ("batchnorm", lambda s: s.lower() in ("1", "true", "yes")),
    "seed": ("seed", int),
}


def parse_loss_config(path: str | Path) -> LossConfig:
    """Read a key=value config file; unknown keys are an error."""
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        attr, conv = _CONFIG_KEYS[key]
        kwargs[attr] = conv(value)
    return LossConfig(**kwargs)


def format_loss_config(cfg: LossConfig) -> str:
    inverse = {attr: key for key, (attr, _) in _CONFIG_KEYS.items()}
    lines = [f"{inverse[f]}={getattr(cfg, f)}" for f in inverse]
    return "\n".join(lines) + "\n"


class PretrainBank:
    """FIFO ring of (key, value[, label]) rows, oldest evicted first."""

    def __init__(self, capacity: int, dim: int, with_labels: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._keys = np.zeros((capacity, dim))
        self._values = np.zeros((capacity, dim))
        self._labels = np.full(capacity, -1, dtype=np.int64) if with_labels else None
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    @property
    def dim(self) -> int:
        return self._keys.shape[1]

    def push(self, keys: np.ndarray, values: np.ndarray,
             labels: np.ndarray | None = None):
        if not np.all(np.isfinite(keys)):
            raise ValueError("bank keys must be finite")
        if self._labels is not None and labels is None:
            raise ValueError("this bank stores labels; push must provide them")
        for i in range(len(keys)):
            self._keys[self._next] = keys[i]
            self._values[self._next] = values[i]
            if self._labels is not None:
                self._labels[self._next] = labels[i]
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def keys(self) -> np.ndarray:
        """Stored keys, oldest first."""
        return self._keys[self._order()]

    def values(self) -> np.ndarray:
        return self._values[self._order()]

    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise ValueError("bank was created without labels")
        return self._labels[self._order()]


# -- parameters -----------------------------------------------------------

TARGET_EXCLUDED_PREFIX = "pred_"  # the predictor head has no target copy


def init_params(in_dim: int, dim: int, hidden: int, proj_dim: int,
                seed: int) -> dict[str, np.ndarray]:
    """Gaussian-initialized parameter set for the toy networks."""
    rng = np.random.default_rng([seed, 0x9A7A])

    def w(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(rows)

    return {
        "enc_w": w(in_dim, dim), "enc_b": np.zeros(dim),
        "phi_w1": w(dim, hidden), "phi_b1": np.zeros(hidden),
        "phi_gamma": np.ones(hidden), "phi_beta": np.zeros(hidden),
        "phi_w2": w(hidden, dim), "phi_b2": np.zeros(dim),
        "psi_w": w(dim, dim) + np.eye(dim), "psi_b": np.zeros(dim),
        "attn_w": w(dim, 1), "attn_b": np.zeros(1),
        "omega_w": w(dim, dim) + np.eye(dim), "omega_b": np.zeros(dim),
        "proj_w": w(dim, proj_dim), "proj_b": np.zeros(proj_dim),
        "pred_w": w(proj_dim, proj_dim) + np.eye(proj_dim), "pred_b": np.zeros(proj_dim),
    }


def target_param_names(params: dict[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.startswith(TARGET_EXCLUDED_PREFIX)]


def identity_value_head_params(dim: int) -> dict[str, np.ndarray]:
    """Weights making the two-layer ReLU value head the exact identity.

    relu(x) - relu(-x) == x, so stacking [I; -I] into the hidden layer and
    subtracting the halves reconstructs the input.
    """
    eye = np.eye(dim)
    return {
        "phi_w1": np.concatenate([eye, -eye], axis=1),
        "phi_b1": np.zeros(2 * dim),
        "phi_gamma": np.ones(2 * dim), "phi_beta": np.zeros(2 * dim),
        "phi_w2": np.concatenate([eye, -eye], axis=0),
        "phi_b2": np.zeros(dim),
    }


def _t(params: dict, name: str, grad: bool) -> Tensor:
    v = params[name]
    return v if isinstance(v, Tensor) else Tensor(v, requires_grad=grad)


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- forward ops -----------------------------------------------------------


def encode(x: Tensor, params: dict) -> Tensor:
    """Toy patch encoder: a linear projection of raw patch descriptors."""
    return x @ _t(params, "enc_w", False) + _t(params, "enc_b", False)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / (var + _BN_EPS).sqrt() * gamma + beta


def value_head(k: Tensor, params: dict, batchnorm: bool = True) -> Tensor:
    """Two-layer MLP with optional batch norm after the first layer."""
    h = k @ _t(params, "phi_w1", False) + _t(params, "phi_b1", False)
    if batchnorm:
        h = batch_norm(h, _t(params, "phi_gamma", False), _t(params, "phi_beta", False))
    h = h.relu()
    return h @ _t(params, "phi_w2", False) + _t(params, "phi_b2", False)


def spatial_mean_keys(grids: np.ndarray) -> np.ndarray:
    """Per-image spatial mean of (B, P, D) feature grids."""
    return np.asarray(grids, dtype=np.float64).mean(axis=1)


def bank_push(bank: PretrainBank, grids: np.ndarray, target_params: dict,
              batchnorm: bool = True, labels: np.ndarray | None = None) -> None:
    """Append one batch: keys are spatial means, values come from the target
    network's value head.  Stored entries never carry gradients."""
    keys = spatial_mean_keys(grids)
    if keys.shape[1] != bank.dim:
        raise ValueError(f"feature dim {keys.shape[1]} != bank dim {bank.dim}")
    values = value_head(Tensor(keys), target_params, batchnorm).data
    bank.push(keys, values, labels)


def contextualize(q: Tensor | np.ndarray, bank: PretrainBank, lam: float,
                  temperature: float, params: dict | None = None) -> Tensor:
    """Mix each feature with a value retrieved from the memory bank.

    The feature and the retrieved value are both L2-normalized, combined as
    (1-lam) * feature + lam * value, and passed through the linear mixer.
    ``params=None`` uses the identity mixer.  Bank entries are constants.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    qn = l2_normalize_rows(q)
    if lam > 0:
        if len(bank) == 0:
            raise ValueError("contextualize with lam > 0 needs a non-empty bank")
        keys = bank.keys()
        kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        scores = (qn @ Tensor(kn.T)) * (1.0 / temperature)
        att = softmax(scores, axis=-1)
        vhat = att @ Tensor(bank.values())
        mixed = qn * (1.0 - lam) + l2_normalize_rows(vhat) * lam
    else:
        mixed = qn
    if params is None:
        return mixed
    return mixed @ _t(params, "psi_w", False) + _t(params, "psi_b", False)


def attention_pool(c: Tensor | np.ndarray, batch: int, positions: int,
                   mode: str, params: dict | None = None) -> Tensor:
    """Pool (batch*positions, D) features to one vector per image.

    mode "qkv" weights value-mapped features by learned per-position logits;
    "qk" drops the value map; "mean" is uniform weights and no value map.
    """
    if mode not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    c = c if isinstance(c, Tensor) else Tensor(c)
    if positions < 1 or c.shape[0] != batch * positions:
        raise ValueError(f"cannot pool {c.shape[0]} rows as {batch}x{positions}")
    dim = c.shape[1]
    if mode == "mean":
        return c.reshape(batch, positions, dim).mean(axis=1)
    logits = (c @ _t(params, "attn_w", False) + _t(params, "attn_b", False))
    weights = softmax(logits.reshape(batch, positions), axis=1)
    mapped = c @ _t(params, "omega_w", False) + _t(params, "omega_b", False) \
        if mode == "qkv" else c
    mapped = mapped.reshape(batch, positions, dim)
    return (mapped * weights.reshape(batch, positions, 1)).sum(axis=1)


def project_and_predict(pooled: Tensor | np.ndarray, params: dict,
                        tau: float) -> tuple[Tensor, Tensor]:
    """Projection and prediction, each rescaled to L2 norm 1/sqrt(tau)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    norm = 1.0 / np.sqrt(tau)
    z = rescale_rows(pooled @ _t(params, "proj_w", False) + _t(params, "proj_b", False),
                     norm)
    pred = rescale_rows(z @ _t(params, "pred_w", False) + _t(params, "pred_b", False),
                        norm)
    return z, pred


def project_target(pooled: Tensor | np.ndarray, params: dict, tau: float) -> np.ndarray:
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    return rescale_rows(pooled @ _t(params, "proj_w", False)
                        + _t(params, "proj_b", False), 1.0 / np.sqrt(tau)).data


def contrastive_loss(preds: Tensor, targets: np.ndarray,
                     pairing: np.ndarray | None = None) -> Tensor:
    """InfoNCE: each prediction against its positive target, with the other
    in-batch targets as negatives.

    The denominator is exp(positive) plus the sum over negatives, i.e. the
    softmax denominator over all batch targets.  A batch of one has no
    negatives and gives exactly zero loss.
    """
    batch = preds.shape[0]
    if pairing is None:
        pairing = np.arange(batch)
    pairing = np.asarray(pairing)
    if pairing.shape != (batch,) or np.any(pairing < 0) or np.any(pairing >= batch):
        raise ValueError(f"pairing must hold indices in [0, {batch})")
    logits = preds @ Tensor(np.asarray(targets, dtype=np.float64).T)
    onehot = np.zeros((batch, batch))
    onehot[np.arange(batch), pairing] = 1.0
    pos = (logits * Tensor(onehot)).sum(axis=1)
    lse = logsumexp(logits, axis=1).reshape(batch)
    return (lse - pos).mean()


def supervised_retrieval_loss(pooled: Tensor | np.ndarray, labels: np.ndarray,
                              bank: PretrainBank, num_global_classes: int,
                              temperature: float = 1.0) -> Tensor:
    """Cross-entropy of labels predicted by attending over a labeled memory.

    Attention weights (cosine over temperature, softmaxed) blend the stored
    one-hot labels into a distribution; the loss is the mean negative log
    probability of each image's true class.
    """
    if len(bank) == 0:
        raise ValueError("supervised retrieval needs a non-empty labeled bank")
    bank_labels = bank.labels()
    if np.any(bank_labels < 0) or np.any(bank_labels >= num_global_classes):
        raise ValueError(f"bank labels out of range for {num_global_classes} classes")
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= num_global_classes):
        raise ValueError(f"labels out of range for {num_global_classes} classes")
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    keys = bank.keys()
    kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    scores = (l2_normalize_rows(pooled) @ Tensor(kn.T)) * (1.0 / temperature)
    att = softmax(scores, axis=-1)
    onehot = np.zeros((len(bank), num_global_classes))
    onehot[np.arange(len(bank)), bank_labels] = 1.0
    yhat = att @ Tensor(onehot)
    batch = pooled.shape[0]
    pick = np.zeros((batch, num_global_classes))
    pick[np.arange(batch), labels] = 1.0
    prob = (yhat * Tensor(pick)).sum(axis=1)
    return -(prob.log().mean())


def ema_update(theta: dict[str, np.ndarray], xi: dict[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    """xi' = decay * xi + (1 - decay) * theta, per parameter."""
    out = {}
    for name, value in xi.items():
        live = theta[name]
        live = live.data if isinstance(live, Tensor) else live
        if live.shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {live.shape} vs {value.shape}")
        out[name] = decay * value + (1.0 - decay) * live
    return out


# -- toy trainer ------------------------------------------------------------


@dataclass
class PretrainState:
    params: dict[str, np.ndarray]
    xi: dict[str, np.ndarray]
    ssl_bank: PretrainBank
    sup_bank: PretrainBank
    num_global_classes: int
    step: int = 0


def init_state(in_dim: int, dim: int, hidden: int, proj_dim: int,
               num_global_classes: int, cfg: LossConfig) -> PretrainState:
    params = init_params(in_dim, dim, hidden, proj_dim, cfg.seed)
    xi = {k: params[k].copy() for k in target_param_names(params)}
    return PretrainState(params, xi,
                         PretrainBank(cfg.bank_capacity, dim),
                         PretrainBank(cfg.bank_capacity, dim, with_labels=True),
                         num_global_classes)


def _forward_pooled(view: np.ndarray, params: dict, bank: PretrainBank,
                    cfg: LossConfig) -> Tensor:
    batch, positions, _ = view.shape
    h = encode(Tensor(view.reshape(batch * positions, -1)), params)
    c = contextualize(h, bank, cfg.lam, cfg.context_temperature, params)
    return attention_pool(c, batch, positions, cfg.pooling_mode, params)


def total_loss(params: dict, state: PretrainState, view1: np.ndarray,
               view2: np.ndarray, labels: np.ndarray,
               cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Symmetric contrastive loss plus alpha-weighted supervised terms.

    ``params`` may hold Tensors (for gradients) or plain arrays (for
    finite-difference probing).  Target-side values are plain constants.
    """
    pooled1 = _forward_pooled(view1, params, state.ssl_bank, cfg)
    pooled2 = _forward_pooled(view2, params, state.ssl_bank, cfg)
    _, preds1 = project_and_predict(pooled1, params, cfg.tau)
    _, preds2 = project_and_predict(pooled2, params, cfg.tau)

    xi = state.xi
    t1 = project_target(_forward_pooled(view1, xi, state.ssl_bank, cfg).detach(),
                        xi, cfg.tau)
    t2 = project_target(_forward_pooled(view2, xi, state.ssl_bank, cfg).detach(),
                        xi, cfg.tau)
    ssl = contrastive_loss(preds1, t2) + contrastive_loss(preds2, t1)

    parts = {"ssl": float(ssl.data)}
    loss = ssl
    if cfg.alpha > 0:
        sup = supervised_retrieval_loss(pooled1, labels, state.sup_bank,
                                        state.num_global_classes,
                                        cfg.context_temperature) \
            + supervised_retrieval_loss(pooled2, labels, state.sup_bank,
                                        state.num_global_classes,
                                        cfg.context_temperature)
        loss = loss + sup * cfg.alpha
        parts["sup"] = float(sup.data)
    else:
        parts["sup"] = 0.0
    parts["total"] = float(loss.data)
    return loss, parts


def toy_train_step(state: PretrainState, view1: np.ndarray, view2: np.ndarray,
                   labels: np.ndarray, cfg: LossConfig) -> dict[str, float]:
    """One gradient-descent step, EMA update, and bank refresh."""
    tparams = as_tensors(state.params, requires_grad=True)
    loss, parts = total_loss(tparams, state, view1, view2, labels, cfg)
    if not np.isfinite(loss.data):
        raise RuntimeError(
            f"non-finite loss at step {state.step}: {parts}; "
            f"lam={cfg.lam} tau={cfg.tau} alpha={cfg.alpha} lr={cfg.lr}")
    loss.backward()
    for name, tensor in tparams.items():
        if tensor.grad is not None:
            state.params[name] = tensor.data - cfg.lr * tensor.grad
        else:
            state.params[name] = tensor.data
    state.xi = ema_update(state.params, state.xi, cfg.ema_decay)
    for view in (view1, view2):
        bank_push(state.ssl_bank, view_encoded(view, state.xi), state.xi,
                  cfg.batchnorm)
        bank_push(state.sup_bank, view_encoded(view, state.xi), state.xi,
                  cfg.batchnorm, labels=labels)
    state.step += 1
    return parts


def view_encoded(view: np.ndarray, params: dict) -> np.ndarray:
    """Encode a (B, P, Din) view to (B, P, D) with the given parameters."""
    batch, positions, _ = view.shape
    h = encode(Tensor(view.reshape(batch * positions, -1)), params)
    return h.data.reshape(batch, positions, -1)


def make_toy_views(num_images: int, positions: int, in_dim: int,
                   num_classes: int, noise: float, seed: int,
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Paired noisy views of class-prototype grids, plus global labels.

    Image i carries class i mod num_classes, so any prefix of at least
    num_classes images covers every class.
    """
    rng = np.random.default_rng([seed, 0x70F5])
    protos = rng.standard_normal((num_classes, in_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = np.arange(num_images) % num_classes
    views = []
    for _ in range(2):
        v = protos[labels][:, None, :] + noise * rng.standard_normal(
            (num_images, positions, in_dim))
        views.append(v)
    return views[0], views[1], labels


def run_toy_training(cfg: LossConfig, steps: int, num_images: int = 64,
                     positions: int = 16, in_dim: int = 16, dim: int = 16,
                     hidden: int = 32, proj_dim: int = 16, num_classes: int = 4,
                     batch: int = 16, noise: float = 0.25,
                     ) -> tuple[PretrainState, list[dict[str, float]]]:
    """Train the toy pipeline on synthetic views; fully seed-deterministic.

    Both banks are seeded with the whole dataset (encoded by the initial
    target network) before the first step so contextualization and the
    supervised loss are live from step one.
    """
    view1, view2, labels = make_toy_views(num_images, positions, in_dim,
                                          num_classes, noise, cfg.seed)
    state = init_state(in_dim, dim, hidden, proj_dim, num_classes, cfg)
    for chunk in range(0, num_images, batch):
        sl = slice(chunk, chunk + batch)
        bank_push(state.ssl_bank, view_encoded(view1[sl], state.xi), state.xi,
                  cfg.batchnorm)
        bank_push(state.sup_bank, view_encoded(view1[sl], state.xi), state.xi,
                  cfg.batchnorm, labels=labels[sl])
    order_rng = np.random.default_rng([cfg.seed, 0xBa7c4])
    rows = []
    for step in range(steps):
        pick = order_rng.choice(num_images, size=batch, replace=False)
        parts = toy_train_step(state, view1[pick], view2[pick], labels[pick], cfg)
        parts["step"] = step
        rows.append(parts)
    return state, rows


def loss_log_csv(rows: list[dict[str, float]]) -> str:
    lines = ["step,total,ssl,sup"]
    for row in rows:
        lines.append(f"{row['step']},{row['total']:.12g},"
                     f"{row['ssl']:.12g},{row['sup']:.12g}")
    return "\n".join(lines) + "\n"
