"""From-scratch MLP hashing network trained with a pairwise similarity loss.

Architecture: input -> linear -> batchnorm -> tanh -> linear -> batchnorm ->
tanh -> linear -> tanh, producing one activation in (-1, 1) per code bit.
Training is plain minibatch gradient descent over every within-minibatch
pair, with early stopping on validation retrieval quality.  All arithmetic
is float64 numpy; runs are deterministic given the seed.

The pairwise loss for activations ``b1, b2`` and pair flag ``y`` (0 similar,
1 dissimilar) with margin ``m`` and quantization weight ``a`` is::

    0.5 * (1 - y) * ||b1 - b2||^2
  + 0.5 * y * max(m - ||b1 - b2||^2, 0)
  + a * (|| |b1| - 1 ||_1 + || |b2| - 1 ||_1)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DivergenceError,
    FormatVersionError,
    TruncatedPayloadError,
)

HIDDEN_1 = 300
HIDDEN_2 = 200

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

MODEL_MAGIC = b"CHSH"
MODEL_VERSION = 1


@dataclass(frozen=True)
class DshLossParams:
    """Pairwise loss settings plus network-weight regularization."""

    margin: float = 36.0
    reg_weight: float = 1e-3
    l1_weight: float = 0.0
    l2_weight: float = 0.0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.reg_weight < 0 or self.l1_weight < 0 or self.l2_weight < 0:
            raise ValueError("regularization weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for :func:`train`."""

    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    patience: int = 10

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


@dataclass
class MlpParams:
    """All learnable parameters and batchnorm running statistics."""

    w1: np.ndarray
    b1: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    run_mean1: np.ndarray
    run_var1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    run_mean2: np.ndarray
    run_var2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dims(self) -> tuple[int, int]:
        return self.w1.shape[1], self.w2.shape[1]

    @property
    def code_bits(self) -> int:
        return self.w3.shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


def init_params(
    input_dim: int,
    hidden1: int,
    hidden2: int,
    code_bits: int,
    rng: np.random.Generator,
) -> MlpParams:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    if min(input_dim, hidden1, hidden2, code_bits) < 1:
        raise ValueError("all layer sizes must be positive")

    def linear(fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
        bound = math.sqrt(1.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return weight, np.zeros(fan_out)

    w1, b1 = linear(input_dim, hidden1)
    w2, b2 = linear(hidden1, hidden2)
    w3, b3 = linear(hidden2, code_bits)
    return MlpParams(
        w1=w1, b1=b1,
        gamma1=np.ones(hidden1), beta1=np.zeros(hidden1),
        run_mean1=np.zeros(hidden1), run_var1=np.ones(hidden1),
        w2=w2, b2=b2,
        gamma2=np.ones(hidden2), beta2=np.zeros(hidden2),
        run_mean2=np.zeros(hidden2), run_var2=np.ones(hidden2),
        w3=w3, b3=b3,
    )


def _batchnorm_forward(
    z: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    run_mean: np.ndarray,
    run_var: np.ndarray,
    use_batch_stats: bool,
) -> tuple[np.ndarray, dict]:
    if use_batch_stats:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mean = run_mean
        var = run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    zhat = (z - mean) * inv_std
    out = gamma * zhat + beta
    info = {"zhat": zhat, "inv_std": inv_std, "batch_mean": mean, "batch_var": var}
    return out, info


def _forward_pass(x: np.ndarray, p: MlpParams, use_batch_stats: bool) -> tuple[np.ndarray, dict]:
    z1 = x @ p.w1 + p.b1
    n1, bn1 = _batchnorm_forward(z1, p.gamma1, p.beta1, p.run_mean1, p.run_var1, use_batch_stats)
    h1 = np.tanh(n1)
    z2 = h1 @ p.w2 + p.b2
    n2, bn2 = _batchnorm_forward(z2, p.gamma2, p.beta2, p.run_mean2, p.run_var2, use_batch_stats)
    h2 = np.tanh(n2)
    z3 = h2 @ p.w3 + p.b3
    out = np.tanh(z3)
    cache = {"x": x, "bn1": bn1, "h1": h1, "bn2": bn2, "h2": h2, "out": out}
    return out, cache


def _update_running_stats(p: MlpParams, cache: dict) -> None:
    for info, mean_attr, var_attr in (
        (cache["bn1"], "run_mean1", "run_var1"),
        (cache["bn2"], "run_mean2", "run_var2"),
    ):
        updated_mean = (1 - BN_MOMENTUM) * getattr(p, mean_attr) + BN_MOMENTUM * info["batch_mean"]
        updated_var = (1 - BN_MOMENTUM) * getattr(p, var_attr) + BN_MOMENTUM * info["batch_var"]
        setattr(p, mean_attr, updated_mean)
        setattr(p, var_attr, updated_var)


def forward(batch: np.ndarray, params: MlpParams, mode: str = "infer") -> np.ndarray:
    """Code activations in (-1, 1) for a batch of descriptors.

    ``train`` mode normalizes with batch statistics and folds them into the
    running averages; ``infer`` mode uses the stored running statistics and
    leaves all state untouched.
    """
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != params.input_dim:
        raise DataError(
            f"descriptor length {x.shape[1]} does not match model input "
            f"{params.input_dim}"
        )
    out, cache = _forward_pass(x, params, use_batch_stats=(mode == "train"))
    if mode == "train":
        _update_running_stats(params, cache)
    return out


def _batchnorm_backward(dout: np.ndarray, info: dict, gamma: np.ndarray):
    batch = dout.shape[0]
    zhat = info["zhat"]
    dbeta = dout.sum(axis=0)
    dgamma = (dout * zhat).sum(axis=0)
    dzhat = dout * gamma
    dz = (info["inv_std"] / batch) * (
        batch * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
    )
    return dz, dgamma, dbeta


def _backward_pass(dout_act: np.ndarray, cache: dict, p: MlpParams) -> dict:
    out, h2, h1, x = cache["out"], cache["h2"], cache["h1"], cache["x"]
    dz3 = dout_act * (1.0 - out * out)
    grads = {"w3": h2.T @ dz3, "b3": dz3.sum(axis=0)}
    dh2 = dz3 @ p.w3.T
    dn2 = dh2 * (1.0 - h2 * h2)
    dz2, grads["gamma2"], grads["beta2"] = _batchnorm_backward(dn2, cache["bn2"], p.gamma2)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ p.w2.T
    dn1 = dh1 * (1.0 - h1 * h1)
    dz1, grads["gamma1"], grads["beta1"] = _batchnorm_backward(dn1, cache["bn1"], p.gamma1)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Pairwise loss
# ---------------------------------------------------------------------------


def dsh_loss(b1: np.ndarray, b2: np.ndarray, y: int, lp: DshLossParams) -> float:
    """Loss for one pair of code activations; ``y`` is 0 similar, 1 dissimilar."""
    v1 = np.asarray(b1, dtype=np.float64)
    v2 = np.asarray(b2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ValueError("b1 and b2 must be 1-D vectors of equal length")
    if y not in (0, 1):
        raise ValueError("y must be 0 (similar) or 1 (dissimilar)")
    diff = v1 - v2
    dist = float(diff @ diff)
    if y == 0:
        pair = 0.5 * dist
    else:
        pair = 0.5 * max(lp.margin - dist, 0.0)
    reg = lp.reg_weight * (
        np.abs(np.abs(v1) - 1.0).sum() + np.abs(np.abs(v2) - 1.0).sum()
    )
    return pair + reg


def dsh_loss_grad(
    b1: np.ndarray, b2: np.ndarray, y: int, lp: DshLossParams
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`dsh_loss` with respect to both vectors.

    At the hinge boundary (``dist == margin``) and at kinks of the
    quantization term (``b == 0`` or ``|b| == 1``) the zero-side subgradient
    is used.
    """
    v1 = np.asarray(b1, dtype=np.float64)
    v2 = np.asarray(b2, dtype=np.float64)
    if v1.shape != v2.shape or v1.ndim != 1:
        raise ValueError("b1 and b2 must be 1-D vectors of equal length")
    if y not in (0, 1):
        raise ValueError("y must be 0 (similar) or 1 (dissimilar)")
    diff = v1 - v2
    dist = float(diff @ diff)
    if y == 0:
        g1, g2 = diff.copy(), -diff
    elif dist < lp.margin:
        g1, g2 = -diff, diff.copy()
    else:
        g1, g2 = np.zeros_like(v1), np.zeros_like(v2)
    g1 = g1 + lp.reg_weight * np.sign(np.abs(v1) - 1.0) * np.sign(v1)
    g2 = g2 + lp.reg_weight * np.sign(np.abs(v2) - 1.0) * np.sign(v2)
    return g1, g2


def pair_batch(labels) -> list[tuple[int, int, int]]:
    """Every unordered index pair with its similarity flag (0 same label)."""
    n = len(labels)
    if n < 2:
        raise ValueError("need at least two samples to form pairs")
    return [
        (i, j, 0 if labels[i] == labels[j] else 1)
        for i in range(n)
        for j in range(i + 1, n)
    ]


def _pair_objective(acts: np.ndarray, labels: np.ndarray, lp: DshLossParams):
    """Mean pairwise loss over all within-batch pairs and its activation grad."""
    batch = acts.shape[0]
    iu, ju = np.triu_indices(batch, k=1)
    diff = acts[iu] - acts[ju]
    dist = np.einsum("ij,ij->i", diff, diff)
    dissimilar = labels[iu] != labels[ju]
    sim_term = np.where(~dissimilar, 0.5 * dist, 0.0)
    dis_term = np.where(dissimilar, 0.5 * np.maximum(lp.margin - dist, 0.0), 0.0)
    quant = np.abs(np.abs(acts) - 1.0).sum(axis=1)
    n_pairs = iu.size
    loss = (
        sim_term.sum() + dis_term.sum() + lp.reg_weight * (quant[iu] + quant[ju]).sum()
    ) / n_pairs
    coef = np.where(~dissimilar, 1.0, np.where(dist < lp.margin, -1.0, 0.0))
    pair_grad = coef[:, None] * diff
    grad = np.zeros_like(acts)
    np.add.at(grad, iu, pair_grad)
    np.add.at(grad, ju, -pair_grad)
    # every sample appears in exactly batch - 1 pairs
    grad += lp.reg_weight * (batch - 1) * np.sign(np.abs(acts) - 1.0) * np.sign(acts)
    return float(loss), grad / n_pairs


_WEIGHT_FIELDS = ("w1", "w2", "w3")


def _weight_penalty(p: MlpParams, lp: DshLossParams) -> float:
    total = 0.0
    for name in _WEIGHT_FIELDS:
        w = getattr(p, name)
        if lp.l1_weight:
            total += lp.l1_weight * np.abs(w).sum()
        if lp.l2_weight:
            total += lp.l2_weight * (w * w).sum()
    return total


def _apply_update(p: MlpParams, grads: dict, lr: float, lp: DshLossParams) -> None:
    for name, grad in grads.items():
        if name in _WEIGHT_FIELDS:
            w = getattr(p, name)
            grad = grad + lp.l1_weight * np.sign(w) + 2.0 * lp.l2_weight * w
        setattr(p, name, getattr(p, name) - lr * grad)


def _validation_map(
    p: MlpParams,
    ref_x: np.ndarray,
    ref_labels: np.ndarray,
    query_x: np.ndarray,
    query_labels: np.ndarray,
    k: int = 100,
) -> float:
    from .evaluation import map_at_k, relevance_results
    from .retrieval import RetrievalIndex, binarize

    ref_acts = forward(ref_x, p, mode="infer")
    query_acts = forward(query_x, p, mode="infer")
    index = RetrievalIndex(
        [binarize(row, 0.0) for row in ref_acts], list(ref_labels)
    )
    codes = [binarize(row, 0.0) for row in query_acts]
    return map_at_k(relevance_results(index, codes, list(query_labels), k))


def train(
    train_x: np.ndarray,
    train_labels,
    valid_x: np.ndarray,
    valid_labels,
    code_bits: int,
    cfg: TrainConfig,
    lp: DshLossParams,
    hidden: tuple[int, int] = (HIDDEN_1, HIDDEN_2),
) -> tuple[MlpParams, list[dict]]:
    """Minibatch gradient descent over all within-batch pairs.

    Every epoch reshuffles with the seeded generator, walks fixed-size
    minibatches (trailing batches of fewer than 2 samples are skipped),
    and records mean train loss plus validation mAP@100 of the binarized
    codes.  The parameters of the best validation epoch are returned;
    ``cfg.patience`` consecutive non-improving epochs stop training early
    (patience <= 0 disables early stopping).
    """
    tx = np.asarray(train_x, dtype=np.float64)
    vx = np.asarray(valid_x, dtype=np.float64)
    tl = np.asarray(train_labels)
    vl = np.asarray(valid_labels)
    if tx.ndim != 2 or tx.shape[0] == 0:
        raise DataError("training split is empty or not a matrix")
    if vx.ndim != 2 or vx.shape[0] == 0:
        raise DataError("validation split is empty or not a matrix")
    if tx.shape[0] != tl.shape[0] or vx.shape[0] != vl.shape[0]:
        raise DataError("descriptor and label counts disagree")
    if tx.shape[1] != vx.shape[1]:
        raise DataError("train and validation descriptor lengths disagree")
    if code_bits < 1:
        raise ValueError("code_bits must be positive")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(tx.shape[1], hidden[0], hidden[1], code_bits, rng)
    best_map = -math.inf
    best_params = params.copy()
    history: list[dict] = []
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(tx.shape[0])
        batch_losses = []
        for start in range(0, tx.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            out, cache = _forward_pass(tx[idx], params, use_batch_stats=True)
            _update_running_stats(params, cache)
            pair_loss, dact = _pair_objective(out, tl[idx], lp)
            loss = float(pair_loss) + _weight_penalty(params, lp)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            grads = _backward_pass(dact, cache, params)
            _apply_update(params, grads, cfg.learning_rate, lp)
            batch_losses.append(loss)
        if not batch_losses:
            raise DataError("no trainable minibatch of size >= 2")
        val_map = _validation_map(params, tx, tl, vx, vl)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_map": float(val_map),
            }
        )
        if val_map > best_map:
            best_map = val_map
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if cfg.patience > 0 and stale >= cfg.patience:
                break
    return best_params, history


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------

_PARAM_ORDER = (
    "w1", "b1", "gamma1", "beta1", "run_mean1", "run_var1",
    "w2", "b2", "gamma2", "beta2", "run_mean2", "run_var2",
    "w3", "b3",
)


def _param_shapes(input_dim: int, h1: int, h2: int, bits: int) -> dict:
    return {
        "w1": (input_dim, h1), "b1": (h1,),
        "gamma1": (h1,), "beta1": (h1,), "run_mean1": (h1,), "run_var1": (h1,),
        "w2": (h1, h2), "b2": (h2,),
        "gamma2": (h2,), "beta2": (h2,), "run_mean2": (h2,), "run_var2": (h2,),
        "w3": (h2, bits), "b3": (bits,),
    }


def save_model(
    path: Path,
    params: MlpParams,
    train_config: TrainConfig | None = None,
    loss_params: DshLossParams | None = None,
    extra: dict | None = None,
) -> None:
    """Write parameters as float64 blocks after a CHSH header, plus a JSON
    sidecar recording the training and loss settings."""
    path = Path(path)
    h1, h2 = params.hidden_dims
    header = MODEL_MAGIC + struct.pack(
        "<5I", MODEL_VERSION, params.input_dim, h1, h2, params.code_bits
    )
    blocks = b"".join(
        np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes()
        for name in _PARAM_ORDER
    )
    path.write_bytes(header + blocks)
    sidecar = {
        "format_version": MODEL_VERSION,
        "train_config": asdict(train_config) if train_config else None,
        "loss_params": asdict(loss_params) if loss_params else None,
    }
    if extra:
        sidecar.update(extra)
    sidecar_path = path.with_name(path.name + ".json")
    sidecar_path.write_text(
        json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8"
    )


def load_model(path: Path) -> tuple[MlpParams, dict]:
    """Read a CHSH model file; returns the parameters and sidecar metadata."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    if len(buf) < 4 or buf[:4] != MODEL_MAGIC:
        raise FormatVersionError(f"{path}: bad magic, expected CHSH")
    if len(buf) < 24:
        raise TruncatedPayloadError(f"{path}: header is incomplete")
    version, input_dim, h1, h2, bits = struct.unpack_from("<5I", buf, 4)
    if version != MODEL_VERSION:
        raise FormatVersionError(f"{path}: unsupported model version {version}")
    if min(input_dim, h1, h2, bits) < 1:
        raise DataError(f"{path}: model declares a zero layer size")
    shapes = _param_shapes(input_dim, h1, h2, bits)
    expected = 24 + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) < expected:
        raise TruncatedPayloadError(
            f"{path}: file holds {len(buf)} bytes, expected {expected}"
        )
    if len(buf) > expected:
        raise DataError(f"{path}: {len(buf) - expected} trailing bytes after payload")
    offset = 24
    values = {}
    for name in _PARAM_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        block = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
        values[name] = block.astype(np.float64).reshape(shape)
        offset += 8 * count
    params = MlpParams(**values)
    if np.any(params.run_var1 <= 0) or np.any(params.run_var2 <= 0):
        raise DataError(f"{path}: running variances must be positive")
    sidecar_path = path.with_name(path.name + ".json")
    meta: dict = {}
    if sidecar_path.exists():
        try:
            meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{sidecar_path}: invalid JSON: {exc}") from exc
    return params, meta
