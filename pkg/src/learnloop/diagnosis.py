"""Neural cognitive diagnosis: masked ability/difficulty interaction, a
monotone MLP response predictor, hand-derived SGD training, and metrics.

The embedding dimension equals the number of knowledge points, so each
sigmoid-squashed ability coordinate is readable as mastery of one knowledge
point. Monotonicity (more mastery never lowers a predicted probability) is
kept by projecting MLP weight matrices onto the non-negative orthant after
every update.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .ingest import QMatrix, ResponseDataset, ResponseRecord

LOSS_EPS = 1e-7     # prediction clamp inside the cross-entropy
PRED_EPS = 1e-12    # keeps predict() strictly inside (0,1) at float limits


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ModelFormatError(ValueError):
    """Persisted model file has inconsistent dimensions."""


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.002
    batch_size: int = 256
    hidden_sizes: tuple[int, ...] = (64, 32)
    seed: int = 0
    init_scale: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.init_scale <= 0:
            raise ValueError("learning_rate must be >= 0 and init_scale > 0")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "hidden_sizes": list(self.hidden_sizes),
            "seed": self.seed,
            "init_scale": self.init_scale,
            "test_fraction": self.test_fraction,
        }


@dataclass
class Metrics:
    auc: float
    acc: float
    rmse: float
    mse: float
    loss: float

    def to_dict(self) -> dict:
        return {
            "auc": None if math.isnan(self.auc) else self.auc,
            "acc": self.acc,
            "rmse": self.rmse,
            "mse": self.mse,
            "loss": self.loss,
        }


@dataclass
class MasteryTable:
    values: np.ndarray  # (n_students, n_knowledge), entries in (0,1)


class NcdModel:
    """Ability/difficulty embeddings plus a non-negative-weight MLP head."""

    def __init__(self, theta, beta, alpha_raw, weights, biases, config: TrainConfig):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.beta = np.asarray(beta, dtype=np.float64)
        self.alpha_raw = np.asarray(alpha_raw, dtype=np.float64)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.config = config
        self._validate_dims()

    @property
    def n_students(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def _validate_dims(self):
        if self.beta.shape[1] != self.d or self.alpha_raw.shape[0] != self.n_items:
            raise ModelFormatError("embedding dimensions are inconsistent")
        dim = self.d
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != dim or b.shape[0] != w.shape[1]:
                raise ModelFormatError(
                    f"MLP layer dims do not chain: expected input {dim}, got {w.shape}"
                )
            dim = w.shape[1]
        if dim != 1:
            raise ModelFormatError(f"MLP must end in a scalar output, got {dim}")

    @classmethod
    def initialize(cls, n_students: int, n_items: int, n_knowledge: int,
                   config: TrainConfig) -> "NcdModel":
        """Seeded uniform(-init_scale, init_scale) everywhere. MLP weight
        matrices take the magnitude of their draws: the non-negative orthant
        the projection enforces must already hold at init (so a zero-rate
        step is a true no-op), and reflecting instead of clamping avoids
        starting half the units on the projection boundary."""
        rng = np.random.default_rng(config.seed)
        s = config.init_scale
        theta = rng.uniform(-s, s, size=(n_students, n_knowledge))
        beta = rng.uniform(-s, s, size=(n_items, n_knowledge))
        alpha_raw = rng.uniform(-s, s, size=n_items)
        dims = (n_knowledge, *config.hidden_sizes, 1)
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(np.abs(rng.uniform(-s, s, size=(d_in, d_out))))
            biases.append(rng.uniform(-s, s, size=d_out))
        return cls(theta, beta, alpha_raw, weights, biases, config)

    def clone(self) -> "NcdModel":
        return NcdModel(
            self.theta.copy(), self.beta.copy(), self.alpha_raw.copy(),
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.config,
        )

    def alpha(self, items) -> np.ndarray:
        """Discrimination, softplus of the raw parameter: strictly positive."""
        return np.logaddexp(0.0, self.alpha_raw[items])

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dims": {
                "n_students": self.n_students,
                "n_items": self.n_items,
                "n_knowledge": self.d,
                "hidden_sizes": list(self.config.hidden_sizes),
            },
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
            "alpha_raw": self.alpha_raw.tolist(),
            "mlp": [
                {"weights": w.tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
            "train_config": self.config.to_dict(),
            "seed": self.config.seed,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "NcdModel":
        try:
            cfg = TrainConfig(**doc["train_config"])
            model = cls(
                doc["theta"], doc["beta"], doc["alpha_raw"],
                [layer["weights"] for layer in doc["mlp"]],
                [layer["bias"] for layer in doc["mlp"]],
                cfg,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ModelFormatError(f"corrupted model document: {exc}") from exc
        dims = doc.get("dims", {})
        if dims and (dims.get("n_students") != model.n_students
                     or dims.get("n_items") != model.n_items
                     or dims.get("n_knowledge") != model.d):
            raise ModelFormatError("declared dims do not match parameter shapes")
        return model

    @classmethod
    def load(cls, path: str | Path) -> "NcdModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def q_mask_array(q_matrix: QMatrix, n_knowledge: int) -> np.ndarray:
    """Dense {0,1} incidence array, items by knowledge points."""
    mask = np.zeros((len(q_matrix.rows), n_knowledge))
    for item, skills in enumerate(q_matrix.rows):
        for k in skills:
            mask[item, k] = 1.0
    return mask


def _row_mask(q_row, d: int) -> np.ndarray:
    if isinstance(q_row, np.ndarray) and q_row.shape == (d,):
        return q_row.astype(np.float64)
    mask = np.zeros(d)
    mask[list(q_row)] = 1.0
    return mask


def interaction(model: NcdModel, s: int, q: int, q_row) -> np.ndarray:
    """Masked discrimination-scaled gap between squashed ability and
    difficulty: alpha_q * mask * (sigmoid(theta_s) - sigmoid(beta_q))."""
    _check_ids(model, s, q)
    mask = _row_mask(q_row, model.d)
    return model.alpha(q) * mask * (expit(model.theta[s]) - expit(model.beta[q]))


def _check_ids(model: NcdModel, s: int | None, q: int | None):
    if s is not None and not (0 <= s < model.n_students):
        raise IndexError(f"student id {s} out of range [0, {model.n_students})")
    if q is not None and not (0 <= q < model.n_items):
        raise IndexError(f"item id {q} out of range [0, {model.n_items})")


def _forward_mlp(model: NcdModel, x: np.ndarray):
    """Hidden tanh layers then a linear scalar head. Returns activations per
    layer (x first) and the pre-sigmoid output."""
    acts = [x]
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    z = h @ model.weights[-1] + model.biases[-1]
    return acts, z[..., 0]


def _forward_batch(model: NcdModel, ss, qq, mask_rows, theta=None):
    theta = model.theta if theta is None else theta
    t = expit(theta[ss])
    b = expit(model.beta[qq])
    a = model.alpha(qq)
    x = a[..., None] * mask_rows * (t - b)
    acts, z = _forward_mlp(model, x)
    p = np.clip(expit(z), PRED_EPS, 1.0 - PRED_EPS)
    return p, (t, b, a, x, acts, z)


def predict(model: NcdModel, s: int, q: int, q_row) -> float:
    """Probability of a correct response, strictly inside (0,1)."""
    _check_ids(model, s, q)
    mask = _row_mask(q_row, model.d)
    p, _ = _forward_batch(model, np.array([s]), np.array([q]), mask[None, :])
    return float(p[0])


def predict_batch(model: NcdModel, ss, qq, q_mask: np.ndarray,
                  theta: np.ndarray | None = None) -> np.ndarray:
    ss = np.asarray(ss)
    qq = np.asarray(qq)
    p, _ = _forward_batch(model, ss, qq, q_mask[qq], theta=theta)
    return p


def bce_loss(predictions, labels) -> float:
    """Mean binary cross-entropy with predictions clamped to
    [LOSS_EPS, 1 - LOSS_EPS]."""
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(labels, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    if p.size == 0:
        raise ValueError("empty prediction list")
    pc = np.clip(p, LOSS_EPS, 1.0 - LOSS_EPS)
    return float(-np.mean(r * np.log(pc) + (1.0 - r) * np.log(1.0 - pc)))


def _output_delta(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """d(loss)/d(pre-sigmoid output): the sigmoid/cross-entropy composition
    differentiates to p - r. The clamp only guards the loss value, so even
    saturated predictions keep a restoring gradient."""
    return p - r


def _backward_mlp(model: NcdModel, acts, delta_out: np.ndarray):
    """Backpropagate per-record output deltas through the MLP.

    Returns (layer gradients, gradient w.r.t. the interaction feature).
    Gradients are summed over the batch; callers own any normalization.
    """
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = delta_out[:, None]
    grads_w[-1] = acts[-1].T @ delta
    grads_b[-1] = delta.sum(axis=0)
    dh = delta @ model.weights[-1].T
    for j in range(len(model.weights) - 2, -1, -1):
        dz = dh * (1.0 - acts[j + 1] ** 2)
        grads_w[j] = acts[j].T @ dz
        grads_b[j] = dz.sum(axis=0)
        dh = dz @ model.weights[j].T
    return grads_w, grads_b, dh


def analytic_gradients(model: NcdModel, records: list[ResponseRecord],
                       q_mask: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy over `records` for every
    parameter tensor."""
    n = len(records)
    grads = {
        "theta": np.zeros_like(model.theta),
        "beta": np.zeros_like(model.beta),
        "alpha_raw": np.zeros_like(model.alpha_raw),
    }
    for j in range(len(model.weights)):
        grads[f"w{j}"] = np.zeros_like(model.weights[j])
        grads[f"b{j}"] = np.zeros_like(model.biases[j])
    if n == 0:
        return grads

    ss = np.array([r.student_id for r in records])
    qq = np.array([r.item_id for r in records])
    rr = np.array([float(r.correct) for r in records])
    mask_rows = q_mask[qq]
    p, (t, b, a, x, acts, z) = _forward_batch(model, ss, qq, mask_rows)

    delta_out = _output_delta(p, rr) / n
    grads_w, grads_b, dx = _backward_mlp(model, acts, delta_out)
    for j in range(len(model.weights)):
        grads[f"w{j}"] = grads_w[j]
        grads[f"b{j}"] = grads_b[j]

    gap = mask_rows * (t - b)
    d_alpha = (gap * dx).sum(axis=1) * expit(model.alpha_raw[qq])
    dt = a[:, None] * mask_rows * dx * t * (1.0 - t)
    db = -a[:, None] * mask_rows * dx * b * (1.0 - b)
    np.add.at(grads["theta"], ss, dt)
    np.add.at(grads["beta"], qq, db)
    np.add.at(grads["alpha_raw"], qq, d_alpha)
    return grads


def ability_forward_backward(model: NcdModel, theta: np.ndarray, items,
                             mask_rows: np.ndarray):
    """One student's predictions plus per-item ability gradients under both
    outcomes.

    theta is a single ability vector of length d. Returns (p, g_correct,
    g_incorrect): predictions for each item in `items`, and the gradient of
    each item's single-record cross-entropy w.r.t. theta under label 1 and
    label 0 (items and MLP held fixed).
    """
    items = np.asarray(items)
    t = expit(theta)[None, :].repeat(len(items), axis=0)
    b = expit(model.beta[items])
    a = model.alpha(items)
    x = a[:, None] * mask_rows * (t - b)
    acts, z = _forward_mlp(model, x)
    p = np.clip(expit(z), PRED_EPS, 1.0 - PRED_EPS)
    chain = a[:, None] * mask_rows * t * (1.0 - t)
    grads = []
    for label in (1.0, 0.0):
        delta_out = _output_delta(p, np.full(len(items), label))
        _, _, dx = _backward_mlp(model, acts, delta_out)
        grads.append(chain * dx)
    return p, grads[0], grads[1]


def ability_gradient(model: NcdModel, theta: np.ndarray, q: int, q_row,
                     label: int) -> np.ndarray:
    """Gradient of one record's cross-entropy w.r.t. the ability vector only
    (items and MLP held fixed)."""
    mask = _row_mask(q_row, model.d)
    _, g1, g0 = ability_forward_backward(model, theta, np.array([q]), mask[None, :])
    return g1[0] if label == 1 else g0[0]


def _project_monotone(model: NcdModel) -> None:
    for w in model.weights:
        np.maximum(w, 0.0, out=w)


def train_epoch(model: NcdModel, train: ResponseDataset, q_matrix: QMatrix,
                cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One shuffled minibatch pass of SGD; MLP weights are projected to the
    non-negative orthant after every update. Returns the mean minibatch loss.
    """
    q_mask = q_mask_array(q_matrix, model.d)
    return _train_epoch_masked(model, train, q_mask, cfg, rng)


def _train_epoch_masked(model: NcdModel, train: ResponseDataset,
                        q_mask: np.ndarray, cfg: TrainConfig,
                        rng: np.random.Generator) -> float:
    ss, qq, rr = train.arrays()
    ss = np.array(ss)
    qq = np.array(qq)
    rr = np.array(rr, dtype=np.float64)
    n = len(ss)
    perm = rng.permutation(n)
    lr = cfg.learning_rate
    losses = []
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        bs, bq, br = ss[idx], qq[idx], rr[idx]
        mask_rows = q_mask[bq]
        p, (t, b, a, x, acts, z) = _forward_batch(model, bs, bq, mask_rows)
        loss = bce_loss(p, br)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at batch starting {start}: {loss!r}"
            )
        losses.append(loss)

        delta_out = _output_delta(p, br) / len(idx)
        grads_w, grads_b, dx = _backward_mlp(model, acts, delta_out)
        gap = mask_rows * (t - b)
        d_alpha = (gap * dx).sum(axis=1) * expit(model.alpha_raw[bq])
        dt = a[:, None] * mask_rows * dx * t * (1.0 - t)
        db = -a[:, None] * mask_rows * dx * b * (1.0 - b)

        for j in range(len(model.weights)):
            model.weights[j] -= lr * grads_w[j]
            model.biases[j] -= lr * grads_b[j]
        np.subtract.at(model.theta, bs, lr * dt)
        np.subtract.at(model.beta, bq, lr * db)
        np.subtract.at(model.alpha_raw, bq, lr * d_alpha)
        _project_monotone(model)
    return float(np.mean(losses)) if losses else 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val: Metrics | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val": self.val.to_dict() if self.val else None,
        }


def fit(train: ResponseDataset, valid: ResponseDataset | None, q_matrix: QMatrix,
        cfg: TrainConfig) -> tuple[NcdModel, list[EpochStats]]:
    """Initialize from the seed and run cfg.epochs training epochs, recording
    train loss and validation metrics per epoch. Deterministic for a fixed
    seed and inputs."""
    if len(train) == 0:
        raise ValueError("training dataset is empty")
    model = NcdModel.initialize(train.n_students, train.n_items,
                                train.n_knowledge, cfg)
    q_mask = q_mask_array(q_matrix, model.d)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        loss = _train_epoch_masked(model, train, q_mask, cfg, rng)
        val = evaluate(model, valid, q_matrix) if valid and len(valid) else None
        history.append(EpochStats(epoch=epoch, train_loss=loss, val=val))
    return model, history


def auc_score(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with tied predictions counted 0.5; NaN when only
    one label class is present."""
    r = np.asarray(labels)
    p = np.asarray(predictions)
    n_pos = int(r.sum())
    n_neg = len(r) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(p)
    return float((ranks[r == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(predictions, labels) -> Metrics:
    """ACC at threshold 0.5 (>= counts as a positive call), rank AUC, MSE,
    RMSE, and the clamped cross-entropy."""
    preds = np.asarray(predictions, dtype=np.float64)
    rr = np.asarray(labels, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("empty prediction list")
    mse = float(np.mean((preds - rr) ** 2))
    return Metrics(
        auc=auc_score(preds, rr),
        acc=float(np.mean((preds >= 0.5) == (rr == 1.0))),
        rmse=math.sqrt(mse),
        mse=mse,
        loss=bce_loss(preds, rr),
    )


def evaluate(model: NcdModel, test: ResponseDataset, q_matrix: QMatrix) -> Metrics:
    """Metrics of the model's predictions over a held-out dataset."""
    if len(test) == 0:
        raise ValueError("test dataset is empty")
    ss, qq, rr = test.arrays()
    q_mask = q_mask_array(q_matrix, model.d)
    preds = np.empty(len(ss))
    for start in range(0, len(ss), 8192):
        sl = slice(start, start + 8192)
        preds[sl] = predict_batch(model, ss[sl], qq[sl], q_mask)
    return compute_metrics(preds, rr)


def mastery_table(model: NcdModel) -> MasteryTable:
    """Per-student, per-knowledge-point mastery: sigmoid of the ability."""
    return MasteryTable(values=expit(model.theta))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def _loss_on(model: NcdModel, ss, qq, rr, q_mask) -> float:
    p, _ = _forward_batch(model, ss, qq, q_mask[qq])
    return bce_loss(p, rr)


def _param_tensors(model: NcdModel) -> dict[str, np.ndarray]:
    tensors = {"theta": model.theta, "beta": model.beta,
               "alpha_raw": model.alpha_raw}
    for j in range(len(model.weights)):
        tensors[f"w{j}"] = model.weights[j]
        tensors[f"b{j}"] = model.biases[j]
    return tensors


def finite_difference_gradients(model: NcdModel, records: list[ResponseRecord],
                                q_mask: np.ndarray,
                                epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of the mean loss over every parameter
    coordinate; the independent oracle for analytic_gradients."""
    ss = np.array([r.student_id for r in records])
    qq = np.array([r.item_id for r in records])
    rr = np.array([float(r.correct) for r in records])
    out = {}
    for name, tensor in _param_tensors(model).items():
        grad = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = _loss_on(model, ss, qq, rr, q_mask)
            flat[i] = orig - epsilon
            lo = _loss_on(model, ss, qq, rr, q_mask)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * epsilon)
        out[name] = grad
    return out


def max_relative_error(g1: dict[str, np.ndarray], g2: dict[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Worst-coordinate relative disagreement, with the denominator floored
    so that numerically-zero coordinates are compared on an absolute scale
    instead of amplifying finite-difference noise."""
    worst = 0.0
    for name in g1:
        a = g1[name].ravel()
        b = g2[name].ravel()
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float((np.abs(a - b) / scale).max()))
    return worst


def grad_check(model: NcdModel, records: list[ResponseRecord],
               q_matrix: QMatrix, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central finite
    differences on the sampled minibatch; 0.0 for an empty sample."""
    if not records:
        return 0.0
    if not (1e-6 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    q_mask = q_mask_array(q_matrix, model.d)
    analytic = analytic_gradients(model, records, q_mask)
    numeric = finite_difference_gradients(model, records, q_mask, epsilon)
    return max_relative_error(analytic, numeric)
