"""Contrastive losses with analytic gradients, and a desk-scale trainer.

Three loss surfaces over a batch of paired image/text embeddings:

* instance loss: each image's own description is the positive, all
  other in-batch descriptions are negatives (temperature-scaled softmax
  over cosine similarities);
* coarse loss: positives are every in-batch item sharing the anchor's
  class (or head/tail category), in a two-term symmetric
  supervised-contrastive form;
* uncertainty combination: the three loss values are mixed through
  learnable per-task scalars as ``L_k * exp(-s_k) + s_k``.

Gradients are derived by hand (no autograd) and validated against
central finite differences.  The trainer optimizes a linear projector,
the temperature, and the uncertainty scalars by plain gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

CLASS = "class"
CATEGORY = "category"


class LossInputError(ValueError):
    """Raised for malformed loss inputs (shape mismatch, zero rows, NaNs)."""


class TrainingDivergedError(RuntimeError):
    """Raised when the combined loss becomes non-finite during training."""

    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


def check_embedding_matrix(m: np.ndarray, name: str = "embeddings") -> np.ndarray:
    """Validate a 2-D float matrix: finite entries, at least 1 column."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise LossInputError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[1] < 1:
        raise LossInputError(f"{name} must have at least one column")
    if not np.all(np.isfinite(m)):
        raise LossInputError(f"{name} contains NaN or Inf")
    return m


@dataclass(frozen=True)
class BatchPairing:
    """Aligned image/text feature batch with class and category labels.

    Row i of image_feats pairs with row i of text_feats; class_ids and
    category_ids label each pair.  Category values are "head"/"tail".
    """

    image_feats: np.ndarray
    text_feats: np.ndarray
    class_ids: tuple
    category_ids: tuple

    def __post_init__(self):
        img = check_embedding_matrix(self.image_feats, "image_feats")
        txt = check_embedding_matrix(self.text_feats, "text_feats")
        object.__setattr__(self, "image_feats", img)
        object.__setattr__(self, "text_feats", txt)
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        object.__setattr__(self, "category_ids", tuple(self.category_ids))
        b = img.shape[0]
        if txt.shape[0] != b:
            raise LossInputError(
                f"image and text batch sizes differ: {b} vs {txt.shape[0]}"
            )
        if img.shape[1] != txt.shape[1]:
            raise LossInputError(
                f"image and text feature dims differ: {img.shape[1]} vs {txt.shape[1]}"
            )
        if len(self.class_ids) != b or len(self.category_ids) != b:
            raise LossInputError("label lengths must equal the batch size")

    @property
    def size(self) -> int:
        return self.image_feats.shape[0]


@dataclass
class LossParams:
    """Learnable scalars: temperature (as log_tau) and uncertainty terms."""

    log_tau: float = math.log(0.07)
    s_clip: float = 0.0
    s_cls: float = 0.0
    s_cat: float = 0.0

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)


@dataclass
class LossOutput:
    """Loss value plus gradients w.r.t. raw features and log_tau."""

    value: float
    grad_image_feats: np.ndarray
    grad_text_feats: np.ndarray
    grad_log_tau: float


def _normalized_rows(m: np.ndarray, name: str):
    norms = np.linalg.norm(m, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise LossInputError(f"{name} has zero-norm row at index {int(zero[0])}")
    return m / norms[:, None], norms


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities: entry (i, j) compares a_i with b_j."""
    a = check_embedding_matrix(a, "a")
    b = check_embedding_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise LossInputError(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    a_hat, _ = _normalized_rows(a, "a")
    b_hat, _ = _normalized_rows(b, "b")
    return a_hat @ b_hat.T


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + zmax
    return z - lse


def _feature_grads(batch: BatchPairing, g: np.ndarray, s: np.ndarray):
    """Backpropagate dL/dS through the cosine layer to the raw features.

    S[i, j] = cos(t_i, v_j); g = dL/dS.  The cosine gradient w.r.t. a raw
    row keeps only the component orthogonal to that row (radial
    invariance of the cosine).
    """
    t_hat, t_norms = _normalized_rows(batch.text_feats, "text_feats")
    v_hat, v_norms = _normalized_rows(batch.image_feats, "image_feats")
    row_dot = (g * s).sum(axis=1)  # per text row i
    col_dot = (g * s).sum(axis=0)  # per image column j
    grad_t = (g @ v_hat - row_dot[:, None] * t_hat) / t_norms[:, None]
    grad_v = (g.T @ t_hat - col_dot[:, None] * v_hat) / v_norms[:, None]
    return grad_v, grad_t


def loss_clip(
    batch: BatchPairing, params: LossParams, symmetric: bool = False
) -> LossOutput:
    """Instance-level contrastive loss over a paired batch.

    Default form anchors each image: its similarity to every in-batch
    description enters a temperature-scaled softmax and the own
    description is the target; the value is the mean over images.  With
    symmetric=True the mirrored description-anchored term is added (the
    two directional means are summed, not averaged), matching the
    all-distinct-classes limit of the coarse loss.
    """
    if batch.size < 1:
        raise LossInputError("batch must contain at least one pair")
    b = batch.size
    tau = params.tau
    s = cosine_similarity_matrix(batch.text_feats, batch.image_feats)
    z = s / tau

    # Image-anchored: softmax down each column (over texts).
    log_p_col = _log_softmax(z, axis=0)
    value = -float(np.trace(log_p_col)) / b
    p_col = np.exp(log_p_col)
    eye = np.eye(b)
    g = (p_col - eye) / (b * tau)

    if symmetric:
        log_p_row = _log_softmax(z, axis=1)
        value += -float(np.trace(log_p_row)) / b
        g = g + (np.exp(log_p_row) - eye) / (b * tau)

    grad_v, grad_t = _feature_grads(batch, g, s)
    grad_log_tau = -float((g * s).sum())
    return LossOutput(value, grad_v, grad_t, grad_log_tau)


def _positive_mask(labels: Sequence) -> np.ndarray:
    arr = np.asarray(labels, dtype=object)
    return (arr[:, None] == arr[None, :]).astype(np.float64)


def loss_coarse(
    batch: BatchPairing, params: LossParams, granularity: str = CLASS
) -> LossOutput:
    """Supervised contrastive loss with class- or category-level positives.

    For each description, every in-batch image sharing its label is a
    positive under a softmax over all images; the mirrored term anchors
    each image over all descriptions.  An item is always its own
    positive, so the loss is total over any batch.  The batch value is
    the mean over anchors of the two terms' sum.
    """
    if granularity == CLASS:
        labels = batch.class_ids
    elif granularity == CATEGORY:
        labels = batch.category_ids
    else:
        raise ValueError(f"granularity must be {CLASS!r} or {CATEGORY!r}")
    if batch.size < 1:
        raise LossInputError("batch must contain at least one pair")

    b = batch.size
    tau = params.tau
    s = cosine_similarity_matrix(batch.text_feats, batch.image_feats)
    z = s / tau
    m = _positive_mask(labels)
    n_pos = m.sum(axis=1)  # >= 1: self-pair always positive

    log_p_row = _log_softmax(z, axis=1)  # text i over images
    log_p_col = _log_softmax(z, axis=0)  # image j over texts
    term_text = -float(((m * log_p_row).sum(axis=1) / n_pos).sum()) / b
    term_image = -float(((m * log_p_col).sum(axis=0) / n_pos).sum()) / b
    value = term_text + term_image

    # Equal-label items share n_pos, so the row weighting also serves the
    # column term (entries with m == 0 carry no weight either way).
    weights = m / n_pos[:, None]
    g_row = (np.exp(log_p_row) - weights) / (b * tau)
    g_col = (np.exp(log_p_col) - weights) / (b * tau)
    g = g_row + g_col

    grad_v, grad_t = _feature_grads(batch, g, s)
    grad_log_tau = -float((g * s).sum())
    return LossOutput(value, grad_v, grad_t, grad_log_tau)


@dataclass
class CombinedLoss:
    """Uncertainty-weighted total with gradients for losses and scalars."""

    value: float
    grad_losses: np.ndarray  # d value / d (l_clip, l_cls, l_cat)
    grad_s: np.ndarray  # d value / d (s_clip, s_cls, s_cat)


def combine_uncertainty(
    l_clip: float, l_cls: float, l_cat: float, params: LossParams
) -> CombinedLoss:
    """Mix three losses through learnable per-task uncertainty scalars.

    value = sum_k [ L_k * exp(-s_k) + s_k ];  the regularizer keeps the
    learned scalars from drifting to infinity.
    """
    losses = np.array([l_clip, l_cls, l_cat], dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise LossInputError("loss values must be finite")
    s = np.array([params.s_clip, params.s_cls, params.s_cat], dtype=np.float64)
    w = np.exp(-s)
    value = float((losses * w + s).sum())
    return CombinedLoss(value=value, grad_losses=w, grad_s=1.0 - losses * w)


def finite_difference_check(
    loss_fn: Callable[[BatchPairing, LossParams], LossOutput],
    batch: BatchPairing,
    params: LossParams,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every coordinate of both feature matrices and log_tau.  The
    relative error denominator is floored at 1e-6 so near-zero gradient
    coordinates compare on an absolute scale.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must be in [1e-7, 1e-3]")
    out = loss_fn(batch, params)
    worst = 0.0

    def rel_err(analytic: float, numeric: float) -> float:
        denom = max(abs(analytic), abs(numeric), 1e-6)
        return abs(analytic - numeric) / denom

    for which in ("image", "text"):
        feats = batch.image_feats if which == "image" else batch.text_feats
        grads = out.grad_image_feats if which == "image" else out.grad_text_feats
        for i in range(feats.shape[0]):
            for j in range(feats.shape[1]):
                plus = feats.copy()
                plus[i, j] += epsilon
                minus = feats.copy()
                minus[i, j] -= epsilon
                if which == "image":
                    b_plus = replace(batch, image_feats=plus)
                    b_minus = replace(batch, image_feats=minus)
                else:
                    b_plus = replace(batch, text_feats=plus)
                    b_minus = replace(batch, text_feats=minus)
                numeric = (
                    loss_fn(b_plus, params).value - loss_fn(b_minus, params).value
                ) / (2 * epsilon)
                worst = max(worst, rel_err(float(grads[i, j]), numeric))

    p_plus = replace(params, log_tau=params.log_tau + epsilon)
    p_minus = replace(params, log_tau=params.log_tau - epsilon)
    numeric = (loss_fn(batch, p_plus).value - loss_fn(batch, p_minus).value) / (
        2 * epsilon
    )
    worst = max(worst, rel_err(out.grad_log_tau, numeric))
    return worst


@dataclass
class TrainerConfig:
    """Hyperparameters for the projector trainer.

    The default optimizer is plain gradient descent with a fixed step;
    momentum is available via config.  Scalar parameters (log_tau and
    the uncertainty terms) step with learning_rate * scalar_lr_scale,
    and tau is clamped to tau_range after each update: without the
    clamp, descent can escape to the degenerate high-temperature
    plateau where every softmax is uniform and feature gradients die.
    """

    learning_rate: float = 0.1
    steps: int = 500
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.0
    use_cls: bool = True
    use_cat: bool = True
    symmetric_clip: bool = False
    init_log_tau: float = math.log(0.07)
    scalar_lr_scale: float = 0.2
    tau_range: tuple = (0.01, 0.5)


@dataclass
class TraceRow:
    step: int
    l_clip: float
    l_cls: float
    l_cat: float
    combined: float
    tau: float
    s_clip: float
    s_cls: float
    s_cat: float


@dataclass
class ProjectorWeights:
    """Linear projector: embeddings = raw @ w + b."""

    w: np.ndarray  # (d_in, d_out)
    b: np.ndarray  # (d_out,)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = check_embedding_matrix(raw, "raw features")
        if raw.shape[1] != self.w.shape[0]:
            raise LossInputError(
                f"projector expects dim {self.w.shape[0]}, got {raw.shape[1]}"
            )
        return raw @ self.w + self.b

    def save(self, path) -> None:
        np.savez(path, w=self.w, b=self.b)

    @classmethod
    def load(cls, path) -> "ProjectorWeights":
        data = np.load(path)
        return cls(w=np.asarray(data["w"], dtype=np.float64),
                   b=np.asarray(data["b"], dtype=np.float64))


@dataclass
class TrainResult:
    weights: ProjectorWeights
    params: LossParams
    trace: list  # of TraceRow


TRACE_HEADER = (
    "step", "l_clip", "l_cls", "l_cat", "combined",
    "tau", "s_clip", "s_cls", "s_cat",
)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for row in trace:
            writer.writerow(
                [row.step, f"{row.l_clip:.10g}", f"{row.l_cls:.10g}",
                 f"{row.l_cat:.10g}", f"{row.combined:.10g}", f"{row.tau:.10g}",
                 f"{row.s_clip:.10g}", f"{row.s_cls:.10g}", f"{row.s_cat:.10g}"]
            )


def train_projector(
    image_raw: np.ndarray,
    text_feats: np.ndarray,
    class_ids: Sequence,
    category_ids: Sequence,
    config: TrainerConfig,
    text_pool: Optional[Sequence[np.ndarray]] = None,
) -> TrainResult:
    """Fit a linear projector plus loss scalars by gradient descent.

    image_raw is N x d_in; text_feats is N x d (the text side stays
    frozen, only the projector and loss scalars move).  When text_pool
    is given (one variants-matrix per record), each step samples one
    description per record, so the pairing varies across iterations.
    Deterministic for a fixed config.seed.
    """
    image_raw = check_embedding_matrix(image_raw, "image_raw")
    text_feats = check_embedding_matrix(text_feats, "text_feats")
    n = image_raw.shape[0]
    if text_feats.shape[0] != n:
        raise LossInputError("image_raw and text_feats row counts differ")
    if len(class_ids) != n or len(category_ids) != n:
        raise LossInputError("label lengths must equal the record count")
    if text_pool is not None and len(text_pool) != n:
        raise LossInputError("text_pool must hold one variants matrix per record")

    d_in = image_raw.shape[1]
    d_out = text_feats.shape[1]
    rng = np.random.default_rng(config.seed)
    w = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
    b = np.zeros(d_out)
    params = LossParams(log_tau=config.init_log_tau)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    log_tau_lo = math.log(config.tau_range[0])
    log_tau_hi = math.log(config.tau_range[1])
    scalar_lr = config.learning_rate * config.scalar_lr_scale

    class_arr = tuple(class_ids)
    cat_arr = tuple(category_ids)
    batch_size = min(config.batch_size, n)
    trace: list = []

    for step in range(config.steps):
        idx = rng.choice(n, size=batch_size, replace=False) if batch_size < n else np.arange(n)
        x = image_raw[idx]
        if text_pool is not None:
            t = np.stack(
                [text_pool[i][rng.integers(0, len(text_pool[i]))] for i in idx]
            )
        else:
            t = text_feats[idx]
        v = x @ w + b
        batch = BatchPairing(
            image_feats=v,
            text_feats=t,
            class_ids=tuple(class_arr[i] for i in idx),
            category_ids=tuple(cat_arr[i] for i in idx),
        )

        out_clip = loss_clip(batch, params, symmetric=config.symmetric_clip)
        out_cls = loss_coarse(batch, params, CLASS) if config.use_cls else None
        out_cat = loss_coarse(batch, params, CATEGORY) if config.use_cat else None
        l_cls = out_cls.value if out_cls else 0.0
        l_cat = out_cat.value if out_cat else 0.0
        combined = combine_uncertainty(out_clip.value, l_cls, l_cat, params)
        if config.use_cls and config.use_cat:
            value = combined.value
        else:
            # Ablation runs drop both the residual and the regularizer of
            # any disabled loss.
            active = (True, config.use_cls, config.use_cat)
            l_vals = (out_clip.value, l_cls, l_cat)
            s_vals = (params.s_clip, params.s_cls, params.s_cat)
            value = sum(
                l * math.exp(-s) + s for l, s, a in zip(l_vals, s_vals, active) if a
            )
        if not math.isfinite(value):
            raise TrainingDivergedError(step)

        grad_v = combined.grad_losses[0] * out_clip.grad_image_feats
        grad_log_tau = combined.grad_losses[0] * out_clip.grad_log_tau
        if out_cls:
            grad_v = grad_v + combined.grad_losses[1] * out_cls.grad_image_feats
            grad_log_tau += combined.grad_losses[1] * out_cls.grad_log_tau
        if out_cat:
            grad_v = grad_v + combined.grad_losses[2] * out_cat.grad_image_feats
            grad_log_tau += combined.grad_losses[2] * out_cat.grad_log_tau
        grad_w = x.T @ grad_v
        grad_b = grad_v.sum(axis=0)
        grad_s = combined.grad_s

        lr, mom = config.learning_rate, config.momentum
        vel_w = mom * vel_w - lr * grad_w
        vel_b = mom * vel_b - lr * grad_b
        w = w + vel_w
        b = b + vel_b
        params.log_tau = min(
            max(params.log_tau - scalar_lr * grad_log_tau, log_tau_lo), log_tau_hi
        )
        params.s_clip -= scalar_lr * float(grad_s[0])
        if config.use_cls:
            params.s_cls -= scalar_lr * float(grad_s[1])
        if config.use_cat:
            params.s_cat -= scalar_lr * float(grad_s[2])

        trace.append(
            TraceRow(
                step=step, l_clip=out_clip.value, l_cls=l_cls, l_cat=l_cat,
                combined=value, tau=params.tau, s_clip=params.s_clip,
                s_cls=params.s_cls, s_cat=params.s_cat,
            )
        )

    return TrainResult(weights=ProjectorWeights(w=w, b=b), params=params, trace=trace)
