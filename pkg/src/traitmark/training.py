"""Training for the builtin feature-based scorers.

Both kinds share the pipeline: correlation-threshold feature selection,
per-feature standardization, then a regression fit with one output head per
trait (multi-task). The linear kind is closed-form ridge; the mlp kind is a
small feed-forward net trained with mini-batch AdamW, inverted dropout, and
MSE loss. Training is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Sequence

import numpy as np

from . import domain
from .artifacts import KIND_LINEAR, KIND_MLP, MlpLayer, ModelArtifact
from .features import (
    FeatureRegistry,
    builtin_registry,
    extract_matrix,
    select_features,
    standardize,
)


class TrainingError(RuntimeError):
    """Training could not produce a usable artifact."""


@dataclass(frozen=True)
class LabeledEssay:
    essay_id: str
    text: str
    prompt_id: str
    labels: dict[str, int]


@dataclass
class TrainConfig:
    """Hyperparameters for train_builtin. Defaults follow the deployed
    feed-forward configuration: 50 epochs, two 256-wide hidden layers,
    dropout 0.3, AdamW at 1e-4, batch size 16, MSE loss."""

    kind: str = KIND_LINEAR
    selection_threshold: float = 0.5
    ridge_lambda: float = 1.0
    epochs: int = 50
    hidden_layers: int = 2
    hidden_width: int = 256
    dropout: float = 0.3
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    seed: int = 0
    loss: str = "mse"
    extras: dict[str, Any] = field(default_factory=dict)

    def snapshot(self) -> dict[str, Any]:
        return asdict(self)


def label_matrix(
    dataset: Sequence[LabeledEssay],
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
) -> tuple[list[str], np.ndarray]:
    """Stack per-trait labels into a matrix, traits in schema order.

    When every component trait is labeled and the holistic trait is not, a
    holistic column is derived by summation so selection sees it and the
    trained model gets a holistic head.
    """
    if not dataset:
        raise TrainingError("dataset is empty")
    labeled = set(dataset[0].labels)
    for item in dataset:
        if set(item.labels) != labeled:
            raise TrainingError(
                f"essay {item.essay_id}: inconsistent label traits "
                f"{sorted(item.labels)} vs {sorted(labeled)}"
            )
    for trait in labeled:
        if trait not in schema:
            raise TrainingError(f"labeled trait {trait!r} not in schema")

    traits = [t for t in schema.trait_names if t in labeled]
    derive_hol = (
        schema.holistic is not None
        and schema.holistic not in labeled
        and set(schema.component_traits) <= labeled
    )
    if derive_hol:
        traits.append(schema.holistic)

    rows = []
    for item in dataset:
        for trait, value in item.labels.items():
            spec = schema.spec(trait)
            if not spec.contains(int(value)):
                raise TrainingError(
                    f"essay {item.essay_id}: {trait}={value} outside "
                    f"[{spec.min_score},{spec.max_score}]"
                )
        row = [float(item.labels[t]) for t in traits if t in item.labels]
        if derive_hol:
            row.append(float(domain.holistic_score(
                {t: int(item.labels[t]) for t in schema.component_traits}, schema
            )))
        rows.append(row)
    return traits, np.asarray(rows, dtype=np.float64)


def train_builtin(
    dataset: Sequence[LabeledEssay],
    config: TrainConfig,
    *,
    model_id: str = "builtin",
    registry: FeatureRegistry | None = None,
    schema: domain.TraitSchema = domain.DEFAULT_SCHEMA,
    trained_at: str | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> ModelArtifact:
    """Fit the full pipeline on a labeled dataset and return the artifact."""
    registry = registry or builtin_registry()
    traits, Y = label_matrix(dataset, schema)
    X = extract_matrix([item.text for item in dataset], registry)
    mask = select_features(X, Y, config.selection_threshold)
    Xs, scaler = standardize(mask.apply(X))

    if trained_at is None:
        from datetime import datetime, timezone

        trained_at = datetime.now(timezone.utc).isoformat()

    common = dict(
        model_id=model_id,
        registry_version=registry.version,
        trait_order=tuple(traits),
        mask=mask,
        scaler=scaler,
        trained_at=trained_at,
        training_config=config.snapshot(),
    )
    if config.kind == KIND_LINEAR:
        weights, biases = _fit_ridge(Xs, Y, config.ridge_lambda)
        return ModelArtifact(kind=KIND_LINEAR, weights=weights, biases=biases, **common)
    if config.kind == KIND_MLP:
        layers = _fit_mlp(Xs, Y, config, progress)
        return ModelArtifact(
            kind=KIND_MLP,
            layers=layers,
            activation="relu",
            dropout=config.dropout,
            **common,
        )
    raise TrainingError(f"unknown builtin kind {config.kind!r}")


def _fit_ridge(X: np.ndarray, Y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge per trait over shared standardized features.

    Columns of X are zero-mean (standardized), so the unregularized intercept
    is the target mean and the weights solve (X'X + lam I) w = X'(y - mean).
    """
    n, k = X.shape
    gram = X.T @ X + lam * np.eye(k)
    y_mean = Y.mean(axis=0)
    coef = np.linalg.solve(gram, X.T @ (Y - y_mean))  # (k, n_traits)
    return coef.T.copy(), y_mean.copy()


def linear_predict(weights: np.ndarray, biases: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ weights.T + biases


def mlp_forward(layers: Sequence[MlpLayer], X: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Inference pass; dropout is ignored at inference time."""
    h = X
    for i, layer in enumerate(layers):
        h = h @ layer.weights + layer.biases
        if i < len(layers) - 1:
            if activation == "relu":
                h = np.maximum(h, 0.0)
            else:
                raise TrainingError(f"unknown activation {activation!r}")
    return h


def _fit_mlp(
    X: np.ndarray,
    Y: np.ndarray,
    cfg: TrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[MlpLayer, ...]:
    rng = np.random.default_rng(cfg.seed)
    n, k = X.shape
    n_out = Y.shape[1]
    widths = [k] + [cfg.hidden_width] * cfg.hidden_layers + [n_out]

    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(2.0 / fan_in)  # He init for relu trunks
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))

    params = weights + biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    batch = max(1, cfg.batch_size)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            xb, yb = X[idx], Y[idx]

            # forward with inverted dropout on hidden activations
            acts = [xb]
            drop_masks = []
            h = xb
            for li in range(len(weights)):
                z = h @ weights[li] + biases[li]
                if li < len(weights) - 1:
                    h = np.maximum(z, 0.0)
                    if cfg.dropout > 0.0:
                        keep = (rng.random(h.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                        h = h * keep
                        drop_masks.append(keep)
                    else:
                        drop_masks.append(None)
                else:
                    h = z
                acts.append(h)

            diff = acts[-1] - yb
            loss = float(np.mean(diff**2))
            epoch_loss += loss * len(idx)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")

            # backward
            grad = 2.0 * diff / diff.size
            grads_w = [np.empty(0)] * len(weights)
            grads_b = [np.empty(0)] * len(biases)
            for li in range(len(weights) - 1, -1, -1):
                grads_w[li] = acts[li].T @ grad
                grads_b[li] = grad.sum(axis=0)
                if li > 0:
                    grad = grad @ weights[li].T
                    if drop_masks[li - 1] is not None:
                        grad = grad * drop_masks[li - 1]
                    grad = grad * (acts[li] > 0.0)

            # AdamW: decoupled weight decay on weight matrices only
            step += 1
            grads = grads_w + grads_b
            for pi, (p, g) in enumerate(zip(params, grads)):
                m[pi] = beta1 * m[pi] + (1 - beta1) * g
                v[pi] = beta2 * v[pi] + (1 - beta2) * g * g
                m_hat = m[pi] / (1 - beta1**step)
                v_hat = v[pi] / (1 - beta2**step)
                update = m_hat / (np.sqrt(v_hat) + eps)
                if pi < len(weights):
                    update = update + cfg.weight_decay * p
                p -= cfg.learning_rate * update
        if progress is not None:
            progress(epoch, epoch_loss / n)

    return tuple(MlpLayer(weights=w.copy(), biases=b.copy()) for w, b in zip(weights, biases))


def predict_raw(artifact: ModelArtifact, features: np.ndarray) -> np.ndarray:
    """Raw per-trait outputs for one already-extracted full feature vector."""
    x = artifact.scaler.apply(artifact.mask.apply(features))
    if artifact.kind == KIND_LINEAR:
        return linear_predict(artifact.weights, artifact.biases, x[None, :])[0]
    return mlp_forward(artifact.layers, x[None, :], artifact.activation)[0]
