"""Quantile regression of action error from (embedding, predicted action) features.

The regressor is a small tanh MLP trained with the pinball loss by seeded
mini-batch gradient descent. Everything is plain numpy so that training is
reproducible bit for bit across runs with the same seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    ACTION_DIM,
    InvalidConfigError,
    InvalidInputError,
    RegressionSample,
    TargetKind,
    as_action_array,
    pairwise_targets,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple = (64,)
    learning_rate: float = 0.05
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0
    weight_init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h <= 0 for h in self.hidden_sizes):
            raise InvalidConfigError("hidden sizes must be positive")
        if self.learning_rate <= 0 or self.weight_init_scale <= 0:
            raise InvalidConfigError("learning_rate and weight_init_scale must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise InvalidConfigError("epochs and batch_size must be positive")


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise InvalidConfigError(f"quantile level must lie in (0, 1), got {level}")


def pinball_loss(residual: float, level: float) -> float:
    """Pinball loss of ``residual = target - prediction`` at quantile ``level``."""
    _check_level(level)
    if residual >= 0:
        return level * residual
    return (level - 1.0) * residual


def _pinball(residual: np.ndarray, levels: np.ndarray) -> np.ndarray:
    return np.where(residual >= 0, levels * residual, (levels - 1.0) * residual)


@dataclass
class QuantileModel:
    """Trained quantile regressor.

    ``weights`` holds one ``(W, b)`` pair per layer with ``W`` of shape
    ``(fan_in, fan_out)``. The head emits one value per level, or seven per
    level (level-major) for ``ACTION_INTERVAL``.
    """

    input_dim: int
    levels: tuple
    target_kind: TargetKind
    weights: list
    norm_mean: np.ndarray
    norm_scale: np.ndarray
    layer_sizes: tuple = field(init=False)

    def __post_init__(self):
        self.levels = tuple(float(t) for t in self.levels)
        if not self.levels:
            raise InvalidConfigError("at least one quantile level is required")
        for t in self.levels:
            _check_level(t)
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise InvalidConfigError("quantile levels must be strictly increasing")
        self.target_kind = TargetKind(self.target_kind)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_scale = np.asarray(self.norm_scale, dtype=np.float64)
        sizes = [self.input_dim] + [W.shape[1] for W, _ in self.weights]
        for (W, b), fan_in in zip(self.weights, sizes):
            if W.shape[0] != fan_in or b.shape != (W.shape[1],):
                raise InvalidConfigError("inconsistent layer shapes")
        if sizes[-1] != len(self.levels) * self.outputs_per_level:
            raise InvalidConfigError("output head size does not match levels and target kind")
        self.layer_sizes = tuple(sizes)

    @property
    def outputs_per_level(self) -> int:
        return ACTION_DIM if self.target_kind is TargetKind.ACTION_INTERVAL else 1

    @property
    def embedding_dim(self) -> int:
        return self.input_dim - ACTION_DIM

    @property
    def parameter_count(self) -> int:
        return sum(W.size + b.size for W, b in self.weights)

    # -- forward / backward -------------------------------------------------

    def features(self, embeddings: np.ndarray, actions: np.ndarray) -> np.ndarray:
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if embeddings.shape[1] != self.embedding_dim or actions.shape[1] != ACTION_DIM:
            raise InvalidInputError(
                f"expected embedding dim {self.embedding_dim} and action dim {ACTION_DIM}, "
                f"got {embeddings.shape[1]} and {actions.shape[1]}"
            )
        if embeddings.shape[0] != actions.shape[0]:
            raise InvalidInputError("embeddings and actions must have the same number of rows")
        x = np.concatenate([embeddings, actions], axis=1)
        return (x - self.norm_mean) / self.norm_scale

    def raw_output(self, x: np.ndarray) -> np.ndarray:
        """Head outputs for normalised features, before rearrangement."""
        h = x
        for W, b in self.weights[:-1]:
            h = np.tanh(h @ W + b)
        W, b = self.weights[-1]
        return h @ W + b

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray):
        """Mean pinball loss of the raw head and its gradient w.r.t. every (W, b).

        ``y`` has shape ``(n,)`` or ``(n, 7)`` and is broadcast across levels.
        At a residual of exactly zero the subgradient 0 is used.
        """
        activations = [x]
        h = x
        for W, b in self.weights[:-1]:
            h = np.tanh(h @ W + b)
            activations.append(h)
        W_out, b_out = self.weights[-1]
        out = h @ W_out + b_out

        levels = self._level_vector()
        target = self._tile_target(y)
        residual = target - out
        loss = float(np.mean(_pinball(residual, levels)))

        d_out = np.where(residual > 0, -levels, np.where(residual < 0, 1.0 - levels, 0.0))
        d_out /= d_out.size
        grads = [None] * len(self.weights)
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            W, _ = self.weights[i]
            a = activations[i]
            grads[i] = (a.T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ W.T) * (1.0 - a * a)
        return loss, grads

    def _level_vector(self) -> np.ndarray:
        return np.repeat(np.asarray(self.levels), self.outputs_per_level)

    def _tile_target(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        return np.tile(y, (1, len(self.levels)))

    # -- public prediction --------------------------------------------------

    def predict_batch(self, embeddings: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Rearranged predictions, shape ``(n, levels)`` or ``(n, levels, 7)``."""
        out = self.raw_output(self.features(embeddings, actions))
        if self.target_kind is TargetKind.ACTION_INTERVAL:
            out = out.reshape(out.shape[0], len(self.levels), ACTION_DIM)
        # Rearrangement: sorting across levels removes quantile crossing.
        return np.sort(out, axis=1)

    def level_index(self, level: Optional[float] = None) -> int:
        if level is None:
            if len(self.levels) != 1:
                raise InvalidConfigError(
                    f"model has levels {self.levels}; a level must be designated"
                )
            return 0
        for i, t in enumerate(self.levels):
            if abs(t - level) < 1e-12:
                return i
        raise InvalidConfigError(f"level {level} not among model levels {self.levels}")

    # -- parameters & serialisation ----------------------------------------

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.weights])

    def with_parameters(self, flat: np.ndarray) -> "QuantileModel":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.parameter_count:
            raise InvalidInputError("parameter vector has the wrong length")
        weights, pos = [], 0
        for W, b in self.weights:
            W_new = flat[pos:pos + W.size].reshape(W.shape)
            pos += W.size
            b_new = flat[pos:pos + b.size].copy()
            pos += b.size
            weights.append((W_new.copy(), b_new))
        return QuantileModel(self.input_dim, self.levels, self.target_kind, weights,
                             self.norm_mean.copy(), self.norm_scale.copy())

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "levels": list(self.levels),
            "target_kind": self.target_kind.value,
            "layer_sizes": list(self.layer_sizes),
            "parameters": self.flat_parameters().tolist(),
            "normalization": {"mean": self.norm_mean.tolist(), "scale": self.norm_scale.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileModel":
        sizes = [int(s) for s in d["layer_sizes"]]
        flat = np.asarray(d["parameters"], dtype=np.float64)
        weights, pos = [], 0
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            W = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos:pos + fan_out]
            pos += fan_out
            weights.append((W.copy(), b.copy()))
        if pos != flat.size:
            raise InvalidInputError("parameter array length does not match layer_sizes")
        return cls(int(d["input_dim"]), d["levels"], d["target_kind"], weights,
                   d["normalization"]["mean"], d["normalization"]["scale"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "QuantileModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def zero_model(embedding_dim: int, levels: Sequence[float], target_kind,
               hidden_sizes: Sequence[int] = (64,)) -> QuantileModel:
    """A model whose every parameter is zero; it predicts 0 everywhere."""
    target_kind = TargetKind(target_kind)
    input_dim = embedding_dim + ACTION_DIM
    per_level = ACTION_DIM if target_kind is TargetKind.ACTION_INTERVAL else 1
    sizes = [input_dim, *hidden_sizes, len(levels) * per_level]
    weights = [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes, sizes[1:])]
    return QuantileModel(input_dim, tuple(levels), target_kind, weights,
                         np.zeros(input_dim), np.ones(input_dim))


def stack_samples(samples: Sequence[RegressionSample]):
    """Stack samples into ``(embeddings, predicted, expert)`` arrays."""
    if len(samples) == 0:
        raise InvalidInputError("sample list is empty")
    dims = {s.embedding.shape[0] for s in samples}
    if len(dims) != 1:
        raise InvalidInputError(f"samples mix embedding dimensions {sorted(dims)}")
    Z = np.stack([s.embedding for s in samples])
    A = np.array([s.predicted_action for s in samples], dtype=np.float64)
    G = np.array([s.expert_action for s in samples], dtype=np.float64)
    return Z, A, G


def _as_arrays(data):
    if isinstance(data, tuple) and len(data) == 3:
        Z, A, G = (np.asarray(v, dtype=np.float64) for v in data)
        if Z.shape[0] == 0:
            raise InvalidInputError("sample list is empty")
        return Z, A, G
    return stack_samples(data)


def batch_loss(model: QuantileModel, samples) -> float:
    """Mean pinball loss over samples and levels of the model's (rearranged) predictions.

    ``samples`` is a list of :class:`RegressionSample` or an ``(Z, A_hat, A_gt)`` tuple.
    """
    Z, A, G = _as_arrays(samples)
    y = pairwise_targets(model.target_kind, A, G)
    pred = model.predict_batch(Z, A)
    levels = np.asarray(model.levels)
    if model.target_kind is TargetKind.ACTION_INTERVAL:
        residual = y[:, None, :] - pred
        return float(np.mean(_pinball(residual, levels[None, :, None])))
    residual = y[:, None] - pred
    return float(np.mean(_pinball(residual, levels[None, :])))


def train(samples, levels: Sequence[float], target_kind, config: TrainConfig = TrainConfig()) -> QuantileModel:
    """Fit a quantile model by mini-batch gradient descent on the pinball loss.

    Inputs are standardised with train-set statistics; targets are not. The
    output bias starts at the empirical quantile of the targets and the output
    weights at zero, so the initial model is the best constant predictor. The
    parameters of the epoch with the lowest training loss are returned, hence
    the result never does worse on the training set than the initial model.
    """
    target_kind = TargetKind(target_kind)
    Z, A, G = _as_arrays(samples)
    y = pairwise_targets(target_kind, A, G)
    levels = tuple(float(t) for t in levels)

    x_raw = np.concatenate([Z, A], axis=1)
    mean = x_raw.mean(axis=0)
    scale = x_raw.std(axis=0)
    scale[scale < 1e-12] = 1.0

    rng = np.random.default_rng(config.seed)
    input_dim = x_raw.shape[1]
    per_level = ACTION_DIM if target_kind is TargetKind.ACTION_INTERVAL else 1
    sizes = [input_dim, *config.hidden_sizes, len(levels) * per_level]
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:-1]):
        W = rng.normal(0.0, config.weight_init_scale / np.sqrt(fan_in), size=(fan_in, fan_out))
        weights.append((W, np.zeros(fan_out)))
    y2 = y if y.ndim == 2 else y[:, None]
    b_out = np.concatenate([np.quantile(y2, t, axis=0, method="inverted_cdf") for t in levels])
    weights.append((np.zeros((sizes[-2], sizes[-1])), b_out.astype(np.float64)))

    model = QuantileModel(input_dim, levels, target_kind, weights, mean, scale)
    x = model.features(Z, A)
    n = x.shape[0]
    batch = min(config.batch_size, n)

    best_loss = batch_loss(model, (Z, A, G))
    best = [(W.copy(), b.copy()) for W, b in model.weights]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grads = model.loss_and_grad(x[idx], y[idx])
            for (W, b), (gW, gb) in zip(model.weights, grads):
                W -= config.learning_rate * gW
                b -= config.learning_rate * gb
        loss = batch_loss(model, (Z, A, G))
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        if loss < best_loss:
            best_loss = loss
            best = [(W.copy(), b.copy()) for W, b in model.weights]
    logger.debug("trained %s model: best train loss %.6g", target_kind.value, best_loss)
    model.weights = best
    return model


def predict(model: QuantileModel, embedding, action) -> np.ndarray:
    """Per-level predictions for a single input, non-decreasing across levels.

    Returns shape ``(levels,)`` or ``(levels, 7)`` for interval models.
    """
    a = as_action_array(action)
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.ndim != 1:
        raise InvalidInputError("embedding must be a 1-D vector")
    return model.predict_batch(emb[None, :], a[None, :])[0]


def piw_score(model: QuantileModel, embedding, action) -> float:
    """Width-style score: the larger distance from the action to either interval end."""
    if model.target_kind is not TargetKind.ACTION_INTERVAL or len(model.levels) < 2:
        raise InvalidConfigError("PIW score needs an action-interval model with lower and upper levels")
    a = as_action_array(action)
    pred = predict(model, embedding, a)
    return piw_from_bounds(a, pred[0], pred[-1])


def piw_from_bounds(action, lower, upper) -> float:
    a = np.asarray(action, dtype=np.float64)
    return float(max(np.linalg.norm(a - np.asarray(lower)), np.linalg.norm(np.asarray(upper) - a)))


def cosine_score(model: QuantileModel, embedding, action, level: float = 0.9) -> float:
    """One minus the predicted cosine-similarity quantile at ``level``."""
    if model.target_kind is not TargetKind.COSINE:
        raise InvalidConfigError("cosine score needs a cosine-target model")
    pred = predict(model, embedding, action)
    return float(1.0 - pred[model.level_index(level)])
