"""Recurrent scorer over step-state sequences, written from first principles.

A two-layer LSTM consumes one-hot state tokens and a sigmoid readout of the
final hidden state estimates the probability that the trajectory's answer
is correct.  Forward, backward, and the optimizer are implemented directly
on numpy arrays; no autodiff framework is involved, which keeps the
gradient path inspectable and checkable by finite differences.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .core import StepState, StepStateTag

VOCAB_SIZE = 4

_TOKEN_BY_TAG = {
    StepStateTag.NO_VERIFICATION_REQUIRED: 0,
    StepStateTag.FORMALIZATION_FAILED: 1,
    StepStateTag.PROOF_SUCCEEDED: 2,
    StepStateTag.PROOF_FAILED: 3,
}

MODEL_SCHEMA_VERSION = 1


class ImbalanceError(ValueError):
    """Training data carries only one label; both correct and incorrect
    trajectories are required for the scorer to learn anything."""


def state_to_token(state: StepState | StepStateTag) -> int:
    tag = state.tag if isinstance(state, StepState) else state
    return _TOKEN_BY_TAG[tag]


def tokens_from_states(states: Sequence[StepState | StepStateTag]) -> list[int]:
    return [state_to_token(state) for state in states]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


class AggregatorModel:
    """Two stacked LSTM layers plus a scalar sigmoid readout.

    Weights start uniform in +-1/sqrt(hidden); forget-gate biases start at
    one so early training does not flush cell state.  Gate layout within
    the stacked weight matrices is input, forget, candidate, output.
    """

    def __init__(
        self,
        num_layers: int = 2,
        hidden_size: int = 64,
        vocab_size: int = VOCAB_SIZE,
        seed: int = 0,
    ) -> None:
        if num_layers < 1 or hidden_size < 1:
            raise ValueError("num_layers and hidden_size must be positive")
        self.num_layers = num_layers
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(hidden_size)
        h = hidden_size
        self.params: dict[str, np.ndarray] = {}
        for layer in range(num_layers):
            in_dim = vocab_size if layer == 0 else hidden_size
            self.params[f"wx{layer}"] = rng.uniform(-scale, scale, size=(4 * h, in_dim))
            self.params[f"wh{layer}"] = rng.uniform(-scale, scale, size=(4 * h, h))
            bias = np.zeros(4 * h)
            bias[h : 2 * h] = 1.0
            self.params[f"b{layer}"] = bias
        self.params["w_out"] = rng.uniform(-scale, scale, size=h)
        self.params["b_out"] = np.zeros(1)

    # ---- forward / backward -------------------------------------------------

    def _forward(
        self, padded: np.ndarray, lengths: np.ndarray, keep_caches: bool
    ) -> tuple[np.ndarray, list[dict[str, Any]]]:
        batch, total = padded.shape
        h = self.hidden_size
        mask = (np.arange(total)[None, :] < lengths[:, None]).astype(np.float64)
        inputs = np.zeros((batch, total, self.vocab_size))
        inputs[np.arange(batch)[:, None], np.arange(total)[None, :], padded] = 1.0
        inputs *= mask[:, :, None]
        caches: list[dict[str, Any]] = []
        layer_input = inputs
        for layer in range(self.num_layers):
            wx = self.params[f"wx{layer}"]
            wh = self.params[f"wh{layer}"]
            bias = self.params[f"b{layer}"]
            in_dim = wx.shape[1]
            pre = layer_input.reshape(batch * total, in_dim) @ wx.T
            pre = pre.reshape(batch, total, 4 * h) + bias
            hidden = np.zeros((batch, h))
            cell = np.zeros((batch, h))
            outputs = np.zeros((batch, total, h))
            steps: list[tuple[np.ndarray, ...]] = []
            for t in range(total):
                gates = pre[:, t] + hidden @ wh.T
                i_gate = _sigmoid(gates[:, :h])
                f_gate = _sigmoid(gates[:, h : 2 * h])
                g_gate = np.tanh(gates[:, 2 * h : 3 * h])
                o_gate = _sigmoid(gates[:, 3 * h :])
                cell_new = f_gate * cell + i_gate * g_gate
                tanh_cell = np.tanh(cell_new)
                hidden_new = o_gate * tanh_cell
                m = mask[:, t : t + 1]
                hidden_next = m * hidden_new + (1.0 - m) * hidden
                cell_next = m * cell_new + (1.0 - m) * cell
                if keep_caches:
                    steps.append((i_gate, f_gate, g_gate, o_gate, cell, hidden, tanh_cell, m))
                hidden, cell = hidden_next, cell_next
                outputs[:, t] = hidden
            if keep_caches:
                caches.append({"input": layer_input, "steps": steps, "final_hidden": hidden})
            layer_input = outputs
        logits = hidden @ self.params["w_out"] + self.params["b_out"][0]
        if keep_caches:
            caches.append({"final_hidden": hidden})
        return logits, caches

    def _backward(
        self,
        caches: list[dict[str, Any]],
        dlogits: np.ndarray,
        padded_shape: tuple[int, int],
    ) -> dict[str, np.ndarray]:
        batch, total = padded_shape
        h = self.hidden_size
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        final_hidden = caches[-1]["final_hidden"]
        grads["w_out"] = final_hidden.T @ dlogits
        grads["b_out"] = np.array([dlogits.sum()])
        d_out = np.zeros((batch, total, h))
        dh_final = np.outer(dlogits, self.params["w_out"])
        for layer in reversed(range(self.num_layers)):
            cache = caches[layer]
            wh = self.params[f"wh{layer}"]
            wx = self.params[f"wx{layer}"]
            d_pre = np.zeros((batch, total, 4 * h))
            dh = dh_final if layer == self.num_layers - 1 else np.zeros((batch, h))
            dc = np.zeros((batch, h))
            dwh = np.zeros_like(wh)
            for t in reversed(range(total)):
                dh = dh + d_out[:, t]
                i_gate, f_gate, g_gate, o_gate, cell_prev, hidden_prev, tanh_cell, m = cache[
                    "steps"
                ][t]
                dh_new = m * dh
                dh_prev_frozen = (1.0 - m) * dh
                dc_new = m * dc
                dc_prev_frozen = (1.0 - m) * dc
                do = dh_new * tanh_cell
                dc_new = dc_new + dh_new * o_gate * (1.0 - tanh_cell**2)
                df = dc_new * cell_prev
                di = dc_new * g_gate
                dg = dc_new * i_gate
                dc_prev = dc_new * f_gate
                dz = np.concatenate(
                    [
                        di * i_gate * (1.0 - i_gate),
                        df * f_gate * (1.0 - f_gate),
                        dg * (1.0 - g_gate**2),
                        do * o_gate * (1.0 - o_gate),
                    ],
                    axis=1,
                )
                d_pre[:, t] = dz
                dwh += dz.T @ hidden_prev
                dh = dh_prev_frozen + dz @ wh
                dc = dc_prev_frozen + dc_prev
            layer_input = cache["input"]
            in_dim = wx.shape[1]
            grads[f"wx{layer}"] = (
                d_pre.reshape(batch * total, 4 * h).T @ layer_input.reshape(batch * total, in_dim)
            )
            grads[f"wh{layer}"] = dwh
            grads[f"b{layer}"] = d_pre.sum(axis=(0, 1))
            d_out = (d_pre.reshape(batch * total, 4 * h) @ wx).reshape(batch, total, in_dim)
        return grads

    # ---- public scoring API -------------------------------------------------

    def forward(self, tokens: Sequence[int]) -> float:
        """Probability estimate for a single token sequence."""
        return float(self.forward_batch([list(tokens)])[0])

    def forward_batch(self, token_seqs: Sequence[Sequence[int]]) -> np.ndarray:
        padded, lengths = _pad(token_seqs, self.vocab_size)
        logits, _ = self._forward(padded, lengths, keep_caches=False)
        return _sigmoid(logits)

    # ---- persistence --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "kind": "aggregator_model",
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "vocab_size": self.vocab_size,
            "params": {
                name: {
                    "shape": list(value.shape),
                    "dtype": "<f8",
                    "data": base64.b64encode(
                        np.ascontiguousarray(value, dtype="<f8").tobytes()
                    ).decode("ascii"),
                }
                for name, value in sorted(self.params.items())
            },
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle)
            handle.write("\n")

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "AggregatorModel":
        if payload.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema: {payload.get('schema_version')!r}")
        model = cls.__new__(cls)
        model.num_layers = int(payload["num_layers"])
        model.hidden_size = int(payload["hidden_size"])
        model.vocab_size = int(payload["vocab_size"])
        model.params = {}
        for name, record in payload["params"].items():
            raw = base64.b64decode(record["data"])
            model.params[name] = np.frombuffer(raw, dtype="<f8").reshape(record["shape"]).copy()
        return model

    @classmethod
    def load(cls, path: str) -> "AggregatorModel":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def model_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(canonical).hexdigest()


def _pad(token_seqs: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    if not token_seqs:
        raise ValueError("need at least one sequence")
    lengths = np.array([len(seq) for seq in token_seqs], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("sequences must be non-empty")
    padded = np.zeros((len(token_seqs), int(lengths.max())), dtype=np.int64)
    for row, seq in enumerate(token_seqs):
        arr = np.asarray(seq, dtype=np.int64)
        if arr.min() < 0 or arr.max() >= vocab_size:
            raise ValueError(f"token out of range for vocab size {vocab_size}")
        padded[row, : len(seq)] = arr
    return padded, lengths


def _loss_and_dlogits(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    # binary cross-entropy from logits: softplus(z) - y*z, stable for large |z|
    losses = np.logaddexp(0.0, logits) - labels * logits
    return float(losses.mean()), (_sigmoid(logits) - labels) / len(labels)


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    epochs: int = 200
    seed: int = 0
    num_layers: int = 2
    hidden_size: int = 64
    validation_fraction: float = 0.1
    target_val_accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie strictly between 0 and 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainResult:
    model: AggregatorModel
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> float:
        return self.history[-1]["val_accuracy"] if self.history else float("nan")


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], learning_rate: float) -> None:
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.step_count = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count
        for name, grad in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad**2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


TrainingExample = tuple[list[int], int]


def train(dataset: Sequence[TrainingExample], config: TrainingConfig) -> TrainResult:
    """Train a scorer on (token sequence, correctness label) pairs.

    Deterministic for a fixed config: seeded init, seeded shuffles, and a
    fixed batch order give bitwise-identical parameters across runs.  The
    model returned is the final-epoch model unless ``target_val_accuracy``
    is set, in which case training ends at the first epoch that reaches it.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    labels_present = {label for _, label in dataset}
    if labels_present <= {0} or labels_present <= {1}:
        only = "correct" if labels_present == {1} else "incorrect"
        raise ImbalanceError(
            f"all {len(dataset)} training examples are labeled {only}; "
            "both outcomes are required to fit the scorer"
        )
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(dataset))
    val_count = max(1, round(len(dataset) * config.validation_fraction))
    if val_count >= len(dataset):
        raise ValueError("validation split leaves no training data")
    val_set = [dataset[i] for i in order[:val_count]]
    train_set = [dataset[i] for i in order[val_count:]]

    model = AggregatorModel(
        num_layers=config.num_layers,
        hidden_size=config.hidden_size,
        seed=config.seed,
    )
    optimizer = _Adam(model.params, config.learning_rate)
    history: list[dict[str, float]] = []
    for epoch in range(1, config.epochs + 1):
        epoch_order = rng.permutation(len(train_set))
        total_loss = 0.0
        for start in range(0, len(train_set), config.batch_size):
            batch = [train_set[i] for i in epoch_order[start : start + config.batch_size]]
            seqs = [tokens for tokens, _ in batch]
            ys = np.array([label for _, label in batch], dtype=np.float64)
            padded, lengths = _pad(seqs, model.vocab_size)
            logits, caches = model._forward(padded, lengths, keep_caches=True)
            loss, dlogits = _loss_and_dlogits(logits, ys)
            grads = model._backward(caches, dlogits, padded.shape)
            optimizer.step(model.params, grads)
            total_loss += loss * len(batch)
        val_loss, val_accuracy = evaluate(model, val_set)
        history.append(
            {
                "epoch": float(epoch),
                "train_loss": total_loss / len(train_set),
                "val_loss": val_loss,
                "val_accuracy": val_accuracy,
            }
        )
        if (
            config.target_val_accuracy is not None
            and val_accuracy >= config.target_val_accuracy
        ):
            break
    return TrainResult(model=model, history=history)


def evaluate(
    model: AggregatorModel, dataset: Sequence[TrainingExample], batch_size: int = 256
) -> tuple[float, float]:
    """Mean loss and accuracy at threshold 0.5."""
    if not dataset:
        raise ValueError("dataset is empty")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        seqs = [tokens for tokens, _ in batch]
        ys = np.array([label for _, label in batch], dtype=np.float64)
        padded, lengths = _pad(seqs, model.vocab_size)
        logits, _ = model._forward(padded, lengths, keep_caches=False)
        loss, _ = _loss_and_dlogits(logits, ys)
        total_loss += loss * len(batch)
        correct += int(((logits > 0.0) == (ys > 0.5)).sum())
    return total_loss / len(dataset), correct / len(dataset)


def gradient_check(
    model: AggregatorModel,
    tokens: Sequence[int],
    label: int,
    step: float = 1e-5,
) -> float:
    """Largest relative error between analytic and central-difference
    gradients over every parameter, for a single example."""
    padded, lengths = _pad([list(tokens)], model.vocab_size)
    ys = np.array([float(label)])

    def loss_value() -> float:
        logits, _ = model._forward(padded, lengths, keep_caches=False)
        loss, _ = _loss_and_dlogits(logits, ys)
        return loss

    logits, caches = model._forward(padded, lengths, keep_caches=True)
    _, dlogits = _loss_and_dlogits(logits, ys)
    analytic = model._backward(caches, dlogits, padded.shape)
    worst = 0.0
    for name, values in model.params.items():
        flat = values.reshape(-1)
        analytic_flat = analytic[name].reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            upper = loss_value()
            flat[idx] = original - step
            lower = loss_value()
            flat[idx] = original
            numeric = (upper - lower) / (2.0 * step)
            # Floor keeps float noise on near-zero gradients from reading
            # as relative error; a real scale or sign bug still shows.
            denom = max(1e-6, abs(numeric) + abs(analytic_flat[idx]))
            worst = max(worst, abs(numeric - analytic_flat[idx]) / denom)
    return worst


def build_training_set(
    trajectories: Iterable[Any],
) -> tuple[list[TrainingExample], int]:
    """Examples from verified, labeled trajectories; returns (examples, skipped).

    Trajectories missing states or a correctness label are skipped and
    counted rather than silently dropped.
    """
    examples: list[TrainingExample] = []
    skipped = 0
    for trajectory in trajectories:
        states = getattr(trajectory, "states", None)
        is_correct = getattr(trajectory, "is_correct", None)
        if not states or is_correct is None:
            skipped += 1
            continue
        examples.append((tokens_from_states(states), int(is_correct)))
    return examples, skipped
