"""ADAM updates and the epoch loop."""

import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError

# learning rates used for each network in the original experiments
DEFAULT_LEARNING_RATES = {"sscl2dnn": 1e-3, "sacl2dnn": 1e-4, "sscl3dnn": 1e-4}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon, "t": self.t}


def adam_step(params, grads, state):
    """Apply one ADAM update to every array in ``params`` (in place).

    ``params`` and ``grads`` are dicts with matching keys and shapes. Raises
    :class:`NumericError` before touching anything if a gradient is not finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class TrainSchedule:
    epochs: int = 2000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``checkpoint`` holds the last finite epoch's state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def _snapshot(model, state):
    params = {k: v.copy() for k, v in model.params().items()}
    opt = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, state.t,
                    {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})
    return params, opt


def train(model, patches, labels, schedule, callback=None, state=None):
    """Mini-batch ADAM training with a full reshuffle every epoch.

    ``labels`` are class ids ``1..N``. ``callback(record, model)`` runs after
    every epoch and may return ``True`` to stop early. Returns
    ``(checkpoint, trace)`` where ``trace`` is a list of per-epoch dicts.
    """
    from .models import Checkpoint

    patches = np.asarray(patches, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    if len(patches) != n:
        raise ValueError(f"{len(patches)} patches but {n} labels")
    state = state or AdamState(lr=schedule.lr)
    shuffle_seq, dropout_seq = np.random.SeedSequence(schedule.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    params = model.params()
    trace = []
    last_good = _snapshot(model, state)
    for epoch in range(1, schedule.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            loss, grads, probs = model.loss_and_grads(patches[idx], labels[idx], rng=dropout_rng)
            if not np.isfinite(loss):
                good_params, good_state = last_good
                ckpt = Checkpoint(model.spec, good_params, good_state, model.seed)
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", ckpt)
            adam_step(params, grads, state)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) + 1 == labels[idx]))
        record = {
            "epoch": epoch,
            "loss": total_loss / n,
            "accuracy": correct / n,
            "wall_time": time.perf_counter() - start,
        }
        trace.append(record)
        last_good = _snapshot(model, state)
        if callback is not None and callback(record, model):
            break
    return Checkpoint(model.spec, {k: v.copy() for k, v in params.items()}, state, model.seed), trace
