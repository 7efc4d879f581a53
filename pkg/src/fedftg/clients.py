"""Client-side local update rules: FedAvg, FedProx, SCAFFOLD and FedDyn.

Each update is a pure function of the broadcast parameters, the client's
persistent state, its data and the round index; nothing is shared between
clients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fedftg import autodiff as ad
from fedftg.autodiff import SgdConfig, Tensor, sgd_update
from fedftg.datasets import ClientShard, LabeledDataset
from fedftg.models import ParamVector, classifier_forward

OPTIMIZERS = ("fedavg", "fedprox", "scaffold", "feddyn")


class EmptyShardError(ValueError):
    pass


@dataclass(frozen=True)
class LocalUpdateConfig:
    epochs: int = 5
    batch_size: int = 50
    sgd: SgdConfig = SgdConfig()
    optimizer: str = "fedavg"
    mu: float = 1e-4
    alpha_dyn: float = 1e-2
    scaffold_max_steps: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mu < 0 or self.alpha_dyn < 0:
            raise ValueError("mu and alpha_dyn must be non-negative")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    shard: ClientShard
    control: ParamVector | None = None  # SCAFFOLD c_k
    dyn: ParamVector | None = None  # FedDyn h_k


@dataclass(frozen=True)
class LocalResult:
    params: ParamVector
    state: ClientState
    loss: float  # mean mini-batch cross-entropy over the steps taken
    steps: int
    control_delta: ParamVector | None = None


def batch_seed(global_seed: int, round_index: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([global_seed & 0xFFFFFFFFFFFFFFFF, round_index, client_id, 0xC11E])


def loss_and_grad(params: ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    flat = params.tensor(requires_grad=True)
    loss = ad.cross_entropy(classifier_forward(Tensor(x), (flat, params)), y)
    ad.backward(loss)
    return loss.item(), flat.grad


def _batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]


def _run_sgd(
    w_global: ParamVector,
    data: LabeledDataset,
    state: ClientState,
    cfg: LocalUpdateConfig,
    round_index: int,
    seed: int,
    correction,
    max_steps: int | None = None,
    objective=None,
) -> tuple[np.ndarray, float, int, float]:
    """Shared mini-batch loop; ``correction(w)`` returns the extra gradient term or None.

    ``objective(w, x, y) -> (loss, grad)`` overrides the classifier cross-entropy.
    """
    shard = state.shard
    if len(shard) == 0:
        raise EmptyShardError(f"client {shard.client_id} has no data")
    lr = cfg.sgd.lr_at(round_index)
    rng = np.random.default_rng(batch_seed(seed, round_index, shard.client_id))
    x_all = data.features[shard.indices]
    y_all = data.labels[shard.indices]
    w = w_global.values.copy()
    losses = []
    for steps, idx in enumerate(_batches(len(shard), cfg.batch_size, cfg.epochs, rng)):
        if max_steps is not None and steps >= max_steps:
            break
        if objective is None:
            loss, g = loss_and_grad(w_global.with_values(w), x_all[idx], y_all[idx])
        else:
            loss, g = objective(w, x_all[idx], y_all[idx])
        extra = correction(w)
        if extra is not None:
            g = g + extra
        w = sgd_update(w, g, lr, cfg.sgd.weight_decay)
        losses.append(loss)
    return w, float(np.mean(losses)), len(losses), lr


def local_update_fedavg(w_global: ParamVector, state: ClientState, data: LabeledDataset,
                        cfg: LocalUpdateConfig, round_index: int = 0, seed: int = 0, objective=None) -> LocalResult:
    w, loss, steps, _ = _run_sgd(w_global, data, state, cfg, round_index, seed, lambda w: None,
                                objective=objective)
    return LocalResult(w_global.with_values(w), state, loss, steps)


def local_update_fedprox(w_global: ParamVector, state: ClientState, data: LabeledDataset,
                         cfg: LocalUpdateConfig, round_index: int = 0, seed: int = 0, objective=None) -> LocalResult:
    """FedAvg plus the proximal gradient ``mu * (w - w_global)``."""
    anchor = w_global.values
    mu = cfg.mu

    def prox(w):
        return mu * (w - anchor) if mu else None

    w, loss, steps, _ = _run_sgd(w_global, data, state, cfg, round_index, seed, prox, objective=objective)
    return LocalResult(w_global.with_values(w), state, loss, steps)


def local_update_scaffold(w_global: ParamVector, c_global: ParamVector, state: ClientState,
                          data: LabeledDataset, cfg: LocalUpdateConfig, round_index: int = 0,
                          seed: int = 0, objective=None) -> LocalResult:
    """SCAFFOLD local steps with drift correction ``c_global - c_k``.

    The new control variate uses the parameter-difference form
    ``c_k+ = c_k - c + (w_global - w_k) / (steps * lr)``.
    """
    c_k = state.control if state.control is not None else ParamVector.zeros_like(w_global)
    if c_k.layout != c_global.layout or c_global.layout != w_global.layout:
        raise ValueError("control variate layouts must match the model layout")
    drift = c_global.values - c_k.values
    has_drift = bool(np.any(drift))
    w, loss, steps, lr = _run_sgd(
        w_global, data, state, cfg, round_index, seed,
        lambda w: drift if has_drift else None,
        max_steps=cfg.scaffold_max_steps, objective=objective,
    )
    if lr > 0:
        c_new = c_k.values - c_global.values + (w_global.values - w) / (steps * lr)
    else:
        c_new = c_k.values - c_global.values
    c_plus = w_global.with_values(c_new)
    return LocalResult(
        w_global.with_values(w), replace(state, control=c_plus), loss, steps,
        control_delta=c_plus - c_k,
    )


def local_update_feddyn(w_global: ParamVector, state: ClientState, data: LabeledDataset,
                        cfg: LocalUpdateConfig, round_index: int = 0, seed: int = 0, objective=None) -> LocalResult:
    """Dynamic regularisation: gradient ``g - h_k + alpha (w - w_global)``; then ``h_k -= alpha (w_k - w_global)``."""
    h = state.dyn if state.dyn is not None else ParamVector.zeros_like(w_global)
    alpha = cfg.alpha_dyn
    anchor = w_global.values
    has_h = bool(np.any(h.values))

    def penalty(w):
        if not alpha and not has_h:
            return None
        return alpha * (w - anchor) - h.values

    w, loss, steps, _ = _run_sgd(w_global, data, state, cfg, round_index, seed, penalty, objective=objective)
    h_plus = h.with_values(h.values - alpha * (w - anchor))
    return LocalResult(w_global.with_values(w), replace(state, dyn=h_plus), loss, steps)


def update_global_control(c_global: ParamVector, deltas, num_clients: int) -> ParamVector:
    """Server side of SCAFFOLD: ``c += (1/K) * sum(delta c_k)`` over the selected clients."""
    total = np.zeros(len(c_global))
    for d in deltas:
        total += d.values
    return c_global.with_values(c_global.values + total / num_clients)


def local_update(w_global: ParamVector, state: ClientState, data: LabeledDataset, cfg: LocalUpdateConfig,
                 round_index: int, seed: int, c_global: ParamVector | None = None) -> LocalResult:
    """Dispatch on ``cfg.optimizer``."""
    if cfg.optimizer == "fedavg":
        return local_update_fedavg(w_global, state, data, cfg, round_index, seed)
    if cfg.optimizer == "fedprox":
        return local_update_fedprox(w_global, state, data, cfg, round_index, seed)
    if cfg.optimizer == "feddyn":
        return local_update_feddyn(w_global, state, data, cfg, round_index, seed)
    if c_global is None:
        c_global = ParamVector.zeros_like(w_global)
    return local_update_scaffold(w_global, c_global, state, data, cfg, round_index, seed)
