"""Server-side fine-tuning of the aggregated model by data-free distillation.

The server keeps a conditional generator. Each round it aggregates the
uploaded local models, then alternates between pushing the generator towards
samples on which the global and local models disagree (while staying
classifiable and diverse) and distilling the class-weighted local ensemble
into the global model on those samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from fedftg import autodiff as ad
from fedftg.autodiff import SgdConfig, Tensor, sgd_update
from fedftg.models import ParamVector, classifier_forward, generator_forward

MD_METRICS = ("kl", "mse")


class DivergenceError(RuntimeError):
    """A server loss became non-finite."""


@dataclass(frozen=True)
class FtgHyper:
    iterations: int = 10
    gen_steps: int = 1
    dist_steps: int = 5
    lambda_cls: float = 1.0
    lambda_dis: float = 1.0
    batch_size: int = 64
    noise_dim: int = 100
    hsm: bool = True
    cls_sampling: bool = True
    class_ensemble: bool = True
    md_metric: str = "kl"

    def __post_init__(self):
        if min(self.iterations, self.gen_steps, self.dist_steps) < 1:
            raise ValueError("iterations, gen_steps and dist_steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the diversity loss")
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.md_metric not in MD_METRICS:
            raise ValueError(f"md_metric must be one of {MD_METRICS}")
        if self.lambda_cls < 0 or self.lambda_dis < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ServerState:
    params: ParamVector
    generator: ParamVector
    eta_g: float = 1.0
    control: ParamVector | None = None  # SCAFFOLD global control variate
    classifier_sgd: SgdConfig = SgdConfig(0.1, 1e-3, 0.998)
    generator_sgd: SgdConfig = SgdConfig(0.01, 1e-3, 0.998)


@dataclass(frozen=True)
class LabelDistribution:
    p: np.ndarray

    def __post_init__(self):
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError("label distribution must be non-negative and sum to 1")


@dataclass(frozen=True)
class EnsembleWeights:
    table: np.ndarray  # shape (clients, classes)

    def rows_for(self, labels: np.ndarray) -> np.ndarray:
        """Per-sample weights, shape (clients, batch)."""
        cols = self.table[:, labels]
        dead = ~np.any(cols > 0, axis=0)
        if np.any(dead):
            raise ValueError(f"no local model carries weight for classes {sorted(set(labels[dead].tolist()))}")
        return cols


@dataclass
class ServerStats:
    l_md: list[float] = field(default_factory=list)
    l_cls: list[float] = field(default_factory=list)
    l_dis: list[float] = field(default_factory=list)

    def means(self) -> tuple[float, float, float]:
        return tuple(float(np.mean(v)) if v else float("nan") for v in (self.l_md, self.l_cls, self.l_dis))


# ---------------------------------------------------------------------------
# aggregation and label statistics


def aggregate(params: ParamVector, local_params: Sequence[ParamVector], eta_g: float = 1.0) -> ParamVector:
    if not local_params:
        raise ValueError("aggregate needs at least one local model")
    delta = np.zeros(len(params))
    for w in local_params:
        delta += (w - params).values
    delta /= len(local_params)
    return params.with_values(params.values + eta_g * delta)


def _count_matrix(counts) -> np.ndarray:
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("counts must be a (clients, classes) matrix")
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    if not np.any(c > 0):
        raise ValueError("counts are all zero")
    return c


def compute_label_distribution(counts, cls_sampling: bool = True) -> LabelDistribution:
    """Class sampling probabilities proportional to the selected clients' pooled counts.

    With ``cls_sampling=False`` every class that any selected client holds is
    equally likely.
    """
    c = _count_matrix(counts)
    totals = c.sum(axis=0)
    if not cls_sampling:
        totals = (totals > 0).astype(np.float64)
    return LabelDistribution(totals / totals.sum())


def compute_ensemble_weights(counts, class_ensemble: bool = True) -> EnsembleWeights:
    """Per-class share of each client's data; columns of absent classes are zero."""
    c = _count_matrix(counts)
    totals = c.sum(axis=0)
    live = totals > 0
    if class_ensemble:
        table = np.divide(c, totals, out=np.zeros_like(c), where=live)
    else:
        table = np.where(live, 1.0 / c.shape[0], 0.0) * np.ones_like(c)
    return EnsembleWeights(table)


def sample_batch(dist: LabelDistribution, batch_size: int, noise_dim: int, seed) -> tuple[np.ndarray, np.ndarray]:
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch_size, noise_dim))
    y = rng.choice(dist.p.size, size=batch_size, p=dist.p)
    return z, y


# ---------------------------------------------------------------------------
# losses


def _probs(x: Tensor, params) -> Tensor:
    return ad.softmax(classifier_forward(x, params))


def _weighted(per_model: Sequence[Tensor], rows: np.ndarray) -> Tensor:
    total = None
    for k, term in enumerate(per_model):
        part = ad.mean(ad.mul(term, rows[k]))
        total = part if total is None else ad.add(total, part)
    return total


def _discrepancy(p_global: Tensor, p_local: Tensor, metric: str) -> Tensor:
    if metric == "kl":
        return ad.kl_divergence(p_global, p_local, reduction="none")
    diff = ad.sub(p_global, p_local)
    return ad.mean(ad.mul(diff, diff), axis=-1)


def loss_md(params, local_params: Sequence, x, labels, weights: EnsembleWeights,
            metric: str = "kl", local_probs: Sequence[Tensor] | None = None) -> Tensor:
    """Ensemble-weighted discrepancy between the global model and each local model on ``x``.

    ``params`` may be a ParamVector or a ``(flat_tensor, template)`` pair so the
    result is differentiable in the global weights; gradients also reach ``x``.
    ``local_probs`` lets callers reuse local predictions when ``x`` is fixed.
    """
    x = ad.as_tensor(x)
    rows = weights.rows_for(np.asarray(labels))
    p_global = _probs(x, params)
    if local_probs is None:
        local_probs = [_probs(x, w) for w in local_params]
    return _weighted([_discrepancy(p_global, q, metric) for q in local_probs], rows)


def loss_cls(local_params: Sequence, x, labels, weights: EnsembleWeights) -> Tensor:
    """Ensemble-weighted cross-entropy of the frozen local models on ``x`` against ``labels``."""
    x = ad.as_tensor(x)
    labels = np.asarray(labels)
    rows = weights.rows_for(labels)
    terms = [ad.cross_entropy(classifier_forward(x, w), labels, reduction="none") for w in local_params]
    return _weighted(terms, rows)


def loss_dis(x, z) -> Tensor:
    """``exp(mean_ij -|x_i - x_j| * |z_i - z_j|)`` over all ordered pairs."""
    x = ad.as_tensor(x)
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if x.shape[0] < 2 or z.shape[0] != x.shape[0]:
        raise ad.ShapeError("loss_dis", x.shape, z.shape)
    dz = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    return ad.exp(ad.mul(ad.mean(ad.mul(ad.pairwise_distances(x), dz)), -1.0))


def generator_objective(theta, params: ParamVector, local_params: Sequence[ParamVector], z, labels,
                        weights: EnsembleWeights, hyper: FtgHyper):
    """The quantity the generator minimises, ``-L_md + lam_cls L_cls + lam_dis L_dis``.

    ``theta`` is a ParamVector or ``(flat_tensor, template)`` pair. Returns
    ``(objective, l_md, l_cls, l_dis)`` as tensors.
    """
    x = generator_forward(Tensor(z), labels, theta)
    md = loss_md(params, local_params, x, labels, weights, hyper.md_metric)
    cls = loss_cls(local_params, x, labels, weights)
    dis = loss_dis(x, z)
    obj = ad.add(ad.mul(cls, hyper.lambda_cls), ad.mul(dis, hyper.lambda_dis))
    if hyper.hsm:
        obj = ad.sub(obj, md)
    return obj, md, cls, dis


def _check_finite(what: str, *values: float) -> None:
    if not all(np.isfinite(v) for v in values):
        raise DivergenceError(f"non-finite {what} loss: {values}")


def generator_step(theta: ParamVector, params: ParamVector, local_params: Sequence[ParamVector], z, labels,
                   weights: EnsembleWeights, hyper: FtgHyper, lr: float, weight_decay: float = 0.0,
                   stats: ServerStats | None = None) -> ParamVector:
    flat = theta.tensor(requires_grad=True)
    obj, md, cls, dis = generator_objective((flat, theta), params, local_params, z, labels, weights, hyper)
    _check_finite("generator", obj.item(), md.item(), cls.item(), dis.item())
    if stats is not None:
        stats.l_md.append(md.item())
        stats.l_cls.append(cls.item())
        stats.l_dis.append(dis.item())
    if lr == 0.0:
        return theta
    ad.backward(obj)
    return theta.with_values(sgd_update(theta.values, flat.grad, lr, weight_decay))


def global_model_step(params: ParamVector, theta: ParamVector, local_params: Sequence[ParamVector], z, labels,
                      weights: EnsembleWeights, hyper: FtgHyper, lr: float, weight_decay: float = 0.0,
                      x: np.ndarray | None = None, local_probs: Sequence[Tensor] | None = None) -> ParamVector:
    """One descent step on L_md in the global weights with the pseudo data held fixed.

    ``x``/``local_probs`` are recomputed from ``theta`` unless supplied.
    """
    if lr == 0.0:
        return params
    if x is None:
        x = generator_forward(Tensor(z), labels, theta).data
    x = Tensor(x)
    flat = params.tensor(requires_grad=True)
    md = loss_md((flat, params), local_params, x, labels, weights, hyper.md_metric, local_probs=local_probs)
    _check_finite("distillation", md.item())
    if not md.requires_grad:
        return params
    ad.backward(md)
    return params.with_values(sgd_update(params.values, flat.grad, lr, weight_decay))


def server_seed(seed: int, round_index: int, iteration: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, round_index, iteration, 0x5E4])


def server_update(state: ServerState, local_params: Sequence[ParamVector], counts, hyper: FtgHyper,
                  round_index: int, seed: int = 0, stats: ServerStats | None = None) -> ServerState:
    """Aggregate, then run ``iterations`` rounds of generator / global-model alternation.

    ``counts`` is the (selected clients x classes) label-count matrix in the
    same order as ``local_params``.
    """
    if not local_params:
        raise ValueError("server_update needs at least one local model")
    counts = np.asarray(counts)
    if counts.shape[0] != len(local_params):
        raise ValueError(f"{counts.shape[0]} count rows for {len(local_params)} local models")
    params = aggregate(state.params, local_params, state.eta_g)
    theta = state.generator
    dist = compute_label_distribution(counts, hyper.cls_sampling)
    weights = compute_ensemble_weights(counts, hyper.class_ensemble)
    lr_d = state.classifier_sgd.lr_at(round_index)
    lr_g = state.generator_sgd.lr_at(round_index)
    for i in range(hyper.iterations):
        z, y = sample_batch(dist, hyper.batch_size, hyper.noise_dim, server_seed(seed, round_index, i))
        for _ in range(hyper.gen_steps):
            theta = generator_step(theta, params, local_params, z, y, weights, hyper, lr_g,
                                   state.generator_sgd.weight_decay, stats)
        if lr_d == 0.0:
            continue
        # theta is fixed through the distillation steps, so are x and the local predictions
        x = Tensor(generator_forward(Tensor(z), y, theta).data)
        local_probs = [_probs(x, w) for w in local_params]
        for _ in range(hyper.dist_steps):
            params = global_model_step(params, theta, local_params, z, y, weights, hyper, lr_d,
                                       state.classifier_sgd.weight_decay, x=x.data, local_probs=local_probs)
    return replace(state, params=params, generator=theta)
