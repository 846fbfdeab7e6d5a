"""Maximum-likelihood training: Adam, cosine annealing, gradient clipping."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .flow import FlowModel, build_model, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training and architecture hyperparameters.

    Field names follow the row names of the usual flow hyperparameter
    tables (learning rate, batch size, number of bins, tail bound, ...).
    """

    learning_rate: float = 5e-4
    batch_size: int = 512
    iterations: int = 1000
    max_gradient_value: float = 5.0
    seed: int = 0
    dropout_probability: float = 0.0
    num_bins: int = 8
    tail_bound: float = 3.0
    transformation_layers: int = 2
    resnet_hidden_features: int = 64
    resnet_blocks: int = 2
    mode: str = "coupling"
    transform: str = "lrs"
    shared_lambda: bool = False
    validation_fraction: float = 0.1
    test_fraction: float = 0.1
    eval_interval: int = 250
    anneal: bool = True
    base: str = "normal"
    use_lu: bool | None = None
    transform_first: bool = True
    num_samples: int = 50000
    min_bin: float | None = None
    min_derivative: float = 1e-3
    lambda_eps: float = 0.025

    REQUIRED = ("learning_rate", "batch_size", "iterations", "num_bins", "tail_bound",
                "transformation_layers", "mode", "seed")

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("batch_size", "max_gradient_value", "num_bins",
                    "tail_bound", "transformation_layers", "resnet_hidden_features",
                    "eval_interval", "num_samples")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.learning_rate < 0 or self.iterations < 0 or self.resnet_blocks < 0:
            raise ConfigError("learning_rate, iterations and resnet_blocks must be non-negative")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ConfigError("validation_fraction must lie in [0, 0.5]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise ConfigError("dropout_probability must lie in [0, 1)")
        if self.mode not in ("coupling", "autoregressive"):
            raise ConfigError(f"mode must be 'coupling' or 'autoregressive', got {self.mode!r}")
        if self.transform not in ("lrs", "affine"):
            raise ConfigError(f"transform must be 'lrs' or 'affine', got {self.transform!r}")
        if self.base not in ("normal", "uniform"):
            raise ConfigError(f"base must be 'normal' or 'uniform', got {self.base!r}")

    @classmethod
    def from_dict(cls, d, require=True):
        if require:
            for key in cls.REQUIRED:
                if key not in d:
                    raise ConfigError(f"missing config key: {key}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def model_from_config(cfg: TrainConfig, dim: int) -> FlowModel:
    return build_model(
        dim, mode=cfg.mode, transform=cfg.transform, num_layers=cfg.transformation_layers,
        num_bins=cfg.num_bins, tail_bound=cfg.tail_bound,
        hidden_features=cfg.resnet_hidden_features, num_blocks=cfg.resnet_blocks,
        dropout_p=cfg.dropout_probability, base=cfg.base, use_lu=cfg.use_lu,
        transform_first=cfg.transform_first, shared_lambda=cfg.shared_lambda,
        min_bin=cfg.min_bin, min_deriv=cfg.min_derivative, lambda_eps=cfg.lambda_eps,
        seed=cfg.seed)


# ---------------------------------------------------------------------------
# optimiser pieces
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params, grads, lr):
    """Bias-corrected Adam update, applied to ``params[i].data`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimiser state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, clip_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def mean_nll(model: FlowModel, data, batch_size=4096):
    """Mean negative log-likelihood in nats (no dropout)."""
    data = np.asarray(data)
    if len(data) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(data), batch_size):
        total -= float(np.sum(model.log_prob(data[i:i + batch_size])))
    return total / len(data)


def nll_with_stderr(model: FlowModel, data, batch_size=4096):
    lp = np.concatenate([model.log_prob(data[i:i + batch_size])
                         for i in range(0, len(data), batch_size)])
    n = len(lp)
    se = float(np.std(lp, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return float(-lp.mean()), se


def get_state(model: FlowModel):
    return {k: t.data.copy() for k, t in model.named_parameters().items()}


def set_state(model: FlowModel, state):
    params = model.named_parameters()
    if set(params) != set(state):
        missing = sorted(set(params) ^ set(state))
        raise ShapeMismatch(f"parameter names differ: {missing[:3]}")
    for k, t in params.items():
        if t.data.shape != state[k].shape:
            raise ShapeMismatch(f"{k}: shape {state[k].shape} != {t.data.shape}")
        t.data[...] = state[k]


@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # (iteration, train_nll, val_nll, lr)
    best_state: dict = field(default_factory=dict)
    best_val_nll: float = float("nan")
    best_iteration: int = 0
    final_train_nll: float = float("nan")
    optimizer: AdamState | None = None
    rng_state: dict | None = None

    def history_csv(self) -> str:
        lines = ["iteration,train_nll,val_nll,lr"]
        for it, tr, va, lr in self.history:
            lines.append(f"{it},{tr!r},{'' if va is None else repr(va)},{lr!r}")
        return "\n".join(lines) + "\n"


class _Batches:
    """Epoch-free minibatches: reshuffle whenever the permutation is used up."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.bs > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        idx = self.perm[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return idx


def fit(model: FlowModel, train, config: TrainConfig, val=None, callback=None) -> TrainReport:
    """Train by minibatch maximum likelihood and keep the best validation state.

    When ``val`` is empty the last state is reported as best.  Raises
    :class:`NonFiniteLoss` as soon as a batch loss is not finite.
    """
    train = np.asarray(getattr(train, "data", train), dtype=np.float64)
    val = None if val is None else np.asarray(getattr(val, "data", val), dtype=np.float64)
    if train.ndim != 2 or train.shape[1] != model.dim:
        raise ShapeMismatch(f"training data shape {train.shape} does not match model dim {model.dim}")
    has_val = val is not None and len(val) > 0
    rng = make_rng([config.seed, 1])
    params = model.parameters()
    opt = AdamState.for_params(params)
    report = TrainReport(optimizer=opt)
    report.best_state = get_state(model)
    if has_val:
        report.best_val_nll = mean_nll(model, val)
    if config.iterations == 0:
        report.rng_state = rng.bit_generator.state
        return report
    batches = _Batches(len(train), config.batch_size, rng)
    dropout_rng = rng if config.dropout_probability > 0 else None
    T = config.iterations
    for it in range(T):
        lr = cosine_lr(it, T, config.learning_rate) if config.anneal else config.learning_rate
        x = train[batches.next()]
        model.zero_grad()
        loss = ad.neg(ad.mean(model.log_prob_tensor(x, dropout_rng)))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(it + 1, value)
        ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        clip_gradients(grads, config.max_gradient_value)
        adam_step(opt, params, grads, lr)
        val_nll = None
        last = it == T - 1
        if has_val and ((it + 1) % config.eval_interval == 0 or last):
            val_nll = mean_nll(model, val)
            if math.isfinite(val_nll) and not val_nll >= report.best_val_nll:
                report.best_val_nll = val_nll
                report.best_iteration = it + 1
                report.best_state = get_state(model)
            log.info("iter %d train %.4f val %.4f lr %.2e", it + 1, value, val_nll, lr)
        report.history.append((it + 1, value, val_nll, lr))
        if callback is not None:
            callback(it + 1, value, val_nll)
    if not has_val:
        report.best_state = get_state(model)
        report.best_iteration = T
    report.final_train_nll = report.history[-1][1]
    report.rng_state = rng.bit_generator.state
    set_state(model, report.best_state)
    return report
