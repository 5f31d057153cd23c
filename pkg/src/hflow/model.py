"""Two-stage architecture: toy base encoder and the flow-based adapter.

The adapter maps an embedding through a ReLU hidden layer to an amortized
Gaussian posterior, reparameterizes, runs the Householder flow conditioned
on the hidden state, and classifies the flowed latent with a linear head.
All gradients are hand-derived per layer so the finite-difference checks
in the test suite exercise the real training path, not an autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionMismatch, ShapeMismatch, TraceMismatch, ValidationError
from .flow import FlowGrads, FlowStack, FlowTrace, flow_backward, flow_forward, init_flow
from .losses import BetaSchedule, adapter_loss, beta_at, softmax
from .posterior import (LOG_VAR_CLAMP, GaussianPosterior, LatentSample, kl_flow_term,
                        reparameterize)


@dataclass
class TrainConfig:
    """Every training hyperparameter in one place; defaults follow the cited setup."""

    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_min_delta: float = 1e-4
    base_batch: int = 150
    adapter_batch: int = 4
    flow_length_T: int = 3
    beta_schedule: BetaSchedule = field(default_factory=BetaSchedule)
    max_epochs: int = 50
    seed: int = 0
    hidden_dim: int = 128
    latent_dim: int = 64
    reflector_activation: str = "none"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.plateau_factor <= 0:
            raise ValidationError("rates must be positive")
        if self.adam_eps <= 0 or not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("Adam moments must satisfy 0 <= beta < 1 and eps > 0")
        if self.base_batch < 1 or self.adapter_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.flow_length_T < 0:
            raise ValidationError("flow_length_T must be >= 0")
        if self.max_epochs < 1 or self.plateau_patience < 1:
            raise ValidationError("epoch counts and patience must be >= 1")
        if self.hidden_dim < 1 or self.latent_dim < 1:
            raise ValidationError("model widths must be >= 1")


# ---------------------------------------------------------------------------
# Toy base encoder (stands in for the out-of-scope video model)
# ---------------------------------------------------------------------------

@dataclass
class ToyBaseEncoder:
    """Plain MLP with ReLU between layers; the penultimate activation is the embedding."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # (weight (out, in), bias (out,))
    output_dim: int

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i][0].shape[1] != self.layers[i - 1][0].shape[0]:
                raise DimensionMismatch(f"layer {i} input dim does not chain")
        if len(self.layers) >= 2 and self.layers[-2][0].shape[0] != self.output_dim:
            raise DimensionMismatch("penultimate layer must emit output_dim features")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1][0].shape[0]


def init_base_encoder(input_dim: int, hidden_dims: list[int], embed_dim: int,
                      class_count: int, rng: np.random.Generator) -> ToyBaseEncoder:
    """MLP sized input -> hidden... -> embed -> classes, uniform 1/sqrt(fan_in) init."""
    sizes = [input_dim, *hidden_dims, embed_dim, class_count]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-scale, scale, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ToyBaseEncoder(layers=layers, output_dim=embed_dim)


def base_forward(enc: ToyBaseEncoder, x) -> tuple[np.ndarray, np.ndarray]:
    """Return (embedding, logits): embedding is the activation feeding the final layer."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (enc.input_dim,):
        raise DimensionMismatch(f"input shape {x.shape} != ({enc.input_dim},)")
    h = x
    for w, b in enc.layers[:-1]:
        h = np.maximum(w @ h + b, 0.0)
    w, b = enc.layers[-1]
    return h, w @ h + b


def _base_forward_batch(enc: ToyBaseEncoder, xs: np.ndarray):
    acts = [xs]
    pres = []
    h = xs
    for w, b in enc.layers[:-1]:
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0)
        acts.append(h)
    w, b = enc.layers[-1]
    return acts, pres, h @ w.T + b


def train_base(enc: ToyBaseEncoder, xs: np.ndarray, ys: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> list[float]:
    """Cross-entropy training of the base encoder; returns per-epoch mean losses."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    n = xs.shape[0]
    params = base_parameters(enc)
    state = init_adam_state(params)
    plateau = PlateauState(lr=cfg.learning_rate, patience=cfg.plateau_patience,
                           factor=cfg.plateau_factor, min_delta=cfg.plateau_min_delta)
    history = []
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.base_batch):
            idx = order[start:start + cfg.base_batch]
            acts, pres, logits = _base_forward_batch(enc, xs[idx])
            probs = softmax(logits)
            batch = idx.size
            ce = -np.mean(np.log(np.maximum(probs[np.arange(batch), ys[idx]], 1e-12)))
            epoch_loss += ce * batch
            g = probs.copy()
            g[np.arange(batch), ys[idx]] -= 1.0
            g /= batch
            grads = {}
            for li in range(len(enc.layers) - 1, -1, -1):
                grads[f"layer{li}.weight"] = g.T @ acts[li]
                grads[f"layer{li}.bias"] = g.sum(axis=0)
                if li > 0:
                    g = (g @ enc.layers[li][0]) * (pres[li - 1] > 0)
            adam_step(params, grads, state, cfg, lr=plateau.lr)
        epoch_loss /= n
        history.append(epoch_loss)
        plateau_scheduler(plateau, epoch_loss)
    return history


def base_parameters(enc: ToyBaseEncoder) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(enc.layers):
        out[f"layer{i}.weight"] = w
        out[f"layer{i}.bias"] = b
    return out


# ---------------------------------------------------------------------------
# Adapter model
# ---------------------------------------------------------------------------

@dataclass
class AdapterModel:
    """Flow-based classifier head: hidden -> (mu, log_var) -> flow -> linear logits."""

    hidden_weight: np.ndarray    # (hidden, embedding)
    hidden_bias: np.ndarray      # (hidden,)
    mu_weight: np.ndarray        # (latent, hidden)
    mu_bias: np.ndarray          # (latent,)
    logvar_weight: np.ndarray    # (latent, hidden)
    logvar_bias: np.ndarray      # (latent,)
    flow: FlowStack
    classifier_weight: np.ndarray  # (classes, latent)
    classifier_bias: np.ndarray    # (classes,)

    def __post_init__(self):
        if self.classifier_weight.shape[1] != self.latent_dim:
            raise DimensionMismatch("classifier input dim must equal the latent dim")
        if self.classifier_weight.shape[0] < 2:
            raise DimensionMismatch("class count must be >= 2")
        if self.flow.dim != self.latent_dim:
            raise DimensionMismatch("flow dim must equal the latent dim")

    @property
    def embedding_dim(self) -> int:
        return self.hidden_weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.hidden_weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mu_weight.shape[0]

    @property
    def class_count(self) -> int:
        return self.classifier_weight.shape[0]


@dataclass
class AdapterTrace:
    """Everything the reverse pass needs, recorded by ``adapter_forward``."""

    embedding: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    mu: np.ndarray
    log_var_raw: np.ndarray
    post: GaussianPosterior
    sample: LatentSample
    flow: FlowTrace
    zT: np.ndarray


def init_adapter(embedding_dim: int, class_count: int, cfg: TrainConfig,
                 rng: np.random.Generator) -> AdapterModel:
    """Fresh adapter; head weights uniform in +/- 1/sqrt(fan_in), biases zero."""
    def affine(fan_out, fan_in):
        scale = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-scale, scale, size=(fan_out, fan_in)), np.zeros(fan_out)

    hw, hb = affine(cfg.hidden_dim, embedding_dim)
    mw, mb = affine(cfg.latent_dim, cfg.hidden_dim)
    lw, lb = affine(cfg.latent_dim, cfg.hidden_dim)
    stack = init_flow(cfg.latent_dim, cfg.hidden_dim, cfg.flow_length_T, rng,
                      activation=cfg.reflector_activation)
    cw, cb = affine(class_count, cfg.latent_dim)
    return AdapterModel(hidden_weight=hw, hidden_bias=hb, mu_weight=mw, mu_bias=mb,
                        logvar_weight=lw, logvar_bias=lb, flow=stack,
                        classifier_weight=cw, classifier_bias=cb)


def adapter_parameters(m: AdapterModel) -> dict[str, np.ndarray]:
    """Live parameter arrays in checkpoint declaration order."""
    out = {
        "hidden.weight": m.hidden_weight, "hidden.bias": m.hidden_bias,
        "mu.weight": m.mu_weight, "mu.bias": m.mu_bias,
        "logvar.weight": m.logvar_weight, "logvar.bias": m.logvar_bias,
    }
    if m.flow.length_T > 0:
        out["flow.first.weight"] = m.flow.first_weight
        out["flow.first.bias"] = m.flow.first_bias
        for i, layer in enumerate(m.flow.layers):
            out[f"flow.layer{i}.weight"] = layer.weight
            out[f"flow.layer{i}.bias"] = layer.bias
    out["classifier.weight"] = m.classifier_weight
    out["classifier.bias"] = m.classifier_bias
    return out


def clone_adapter(m: AdapterModel) -> AdapterModel:
    stack = FlowStack(
        dim=m.flow.dim,
        first_weight=None if m.flow.first_weight is None else m.flow.first_weight.copy(),
        first_bias=None if m.flow.first_bias is None else m.flow.first_bias.copy(),
        layers=[replace(l, weight=l.weight.copy(), bias=l.bias.copy()) for l in m.flow.layers],
        activation=m.flow.activation,
    )
    return AdapterModel(
        hidden_weight=m.hidden_weight.copy(), hidden_bias=m.hidden_bias.copy(),
        mu_weight=m.mu_weight.copy(), mu_bias=m.mu_bias.copy(),
        logvar_weight=m.logvar_weight.copy(), logvar_bias=m.logvar_bias.copy(),
        flow=stack, classifier_weight=m.classifier_weight.copy(),
        classifier_bias=m.classifier_bias.copy(),
    )


def adapter_forward(m: AdapterModel, embedding, eps) -> tuple[np.ndarray, float, AdapterTrace]:
    """Forward pass; returns (logits, single-sample KL estimate, trace)."""
    e = np.asarray(embedding, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if e.shape != (m.embedding_dim,):
        raise DimensionMismatch(f"embedding shape {e.shape} != ({m.embedding_dim},)")
    if eps.shape != (m.latent_dim,):
        raise DimensionMismatch(f"eps shape {eps.shape} != ({m.latent_dim},)")

    pre_h = m.hidden_weight @ e + m.hidden_bias
    h = np.maximum(pre_h, 0.0)
    mu = m.mu_weight @ h + m.mu_bias
    lv_raw = m.logvar_weight @ h + m.logvar_bias
    post = GaussianPosterior(mu=mu, log_var=lv_raw)
    sample = reparameterize(post, eps)
    zT, ftrace, _ = flow_forward(m.flow, sample.z0, h)
    logits = m.classifier_weight @ zT + m.classifier_bias
    kl = float(kl_flow_term(post, sample, zT))
    trace = AdapterTrace(embedding=e, pre_hidden=pre_h, hidden=h, mu=mu,
                         log_var_raw=lv_raw, post=post, sample=sample,
                         flow=ftrace, zT=zT)
    return logits, kl, trace


def adapter_backward(m: AdapterModel, trace: AdapterTrace, grad_logits,
                     beta: float) -> dict[str, np.ndarray]:
    """Gradients of ``ce + beta * kl`` for every adapter parameter.

    ``grad_logits`` is the gradient of the classification term with respect
    to the logits (softmax minus one-hot for cross entropy); the beta-scaled
    KL path, including its dependence through both z^(0) and z^(T), is
    differentiated here.
    """
    g_logits = np.asarray(grad_logits, dtype=np.float64)
    if g_logits.shape != (m.class_count,):
        raise TraceMismatch(f"grad_logits shape {g_logits.shape} != ({m.class_count},)")
    if trace.zT.shape != (m.latent_dim,):
        raise TraceMismatch("trace latent dim disagrees with the model")

    grads: dict[str, np.ndarray] = {}
    grads["classifier.weight"] = np.outer(g_logits, trace.zT)
    grads["classifier.bias"] = g_logits.copy()

    # -log p(zT) contributes beta * zT on top of the classifier pull.
    g_zT = m.classifier_weight.T @ g_logits + beta * trace.zT
    g_z0, fgrads, g_h_flow = flow_backward(m.flow, trace.flow, g_zT)
    _store_flow_grads(grads, fgrads)

    lv = trace.post.log_var
    var = np.exp(lv)
    diff = trace.sample.z0 - trace.mu
    # log q(z0 | mu, lv) differentiated directly and through the sample path.
    g_z0 = g_z0 + beta * (-diff / var)
    g_mu = g_z0 + beta * (diff / var)
    g_lv = g_z0 * (0.5 * np.exp(0.5 * lv) * trace.sample.eps)
    g_lv = g_lv + beta * (-0.5 + diff * diff / (2.0 * var))
    g_lv = g_lv * (np.abs(trace.log_var_raw) < LOG_VAR_CLAMP)

    grads["mu.weight"] = np.outer(g_mu, trace.hidden)
    grads["mu.bias"] = g_mu
    grads["logvar.weight"] = np.outer(g_lv, trace.hidden)
    grads["logvar.bias"] = g_lv

    g_h = m.mu_weight.T @ g_mu + m.logvar_weight.T @ g_lv
    if g_h_flow is not None:
        g_h = g_h + g_h_flow
    g_pre = g_h * (trace.pre_hidden > 0)
    grads["hidden.weight"] = np.outer(g_pre, trace.embedding)
    grads["hidden.bias"] = g_pre
    return grads


def _store_flow_grads(grads: dict[str, np.ndarray], fgrads: FlowGrads):
    if fgrads.first_weight is not None:
        grads["flow.first.weight"] = fgrads.first_weight
        grads["flow.first.bias"] = fgrads.first_bias
        for i, (gw, gb) in enumerate(fgrads.layers):
            grads[f"flow.layer{i}.weight"] = gw
            grads[f"flow.layer{i}.bias"] = gb


def predict_logits(m: AdapterModel, embedding) -> np.ndarray:
    """Deterministic logits at the posterior mean (eps = 0)."""
    logits, _, _ = adapter_forward(m, embedding, np.zeros(m.latent_dim))
    return logits


# ---------------------------------------------------------------------------
# Adam optimizer and plateau scheduler
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """Standard bias-corrected Adam update, in place."""
    if set(grads) != set(params):
        raise ShapeMismatch("gradient set does not match parameter set")
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class PlateauState:
    """Reduce-on-plateau bookkeeping (min mode, absolute threshold)."""

    lr: float
    patience: int = 10
    factor: float = 0.1
    min_delta: float = 1e-4
    best: float = np.inf
    bad_epochs: int = 0


def plateau_scheduler(state: PlateauState, val_metric: float) -> float:
    """Feed one epoch's validation metric; returns the (possibly reduced) lr.

    The learning rate is multiplied by ``factor`` after ``patience``
    consecutive epochs without an improvement of at least ``min_delta``;
    any improvement resets the counter.
    """
    if val_metric < state.best - state.min_delta:
        state.best = val_metric
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------------------
# Adapter training loop (array-level; episode plumbing lives upstream)
# ---------------------------------------------------------------------------

def train_adapter(m: AdapterModel, xs: np.ndarray, ys: np.ndarray, cfg: TrainConfig,
                  rng: np.random.Generator, xs_val: np.ndarray | None = None,
                  ys_val: np.ndarray | None = None,
                  log_rows: list | None = None) -> dict[str, float]:
    """Fine-tune the adapter on labelled embeddings.

    One fresh eps draw per example per visit; gradients averaged within
    each minibatch; the plateau scheduler watches the deterministic
    (posterior-mean) validation loss. ``log_rows`` collects
    (epoch, step, ce, kl, beta, total, lr) tuples when provided.
    Returns summary metrics of the run.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    n = xs.shape[0]
    if xs_val is None:
        xs_val, ys_val = xs, ys
    params = adapter_parameters(m)
    state = init_adam_state(params)
    plateau = PlateauState(lr=cfg.learning_rate, patience=cfg.plateau_patience,
                           factor=cfg.plateau_factor, min_delta=cfg.plateau_min_delta)
    first_ce = last_ce = np.nan
    for epoch in range(cfg.max_epochs):
        beta = beta_at(cfg.beta_schedule, epoch)
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.adapter_batch)):
            idx = order[start:start + cfg.adapter_batch]
            acc = {k: np.zeros_like(p) for k, p in params.items()}
            ce_sum = kl_sum = total_sum = 0.0
            for i in idx:
                eps = rng.standard_normal(m.latent_dim)
                logits, kl, trace = adapter_forward(m, xs[i], eps)
                lb = adapter_loss(logits, int(ys[i]), kl, beta)
                g_logits = softmax(logits)
                g_logits[ys[i]] -= 1.0
                g = adapter_backward(m, trace, g_logits, beta)
                for k in acc:
                    acc[k] += g[k]
                ce_sum += lb.ce
                kl_sum += lb.kl
                total_sum += lb.total
            for k in acc:
                acc[k] /= idx.size
            adam_step(params, acc, state, cfg, lr=plateau.lr)
            if log_rows is not None:
                log_rows.append((epoch, step, ce_sum / idx.size, kl_sum / idx.size,
                                 beta, total_sum / idx.size, plateau.lr))
            if epoch == 0 and step == 0:
                first_ce = ce_sum / idx.size
            last_ce = ce_sum / idx.size
        val_loss = _mean_loss(m, xs_val, ys_val, beta)
        plateau_scheduler(plateau, val_loss)
    return {"first_ce": first_ce, "last_ce": last_ce,
            "final_val_loss": _mean_loss(m, xs_val, ys_val, 0.0), "final_lr": plateau.lr}


def _mean_loss(m: AdapterModel, xs, ys, beta: float) -> float:
    zero = np.zeros(m.latent_dim)
    total = 0.0
    for x, y in zip(xs, ys):
        logits, kl, _ = adapter_forward(m, x, zero)
        total += adapter_loss(logits, int(y), kl, beta).total
    return total / len(xs)


def topk_hits(m: AdapterModel, xs, ys, k: int = 5) -> tuple[int, int]:
    """Count top-1 and top-k hits under deterministic (posterior-mean) logits."""
    top1 = topk = 0
    for x, y in zip(xs, ys):
        logits = predict_logits(m, x)
        order = np.argsort(logits)[::-1]
        if order[0] == y:
            top1 += 1
        if y in order[:k]:
            topk += 1
    return top1, topk


# ---------------------------------------------------------------------------
# Checkpoint glue (file format lives in hflow.data)
# ---------------------------------------------------------------------------

def save_adapter(path, m: AdapterModel, cfg: TrainConfig) -> None:
    from . import data

    header = {
        "kind": "adapter",
        "embedding_dim": m.embedding_dim,
        "hidden_dim": m.hidden_dim,
        "latent_dim": m.latent_dim,
        "flow_length": m.flow.length_T,
        "class_count": m.class_count,
        "seed": cfg.seed,
        "reflector_activation": m.flow.activation,
    }
    data.write_checkpoint(path, header, list(adapter_parameters(m).items()))


def load_adapter(path) -> tuple[AdapterModel, dict]:
    """Rebuild an adapter from a checkpoint; returns (model, header)."""
    from . import data
    from .flow import HouseholderLayer

    header, blocks = data.read_checkpoint(path)
    if header.get("kind") != "adapter":
        raise ValidationError(f"checkpoint kind {header.get('kind')!r} is not 'adapter'")
    named = dict(blocks)
    t_len = int(header["flow_length"])
    latent = int(header["latent_dim"])
    if t_len == 0:
        stack = FlowStack(dim=latent, activation=header.get("reflector_activation", "none"))
    else:
        layers = [HouseholderLayer(weight=named[f"flow.layer{i}.weight"],
                                   bias=named[f"flow.layer{i}.bias"])
                  for i in range(t_len - 1)]
        stack = FlowStack(dim=latent, first_weight=named["flow.first.weight"],
                          first_bias=named["flow.first.bias"], layers=layers,
                          activation=header.get("reflector_activation", "none"))
    m = AdapterModel(
        hidden_weight=named["hidden.weight"], hidden_bias=named["hidden.bias"],
        mu_weight=named["mu.weight"], mu_bias=named["mu.bias"],
        logvar_weight=named["logvar.weight"], logvar_bias=named["logvar.bias"],
        flow=stack, classifier_weight=named["classifier.weight"],
        classifier_bias=named["classifier.bias"],
    )
    return m, header


def save_base(path, enc: ToyBaseEncoder, cfg: TrainConfig) -> None:
    from . import data

    header = {
        "kind": "base",
        "input_dim": enc.input_dim,
        "output_dim": enc.output_dim,
        "class_count": enc.class_count,
        "layer_count": len(enc.layers),
        "seed": cfg.seed,
    }
    data.write_checkpoint(path, header, list(base_parameters(enc).items()))


def load_base(path) -> tuple[ToyBaseEncoder, dict]:
    from . import data

    header, blocks = data.read_checkpoint(path)
    if header.get("kind") != "base":
        raise ValidationError(f"checkpoint kind {header.get('kind')!r} is not 'base'")
    named = dict(blocks)
    layers = [(named[f"layer{i}.weight"], named[f"layer{i}.bias"])
              for i in range(int(header["layer_count"]))]
    return ToyBaseEncoder(layers=layers, output_dim=int(header["output_dim"])), header
