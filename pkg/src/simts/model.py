"""The forecasting representation model.

Two weight-sharing encoder passes map the history and future segments of a
window into latent space; an MLP predicts the future latents from the last
column of the encoded history; the loss attracts prediction and encoding
columnwise by cosine similarity.  The encoder is a pointwise projection
(plus ReLU) followed by parallel causal convolutions whose kernel widths
double per branch, averaged into one output.

Averaging branch outputs commutes with convolution, so the branches are
executed as a single causal convolution with the averaged, causally
right-aligned kernel (see `autodiff.fuse_kernels`); gradients still land on
the per-branch weights.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from simts import autodiff as ad
from simts.autodiff import Tensor
from simts.data import WindowSample
from simts.errors import ConfigError, ShapeError

NORM_EPS = 1e-8

VARIANTS = ("simts", "no_stop_gradient", "rev_stop_gradient", "infonce")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown loss variant {variant!r}; choose from {VARIANTS}")
    return variant


@dataclass
class EncoderConfig:
    in_channels: int
    projection_dim: int = 64
    latent_dim: int = 320
    history_len: int = 201

    def __post_init__(self):
        for name in ("in_channels", "projection_dim", "latent_dim", "history_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"EncoderConfig.{name} must be >= 1")

    @property
    def num_scales(self) -> int:
        # floor(log2 K) + 1, computed exactly
        return self.history_len.bit_length()

    @property
    def kernel_sizes(self):
        return [2**i for i in range(self.num_scales)]


@dataclass
class Model:
    encoder: EncoderConfig
    horizon: int
    params: Dict[str, Tensor]


def _uniform_init(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(config: EncoderConfig, horizon: int, seed: int) -> Dict[str, Tensor]:
    """Seed-deterministic parameter dict (uniform Glorot weights, zero biases)."""
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    c, dp, cl = config.in_channels, config.projection_dim, config.latent_dim
    params: Dict[str, Tensor] = {}
    params["encoder.projection.weight"] = _uniform_init(rng, (dp, c, 1), c, dp)
    params["encoder.projection.bias"] = Tensor(np.zeros(dp), requires_grad=True)
    for i, k in enumerate(config.kernel_sizes):
        params[f"encoder.scale{i}.weight"] = _uniform_init(
            rng, (cl, dp, k), dp * k, cl * k
        )
        params[f"encoder.scale{i}.bias"] = Tensor(np.zeros(cl), requires_grad=True)
    params["predictor.hidden.weight"] = _uniform_init(rng, (cl, cl), cl, cl)
    params["predictor.hidden.bias"] = Tensor(np.zeros(cl), requires_grad=True)
    params["predictor.output.weight"] = _uniform_init(
        rng, (cl * horizon, cl), cl, cl * horizon
    )
    params["predictor.output.bias"] = Tensor(np.zeros(cl * horizon), requires_grad=True)
    return params


def build_model(config: EncoderConfig, horizon: int, seed: int = 0) -> Model:
    return Model(config, horizon, init_params(config, horizon, seed))


def fused_scale_kernel(model: Model):
    """Averaged multi-branch kernel and bias; build once per forward pass
    and share across encoder calls so its gradient accumulates."""
    p = model.params
    m = model.encoder.num_scales
    weight = ad.fuse_kernels([p[f"encoder.scale{i}.weight"] for i in range(m)])
    bias = ad.mean_over([p[f"encoder.scale{i}.bias"] for i in range(m)])
    return weight, bias


def encode(model: Model, x, fused=None) -> Tensor:
    """Latent representation of a segment: (C, L) -> (latent_dim, L).

    Causal throughout, so column t depends only on inputs up to t.
    """
    x = ad.as_tensor(x)
    if x.data.shape[0] != model.encoder.in_channels:
        raise ShapeError(
            f"encode: model expects {model.encoder.in_channels} channels, "
            f"input has shape {x.shape}"
        )
    w, b = fused if fused is not None else fused_scale_kernel(model)
    h = ad.relu(
        ad.conv1d(x, model.params["encoder.projection.weight"],
                  model.params["encoder.projection.bias"])
    )
    return ad.conv1d(h, w, b)


def encode_summary(model: Model, x, fused=None) -> Tensor:
    """Last column of `encode(model, x)` without the full-length sweep.

    The projection is pointwise and the widest branch looks back
    2^(m-1) - 1 steps, so only that tail of the input can influence the
    final column.
    """
    x = ad.as_tensor(x)
    if x.data.shape[0] != model.encoder.in_channels:
        raise ShapeError(
            f"encode_summary: model expects {model.encoder.in_channels} channels, "
            f"input has shape {x.shape}"
        )
    w, b = fused if fused is not None else fused_scale_kernel(model)
    kmax = model.encoder.kernel_sizes[-1]
    if x.data.shape[1] > kmax:
        if x.requires_grad or x.node is not None:
            # tail-slicing would detach a tracked input; take the slow path
            return ad.last_column(encode(model, x, fused))
        x = Tensor(x.data[:, -kmax:])
    h = ad.relu(
        ad.conv1d(x, model.params["encoder.projection.weight"],
                  model.params["encoder.projection.bias"])
    )
    return ad.conv1d_last(h, w, b)


def predict_future(model: Model, summary) -> Tensor:
    """Predict future latents from a history summary.

    A (latent_dim,) vector gives (latent_dim, horizon).  A (latent_dim, B)
    column batch gives (latent_dim, B*horizon) with one horizon block per
    column, laid out side by side.
    """
    p = model.params
    summary = ad.as_tensor(summary)
    hidden = ad.relu(ad.linear(summary, p["predictor.hidden.weight"],
                               p["predictor.hidden.bias"]))
    out = ad.linear(hidden, p["predictor.output.weight"], p["predictor.output.bias"])
    cl, h = model.encoder.latent_dim, model.horizon
    if summary.data.ndim == 1:
        return ad.reshape(out, (cl, h))
    return ad.blocks_from_columns(out, cl, h)


def cosine_loss(pred, target, eps: float = NORM_EPS) -> Tensor:
    """Negative mean cosine similarity over columns; in [-1, 1]."""
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"cosine_loss: shapes {pred.shape} vs {target.shape}")
    n_cols = pred.data.shape[1]
    p = ad.l2_normalize_columns(pred, eps)
    q = ad.l2_normalize_columns(target, eps)
    return ad.scale(ad.sum_all(ad.mul(p, q)), -1.0 / n_cols)


def step_loss(model: Model, sample: WindowSample, variant: str = "simts") -> Tensor:
    """Training loss of one (history, future) sample under a loss variant.

    simts: the future encoding is detached, so encoder gradients flow only
    through the history path.  no_stop_gradient: nothing detached.
    rev_stop_gradient: the history summary is detached instead, so encoder
    gradients flow only through the future path (the predictor still
    learns).  infonce: delegates to the batch objective with this sample
    as a singleton batch.
    """
    check_variant(variant)
    if variant == "infonce":
        return infonce_batch_loss(model, [sample])
    fused = fused_scale_kernel(model)
    future_code = encode(model, sample.future, fused)
    if variant == "simts":
        future_code = ad.detach(future_code)
    summary = encode_summary(model, sample.history, fused)
    if variant == "rev_stop_gradient":
        summary = ad.detach(summary)
    pred = predict_future(model, summary)
    return cosine_loss(pred, future_code)


def batch_loss(model: Model, samples: Sequence[WindowSample],
               variant: str = "simts") -> Tensor:
    """Mean of per-sample losses over a mini-batch.

    All samples share the horizon, so the batch mean equals one cosine loss
    over the side-by-side prediction/target blocks; the predictor runs once
    on the stacked summary columns.
    """
    check_variant(variant)
    if not samples:
        raise ShapeError("batch_loss: empty batch")
    if variant == "infonce":
        return infonce_batch_loss(model, samples)
    fused = fused_scale_kernel(model)

    if variant == "simts":
        with ad.no_record():
            target = Tensor(
                np.concatenate(
                    [encode(model, s.future, fused).data for s in samples], axis=1
                )
            )
    else:
        target = ad.concat_columns([encode(model, s.future, fused) for s in samples])

    summaries = ad.stack_columns(
        [encode_summary(model, s.history, fused) for s in samples]
    )
    if variant == "rev_stop_gradient":
        summaries = ad.detach(summaries)
    preds = predict_future(model, summaries)
    return cosine_loss(preds, target)


def infonce_batch_loss(model: Model, samples: Sequence[WindowSample],
                       eps: float = NORM_EPS) -> Tensor:
    """Contrastive objective with in-batch negatives.

    For sample j and future timestamp t the positive score is the dot
    product of the normalized predicted column with sample j's encoded
    column; the denominator sums exp(score) against every sample in the
    batch at the same timestamp.  Encoded futures are detached, matching
    the main objective.  With a single sample the ratio is 1 and the loss 0.
    """
    if not samples:
        raise ShapeError("infonce_batch_loss: empty batch")
    fused = fused_scale_kernel(model)
    n = len(samples)

    with ad.no_record():
        targets = []
        for s in samples:
            z = encode(model, s.future, fused).data
            norms = np.maximum(np.sqrt((z * z).sum(axis=0)), eps)
            targets.append(Tensor(z / norms))

    per_sample = []
    for j, s_j in enumerate(samples):
        summary = encode_summary(model, s_j.history, fused)
        pred = ad.l2_normalize_columns(predict_future(model, summary), eps)
        scores = [ad.sum_columns(ad.mul(pred, q)) for q in targets]
        denom = ad.scale(ad.mean_over([ad.exp(sc) for sc in scores]), float(n))
        gap = ad.sub(scores[j], ad.log(denom))
        per_sample.append(ad.scale(ad.mean_all(gap), -1.0))
    return ad.mean_over(per_sample)


def encode_series(model: Model, values: np.ndarray) -> np.ndarray:
    """Frozen-model latents for a full series; plain array out, no graph."""
    with ad.no_record():
        return encode(model, np.asarray(values, dtype=np.float64)).data
