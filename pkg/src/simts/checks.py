"""Finite-difference verification suite for every differentiable op and the
training losses, used by the `gradcheck` CLI command and the test suite.
"""

import numpy as np

from simts import autodiff as ad
from simts import model as model_mod
from simts.data import WindowSample
from simts.model import EncoderConfig, build_model

TOLERANCE = 1e-4

# tiny-but-nontrivial configuration used for the whole-model loss checks
_TINY = dict(in_channels=2, projection_dim=4, latent_dim=8, history_len=8)
_TINY_HORIZON = 8


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def _model_and_sample(rng, seed):
    model = build_model(EncoderConfig(**_TINY), horizon=_TINY_HORIZON, seed=seed)
    sample = WindowSample(
        history=rng.normal(size=(_TINY["in_channels"], _TINY["history_len"])),
        future=rng.normal(size=(_TINY["in_channels"], _TINY_HORIZON)),
        origin_index=0,
    )
    return model, sample


def _fd_against_analytic(f_frozen, tensors, analytic, eps=1e-5):
    """Max relative error between given analytic gradients and central
    finite differences of `f_frozen` (same error metric as grad_check)."""
    worst = 0.0
    with ad.no_record():
        for tsr, ga in zip(tensors, analytic):
            flat = tsr.data.reshape(-1)
            gaf = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f_frozen().item()
                flat[i] = orig - eps
                lo = f_frozen().item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                err = abs(gaf[i] - num) / max(1.0, abs(gaf[i]), abs(num))
                worst = max(worst, err)
    return worst


def _loss_check(variant, rng, seed, eps=1e-5):
    """Check a step-loss variant against finite differences.

    Without stop-gradient the loss is an ordinary differentiable function
    and grad_check applies directly.  With a detached branch the analytic
    gradient intentionally ignores that branch, so the finite-difference
    oracle is the loss with the detached quantity frozen at its current
    value; the training-path gradients must match it.
    """
    model, sample = _model_and_sample(rng, seed)
    tensors = list(model.params.values())

    if variant == "no_stop_gradient":

        def f(*_):
            return model_mod.step_loss(model, sample, variant)

        return ad.grad_check(f, tensors, eps=eps)

    analytic_map = ad.backward(
        model_mod.step_loss(model, sample, variant), model.params
    )
    analytic = [analytic_map[name] for name in model.params]

    if variant == "simts":
        with ad.no_record():
            frozen_target = model_mod.encode(model, sample.future).data

        def f_frozen():
            summary = model_mod.encode_summary(model, sample.history)
            pred = model_mod.predict_future(model, summary)
            return model_mod.cosine_loss(pred, ad.Tensor(frozen_target))

    else:  # rev_stop_gradient: the history summary is the frozen quantity
        with ad.no_record():
            frozen_summary = model_mod.encode_summary(model, sample.history).data

        def f_frozen():
            future_code = model_mod.encode(model, sample.future)
            pred = model_mod.predict_future(model, ad.Tensor(frozen_summary))
            return model_mod.cosine_loss(pred, future_code)

    return _fd_against_analytic(f_frozen, tensors, analytic, eps=eps)


def _infonce_check(rng, seed, eps=1e-5):
    """The batch objective detaches the encoded futures, so the oracle
    freezes the normalized target columns and lets the predictions vary."""
    model, sample = _model_and_sample(rng, seed)
    _, sample2 = _model_and_sample(rng, seed)
    samples = [sample, sample2]
    tensors = list(model.params.values())

    analytic_map = ad.backward(
        model_mod.infonce_batch_loss(model, samples), model.params
    )
    analytic = [analytic_map[name] for name in model.params]

    with ad.no_record():
        frozen = []
        for s in samples:
            z = model_mod.encode(model, s.future).data
            norms = np.maximum(np.sqrt((z * z).sum(axis=0)), model_mod.NORM_EPS)
            frozen.append(z / norms)

    def f_frozen():
        losses = []
        n = len(samples)
        for j, s in enumerate(samples):
            summary = model_mod.encode_summary(model, s.history)
            pred = ad.l2_normalize_columns(model_mod.predict_future(model, summary))
            scores = [ad.sum_columns(ad.mul(pred, ad.Tensor(q))) for q in frozen]
            denom = ad.scale(ad.mean_over([ad.exp(sc) for sc in scores]), float(n))
            losses.append(ad.scale(ad.mean_all(ad.sub(scores[j], ad.log(denom))), -1.0))
        return ad.mean_over(losses)

    return _fd_against_analytic(f_frozen, tensors, analytic, eps=eps)


def _detach_check(rng):
    # the only path from x to the loss runs through detach: the analytic
    # gradient must be absent, while y sees x's values as constants
    x = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.grad = None
    y.grad = None
    loss = ad.sum_all(ad.mul(ad.detach(x), y))
    ad.backward(loss)
    err = 0.0
    if x.grad is not None and np.any(x.grad != 0.0):
        err = 1.0
    if y.grad is None or np.abs(y.grad - x.data).max() > 0:
        err = 1.0
    return err


def gradcheck_report(seed: int = 0):
    """Run every check once; returns [(name, max_relative_error), ...]."""
    rng = np.random.default_rng(seed)
    report = []

    def check(name, f, inputs, eps=1e-5):
        report.append((name, ad.grad_check(f, inputs, eps=eps)))

    t = lambda *shape: ad.Tensor(rng.normal(size=shape))  # noqa: E731

    check("add", lambda a, b: ad.sum_all(ad.add(a, b)), [t(3, 4), t(3, 4)])
    check("sub", lambda a, b: ad.mean_all(ad.sub(a, b)), [t(5), t(5)])
    check("mul", lambda a, b: ad.sum_all(ad.mul(a, b)), [t(3, 4), t(3, 4)])
    check("scale", lambda a: ad.sum_all(ad.scale(a, -2.5)), [t(6)])
    check("power", lambda a: ad.sum_all(ad.power(a, 3.0)), [t(4)])
    check("exp", lambda a: ad.sum_all(ad.exp(a)), [t(3, 3)])
    check(
        "log",
        lambda a: ad.sum_all(ad.log(a)),
        [ad.Tensor(rng.uniform(0.5, 2.0, size=(3, 3)))],
    )
    check(
        "relu",
        lambda a: ad.sum_all(ad.relu(a)),
        [ad.Tensor(_away_from_zero(rng, (4, 5)))],
    )
    check("sum_all", lambda a: ad.sum_all(a), [t(2, 7)])
    check("mean_all", lambda a: ad.mean_all(a), [t(2, 7)])
    check(
        "sum_columns",
        lambda a: ad.mean_all(ad.power(ad.sum_columns(a), 2.0)),
        [t(3, 5)],
    )
    check(
        "mean_over",
        lambda a, b, c: ad.sum_all(ad.power(ad.mean_over([a, b, c]), 2.0)),
        [t(2, 3), t(2, 3), t(2, 3)],
    )
    check("reshape", lambda a: ad.sum_all(ad.power(ad.reshape(a, (6, 2)), 2.0)), [t(3, 4)])
    check(
        "last_column",
        lambda a: ad.sum_all(ad.power(ad.last_column(a), 2.0)),
        [t(4, 6)],
    )
    check(
        "stack_columns",
        lambda a, b: ad.sum_all(ad.power(ad.stack_columns([a, b]), 2.0)),
        [t(4), t(4)],
    )
    check(
        "concat_columns",
        lambda a, b: ad.sum_all(ad.power(ad.concat_columns([a, b]), 2.0)),
        [t(3, 2), t(3, 4)],
    )
    check(
        "blocks_from_columns",
        lambda a: ad.sum_all(ad.power(ad.blocks_from_columns(a, 3, 4), 2.0)),
        [t(12, 2)],
    )
    check(
        "linear",
        lambda x, w, b: ad.sum_all(ad.power(ad.linear(x, w, b), 2.0)),
        [t(4), t(3, 4), t(3)],
    )
    check(
        "linear_batched",
        lambda x, w, b: ad.sum_all(ad.power(ad.linear(x, w, b), 2.0)),
        [t(4, 5), t(3, 4), t(3)],
    )
    check(
        "conv1d",
        lambda x, w, b: ad.sum_all(ad.power(ad.conv1d(x, w, b), 2.0)),
        [t(3, 9), t(2, 3, 4), t(2)],
    )
    check(
        "conv1d_wide",
        lambda x, w, b: ad.sum_all(ad.power(ad.conv1d(x, w, b), 2.0)),
        [t(2, 5), t(3, 2, 8), t(3)],
        eps=1e-5,
    )
    check(
        "conv1d_last",
        lambda x, w, b: ad.sum_all(ad.power(ad.conv1d_last(x, w, b), 2.0)),
        [t(3, 9), t(2, 3, 4), t(2)],
    )
    check(
        "fuse_kernels",
        lambda a, b, c: ad.sum_all(ad.power(ad.fuse_kernels([a, b, c]), 2.0)),
        [t(2, 3, 1), t(2, 3, 2), t(2, 3, 4)],
    )
    check(
        "l2_normalize_columns",
        lambda a: ad.sum_all(ad.power(ad.l2_normalize_columns(a), 2.0)),
        [t(4, 6)],
    )
    check(
        "cosine_loss",
        lambda a, b: model_mod.cosine_loss(a, b),
        [t(4, 6), t(4, 6)],
    )
    report.append(("detach", _detach_check(rng)))
    report.append(("loss_simts", _loss_check("simts", rng, seed=seed + 11)))
    report.append(
        ("loss_no_stop_gradient", _loss_check("no_stop_gradient", rng, seed=seed + 12))
    )
    report.append(
        ("loss_rev_stop_gradient", _loss_check("rev_stop_gradient", rng, seed=seed + 13))
    )
    report.append(("loss_infonce", _infonce_check(rng, seed=seed + 14)))
    return report


def run_gradcheck(seed: int = 0):
    report = gradcheck_report(seed)
    ok = all(err < TOLERANCE for _, err in report)
    return report, ok
