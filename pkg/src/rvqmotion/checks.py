"""Gradient-check battery: every primitive, then the full composite losses.

Quantization decisions are frozen at the base point when checking the
autoencoder loss: the straight-through estimator deliberately propagates an
identity gradient through the (piecewise-constant) quantizer, so the oracle
differentiates the surrogate with the base point's code selection and offset
held fixed.  That surrogate has the same value and the same reverse-mode
gradient as the training loss at the base point.
"""

from __future__ import annotations

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .gpt import CodeGpt, GptConfig
from .gradcheck import GradCheckReport, grad_check
from .motion import SkeletonSpec
from .rvq import Codebook, commitment_loss, quantize_residual
from .tensor import Tensor
from .vae import MotionVae, VaeConfig, recon_loss


def _rng(sub):
    return rngmod.stream(20_240_101, rngmod.INIT, sub)


def _const(arr, ts):
    return Tensor(np.asarray(arr, dtype=ts[0].dtype.type))


def _weighted_mean(x, weights, ts):
    return T.mean(T.mul(x, _const(weights, ts)))


def _primitive_cases(dtype):
    """(name, params, build) triples covering every differentiable op."""
    rng = _rng(0)
    cases = []

    a = rng.normal(size=(3, 4)).astype(dtype)
    b = rng.normal(size=(4, 2)).astype(dtype)
    cases.append(("matmul", [("a", a), ("b", b)],
                  lambda ts: T.mean(T.matmul(ts[0], ts[1]))))

    x3 = rng.normal(size=(2, 3, 10)).astype(dtype)
    w3 = rng.normal(size=(4, 3, 3)).astype(dtype)
    bias = rng.normal(size=4).astype(dtype)
    wgt_conv = rng.normal(size=(2, 4, 4))
    cases.append(("conv1d", [("x", x3), ("w", w3), ("bias", bias)],
                  lambda ts: _weighted_mean(
                      T.conv1d(ts[0], ts[1], ts[2], stride=2, dilation=3,
                               padding=3), wgt_conv, ts)))

    xu = rng.normal(size=(1, 2, 5)).astype(dtype)
    wgt_up = rng.normal(size=(1, 2, 15))
    cases.append(("nearest_upsample", [("x", xu)],
                  lambda ts: _weighted_mean(T.nearest_upsample(ts[0], 3),
                                            wgt_up, ts)))

    # keep |x| > 0.2 so finite differences never straddle the ReLU kink
    xr = rng.normal(size=(4, 5)).astype(dtype)
    xr += np.sign(xr) * 0.2
    wgt_r = rng.normal(size=(4, 5))
    cases.append(("relu", [("x", xr)],
                  lambda ts: _weighted_mean(T.relu(ts[0]), wgt_r, ts)))
    cases.append(("gelu", [("x", xr)],
                  lambda ts: _weighted_mean(T.gelu(ts[0]), wgt_r, ts)))
    cases.append(("sigmoid", [("x", xr)],
                  lambda ts: _weighted_mean(T.sigmoid(ts[0]), wgt_r, ts)))
    cases.append(("softmax", [("x", xr)],
                  lambda ts: _weighted_mean(T.softmax(ts[0], axis=-1),
                                            wgt_r, ts)))

    xl = rng.normal(size=(3, 6)).astype(dtype)
    gain = (1.0 + 0.1 * rng.normal(size=6)).astype(dtype)
    lbias = rng.normal(size=6).astype(dtype)
    wgt_l = rng.normal(size=(3, 6))
    cases.append(("layer_norm", [("x", xl), ("gain", gain), ("bias", lbias)],
                  lambda ts: _weighted_mean(
                      T.layer_norm(ts[0], ts[1], ts[2]), wgt_l, ts)))
    cases.append(("add_bias", [("x", xl), ("bias", lbias)],
                  lambda ts: _weighted_mean(T.add_bias(ts[0], ts[1], axis=1),
                                            wgt_l, ts)))

    table = rng.normal(size=(6, 3)).astype(dtype)
    idx = np.array([0, 2, 2, 5, 1])
    wgt_e = rng.normal(size=(5, 3))
    cases.append(("embedding_lookup", [("table", table)],
                  lambda ts: _weighted_mean(T.embedding_lookup(ts[0], idx),
                                            wgt_e, ts)))

    ab = rng.normal(size=(2, 3, 4)).astype(dtype)
    bb = rng.normal(size=(2, 4, 3)).astype(dtype)
    wgt_b = rng.normal(size=(2, 3, 3))
    cases.append(("bmm", [("a", ab), ("b", bb)],
                  lambda ts: _weighted_mean(T.bmm(ts[0], ts[1]), wgt_b, ts)))

    xs = rng.normal(size=(2, 5, 3)).astype(dtype)
    wgt_s = rng.normal(size=(3, 2, 2))
    cases.append(("structure", [("x", xs)],
                  lambda ts: _weighted_mean(
                      T.transpose(T.concat(
                          [T.slice_axis(ts[0], 1, 0, 1),
                           T.slice_axis(ts[0], 1, 3, 4)], axis=1),
                          (1, 0, 2)), wgt_s, ts)))

    # diffs seeded away from the smooth-L1 kink at |d| == 1
    p = rng.normal(size=(3, 4)).astype(dtype)
    q = (p + 0.4 * rng.uniform(-1, 1, size=(3, 4))).astype(dtype)
    cases.append(("smooth_l1", [("pred", p), ("target", q)],
                  lambda ts: T.smooth_l1(ts[0], ts[1])))

    logits = rng.normal(size=(5, 7)).astype(dtype)
    targets = rng.integers(0, 7, size=5)
    cases.append(("cross_entropy_from_logits", [("logits", logits)],
                  lambda ts: T.cross_entropy_from_logits(ts[0], targets)))

    zb = rng.normal(size=(8,)).astype(dtype)
    yb = rng.integers(0, 2, size=8).astype(np.float64)
    cases.append(("binary_cross_entropy_from_logits", [("logits", zb)],
                  lambda ts: T.binary_cross_entropy_from_logits(ts[0], yb)))

    xd = rng.normal(size=(4, 6)).astype(dtype)
    wgt_d = rng.normal(size=(4, 6))

    def drop_build(ts):
        drop_rng = rngmod.stream(7, rngmod.DROPOUT)   # same mask every eval
        return _weighted_mean(T.dropout(ts[0], 0.3, drop_rng), wgt_d, ts)

    cases.append(("dropout", [("x", xd)], drop_build))

    zst = rng.normal(size=(4, 3)).astype(dtype)
    offset = rng.normal(scale=0.1, size=(4, 3))
    wgt_st = rng.normal(size=(4, 3))
    cases.append(("straight_through", [("z", zst)],
                  lambda ts: _weighted_mean(
                      T.straight_through(
                          ts[0], ts[0].data + offset.astype(ts[0].dtype.type)),
                      wgt_st, ts)))

    xe = rng.normal(size=(3, 3)).astype(dtype)
    cases.append(("elementwise", [("x", xe)],
                  lambda ts: T.sum_all(T.add(
                      T.scale(T.mul(ts[0], ts[0]), 0.5),
                      T.neg(T.sub(ts[0], 1.5))))))
    return cases


# ---------------------------------------------------------------------------
# composite losses
# ---------------------------------------------------------------------------

_TOY_SKELETON = SkeletonSpec(joint_count=2,
                             position_slices=((0, 3), (3, 6)),
                             bone_pairs=((0, 1),),
                             feature_width=6)


def _swap_params(model, tensors, names):
    return {name: t for name, t in zip(names, tensors)}


def vae_loss_case(dtype):
    """Full autoencoder loss with base-point-frozen quantization."""
    cfg = VaeConfig(downsample_stages=2, channels=4, dilation=3,
                    codebook_size=5, code_width=3, depth=2,
                    beta_commit=0.02, reset_interval=0)
    frames64 = _rng(1).normal(size=(1, 8, 6))
    models: dict = {}

    def model_for(dt):
        if dt not in models:
            m = MotionVae(_TOY_SKELETON, cfg, init_rng=_rng(2), dtype=dt)
            models[dt] = m
        return models[dt]

    native = model_for(np.dtype(dtype))
    xn_native = native.normalize(frames64[0])[None]
    z0 = native.encode(Tensor(xn_native))
    z0_flat = z0.data.reshape(-1, cfg.code_width)
    codebook = Codebook.initialise(cfg.codebook_size, cfg.code_width,
                                   _rng(3), dtype=dtype)
    qr0 = quantize_residual(z0_flat, codebook, cfg.depth)
    offset0 = (qr0.quantized - z0_flat).astype(np.float64)
    psums0 = qr0.partial_sums.astype(np.float64)
    names = list(native.params)
    params = [(n, native.params[n].data) for n in names]

    def build(ts):
        dt = ts[0].dtype
        model = model_for(dt)
        old = model.params
        model.params = _swap_params(model, ts, names)
        try:
            xn = xn_native.astype(dt.type)
            z = model.encode(Tensor(xn))
            b, n, d = z.shape
            z_flat = T.reshape(z, (b * n, d))
            zq = T.straight_through(z_flat,
                                    z_flat.data + offset0.astype(dt.type))
            x_re = model.decode(T.reshape(zq, (b, n, d)))
            terms = recon_loss(xn[:, :n * cfg.rate], x_re, _TOY_SKELETON, cfg)
            commit = commitment_loss(z_flat, psums0.astype(dt.type),
                                     cfg.commit_mode)
            return T.add(terms["total"], T.scale(commit, cfg.beta_commit))
        finally:
            model.params = old

    return params, build


def gpt_loss_case(dtype):
    """Full generator loss (code NLL plus weighted stop loss)."""
    cfg = GptConfig(layers_temporal=1, layers_residual=1, d_model=8,
                    heads=2, vocab=5, depth=2, n_max=4, cond_width=4,
                    code_width=3, dropout_rate=0.0, beta_stop=1.0)
    entries64 = _rng(4).normal(size=(5, 3))
    rows = _rng(5).integers(0, 5, size=(3, 2))
    cond64 = _rng(6).normal(size=4)
    labels = np.zeros(3)
    labels[-1] = 1.0
    models: dict = {}

    def model_for(dt):
        if dt not in models:
            models[dt] = CodeGpt(cfg, entries64.astype(dt), init_rng=_rng(7),
                                 dtype=dt)
        return models[dt]

    native = model_for(np.dtype(dtype))
    names = list(native.params)
    params = [(n, native.params[n].data) for n in names]

    def build(ts):
        dt = ts[0].dtype
        model = model_for(dt)
        old = model.params
        model.params = _swap_params(model, ts, names)
        try:
            return model.total_loss(cond64.astype(dt.type), rows,
                                    labels)["total"]
        finally:
            model.params = old

    return params, build


def gradient_battery(dtype=np.float64, tol: float | None = None,
                     max_entries: int | None = None
                     ) -> list[tuple[str, GradCheckReport]]:
    """Run every check at the given precision; returns (name, report) pairs."""
    dtype = np.dtype(dtype)
    if tol is None:
        tol = 1e-6 if dtype == np.float64 else 1e-4
    results = []
    for name, params, build in _primitive_cases(dtype):
        results.append((name, grad_check(build, params, tol=tol,
                                         max_entries=max_entries)))
    for name, case in (("vae_loss", vae_loss_case),
                       ("gpt_loss", gpt_loss_case)):
        params, build = case(dtype)
        results.append((name, grad_check(build, params, tol=tol,
                                         max_entries=max_entries)))
    return results
