"""Guided autoregressive sampling of code matrices.

Generation runs two decoding streams, one fed the condition embedding and
one fed the zero (null) embedding, mixes their logits per the guidance
scale, and samples row by row, depth by depth.  Length is decided after the
fact: the row whose stop probability is highest inside [n_min, n_max] wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .gpt import CodeGpt
from .rvq import CodeMatrix
from .tensor import ShapeError


@dataclass
class GenerationConfig:
    guidance_scale: float = 4.0
    temperature: float = 1.0
    seed: int = 0
    n_max: int = 24
    n_min: int = 1
    greedy: bool = False

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")


def cfg_mix(g_cond: np.ndarray, g_uncond: np.ndarray,
            guidance_scale: float) -> np.ndarray:
    """g_uncond + scale * (g_cond - g_uncond).

    The scale-0 and scale-1 cases return the corresponding operand directly
    so the identities hold bit-exactly rather than up to rounding.
    """
    g_cond = np.asarray(g_cond)
    g_uncond = np.asarray(g_uncond)
    if g_cond.shape != g_uncond.shape:
        raise ShapeError(f"cfg_mix: shape mismatch {g_cond.shape} vs "
                         f"{g_uncond.shape}")
    if guidance_scale == 1.0:
        return g_cond.copy()
    if guidance_scale == 0.0:
        return g_uncond.copy()
    return g_uncond + guidance_scale * (g_cond - g_uncond)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class GenerationResult:
    codes: CodeMatrix            # truncated at the chosen stop position
    stop_position: int           # 1-based row count kept
    stop_probs: np.ndarray       # (n_max,) mixed stop probabilities
    token_nll: np.ndarray        # (stop_position, R); conditional model only
    all_rows: np.ndarray         # (n_max, R) before truncation


def generate(model: CodeGpt, cond_vec: np.ndarray,
             gen: GenerationConfig) -> GenerationResult:
    """Sample a code matrix for one condition embedding.

    Fully deterministic given the seed: randomness flows only through one
    counter-based stream consumed in a fixed order.
    """
    if gen.n_max > model.cfg.n_max:
        raise ValueError(f"generation length {gen.n_max} exceeds the model's "
                         f"trained maximum {model.cfg.n_max}")
    cond_vec = np.asarray(cond_vec, dtype=model.dtype)
    depth = model.cfg.depth
    vocab = model.cfg.vocab
    rng = rngmod.stream(gen.seed, rngmod.SAMPLE)

    stream_c = model.new_stream()
    stream_u = model.new_stream()
    ctx_c = model.prime_stream(stream_c, cond_vec)
    ctx_u = model.prime_stream(stream_u, np.zeros_like(cond_vec))

    rows = np.empty((gen.n_max, depth), dtype=np.int64)
    stop_probs = np.empty(gen.n_max, dtype=np.float64)
    token_nll = np.empty((gen.n_max, depth), dtype=np.float64)

    for t in range(gen.n_max):
        stop_mixed = cfg_mix(np.array([model.stop_logit_value(ctx_c)]),
                             np.array([model.stop_logit_value(ctx_u)]),
                             gen.guidance_scale)[0]
        stop_probs[t] = 1.0 / (1.0 + np.exp(-stop_mixed))
        prefix: list[int] = []
        for w in range(depth):
            logits_c = model.residual_logits_step(ctx_c, prefix)
            logits_u = model.residual_logits_step(ctx_u, prefix)
            mixed = cfg_mix(logits_c, logits_u, gen.guidance_scale)
            if gen.greedy:
                choice = int(np.argmax(mixed))
            else:
                scaled = mixed.astype(np.float64) / gen.temperature
                probs = np.exp(scaled - scaled.max())
                probs /= probs.sum()
                choice = int(np.searchsorted(np.cumsum(probs), rng.random()))
                choice = min(choice, vocab - 1)
            token_nll[t, w] = -_log_softmax(logits_c)[choice]
            prefix.append(choice)
        rows[t] = prefix
        if t + 1 < gen.n_max:
            ctx_c = model.advance_stream(stream_c, rows[t])
            ctx_u = model.advance_stream(stream_u, rows[t])

    window = stop_probs[gen.n_min - 1:gen.n_max]
    stop_position = gen.n_min + int(np.argmax(window))
    return GenerationResult(codes=CodeMatrix(rows[:stop_position].copy()),
                            stop_position=stop_position,
                            stop_probs=stop_probs,
                            token_nll=token_nll[:stop_position].copy(),
                            all_rows=rows)
