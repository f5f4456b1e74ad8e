"""Attention-cost accounting: two-tier layout versus a flattened single tier.

Counting convention (documented in the CSV header): a layer processing an
S-token sequence is charged S*S query/key pairs, the dense score grid a
vanilla masked implementation materialises.  The temporal tier is charged
for its n code-row tokens (the prepended condition token's extra pairs are
reported separately as cond_token_offset); the residual tier is charged for
R code tokens plus its prepended context prompt, i.e. (R+1)^2 per row.  The
flattened baseline unrolls the code matrix into n*R tokens through all H
layers.
"""

from __future__ import annotations

import time

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .gpt import CodeGpt, GptConfig
from .tensor import Tensor


def _check_even(h_layers: int) -> None:
    if h_layers < 2 or h_layers % 2:
        raise ValueError("layer count must be even (split across two tiers)")


def count_pairs_double(h_layers: int, n: int, r: int) -> int:
    """(H/2) * n^2 + (H/2) * n * (R+1)^2."""
    _check_even(h_layers)
    half = h_layers // 2
    return half * n * n + half * n * (r + 1) * (r + 1)


def count_pairs_flat(h_layers: int, n: int, r: int) -> int:
    """H * (n*R)^2 for the single-tier unrolled layout."""
    return h_layers * (n * r) ** 2


def cond_token_offset(h_layers: int, n: int) -> int:
    """Extra temporal-tier pairs if the condition token is also charged."""
    _check_even(h_layers)
    return (h_layers // 2) * ((n + 1) ** 2 - n * n)


def enumerate_pairs_double(h_layers: int, n: int, r: int) -> int:
    """Literal loop over layers, rows and score-grid cells."""
    _check_even(h_layers)
    total = 0
    for _layer in range(h_layers // 2):
        for _q in range(n):
            for _k in range(n):
                total += 1
    for _layer in range(h_layers // 2):
        for _row in range(n):
            for _q in range(r + 1):
                for _k in range(r + 1):
                    total += 1
    return total


def enumerate_pairs_flat(h_layers: int, n: int, r: int) -> int:
    total = 0
    for _layer in range(h_layers):
        for _q in range(n * r):
            for _k in range(n * r):
                total += 1
    return total


# ---------------------------------------------------------------------------
# wall-clock comparison on matched-parameter toy models
# ---------------------------------------------------------------------------

def _toy_double(h_layers: int, n: int, r: int, d_model: int,
                vocab: int) -> CodeGpt:
    cfg = GptConfig(layers_temporal=h_layers // 2,
                    layers_residual=h_layers // 2, d_model=d_model,
                    heads=4, vocab=vocab, depth=r, n_max=n,
                    cond_width=d_model, code_width=d_model,
                    dropout_rate=0.0)
    entries = rngmod.stream(0, rngmod.INIT, 9).normal(
        0, 1, size=(vocab, d_model)).astype(np.float32)
    return CodeGpt(cfg, entries, init_rng=rngmod.stream(0, rngmod.INIT, 10))


def _time_double(model: CodeGpt, rows: np.ndarray, cond: np.ndarray,
                 repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        contexts = model.temporal_contexts(cond, rows[:-1])
        model.residual_logits_teacher(contexts, rows)
        best = min(best, time.perf_counter() - start)
    return best


def _flat_forward(model: CodeGpt, flat_codes: np.ndarray,
                  cond: np.ndarray) -> None:
    """Single-tier forward: condition + every code as its own token, run
    through the model's temporal blocks (its layer count stands in for H)."""
    d = model.cfg.d_model
    cond_tok = model._linear("cond_proj", Tensor(cond[None]))
    emb = Tensor(model.code_entries[flat_codes])
    toks = T.concat([cond_tok, model._linear("code_proj", emb)], axis=0)
    s = flat_codes.size + 1
    x = T.reshape(toks, (1, s, d))
    for i in range(model.cfg.layers_temporal):
        x = model._block(f"tmp.l{i}", x, False, None)
    model._linear("head", T.reshape(x, (s, d)))


def _toy_flat(h_layers: int, n: int, r: int, d_model: int,
              vocab: int) -> CodeGpt:
    cfg = GptConfig(layers_temporal=h_layers, layers_residual=0,
                    d_model=d_model, heads=4, vocab=vocab, depth=r,
                    n_max=n * r + 1, cond_width=d_model, code_width=d_model,
                    dropout_rate=0.0)
    entries = rngmod.stream(0, rngmod.INIT, 9).normal(
        0, 1, size=(vocab, d_model)).astype(np.float32)
    return CodeGpt(cfg, entries, init_rng=rngmod.stream(0, rngmod.INIT, 11))


def _time_flat(model: CodeGpt, flat_codes: np.ndarray, cond: np.ndarray,
               repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        _flat_forward(model, flat_codes, cond)
        best = min(best, time.perf_counter() - start)
    return best


def bench_attention(configs, d_model: int = 64, vocab: int = 64,
                    time_models: bool = True, repeats: int = 3) -> list[dict]:
    """One row per (H, n, R): exact pair counts and optional wall-clock."""
    rows = []
    for h_layers, n, r in configs:
        double = count_pairs_double(h_layers, n, r)
        flat = count_pairs_flat(h_layers, n, r)
        row = {
            "h": h_layers, "n": n, "r": r,
            "pairs_temporal": (h_layers // 2) * n * n,
            "pairs_residual": (h_layers // 2) * n * (r + 1) ** 2,
            "pairs_double": double,
            "pairs_flat": flat,
            "ratio": flat / double,
            "cond_token_offset": cond_token_offset(h_layers, n),
        }
        if time_models:
            rng = rngmod.stream(1, rngmod.DATA, 3)
            codes = rng.integers(0, vocab, size=(n, r))
            cond = rng.normal(size=d_model).astype(np.float32)
            dbl = _toy_double(h_layers, n, r, d_model, vocab)
            flt = _toy_flat(h_layers, n, r, d_model, vocab)
            row["time_double_ms"] = 1e3 * _time_double(dbl, codes, cond, repeats)
            row["time_flat_ms"] = 1e3 * _time_flat(flt, codes.reshape(-1),
                                                   cond, repeats)
        rows.append(row)
    return rows


_CSV_FIELDS = ("h", "n", "r", "pairs_temporal", "pairs_residual",
               "pairs_double", "pairs_flat", "ratio", "cond_token_offset",
               "time_double_ms", "time_flat_ms")


def rows_to_csv(rows: list[dict]) -> str:
    """CSV with '.' decimals and LF endings; header documents the convention."""
    out = [
        "# attention pair counts: temporal tier charged n^2 per layer "
        "(condition token excluded; see cond_token_offset),",
        "# residual tier charged n*(R+1)^2 per layer (context prompt "
        "included); flat baseline H*(n*R)^2.",
    ]
    fields = [f for f in _CSV_FIELDS if any(f in r for r in rows)]
    out.append(",".join(fields))
    for row in rows:
        cells = []
        for f in fields:
            v = row.get(f, "")
            cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------

def flat_parameter_count(cfg: GptConfig, context_len: int) -> int:
    """Formula count for an equal-layer single-tier model: H transformer
    blocks, a K x d token embedding, learned positions over the unrolled
    context, the condition projection, a final norm and the output head."""
    d = cfg.d_model
    h_layers = cfg.layers_temporal + cfg.layers_residual
    block = (2 * 2 * d) + 4 * (d * d + d) + (d * 4 * d + 4 * d) \
        + (4 * d * d + d)
    total = h_layers * block
    total += cfg.vocab * d                     # token embedding
    total += (context_len + 1) * d             # positions incl. condition slot
    total += cfg.cond_width * d + d            # condition projection
    total += 2 * d                             # final layer norm
    total += d * cfg.vocab + cfg.vocab         # output head
    return total
