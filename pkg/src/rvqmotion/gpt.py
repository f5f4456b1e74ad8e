"""Two-tier autoregressive transformer over residual code matrices.

The temporal tier consumes the condition embedding followed by one summed
code-row embedding per timestep and emits a context vector per position; a
stop head reads those contexts.  The residual tier, prompted by one context
vector, emits logits for the R codes of that row, depth by depth.  Code-row
embeddings reuse the frozen quantizer codebook behind a learned projection.

Training runs through the autodiff tape; generation uses a numpy fast path
with per-layer key/value caches (TemporalState), which tests pin to the tape
path within 1e-5.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .serialization import (parse_config_text, read_mtnf_bytes,
                            read_sections, write_mtnf_bytes, write_sections)
from .tensor import Tensor

_MASK_VALUE = -1e9


@dataclass
class GptConfig:
    layers_temporal: int = 9
    layers_residual: int = 9
    d_model: int = 512
    heads: int = 16
    vocab: int = 256              # codebook size K
    depth: int = 8                # residual depth R
    n_max: int = 24               # maximum latent length
    cond_width: int = 512         # raw condition embedding width
    code_width: int = 512         # frozen codebook entry width
    dropout_rate: float = 0.1
    beta_stop: float = 1.0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")


def desk_config(**overrides) -> GptConfig:
    """Small configuration for laptop-scale runs and tests."""
    base = dict(layers_temporal=4, layers_residual=4, d_model=128, heads=4,
                vocab=64, depth=8, n_max=16, cond_width=64, code_width=64)
    base.update(overrides)
    return GptConfig(**base)


class CodeGpt:
    """Both tiers plus the stop and code heads, over a frozen codebook."""

    def __init__(self, cfg: GptConfig, code_entries: np.ndarray,
                 init_rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if code_entries.shape[1] != cfg.code_width:
            raise ValueError("codebook width does not match config")
        if code_entries.shape[0] != cfg.vocab:
            raise ValueError("codebook size does not match config vocab")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.code_entries = code_entries.astype(self.dtype)
        rng = init_rng if init_rng is not None else rngmod.stream(0, rngmod.INIT)
        self.params: dict[str, Tensor] = {}
        d = cfg.d_model
        self._add_linear(rng, "cond_proj", cfg.cond_width, d)
        self._add_linear(rng, "code_proj", cfg.code_width, d)
        self._add_table(rng, "pet", cfg.n_max + 1, d)
        self._add_table(rng, "per", cfg.depth + 1, d)
        for tier, layers in (("tmp", cfg.layers_temporal),
                             ("res", cfg.layers_residual)):
            for i in range(layers):
                p = f"{tier}.l{i}"
                self._add_ln(f"{p}.ln1")
                for m in ("wq", "wk", "wv", "wo"):
                    self._add_linear(rng, f"{p}.{m}", d, d)
                self._add_ln(f"{p}.ln2")
                self._add_linear(rng, f"{p}.ffn1", d, 4 * d)
                self._add_linear(rng, f"{p}.ffn2", 4 * d, d)
            self._add_ln(f"{tier}.final_ln")
        self._add_ln("stop.ln")
        self._add_linear(rng, "stop", d, 1)
        self._add_linear(rng, "head", d, cfg.vocab)

    # -- parameter helpers --------------------------------------------------

    def _add_linear(self, rng, name, d_in, d_out):
        self.params[f"{name}.w"] = Tensor(
            rng.normal(0.0, 0.02, size=(d_in, d_out)).astype(self.dtype),
            requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(d_out, dtype=self.dtype),
                                             requires_grad=True)

    def _add_table(self, rng, name, rows, d):
        self.params[name] = Tensor(
            rng.normal(0.0, 0.02, size=(rows, d)).astype(self.dtype),
            requires_grad=True)

    def _add_ln(self, name):
        self.params[f"{name}_gain"] = Tensor(
            np.ones(self.cfg.d_model, dtype=self.dtype), requires_grad=True)
        self.params[f"{name}_bias"] = Tensor(
            np.zeros(self.cfg.d_model, dtype=self.dtype), requires_grad=True)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- tape-path building blocks -------------------------------------------

    def _linear(self, name, x):
        return T.add_bias(T.matmul(x, self.params[f"{name}.w"]),
                          self.params[f"{name}.bias"], axis=1)

    def _ln(self, name, x):
        return T.layer_norm(x, self.params[f"{name}_gain"],
                            self.params[f"{name}_bias"])

    def _attention(self, prefix, x, train, rng):
        b, s, d = x.shape
        h = self.cfg.heads
        dh = d // h
        flat = T.reshape(x, (b * s, d))

        def heads_of(name):
            y = self._linear(f"{prefix}.{name}", flat)
            y = T.reshape(y, (b, s, h, dh))
            y = T.transpose(y, (0, 2, 1, 3))
            return T.reshape(y, (b * h, s, dh))

        q, k, v = heads_of("wq"), heads_of("wk"), heads_of("wv")
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))),
                         1.0 / np.sqrt(dh))
        mask = np.triu(np.full((s, s), _MASK_VALUE, dtype=self.dtype), k=1)
        att = T.softmax(T.add_const(scores, mask), axis=-1)
        if train and self.cfg.dropout_rate > 0:
            att = T.dropout(att, self.cfg.dropout_rate, rng)
        ctx = T.bmm(att, v)
        ctx = T.reshape(ctx, (b, h, s, dh))
        ctx = T.transpose(ctx, (0, 2, 1, 3))
        out = self._linear(f"{prefix}.wo", T.reshape(ctx, (b * s, d)))
        if train and self.cfg.dropout_rate > 0:
            out = T.dropout(out, self.cfg.dropout_rate, rng)
        return T.reshape(out, (b, s, d))

    def _block(self, prefix, x, train, rng):
        x = T.add(x, self._attention(prefix, self._ln(f"{prefix}.ln1", x),
                                     train, rng))
        b, s, d = x.shape
        hidden = T.reshape(self._ln(f"{prefix}.ln2", x), (b * s, d))
        hidden = self._linear(f"{prefix}.ffn1", hidden)
        hidden = T.gelu(hidden)
        hidden = self._linear(f"{prefix}.ffn2", hidden)
        if train and self.cfg.dropout_rate > 0:
            hidden = T.dropout(hidden, self.cfg.dropout_rate, rng)
        return T.add(x, T.reshape(hidden, (b, s, d)))

    def _run_tier(self, tier, x, train, rng):
        layers = self.cfg.layers_temporal if tier == "tmp" \
            else self.cfg.layers_residual
        for i in range(layers):
            x = self._block(f"{tier}.l{i}", x, train, rng)
        b, s, d = x.shape
        out = self._ln(f"{tier}.final_ln", T.reshape(x, (b * s, d)))
        return T.reshape(out, (b, s, d))

    def _row_sums(self, rows: np.ndarray) -> np.ndarray:
        """Sum the frozen codebook entries of each row: (m,R) -> (m, width)."""
        return self.code_entries[rows].sum(axis=1)

    # -- teacher-forced forward ----------------------------------------------

    def temporal_contexts(self, cond_vec: np.ndarray, prefix_rows: np.ndarray,
                          train: bool = False, rng=None) -> Tensor:
        """Contexts F_1..F_{m+1} from the condition and m completed rows.

        F_1 depends on the condition alone; F_k on the condition and rows
        before k.  prefix_rows: (m, R) with m <= n_max.
        """
        m = prefix_rows.shape[0]
        if m > self.cfg.n_max:
            raise ValueError(f"prefix of {m} rows exceeds n_max "
                             f"{self.cfg.n_max}")
        cond = Tensor(np.asarray(cond_vec, dtype=self.dtype)[None])
        tokens = self._linear("cond_proj", cond)
        if m:
            row_embed = Tensor(self._row_sums(prefix_rows))
            tokens = T.concat([tokens, self._linear("code_proj", row_embed)],
                              axis=0)
        pos = T.embedding_lookup(self.params["pet"], np.arange(m + 1))
        x = T.reshape(T.add(tokens, pos), (1, m + 1, self.cfg.d_model))
        out = self._run_tier("tmp", x, train, rng)
        return T.reshape(out, (m + 1, self.cfg.d_model))

    def stop_logits(self, contexts: Tensor) -> Tensor:
        """Per-timestep stop logits from context vectors (t, d) -> (t,)."""
        h = self._ln("stop.ln", contexts)
        return T.reshape(self._linear("stop", h), (contexts.shape[0],))

    def residual_logits_teacher(self, contexts: Tensor, rows: np.ndarray,
                                train: bool = False, rng=None) -> Tensor:
        """Logits for every (row, depth) in one batched pass: (n, R, K).

        Row t's sequence is [F_t, v_{t,1} .. v_{t,R-1}]; output position w-1
        predicts depth w.  The depth positional table is shared across rows;
        the context prompt takes its index-0 entry.
        """
        n, depth = rows.shape
        d = self.cfg.d_model
        ctx = T.reshape(contexts, (n, 1, d))
        if depth > 1:
            flat_codes = rows[:, :-1].reshape(-1)
            emb = Tensor(self.code_entries[flat_codes])
            code_tok = T.reshape(self._linear("code_proj", emb),
                                 (n, depth - 1, d))
            tokens = T.concat([ctx, code_tok], axis=1)
        else:
            tokens = ctx
        pos_idx = np.broadcast_to(np.arange(depth), (n, depth))
        x = T.add(tokens, T.embedding_lookup(self.params["per"], pos_idx))
        out = self._run_tier("res", x, train, rng)
        logits = self._linear("head", T.reshape(out, (n * depth, d)))
        return T.reshape(logits, (n, depth, self.cfg.vocab))

    def sequence_nll(self, cond_vec: np.ndarray, target_rows: np.ndarray,
                     input_rows: np.ndarray | None = None,
                     train: bool = False, rng=None) -> Tensor:
        """Summed negative log-likelihood of a code matrix (teacher-forced).

        input_rows lets corrupted rows feed the model while the loss targets
        stay clean; it defaults to the targets themselves.
        """
        if input_rows is None:
            input_rows = target_rows
        n, depth = target_rows.shape
        if depth != self.cfg.depth:
            raise ValueError(f"code depth {depth} != config depth "
                             f"{self.cfg.depth}")
        contexts = self.temporal_contexts(cond_vec, input_rows[:-1],
                                          train=train, rng=rng)
        logits = self.residual_logits_teacher(contexts, input_rows,
                                              train=train, rng=rng)
        flat = T.reshape(logits, (n * depth, self.cfg.vocab))
        return T.cross_entropy_from_logits(flat, target_rows.reshape(-1),
                                           reduction="sum")

    def total_loss(self, cond_vec: np.ndarray, target_rows: np.ndarray,
                   stop_labels: np.ndarray, input_rows: np.ndarray | None = None,
                   train: bool = False, rng=None) -> dict[str, Tensor]:
        """NLL plus weighted stop loss; stop labels mark exactly the last row."""
        stop_labels = np.asarray(stop_labels, dtype=self.dtype)
        if stop_labels.shape != (target_rows.shape[0],):
            raise ValueError("stop labels must be per-timestep")
        positives = np.flatnonzero(stop_labels > 0.5)
        if len(positives) != 1 or positives[0] != len(stop_labels) - 1:
            raise ValueError("stop labels must have exactly one positive, "
                             "at the final timestep")
        if input_rows is None:
            input_rows = target_rows
        n, depth = target_rows.shape
        contexts = self.temporal_contexts(cond_vec, input_rows[:-1],
                                          train=train, rng=rng)
        logits = self.residual_logits_teacher(contexts, input_rows,
                                              train=train, rng=rng)
        flat = T.reshape(logits, (n * depth, self.cfg.vocab))
        nll = T.cross_entropy_from_logits(flat, target_rows.reshape(-1),
                                          reduction="sum")
        stop = T.binary_cross_entropy_from_logits(
            self.stop_logits(contexts), stop_labels, reduction="sum")
        total = T.add(nll, T.scale(stop, self.cfg.beta_stop)) \
            if self.cfg.beta_stop != 0 else nll
        return {"nll": nll, "stop": stop, "total": total,
                "tokens": n * depth}

    # -- numpy inference path -------------------------------------------------

    def _w(self, name):
        return self.params[name].data

    def _np_linear(self, name, x):
        return x @ self._w(f"{name}.w") + self._w(f"{name}.bias")

    def _np_ln(self, name, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + 1e-5)
        return xhat * self._w(f"{name}_gain") + self._w(f"{name}_bias")

    @staticmethod
    def _np_gelu(x):
        c = np.sqrt(2.0 / np.pi)
        t = np.tanh(c * (x + 0.044715 * x ** 3))
        return 0.5 * x * (1.0 + t)

    @staticmethod
    def _np_softmax(x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    def _np_block_step(self, prefix, x, cache):
        """Advance one block by one token using the layer cache."""
        h = self.cfg.heads
        d = self.cfg.d_model
        dh = d // h
        a_in = self._np_ln(f"{prefix}.ln1", x)
        q = self._np_linear(f"{prefix}.wq", a_in).reshape(h, dh)
        k = self._np_linear(f"{prefix}.wk", a_in).reshape(h, 1, dh)
        v = self._np_linear(f"{prefix}.wv", a_in).reshape(h, 1, dh)
        if cache["k"] is None:
            cache["k"], cache["v"] = k, v
        else:
            cache["k"] = np.concatenate([cache["k"], k], axis=1)
            cache["v"] = np.concatenate([cache["v"], v], axis=1)
        scores = np.einsum("hd,hsd->hs", q, cache["k"]) / np.sqrt(dh)
        att = self._np_softmax(scores, axis=-1)
        ctx = np.einsum("hs,hsd->hd", att, cache["v"]).reshape(d)
        x = x + self._np_linear(f"{prefix}.wo", ctx)
        f_in = self._np_ln(f"{prefix}.ln2", x)
        f = self._np_linear(f"{prefix}.ffn2",
                            self._np_gelu(self._np_linear(f"{prefix}.ffn1", f_in)))
        return x + f

    def new_stream(self) -> "TemporalState":
        return TemporalState(layers=[{"k": None, "v": None}
                                     for _ in range(self.cfg.layers_temporal)])

    def prime_stream(self, state: "TemporalState",
                     cond_vec: np.ndarray) -> np.ndarray:
        """Feed the condition token; returns the first context F_1."""
        token = (np.asarray(cond_vec, dtype=self.dtype) @ self._w("cond_proj.w")
                 + self._w("cond_proj.bias")) + self._w("pet")[0]
        return self._temporal_token(state, token)

    def advance_stream(self, state: "TemporalState",
                       row: np.ndarray) -> np.ndarray:
        """Feed one completed code row; returns the next context."""
        if state.position > self.cfg.n_max:
            raise ValueError("stream exceeded n_max positions")
        summed = self.code_entries[np.asarray(row, dtype=np.int64)].sum(axis=0)
        token = (summed @ self._w("code_proj.w") + self._w("code_proj.bias")
                 + self._w("pet")[state.position])
        return self._temporal_token(state, token)

    def _temporal_token(self, state: "TemporalState",
                        token: np.ndarray) -> np.ndarray:
        x = token.astype(self.dtype)
        for i in range(self.cfg.layers_temporal):
            x = self._np_block_step(f"tmp.l{i}", x, state.layers[i])
        state.position += 1
        return self._np_ln("tmp.final_ln", x)

    def stop_logit_value(self, context: np.ndarray) -> float:
        h = self._np_ln("stop.ln", context)
        return float(h @ self._w("stop.w") + self._w("stop.bias"))

    def residual_logits_step(self, context: np.ndarray,
                             prefix_codes) -> np.ndarray:
        """Logits over K for the next depth given codes at shallower depths.

        Rebuilds the short (<= R token) row sequence each call; the temporal
        tier is the one that warrants a cache.
        """
        prefix_codes = list(prefix_codes)
        if len(prefix_codes) >= self.cfg.depth:
            raise ValueError("residual prefix already has R codes")
        d = self.cfg.d_model
        s = len(prefix_codes) + 1
        x = np.empty((s, d), dtype=self.dtype)
        x[0] = context + self._w("per")[0]
        for w, code in enumerate(prefix_codes, start=1):
            x[w] = (self.code_entries[code] @ self._w("code_proj.w")
                    + self._w("code_proj.bias") + self._w("per")[w])
        h = self.cfg.heads
        dh = d // h
        mask = np.triu(np.full((s, s), _MASK_VALUE, dtype=self.dtype), k=1)
        for i in range(self.cfg.layers_residual):
            prefix = f"res.l{i}"
            a_in = self._np_ln(f"{prefix}.ln1", x)
            q = self._np_linear(f"{prefix}.wq", a_in).reshape(s, h, dh)
            k = self._np_linear(f"{prefix}.wk", a_in).reshape(s, h, dh)
            v = self._np_linear(f"{prefix}.wv", a_in).reshape(s, h, dh)
            scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
            att = self._np_softmax(scores + mask, axis=-1)
            ctx = np.einsum("hqk,khd->qhd", att, v).reshape(s, d)
            x = x + self._np_linear(f"{prefix}.wo", ctx)
            f_in = self._np_ln(f"{prefix}.ln2", x)
            x = x + self._np_linear(
                f"{prefix}.ffn2",
                self._np_gelu(self._np_linear(f"{prefix}.ffn1", f_in)))
        out = self._np_ln("res.final_ln", x[-1])
        return out @ self._w("head.w") + self._w("head.bias")


@dataclass
class TemporalState:
    """Per-layer attention key/value cache for one decoding stream."""
    layers: list[dict]
    position: int = 0


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_gpt_checkpoint(path, model: CodeGpt) -> None:
    cfg_text = "\n".join(f"{k}={v}" for k, v in asdict(model.cfg).items())
    sections = {"config": cfg_text.encode("utf-8"),
                "code_entries": write_mtnf_bytes(model.code_entries)}
    for name, tensor in model.params.items():
        sections[f"weights/{name}"] = write_mtnf_bytes(tensor.data)
    write_sections(path, sections)


def load_gpt_checkpoint(path) -> CodeGpt:
    sections = read_sections(path)
    raw = parse_config_text(sections["config"].decode("utf-8"))
    cfg = GptConfig(
        layers_temporal=int(raw["layers_temporal"]),
        layers_residual=int(raw["layers_residual"]),
        d_model=int(raw["d_model"]),
        heads=int(raw["heads"]),
        vocab=int(raw["vocab"]),
        depth=int(raw["depth"]),
        n_max=int(raw["n_max"]),
        cond_width=int(raw["cond_width"]),
        code_width=int(raw["code_width"]),
        dropout_rate=float(raw["dropout_rate"]),
        beta_stop=float(raw["beta_stop"]),
    )
    entries = read_mtnf_bytes(sections["code_entries"])
    model = CodeGpt(cfg, entries)
    for name, tensor in model.params.items():
        tensor.data = read_mtnf_bytes(sections[f"weights/{name}"])
    return model
