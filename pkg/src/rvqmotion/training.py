"""Training loop for the code generator: corruption augmentation, condition
dropout, and the teacher-forced optimisation step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .gpt import CodeGpt
from .optim import AdamW, cosine_lr
from .serialization import read_manifest, read_mtnf, read_rvqs
from .tensor import Tape

CORRUPTION_MODES = ("none", "per-code", "per-time")


@dataclass
class TrainAugConfig:
    corruption_fraction: float = 0.5      # tau
    corruption_mode: str = "per-time"
    p_drop: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise ValueError("corruption_fraction must lie in [0,1]")
        if self.corruption_mode not in CORRUPTION_MODES:
            raise ValueError(f"corruption_mode must be one of "
                             f"{CORRUPTION_MODES}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0,1]")


def corrupt_codes(rows: np.ndarray, cfg: TrainAugConfig, vocab: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Randomize part of a code matrix; returns (corrupted, touched-row mask).

    per-time replaces floor(tau*n) whole rows (every depth of each selected
    timestep) with uniform draws; per-code replaces floor(tau*n*R) individual
    cells.  Untouched entries are preserved exactly and the caller's loss
    targets always remain the original matrix.
    """
    n, depth = rows.shape
    out = rows.copy()
    touched = np.zeros(n, dtype=bool)
    if cfg.corruption_mode == "none":
        return out, touched
    if cfg.corruption_mode == "per-time":
        count = int(cfg.corruption_fraction * n)
        if count:
            picks = rng.choice(n, size=count, replace=False)
            out[picks] = rng.integers(0, vocab, size=(count, depth))
            touched[picks] = True
        return out, touched
    count = int(cfg.corruption_fraction * n * depth)
    if count:
        cells = rng.choice(n * depth, size=count, replace=False)
        flat = out.reshape(-1)
        flat[cells] = rng.integers(0, vocab, size=count)
        touched[np.unique(cells // depth)] = True
    return out, touched


def dropout_condition(cond_vec: np.ndarray, p_drop: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Return the zero (null) embedding with probability p_drop, else the
    embedding unchanged.  p_drop 0 and 1 behave exactly, not just in law."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0,1]")
    if rng.random() >= p_drop:
        return cond_vec
    return np.zeros_like(cond_vec)


@dataclass
class GptTrainConfig:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    log_interval: int = 200


def stop_labels_for(n: int) -> np.ndarray:
    y = np.zeros(n, dtype=np.float32)
    y[-1] = 1.0
    return y


def gpt_train_step(model: CodeGpt, batch, optimizer: AdamW, lr: float,
                   aug: TrainAugConfig, rng_corrupt, rng_drop, rng_dropout,
                   batch_id: str = "?") -> dict[str, float]:
    """One step over a batch of (cond_vec, rows) pairs.

    Inputs are corrupted and condition-dropped per sample; loss targets stay
    clean.  Per-sequence losses are averaged over the batch.
    """
    total = None
    nll_value = 0.0
    stop_value = 0.0
    tokens = 0
    try:
        with Tape() as tape:
            for cond_vec, rows in batch:
                cond_in = dropout_condition(cond_vec, aug.p_drop, rng_drop)
                corrupted, _ = corrupt_codes(rows, aug, model.cfg.vocab,
                                             rng_corrupt)
                terms = model.total_loss(cond_in, rows, stop_labels_for(len(rows)),
                                         input_rows=corrupted, train=True,
                                         rng=rng_dropout)
                total = terms["total"] if total is None \
                    else T.add(total, terms["total"])
                nll_value += terms["nll"].item()
                stop_value += terms["stop"].item()
                tokens += terms["tokens"]
            loss = T.scale(total, 1.0 / len(batch))
        tape.backward(loss)
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"batch {batch_id}: {exc}") from exc
    optimizer.step(lr)
    optimizer.zero_grad()
    return {"total": loss.item(), "nll_per_token": nll_value / tokens,
            "stop": stop_value / len(batch)}


def load_codes_dataset(manifest_path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read a codes manifest: rows of (embedding vector, code matrix)."""
    manifest = read_manifest(manifest_path)
    data = []
    for rec in manifest:
        rows = read_rvqs(rec.motion_path)   # codes path sits in column one
        cond = read_mtnf(rec.embedding_path)
        data.append((cond.astype(np.float32), rows))
    return data


def train_gpt(model: CodeGpt, dataset, tcfg: GptTrainConfig,
              aug: TrainAugConfig, seed: int,
              log=lambda msg: None) -> None:
    """Optimize the model in place over (cond, rows) pairs."""
    optimizer = AdamW(model.params, lr=tcfg.lr,
                      weight_decay=tcfg.weight_decay)
    data_rng = rngmod.stream(seed, rngmod.DATA)
    rng_corrupt = rngmod.stream(seed, rngmod.CORRUPT)
    rng_drop = rngmod.stream(seed, rngmod.COND_DROP)
    rng_dropout = rngmod.stream(seed, rngmod.DROPOUT)
    for step in range(1, tcfg.steps + 1):
        picks = data_rng.integers(0, len(dataset), size=tcfg.batch_size)
        batch = [dataset[i] for i in picks]
        lr = cosine_lr(step - 1, tcfg.warmup_steps, tcfg.steps, tcfg.lr)
        terms = gpt_train_step(model, batch, optimizer, lr, aug,
                               rng_corrupt, rng_drop, rng_dropout,
                               batch_id=str(step))
        if tcfg.log_interval and step % tcfg.log_interval == 0:
            log(f"step {step}: loss {terms['total']:.4f} "
                f"nll/token {terms['nll_per_token']:.4f} "
                f"stop {terms['stop']:.4f}")
