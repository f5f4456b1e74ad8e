"""Reconstruction and likelihood metrics over a manifest."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpt import CodeGpt
from .motion import SkeletonSpec
from .rvq import Codebook
from .serialization import read_mtnf
from .tensor import Tensor
from .vae import MotionVae, encode_clip


@dataclass
class EvalReport:
    recon_smooth_l1: float           # normalized feature space
    mean_position_error: float       # raw space, metres per joint per frame
    residual_norm_curve: list[float]
    per_token_nll: float
    stop_accuracy: float
    code_usage_fraction: float

    def __post_init__(self):
        for name in ("recon_smooth_l1", "mean_position_error",
                     "per_token_nll", "stop_accuracy", "code_usage_fraction"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"metric {name} must be finite and "
                                 f"nonnegative, got {value}")
        if any((not np.isfinite(v)) or v < 0 for v in self.residual_norm_curve):
            raise ValueError("residual norm curve must be finite, nonnegative")

    def lines(self) -> list[str]:
        curve = ",".join(f"{v:.6f}" for v in self.residual_norm_curve)
        return [
            f"recon_smooth_l1={self.recon_smooth_l1:.6f}",
            f"mean_position_error={self.mean_position_error:.6f}",
            f"residual_norm_curve={curve}",
            f"per_token_nll={self.per_token_nll:.6f}",
            f"stop_accuracy={self.stop_accuracy:.6f}",
            f"code_usage_fraction={self.code_usage_fraction:.6f}",
        ]


def smooth_l1_value(a: np.ndarray, b: np.ndarray,
                    threshold: float = 1.0) -> float:
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    elem = np.where(d < threshold, 0.5 * d * d / threshold,
                    d - 0.5 * threshold)
    return float(elem.mean())


def position_error(a: np.ndarray, b: np.ndarray,
                   skeleton: SkeletonSpec) -> float:
    """Mean L2 distance between corresponding joint triples."""
    errs = []
    for start, stop in skeleton.position_slices:
        diff = a[:, start:stop] - b[:, start:stop]
        errs.append(np.linalg.norm(diff, axis=1))
    return float(np.mean(errs))


def recon_metrics(pairs, skeleton: SkeletonSpec) -> tuple[float, float]:
    """(smooth-L1, mean position error) over (original, reconstruction) pairs
    given in the same feature space."""
    sl1 = [smooth_l1_value(a, b) for a, b in pairs]
    mpje = [position_error(a, b, skeleton) for a, b in pairs]
    return float(np.mean(sl1)), float(np.mean(mpje))


def eval_model(manifest, vae: MotionVae, codebook: Codebook,
               gpt: CodeGpt) -> EvalReport:
    """Every report field over the manifest, with teacher-forced likelihoods.

    Stop accuracy is the fraction of clips whose teacher-forced stop-head
    argmax lands on the true final row.
    """
    rate = vae.cfg.rate
    norm_pairs = []
    raw_pairs = []
    norm_curves = []
    nll_values = []
    stop_hits = 0
    used_codes: set[int] = set()
    clips = list(manifest)
    for rec in clips:
        frames = read_mtnf(rec.motion_path)
        cond = read_mtnf(rec.embedding_path).astype(np.float32)
        qr = encode_clip(vae, codebook, frames)
        norm_curves.append(qr.residual_norms.mean(axis=0))
        used_codes.update(np.unique(qr.codes.indices).tolist())

        n = qr.codes.n
        compare = vae.normalize(frames)[: n * rate]
        x_re = vae.decode(Tensor(qr.quantized[None].astype(vae.dtype))).data[0]
        norm_pairs.append((compare, x_re))
        raw_pairs.append((frames[: n * rate],
                          vae.denormalize(x_re.astype(np.float64))))

        rows = qr.codes.indices
        nll = gpt.sequence_nll(cond, rows).item()
        nll_values.append(nll / rows.size)
        contexts = gpt.temporal_contexts(cond, rows[:-1])
        stop = gpt.stop_logits(contexts).data
        if int(np.argmax(stop)) == n - 1:
            stop_hits += 1

    recon, mpje = recon_metrics(norm_pairs, vae.skeleton)
    _, raw_mpje = recon_metrics(raw_pairs, vae.skeleton)
    return EvalReport(
        recon_smooth_l1=recon,
        mean_position_error=raw_mpje,
        residual_norm_curve=[float(v) for v in np.mean(norm_curves, axis=0)],
        per_token_nll=float(np.mean(nll_values)),
        stop_accuracy=stop_hits / len(clips),
        code_usage_fraction=len(used_codes) / codebook.size,
    )
