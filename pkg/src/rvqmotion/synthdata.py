"""Procedural caption/motion pairs on a 5-joint chain.

Each template animates the chain with a root trajectory plus per-joint
sinusoidal sway; captions are the template ids and their condition
embeddings are pseudo-random unit vectors keyed by the caption text, so
distinct captions land far apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .motion import MotionSequence, chain_skeleton
from .serialization import write_manifest, write_mtnf

FPS = 20.0

TEMPLATES = (
    "walk-forward",
    "walk-backward",
    "turn-left",
    "turn-right",
    "wave",
    "squat",
    "jump",
    "walk-then-wave",
)

# Rest offsets of joints 1..4 from their parent (a standing chain).
_REST = np.array([[0.0, 0.4, 0.0],
                  [0.0, 0.35, 0.0],
                  [0.15, 0.25, 0.0],
                  [0.15, 0.2, 0.0]])


@dataclass
class SyntheticTask:
    template: str
    duration_range: tuple[float, float] = (1.6, 3.2)
    noise_scale: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; "
                             f"choose from {TEMPLATES}")


def _root_path(template: str, t: np.ndarray) -> np.ndarray:
    """Root trajectory (T,3) for time vector t in seconds."""
    root = np.zeros((t.size, 3))
    if template in ("walk-forward", "walk-backward"):
        sign = 1.0 if template == "walk-forward" else -1.0
        root[:, 0] = sign * 1.5 * t
        root[:, 1] = 0.9 + 0.03 * np.sin(2 * np.pi * 3.0 * t)
    elif template in ("turn-left", "turn-right"):
        sign = 1.0 if template == "turn-left" else -1.0
        radius = 1.2
        theta = 0.9 * t
        root[:, 0] = radius * np.sin(theta)
        root[:, 2] = sign * radius * (1.0 - np.cos(theta))
        root[:, 1] = 0.9 + 0.03 * np.sin(2 * np.pi * 3.0 * t)
    elif template == "wave":
        root[:, 1] = 0.9
    elif template == "squat":
        root[:, 1] = 0.9 - 0.35 * (0.5 - 0.5 * np.cos(2 * np.pi * 0.8 * t))
    elif template == "jump":
        phase = (t * 1.2) % 1.0
        root[:, 1] = 0.9 + 0.45 * np.maximum(0.0, np.sin(np.pi * phase)) ** 2
    elif template == "walk-then-wave":
        half = t.size // 2
        root[:half, 0] = 1.5 * t[:half]
        root[half:, 0] = 1.5 * t[half - 1] if half else 0.0
        root[:, 1] = 0.9 + 0.03 * np.sin(2 * np.pi * 3.0 * t)
    return root


def _sway(template: str, t: np.ndarray) -> np.ndarray:
    """Per-joint sway angles (T, 4): how joints 1..4 oscillate."""
    sway = np.zeros((t.size, 4))
    walk = 0.25 * np.sin(2 * np.pi * 1.5 * t)
    big_wave = 0.9 * np.sin(2 * np.pi * 2.0 * t)
    if template in ("walk-forward", "walk-backward", "turn-left", "turn-right"):
        sway[:, 0] = 0.3 * walk
        sway[:, 1] = walk
        sway[:, 2] = -walk
        sway[:, 3] = -1.3 * walk
    elif template == "wave":
        sway[:, 2] = big_wave
        sway[:, 3] = 1.4 * big_wave
    elif template == "squat":
        crouch = 0.6 * (0.5 - 0.5 * np.cos(2 * np.pi * 0.8 * t))
        sway[:, 0] = crouch
        sway[:, 1] = -crouch
        sway[:, 2] = crouch
        sway[:, 3] = -crouch
    elif template == "jump":
        phase = (t * 1.2) % 1.0
        tuck = 0.5 * np.maximum(0.0, np.sin(np.pi * phase))
        sway[:, 0] = tuck
        sway[:, 1] = tuck
        sway[:, 2] = -tuck
        sway[:, 3] = -tuck
    elif template == "walk-then-wave":
        half = t.size // 2
        sway[:half, 1] = walk[:half]
        sway[:half, 3] = -1.3 * walk[:half]
        sway[half:, 2] = big_wave[half:]
        sway[half:, 3] = 1.4 * big_wave[half:]
    return sway


def synth_generate(task: SyntheticTask,
                   cond_width: int = 64) -> tuple[MotionSequence, np.ndarray, str]:
    """Build (motion, condition embedding, caption) for one task.

    Bit-identical for identical (template, duration_range, noise, seed).
    """
    skeleton = chain_skeleton()
    rng = rngmod.stream(task.seed, rngmod.SYNTH,
                        sub=rngmod.seed_from_text(task.template) & 0xFFFFFFFF)
    lo, hi = task.duration_range
    frames_lo = max(int(lo * FPS), 4)
    frames_hi = max(int(hi * FPS), frames_lo)
    t_len = int(rng.integers(frames_lo, frames_hi + 1))
    t = np.arange(t_len) / FPS

    root = _root_path(task.template, t)
    sway = _sway(task.template, t)
    positions = np.empty((t_len, 5, 3))
    positions[:, 0] = root
    for j in range(1, 5):
        offset = _REST[j - 1]
        angle = sway[:, j - 1]
        # Rotate the rest offset in the x/y plane by the sway angle.
        rot_x = offset[0] * np.cos(angle) - offset[1] * np.sin(angle)
        rot_y = offset[0] * np.sin(angle) + offset[1] * np.cos(angle)
        positions[:, j, 0] = positions[:, j - 1, 0] + rot_x
        positions[:, j, 1] = positions[:, j - 1, 1] + rot_y
        positions[:, j, 2] = positions[:, j - 1, 2] + offset[2]
    features = positions.reshape(t_len, 15)
    if task.noise_scale > 0:
        features = features + rng.normal(0.0, task.noise_scale,
                                         size=features.shape)
    motion = MotionSequence(frames=features.astype(np.float32), fps=FPS,
                            skeleton=skeleton)
    return motion, embedding_for_caption(task.template, cond_width), task.template


def embedding_for_caption(caption: str, width: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed by the caption text."""
    rng = rngmod.stream(rngmod.seed_from_text(caption), rngmod.SYNTH, sub=1)
    vec = rng.normal(size=width)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


def generate_dataset(out_dir, num_clips: int, seed: int,
                     templates=TEMPLATES,
                     duration_range: tuple[float, float] = (1.6, 3.2),
                     noise_scale: float = 0.005,
                     cond_width: int = 64,
                     manifest_name: str = "train.tsv") -> Path:
    """Write motions, embeddings and a manifest; returns the manifest path.

    Clips cycle through the template list; per-clip seeds derive from the
    dataset seed and clip index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    written_embeddings: dict[str, str] = {}
    for i in range(num_clips):
        template = templates[i % len(templates)]
        task = SyntheticTask(template=template,
                             duration_range=duration_range,
                             noise_scale=noise_scale,
                             seed=seed * 1_000_003 + i)
        motion, embedding, caption = synth_generate(task, cond_width)
        motion_name = f"motion{i:05d}.mtnf"
        write_mtnf(out_dir / motion_name, motion.frames)
        if caption not in written_embeddings:
            emb_name = f"cond_{caption}.mtnf"
            write_mtnf(out_dir / emb_name, embedding)
            written_embeddings[caption] = emb_name
        rows.append((motion_name, written_embeddings[caption], caption))
    manifest_path = out_dir / manifest_name
    write_manifest(manifest_path, rows)
    return manifest_path
