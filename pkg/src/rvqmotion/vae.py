"""Convolutional autoencoder around the residual quantizer.

Encoder: input projection, then L stages of [stride-2 conv -> residual block
of two dilation-3 convs -> ReLU], then projection to the code width.  The
decoder mirrors it with nearest-neighbour upsampling.  Temporal compression
is exactly 2**L (floor division for lengths not divisible by the rate).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .motion import SkeletonSpec, bone_vectors
from .optim import AdamW
from .rvq import (Codebook, CodeMatrix, code_reset, commitment_loss,
                  ema_update, quantize_residual, straight_through)
from .serialization import (read_manifest, read_mtnf, read_sections,
                            write_mtnf_bytes, write_rvqs, write_sections,
                            read_mtnf_bytes, parse_config_text)
from .tensor import Tape, Tensor


@dataclass
class VaeConfig:
    downsample_stages: int = 3        # L; temporal rate is 2**L
    channels: int = 512
    dilation: int = 3
    codebook_size: int = 256          # K
    code_width: int = 512             # d
    depth: int = 8                    # R
    alpha_vel: float = 0.5
    alpha_acc: float = 0.5
    alpha_bone: float = 1.0
    beta_commit: float = 0.02
    commit_mode: str = "cumulative"
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    reset_interval: int = 256
    reset_min_usage: int = 1

    @property
    def rate(self) -> int:
        return 2 ** self.downsample_stages

    def __post_init__(self):
        if self.downsample_stages < 1:
            raise ValueError("downsample_stages must be >= 1")
        for name in ("alpha_vel", "alpha_acc", "alpha_bone", "beta_commit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _conv_init(rng, c_out, c_in, k, dtype):
    std = np.sqrt(2.0 / (c_in * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k)).astype(dtype)


class MotionVae:
    """Encoder/decoder pair plus normalization statistics."""

    def __init__(self, skeleton: SkeletonSpec, cfg: VaeConfig,
                 init_rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.skeleton = skeleton
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.norm_mean = np.zeros(skeleton.feature_width, dtype=np.float32)
        self.norm_std = np.ones(skeleton.feature_width, dtype=np.float32)
        rng = init_rng if init_rng is not None else rngmod.stream(0, rngmod.INIT)
        self.params: dict[str, Tensor] = {}
        c, d_feat = cfg.channels, skeleton.feature_width
        self._add_conv(rng, "enc.in", c, d_feat, 3)
        for s in range(cfg.downsample_stages):
            self._add_conv(rng, f"enc.s{s}.down", c, c, 4)
            self._add_conv(rng, f"enc.s{s}.res1", c, c, 3)
            self._add_conv(rng, f"enc.s{s}.res2", c, c, 3)
        self._add_conv(rng, "enc.out", cfg.code_width, c, 3)
        self._add_conv(rng, "dec.in", c, cfg.code_width, 3)
        for s in range(cfg.downsample_stages):
            self._add_conv(rng, f"dec.s{s}.up", c, c, 3)
            self._add_conv(rng, f"dec.s{s}.res1", c, c, 3)
            self._add_conv(rng, f"dec.s{s}.res2", c, c, 3)
        self._add_conv(rng, "dec.out", d_feat, c, 3)

    def _add_conv(self, rng, name, c_out, c_in, k):
        self.params[f"{name}.w"] = Tensor(_conv_init(rng, c_out, c_in, k,
                                                     self.dtype),
                                          requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=self.dtype),
                                             requires_grad=True)

    def _conv(self, name, x, *, stride=1, dilation=1, padding=0):
        return T.conv1d(x, self.params[f"{name}.w"],
                        self.params[f"{name}.bias"], stride=stride,
                        dilation=dilation, padding=padding)

    def _resblock(self, prefix, x):
        dil = self.cfg.dilation
        h = T.relu(self._conv(f"{prefix}.res1", x, dilation=dil, padding=dil))
        h = self._conv(f"{prefix}.res2", h, dilation=dil, padding=dil)
        return T.add(x, h)

    def set_norm_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.norm_mean = mean.astype(np.float32)
        self.norm_std = std.astype(np.float32)

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.norm_mean) / self.norm_std).astype(self.dtype)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return frames * self.norm_std + self.norm_mean

    def encode(self, frames: Tensor) -> Tensor:
        """Normalized frames (B,T,D) -> latents (B, floor(T/rate), d)."""
        t_len = frames.shape[1]
        if t_len < self.cfg.rate:
            raise T.ShapeError(f"sequence of {t_len} frames is shorter than "
                               f"the downsampling rate {self.cfg.rate}")
        h = T.transpose(frames, (0, 2, 1))
        h = T.relu(self._conv("enc.in", h, padding=1))
        for s in range(self.cfg.downsample_stages):
            h = self._conv(f"enc.s{s}.down", h, stride=2, padding=1)
            h = self._resblock(f"enc.s{s}", h)
            h = T.relu(h)
        z = self._conv("enc.out", h, padding=1)
        return T.transpose(z, (0, 2, 1))

    def decode(self, latents: Tensor) -> Tensor:
        """Quantized latents (B,n,d) -> frames (B, n*rate, D), normalized."""
        h = T.transpose(latents, (0, 2, 1))
        h = T.relu(self._conv("dec.in", h, padding=1))
        for s in range(self.cfg.downsample_stages):
            h = T.nearest_upsample(h, 2)
            h = self._conv(f"dec.s{s}.up", h, padding=1)
            h = self._resblock(f"dec.s{s}", h)
            h = T.relu(h)
        y = self._conv("dec.out", h, padding=1)
        return T.transpose(y, (0, 2, 1))


# ---------------------------------------------------------------------------
# reconstruction loss
# ---------------------------------------------------------------------------

def _velocity_t(x: Tensor) -> Tensor:
    t_len = x.shape[1]
    return T.sub(T.slice_axis(x, 1, 1, t_len), T.slice_axis(x, 1, 0, t_len - 1))


def _acceleration_t(x: Tensor) -> Tensor:
    t_len = x.shape[1]
    s0 = T.slice_axis(x, 1, 0, t_len - 2)
    s1 = T.slice_axis(x, 1, 1, t_len - 1)
    s2 = T.slice_axis(x, 1, 2, t_len)
    return T.sub(T.add(s2, s0), T.scale(s1, 2.0))


def _bones_t(x: Tensor, skeleton: SkeletonSpec) -> Tensor:
    parts = []
    for u, v in skeleton.bone_pairs:
        su, sv = skeleton.position_slices[u], skeleton.position_slices[v]
        parts.append(T.sub(T.slice_axis(x, 2, su[0], su[1]),
                           T.slice_axis(x, 2, sv[0], sv[1])))
    return T.concat(parts, axis=2)


def recon_loss(target: np.ndarray, prediction: Tensor,
               skeleton: SkeletonSpec, cfg: VaeConfig) -> dict[str, Tensor]:
    """Composite loss on (B,T,D): frames + velocity + acceleration + bones.

    The bone term is the sum over bone pairs of per-bone smooth-L1 (computed
    as one concatenated smooth-L1 scaled by the number of bones).
    """
    target = np.asarray(target)
    if target.shape != prediction.shape:
        raise T.ShapeError(f"recon_loss: lengths differ after truncation "
                           f"({target.shape} vs {prediction.shape})")
    if target.shape[1] < 3:
        raise T.ShapeError("recon_loss needs at least 3 frames")
    x = Tensor(target.astype(prediction.dtype.type, copy=False))
    terms: dict[str, Tensor] = {}
    terms["frame"] = T.smooth_l1(prediction, x)
    total = terms["frame"]
    if cfg.alpha_vel > 0:
        terms["velocity"] = T.smooth_l1(_velocity_t(prediction), _velocity_t(x))
        total = T.add(total, T.scale(terms["velocity"], cfg.alpha_vel))
    if cfg.alpha_acc > 0:
        terms["acceleration"] = T.smooth_l1(_acceleration_t(prediction),
                                            _acceleration_t(x))
        total = T.add(total, T.scale(terms["acceleration"], cfg.alpha_acc))
    if cfg.alpha_bone > 0:
        per_bone_mean = T.smooth_l1(_bones_t(prediction, skeleton),
                                    _bones_t(x, skeleton))
        terms["bone"] = T.scale(per_bone_mean, float(len(skeleton.bone_pairs)))
        total = T.add(total, T.scale(terms["bone"], cfg.alpha_bone))
    terms["total"] = total
    return terms


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class VaeTrainConfig:
    steps: int = 2000
    batch_size: int = 256
    crop_length: int = 32
    lr: float = 2e-4
    warmup_steps: int = 50
    weight_decay: float = 0.0
    log_interval: int = 200


def vae_forward_loss(model: MotionVae, codebook: Codebook,
                     normalized: np.ndarray):
    """Shared forward pass: returns (loss terms, quantization result, latents)."""
    cfg = model.cfg
    x = Tensor(normalized)
    z = model.encode(x)
    b, n, d = z.shape
    z_flat = T.reshape(z, (b * n, d))
    qr = quantize_residual(z_flat.data, codebook, cfg.depth)
    zq = straight_through(z_flat, qr.quantized)
    x_re = model.decode(T.reshape(zq, (b, n, d)))
    compare = normalized[:, :n * cfg.rate]
    terms = recon_loss(compare, x_re, model.skeleton, cfg)
    if cfg.beta_commit > 0:
        terms["commit"] = commitment_loss(z_flat, qr.partial_sums,
                                          cfg.commit_mode)
        terms["total"] = T.add(terms["total"],
                               T.scale(terms["commit"], cfg.beta_commit))
    return terms, qr, z_flat


def vae_train_step(model: MotionVae, codebook: Codebook, batch: np.ndarray,
                   optimizer: AdamW, step: int, lr: float,
                   reset_rng: np.random.Generator,
                   batch_id: str = "?") -> dict[str, float]:
    """One optimisation step on a (B,T,D) batch of normalized crops.

    Order per step: forward, backward, AdamW update, EMA codebook update,
    then a periodic reset sweep.  Raises with the batch id and the loss
    breakdown if anything goes non-finite.
    """
    try:
        with Tape() as tape:
            terms, qr, z_flat = vae_forward_loss(model, codebook, batch)
        tape.backward(terms["total"])
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"batch {batch_id}: {exc}") from exc
    optimizer.step(lr)
    optimizer.zero_grad()
    ema_update(codebook, qr.depth_targets(z_flat.data), qr.codes.indices)
    if model.cfg.reset_interval and step % model.cfg.reset_interval == 0:
        code_reset(codebook, z_flat.data, model.cfg.reset_min_usage, reset_rng)
    return {k: v.item() for k, v in terms.items()}


def load_motion_arrays(manifest) -> list[np.ndarray]:
    return [read_mtnf(rec.motion_path) for rec in manifest]


def sample_crops(motions: list[np.ndarray], batch_size: int, crop: int,
                 rng: np.random.Generator) -> np.ndarray:
    batch = np.empty((batch_size, crop, motions[0].shape[1]), dtype=np.float64)
    for i in range(batch_size):
        clip = motions[int(rng.integers(len(motions)))]
        if clip.shape[0] < crop:
            raise ValueError(f"clip of {clip.shape[0]} frames is shorter "
                             f"than the crop length {crop}")
        offset = int(rng.integers(clip.shape[0] - crop + 1))
        batch[i] = clip[offset:offset + crop]
    return batch


def train_vae(manifest, skeleton: SkeletonSpec, cfg: VaeConfig,
              tcfg: VaeTrainConfig, seed: int,
              log=lambda msg: None) -> tuple[MotionVae, Codebook]:
    from .motion import compute_norm_stats
    from .optim import cosine_lr

    motions = load_motion_arrays(manifest)
    mean, std = compute_norm_stats(motions)
    model = MotionVae(skeleton, cfg, init_rng=rngmod.stream(seed, rngmod.INIT))
    model.set_norm_stats(mean, std)
    codebook = Codebook.initialise(cfg.codebook_size, cfg.code_width,
                                   rngmod.stream(seed, rngmod.INIT, 1),
                                   decay=cfg.ema_decay, epsilon=cfg.ema_epsilon)
    optimizer = AdamW(model.params, lr=tcfg.lr,
                      weight_decay=tcfg.weight_decay)
    data_rng = rngmod.stream(seed, rngmod.DATA)
    reset_rng = rngmod.stream(seed, rngmod.RESET)
    for step in range(1, tcfg.steps + 1):
        raw = sample_crops(motions, tcfg.batch_size, tcfg.crop_length, data_rng)
        batch = model.normalize(raw)
        lr = cosine_lr(step - 1, tcfg.warmup_steps, tcfg.steps, tcfg.lr)
        terms = vae_train_step(model, codebook, batch, optimizer, step, lr,
                               reset_rng, batch_id=str(step))
        if tcfg.log_interval and step % tcfg.log_interval == 0:
            log(f"step {step}: total {terms['total']:.5f} "
                f"frame {terms['frame']:.5f}")
    return model, codebook


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_vae_checkpoint(path, model: MotionVae, codebook: Codebook) -> None:
    cfg_text = "\n".join(f"{k}={v}" for k, v in asdict(model.cfg).items())
    sections = {
        "config": cfg_text.encode("utf-8"),
        "skeleton": json.dumps({
            "joint_count": model.skeleton.joint_count,
            "position_slices": [list(s) for s in model.skeleton.position_slices],
            "bone_pairs": [list(p) for p in model.skeleton.bone_pairs],
            "feature_width": model.skeleton.feature_width,
        }, sort_keys=True).encode("utf-8"),
        "norm_mean": write_mtnf_bytes(model.norm_mean),
        "norm_std": write_mtnf_bytes(model.norm_std),
        "codebook": codebook.to_bytes(),
    }
    for name, tensor in model.params.items():
        sections[f"weights/{name}"] = write_mtnf_bytes(tensor.data)
    write_sections(path, sections)


def load_vae_checkpoint(path) -> tuple[MotionVae, Codebook]:
    sections = read_sections(path)
    raw_cfg = parse_config_text(sections["config"].decode("utf-8"))
    cfg = VaeConfig(
        downsample_stages=int(raw_cfg["downsample_stages"]),
        channels=int(raw_cfg["channels"]),
        dilation=int(raw_cfg["dilation"]),
        codebook_size=int(raw_cfg["codebook_size"]),
        code_width=int(raw_cfg["code_width"]),
        depth=int(raw_cfg["depth"]),
        alpha_vel=float(raw_cfg["alpha_vel"]),
        alpha_acc=float(raw_cfg["alpha_acc"]),
        alpha_bone=float(raw_cfg["alpha_bone"]),
        beta_commit=float(raw_cfg["beta_commit"]),
        commit_mode=raw_cfg["commit_mode"],
        ema_decay=float(raw_cfg["ema_decay"]),
        ema_epsilon=float(raw_cfg["ema_epsilon"]),
        reset_interval=int(raw_cfg["reset_interval"]),
        reset_min_usage=int(raw_cfg["reset_min_usage"]),
    )
    skel_raw = json.loads(sections["skeleton"].decode("utf-8"))
    skeleton = SkeletonSpec(
        joint_count=skel_raw["joint_count"],
        position_slices=tuple(tuple(s) for s in skel_raw["position_slices"]),
        bone_pairs=tuple(tuple(p) for p in skel_raw["bone_pairs"]),
        feature_width=skel_raw["feature_width"],
    )
    model = MotionVae(skeleton, cfg)
    model.set_norm_stats(read_mtnf_bytes(sections["norm_mean"]),
                         read_mtnf_bytes(sections["norm_std"]))
    for name, tensor in model.params.items():
        tensor.data = read_mtnf_bytes(sections[f"weights/{name}"])
    codebook = Codebook.from_bytes(sections["codebook"])
    return model, codebook


# ---------------------------------------------------------------------------
# dataset encoding
# ---------------------------------------------------------------------------

def encode_clip(model: MotionVae, codebook: Codebook,
                frames: np.ndarray):
    """Full-clip encode + quantize; returns the quantization result."""
    if frames.shape[0] < model.cfg.rate:
        raise ValueError(f"clip of {frames.shape[0]} frames is shorter than "
                         f"the downsampling rate {model.cfg.rate}")
    normalized = model.normalize(frames)[None]
    z = model.encode(Tensor(normalized))
    flat = z.data.reshape(-1, model.cfg.code_width)
    return quantize_residual(flat, codebook, model.cfg.depth)


def decode_codes(model: MotionVae, codebook: Codebook,
                 codes: CodeMatrix) -> np.ndarray:
    """Code matrix -> raw (denormalized) motion frames."""
    from .rvq import dequantize
    zq = dequantize(codes, codebook, dtype=model.dtype)[None]
    frames = model.decode(Tensor(zq)).data[0]
    return self_denorm(model, frames)


def self_denorm(model: MotionVae, frames: np.ndarray) -> np.ndarray:
    return model.denormalize(frames.astype(np.float64)).astype(np.float32)


def encode_dataset_to_codes(manifest, model: MotionVae, codebook: Codebook,
                            out_dir) -> list[tuple[str, str, str]]:
    """Write one RVQS file per clip; returns (codes, embedding, caption) rows.

    Deterministic: same model + manifest produce byte-identical archives.
    """
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, rec in enumerate(manifest):
        frames = read_mtnf(rec.motion_path)
        qr = encode_clip(model, codebook, frames)
        codes_path = out_dir / f"clip{i:05d}.rvqs"
        write_rvqs(codes_path, qr.codes.indices)
        rows.append((str(codes_path), str(rec.embedding_path), rec.caption))
    return rows
