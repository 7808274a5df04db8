"""Optimization loop: run configuration, ablation ladder, batch sampling,
Adam updates, checkpointing, and CSV telemetry.

A run is bitwise deterministic given (seed, config): one seeded stream
drives initialization, length sampling, data generation, skip masks, and
latent noise in a fixed order.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .data import BouncingPointConfig, ToySkeletonConfig, gen_bouncing, gen_skeleton, split_rng
from .model import P2PModel, make_condition, save_checkpoint, train_unroll
from .objective import ObjectiveConfig, full_objective, skip_mask_sample
from .optim import Adam, clip_grad_norm
from .tensor import backward, tape

TELEMETRY_HEADER = "step,recon,kl,align,cpc,total"

# Ablation ladder: flag pattern is a pure function of the name.
ABLATION_FLAGS = {
    "baseline": dict(condition_on_end=False, use_cpc=False, use_align=False, use_skip=False),
    "c": dict(condition_on_end=True, use_cpc=True, use_align=False, use_skip=False),
    "ca": dict(condition_on_end=True, use_cpc=True, use_align=True, use_skip=False),
    "full": dict(condition_on_end=True, use_cpc=True, use_align=True, use_skip=True),
}


class ConfigError(ValueError):
    """Invalid or unparsable run configuration."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; the last periodic checkpoint survives."""


@dataclass
class RunConfig:
    dataset: str = "bouncing"
    n_points: int = 1
    n_joints: int = 5
    speed_scale: float = 1.0
    descriptor_dim: int = 64
    latent_dim: int = 8
    hidden_dim: int = 128
    beta: float = 1e-4
    alpha_cpc: float = 100.0
    alpha_align: float = 0.5
    p_skip: float = 0.5
    cpc_on: str = "prior"
    lr: float = 0.002
    batch_size: int = 16
    steps: int = 5000
    t_min: int = 10
    t_max: int = 14
    seed: int = 0
    ablation: str = "full"
    checkpoint_every: int = 1000
    grad_clip: float = 5.0

    def validate(self):
        if self.dataset not in ("bouncing", "skeleton"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.ablation not in ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation {self.ablation!r}, want one of {sorted(ABLATION_FLAGS)}"
            )
        if self.t_min < 2:
            raise ConfigError(f"t_min must be >= 2, got {self.t_min}")
        if self.t_max < self.t_min:
            raise ConfigError(f"t_max {self.t_max} < t_min {self.t_min}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        self.objective()
        return self

    @property
    def frame_dim(self):
        return 2 * self.n_points if self.dataset == "bouncing" else 2 * self.n_joints

    def objective(self):
        """ObjectiveConfig for this run; off flags force their weights to zero."""
        flags = ABLATION_FLAGS[self.ablation]
        return ObjectiveConfig(
            beta=self.beta,
            alpha_cpc=self.alpha_cpc if flags["use_cpc"] else 0.0,
            alpha_align=self.alpha_align if flags["use_align"] else 0.0,
            p_skip=self.p_skip if flags["use_skip"] else 0.0,
            cpc_on=self.cpc_on,
            **flags,
        ).validate()

    def digest(self):
        return hashlib.sha256(format_run_config(self).encode()).hexdigest()[:16]


def format_run_config(cfg):
    lines = ["# p2pgen run configuration"]
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def parse_run_config(text):
    """Parse `key = value` lines into a RunConfig; errors carry line numbers."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = casts[kinds[key]](value)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from None
    return replace(RunConfig(), **out).validate()


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_run_config(text)


def sample_training_length(t_range, rng):
    """Uniform integer length in the inclusive range [t_min, t_max]."""
    lo, hi = t_range
    if lo > hi:
        raise ValueError(f"invalid length range {t_range}")
    return int(rng.integers(lo, hi + 1))


def make_training_batch(cfg, t_len, rng):
    """One [batch, T, dim] array drawn from the run's training stream."""
    if cfg.dataset == "bouncing":
        gen_cfg = BouncingPointConfig(
            n_points=cfg.n_points,
            speed_scale=cfg.speed_scale,
            length=t_len,
            n_sequences=cfg.batch_size,
        )
        return gen_bouncing(gen_cfg, rng).as_array()
    gen_cfg = ToySkeletonConfig(
        n_joints=cfg.n_joints, length=t_len, n_sequences=cfg.batch_size
    )
    return gen_skeleton(gen_cfg, rng).as_array()


def make_test_set(cfg, n_sequences, t_len, seed=None):
    """Test-split sequences, disjoint from every training stream by namespace."""
    rng = split_rng(cfg.seed if seed is None else seed, "test")
    if cfg.dataset == "bouncing":
        gen_cfg = BouncingPointConfig(
            n_points=cfg.n_points,
            speed_scale=cfg.speed_scale,
            length=t_len,
            n_sequences=n_sequences,
        )
        return gen_bouncing(gen_cfg, rng)
    gen_cfg = ToySkeletonConfig(n_joints=cfg.n_joints, length=t_len, n_sequences=n_sequences)
    return gen_skeleton(gen_cfg, rng)


@dataclass
class TrainResult:
    model: P2PModel
    checkpoint_path: str
    telemetry_path: str
    steps_run: int
    final_loss: dict


def train(cfg, out_dir, log_every=0):
    """Run the optimization loop; writes telemetry and checkpoints under out_dir.

    Returns the trained model and file paths. A non-finite loss aborts with
    TrainingDiverged; the most recent periodic checkpoint is left in place.
    """
    cfg.validate()
    obj = cfg.objective()
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    telemetry_path = os.path.join(out_dir, "telemetry.csv")
    with open(os.path.join(out_dir, "run.cfg"), "w", encoding="utf-8") as fh:
        fh.write(format_run_config(cfg))

    rng = split_rng(cfg.seed, "train")
    model = P2PModel(
        cfg.frame_dim,
        descriptor_dim=cfg.descriptor_dim,
        latent_dim=cfg.latent_dim,
        hidden_dim=cfg.hidden_dim,
        conditioned=obj.condition_on_end,
        rng=rng,
    )
    adam = Adam(model.named_parameters(), lr=cfg.lr)
    cpc_path = obj.cpc_on if obj.use_cpc else None

    last = {"recon": math.nan, "kl": math.nan, "align": math.nan,
            "cpc": math.nan, "total": math.nan}
    with open(telemetry_path, "w", encoding="utf-8") as tele:
        tele.write(TELEMETRY_HEADER + "\n")
        for step in range(1, cfg.steps + 1):
            t_len = sample_training_length((cfg.t_min, cfg.t_max), rng)
            frames = make_training_batch(cfg, t_len, rng)
            cond = make_condition(model, frames[:, -1], t_len) if obj.condition_on_end else None
            mask = skip_mask_sample(t_len, obj.p_skip, rng)
            with tape():
                record = train_unroll(
                    model, frames, cond, mask, rng,
                    cpc_path=cpc_path, cpc_free_running=obj.cpc_free_running,
                )
                breakdown = full_objective(record, obj)
                last = breakdown.floats()
                if not math.isfinite(last["total"]):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; last checkpoint retained"
                    )
                backward(breakdown.total)
            clip_grad_norm(model.parameters(), cfg.grad_clip)
            adam.step()
            adam.zero_grad()
            tele.write(
                f"{step},{last['recon']:.10g},{last['kl']:.10g},"
                f"{last['align']:.10g},{last['cpc']:.10g},{last['total']:.10g}\n"
            )
            if log_every and step % log_every == 0:
                print(f"step {step}: total={last['total']:.5g} cpc={last['cpc']:.5g}")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_path)

    save_checkpoint(model, ckpt_path)
    return TrainResult(
        model=model,
        checkpoint_path=ckpt_path,
        telemetry_path=telemetry_path,
        steps_run=cfg.steps,
        final_loss=last,
    )
