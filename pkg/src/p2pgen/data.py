"""Synthetic desk-scale sequence generators and the on-disk sequence format.

Two generators: a point (or pair of points) bouncing in the unit square with
velocity resampled at every wall contact, and a planar articulated chain with
a per-sequence action regime. Both are pure functions of (config, rng), so
split disjointness reduces to disjoint rng namespaces.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class SequenceFileError(ValueError):
    """Malformed sequence file; the message names the failing byte offset."""


@dataclass
class SequenceBatch:
    """Frame sequences with per-sequence lengths; frames are flat vectors."""

    frame_dim: int
    sequences: list = field(default_factory=list)

    def __post_init__(self):
        for k, seq in enumerate(self.sequences):
            if seq.ndim != 2 or seq.shape[1] != self.frame_dim:
                raise ValueError(
                    f"sequence {k} has shape {seq.shape}, expected [T, {self.frame_dim}]"
                )

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def lengths(self):
        return [s.shape[0] for s in self.sequences]

    def as_array(self):
        """[n, T, dim] view; requires all sequences to share one length."""
        if len(set(self.lengths)) > 1:
            raise ValueError(f"sequences have mixed lengths {sorted(set(self.lengths))}")
        return np.stack(self.sequences, axis=0)


# ---------------------------------------------------------------------------
# bouncing point(s)


@dataclass
class BouncingPointConfig:
    """Point(s) moving in the unit square; wall contact reflects the position
    and resamples the whole velocity vector."""

    n_points: int = 1
    speed_scale: float = 1.0
    min_speed: float = 0.05
    max_speed: float = 0.15
    length: int = 12
    n_sequences: int = 1
    seed: int = 0

    @property
    def frame_dim(self):
        return 2 * self.n_points

    def __post_init__(self):
        if self.n_points not in (1, 2):
            raise ValueError(f"n_points must be 1 or 2, got {self.n_points}")
        if self.length < 1 or self.n_sequences < 0:
            raise ValueError("length must be >= 1 and n_sequences >= 0")


def _draw_velocity(cfg, rng, n):
    speed = rng.uniform(cfg.min_speed, cfg.max_speed, size=n) * cfg.speed_scale
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)


def gen_bouncing(cfg, rng=None):
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n, p, t_len = cfg.n_sequences, cfg.n_points, cfg.length
    frames = np.empty((n, t_len, 2 * p))
    pos = rng.uniform(0.0, 1.0, size=(n, p, 2))
    vel = _draw_velocity(cfg, rng, n * p).reshape(n, p, 2)
    frames[:, 0] = pos.reshape(n, 2 * p)
    for t in range(1, t_len):
        pos = pos + vel
        # reflect across whichever wall was crossed, then resample that
        # point's whole velocity vector (one contact per axis is enough at
        # the configured speeds)
        low = pos < 0.0
        high = pos > 1.0
        pos[low] = -pos[low]
        pos[high] = 2.0 - pos[high]
        hit = (low | high).any(axis=2)
        k = int(hit.sum())
        if k:
            vel[hit] = _draw_velocity(cfg, rng, k)
        frames[:, t] = pos.reshape(n, 2 * p)
    return SequenceBatch(2 * p, [frames[i] for i in range(n)])


# ---------------------------------------------------------------------------
# toy articulated chain


@dataclass
class ToySkeletonConfig:
    """Planar chain of joints swinging under a per-sequence action regime.

    Joint angles follow base + A*sin(2*pi*f*t + phase) plus a random walk;
    amplitude and frequency are drawn once per sequence, so two sequences
    from different draws move differently. Bone lengths are drawn per
    sequence and held constant; coordinates are normalized into [-1, 1].
    """

    n_joints: int = 5
    amplitude_range: tuple = (0.2, 0.8)
    frequency_range: tuple = (0.05, 0.25)
    noise_scale: float = 0.03
    length: int = 12
    n_sequences: int = 1
    seed: int = 0

    @property
    def frame_dim(self):
        return 2 * self.n_joints

    def __post_init__(self):
        if self.n_joints < 1:
            raise ValueError("need at least one joint")


def gen_skeleton(cfg, rng=None):
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    k, t_len = cfg.n_joints, cfg.length
    seqs = []
    for _ in range(cfg.n_sequences):
        bones = rng.uniform(0.5, 1.0, size=k)
        bones /= bones.sum()  # total reach 1 keeps every joint inside the unit disk
        base = rng.uniform(-np.pi / 4, np.pi / 4, size=k)
        amp = rng.uniform(*cfg.amplitude_range)
        freq = rng.uniform(*cfg.frequency_range)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=k)
        walk = np.zeros(k)
        frames = np.empty((t_len, 2 * k))
        for t in range(t_len):
            walk = walk + cfg.noise_scale * rng.standard_normal(k)
            angles = base + amp * np.sin(2.0 * np.pi * freq * t + phase) + walk
            heading = np.cumsum(angles)
            steps = bones[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
            joints = np.cumsum(steps, axis=0)
            frames[t] = joints.reshape(-1)
        seqs.append(frames)
    return SequenceBatch(2 * k, seqs)


# ---------------------------------------------------------------------------
# deterministic split namespaces

_SPLIT_IDS = {"train": 0, "test": 1, "eval": 2}


def split_rng(seed, split):
    """Seeded generator namespaced by split; train and test streams never overlap."""
    if split not in _SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}, want one of {sorted(_SPLIT_IDS)}")
    return np.random.default_rng([int(seed), _SPLIT_IDS[split]])


# ---------------------------------------------------------------------------
# sequence file format

_SEQ_MAGIC = b"P2PSEQFL"
_SEQ_VERSION = 1
_SEQ_HEAD = struct.Struct("<8sIII")


def write_sequences(path, batch):
    lengths = batch.lengths
    parts = [_SEQ_HEAD.pack(_SEQ_MAGIC, _SEQ_VERSION, batch.frame_dim, len(batch))]
    parts.append(struct.pack(f"<{len(lengths)}I", *lengths))
    for seq in batch:
        parts.append(seq.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_sequences(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SEQ_HEAD.size:
        raise SequenceFileError(f"header truncated at offset {len(blob)}")
    magic, version, dim, count = _SEQ_HEAD.unpack_from(blob, 0)
    if magic != _SEQ_MAGIC:
        raise SequenceFileError("bad magic at offset 0")
    if version != _SEQ_VERSION:
        raise SequenceFileError(f"unsupported version {version} at offset 8")
    off = _SEQ_HEAD.size
    table = off + 4 * count
    if len(blob) < table:
        raise SequenceFileError(f"length table truncated at offset {len(blob)}")
    lengths = struct.unpack_from(f"<{count}I", blob, off) if count else ()
    seqs = []
    off = table
    for t_len in lengths:
        nbytes = t_len * dim * 8
        if len(blob) < off + nbytes:
            raise SequenceFileError(f"payload truncated at offset {len(blob)}")
        seqs.append(
            np.frombuffer(blob, dtype="<f8", count=t_len * dim, offset=off)
            .reshape(t_len, dim)
            .copy()
        )
        off += nbytes
    if off != len(blob):
        raise SequenceFileError(f"{len(blob) - off} trailing bytes at offset {off}")
    return SequenceBatch(dim, seqs)
