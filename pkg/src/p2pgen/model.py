"""Point-to-point sequence model: shared encoder, decoder, and three
recurrent cores (posterior, learned prior, generator) wired for the
teacher-forced training unroll, the free-running test path, and the
control-point generation modes (stitching, looping).

Conditioning is a pair (end-frame descriptor, time counter) concatenated
onto every recurrent input. An unconditioned model (the baseline ablation)
feeds zeros for both and never encodes the end frame.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    GaussianHead,
    LSTMCell,
    Linear,
    MLPDecoder,
    MLPEncoder,
    init_params,
    reparam_sample,
)
from .tensor import ShapeError, Tensor, concat, no_tape, tanh, zeros


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the requested model."""


class RecurrentGaussian:
    """One-layer LSTM followed by a Gaussian head."""

    def __init__(self, input_dim, hidden_dim, latent_dim):
        self.cell = LSTMCell(input_dim, hidden_dim)
        self.head = GaussianHead(hidden_dim, latent_dim)

    def init_state(self, batch):
        return self.cell.init_state(batch)

    def step(self, x, state):
        state = self.cell.step(x, state)
        mu, logvar = self.head(state[0])
        return mu, logvar, state

    def named_parameters(self, prefix=""):
        return self.cell.named_parameters(prefix + "cell.") + self.head.named_parameters(
            prefix + "head."
        )

    def sublayers(self):
        return self.cell.sublayers() + self.head.sublayers()


class RecurrentGenerator:
    """Two-layer LSTM with a tanh-bounded projection to the pre-decoder latent."""

    def __init__(self, input_dim, hidden_dim, out_dim, num_layers=2):
        self.num_layers = num_layers
        self.cells = [LSTMCell(input_dim, hidden_dim)]
        for _ in range(num_layers - 1):
            self.cells.append(LSTMCell(hidden_dim, hidden_dim))
        self.out_proj = Linear(hidden_dim, out_dim)

    def init_state(self, batch):
        return [cell.init_state(batch) for cell in self.cells]

    def step(self, x, states):
        new_states = []
        inp = x
        for cell, st in zip(self.cells, states):
            st = cell.step(inp, st)
            new_states.append(st)
            inp = st[0]
        return tanh(self.out_proj(inp)), new_states

    def named_parameters(self, prefix=""):
        out = []
        for k, cell in enumerate(self.cells):
            out += cell.named_parameters(prefix + f"cell{k}.")
        out += self.out_proj.named_parameters(prefix + "out_proj.")
        return out

    def sublayers(self):
        subs = []
        for cell in self.cells:
            subs += cell.sublayers()
        return subs + self.out_proj.sublayers()


class P2PModel:
    """Parameter container plus wiring for all rollout paths.

    The encoder is shared by the posterior, the prior, and the end-frame
    descriptor; posterior and prior own distinct LSTM parameter sets. The
    generator runs two LSTM layers and emits the pre-decoder latent g.
    """

    GENERATOR_LAYERS = 2
    ENCODER_BLOCKS = 2

    def __init__(
        self,
        frame_dim,
        descriptor_dim=64,
        latent_dim=8,
        hidden_dim=128,
        conditioned=True,
        rng=None,
    ):
        self.frame_dim = frame_dim
        self.descriptor_dim = descriptor_dim
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.conditioned = bool(conditioned)
        self.descriptor_reads = 0

        cond_width = 2 * descriptor_dim + 1  # (h, h_T, tau)
        self.encoder = MLPEncoder(frame_dim, hidden_dim, descriptor_dim)
        self.decoder = MLPDecoder(descriptor_dim, hidden_dim, frame_dim)
        self.posterior = RecurrentGaussian(cond_width, hidden_dim, latent_dim)
        self.prior = RecurrentGaussian(cond_width, hidden_dim, latent_dim)
        self.generator = RecurrentGenerator(
            descriptor_dim + latent_dim + 1, hidden_dim, descriptor_dim,
            num_layers=self.GENERATOR_LAYERS,
        )
        if rng is not None:
            for layer in self.sublayers():
                init_params(layer, rng)

    def sublayers(self):
        subs = []
        for part in (self.encoder, self.decoder, self.posterior, self.prior, self.generator):
            subs += part.sublayers()
        return subs

    def named_parameters(self):
        out = []
        out += self.encoder.named_parameters("encoder.")
        out += self.decoder.named_parameters("decoder.")
        out += self.posterior.named_parameters("posterior.")
        out += self.prior.named_parameters("prior.")
        out += self.generator.named_parameters("generator.")
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return int(np.sum([p.size for p in self.parameters()]))

    def encode(self, frames):
        if not isinstance(frames, Tensor):
            frames = Tensor(np.atleast_2d(frames))
        return self.encoder(frames)


def expected_parameter_count(frame_dim, descriptor_dim, latent_dim, hidden_dim):
    """Closed-form parameter count; regression-locks the architecture wiring."""
    d, dh, z, hd = frame_dim, descriptor_dim, latent_dim, hidden_dim

    def lin(i, o):
        return o * (i + 1)

    def lstm(i):
        return 4 * hd * (i + hd + 1)

    enc = lin(d, hd) + 2 * lin(hd, hd) + lin(hd, dh)
    dec = lin(dh, hd) + 2 * lin(hd, hd) + lin(hd, d)
    gauss = lstm(2 * dh + 1) + 2 * lin(hd, z)
    gen = lstm(dh + z + 1) + lstm(hd) + lin(hd, dh)
    return enc + dec + 2 * gauss + gen


@dataclass
class GenerationCondition:
    """End-frame descriptor plus the fixed rollout length."""

    h_T: Tensor
    T: int

    def __post_init__(self):
        if self.T < 2:
            raise ValueError(f"rollout length must be >= 2, got {self.T}")
        if self.h_T.ndim != 2:
            raise ShapeError(f"descriptor must be [batch, dim], got {self.h_T.shape}")


def time_counter(t, total):
    """tau = t / T for integer timesteps 1..T; 1.0 marks the targeted end-frame."""
    if not 1 <= t <= total:
        raise ValueError(f"timestep {t} outside 1..{total}")
    return t / total


def global_descriptor(model, x_end):
    """Encode the targeted end-frame. Counts reads for ablation instrumentation."""
    model.descriptor_reads += 1
    return model.encode(x_end)


def make_condition(model, x_end, total):
    return GenerationCondition(global_descriptor(model, x_end), total)


def _cond_inputs(model, cond, batch, t, tau):
    if cond is None:
        h_T = zeros((batch, model.descriptor_dim))
        tau_v = 0.0 if tau is None else float(tau)
    else:
        if cond.h_T.shape[0] != batch:
            raise ShapeError(
                f"condition batch {cond.h_T.shape[0]} does not match input batch {batch}"
            )
        h_T = cond.h_T
        tau_v = time_counter(t, cond.T) if tau is None else float(tau)
    return h_T, Tensor(np.full((batch, 1), tau_v))


def posterior_step(model, state, h_t, cond, t, tau=None):
    """Gaussian over z_t given the current frame's encoding, descriptor, counter."""
    h_T, tau_col = _cond_inputs(model, cond, h_t.shape[0], t, tau)
    return model.posterior.step(concat([h_t, h_T, tau_col], axis=1), state)


def prior_step(model, state, h_prev, cond, t, tau=None):
    """Gaussian over z_t given the previous frame's encoding, descriptor, counter."""
    h_T, tau_col = _cond_inputs(model, cond, h_prev.shape[0], t, tau)
    return model.prior.step(concat([h_prev, h_T, tau_col], axis=1), state)


def generator_step(model, state, h_prev, z, tau):
    """Advance the generator: pre-decoder latent g plus the decoded frame."""
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"latent width {z.shape} does not match {model.latent_dim}")
    tau_col = Tensor(np.full((h_prev.shape[0], 1), float(tau)))
    g, state = model.generator.step(concat([h_prev, z, tau_col], axis=1), state)
    return g, model.decoder(g), state


@dataclass
class RolloutRecord:
    """Per-timestep tensors of one training unroll.

    Lists are indexed by wall-clock step (0-based, length T); skipped steps
    hold None and contribute nothing to any loss. Index 0 is the copied
    start frame: x_hat[0] is the ground truth and carries no distribution.
    """

    frames: np.ndarray
    taus: np.ndarray
    mask: np.ndarray
    mu_q: list = field(default_factory=list)
    logvar_q: list = field(default_factory=list)
    mu_p: list = field(default_factory=list)
    logvar_p: list = field(default_factory=list)
    z: list = field(default_factory=list)
    h: list = field(default_factory=list)
    g: list = field(default_factory=list)
    x_hat: list = field(default_factory=list)
    kept: list = field(default_factory=list)
    cpc_x_hat: Tensor | None = None
    cpc_path: str | None = None
    final_states: dict = field(default_factory=dict)

    @property
    def length(self):
        return self.frames.shape[1]


def train_unroll(
    model,
    frames,
    cond,
    mask,
    rng,
    *,
    cpc_path=None,
    cpc_free_running=False,
    taus=None,
):
    """Teacher-forced unroll over a batch of equal-length sequences.

    At every kept step t: z_t is sampled from the posterior of the current
    ground-truth frame and the generator consumes the encoding of the last
    kept ground-truth frame. Skipped steps (mask 0) advance nothing: no
    recurrent state moves, no record entry is produced, and the next kept
    step sees the last kept frame as its predecessor.

    The control-point branch (`cpc_path="prior"`) runs a separate generator
    state chain fed with prior-sampled latents, so its loss reaches prior,
    generator, and encoder parameters but no posterior-exclusive ones.
    With `cpc_path="posterior"` the branch is the main rollout's own end
    frame, i.e. an upweighted end-frame reconstruction.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"frames must be [batch, T, dim], got {frames.shape}")
    batch, total, dim = frames.shape
    if total < 2:
        raise ValueError(f"sequence length must be >= 2, got {total}")
    if dim != model.frame_dim:
        raise ShapeError(f"frame dim {dim} does not match model dim {model.frame_dim}")
    mask = np.asarray(mask, dtype=np.int64)
    if mask.shape != (total,):
        raise ValueError(f"mask length {mask.shape} does not match T={total}")
    if mask[0] != 1 or mask[-1] != 1:
        raise ValueError("mask must keep the first and last steps")
    if cond is not None and cond.T != total:
        raise ValueError(f"condition length {cond.T} does not match T={total}")
    if cpc_path not in (None, "prior", "posterior"):
        raise ValueError(f"unknown cpc path {cpc_path!r}")
    if taus is None:
        taus = np.arange(1, total + 1, dtype=np.float64) / total
    else:
        taus = np.asarray(taus, dtype=np.float64)
        if taus.shape != (total,):
            raise ValueError("taus length mismatch")
    conditioned = cond is not None

    rec = RolloutRecord(frames=frames, taus=taus, mask=mask, cpc_path=cpc_path)
    none_row = [None] * total
    for name in ("mu_q", "logvar_q", "mu_p", "logvar_p", "z", "h", "g", "x_hat"):
        setattr(rec, name, list(none_row))

    s_q = model.posterior.init_state(batch)
    s_p = model.prior.init_state(batch)
    s_g = model.generator.init_state(batch)
    s_gc = model.generator.init_state(batch) if cpc_path == "prior" else None

    x1 = Tensor(frames[:, 0])
    h_prev = model.encoder(x1)
    h_prev_cpc = h_prev
    rec.h[0] = h_prev
    rec.x_hat[0] = x1

    for i in range(1, total):
        if mask[i] == 0:
            continue
        t = i + 1
        tau_in = float(taus[i]) if conditioned else 0.0
        x_t = Tensor(frames[:, i])
        h_t = model.encoder(x_t)
        mu_q, logvar_q, s_q = posterior_step(model, s_q, h_t, cond, t, tau=tau_in)
        mu_p, logvar_p, s_p = prior_step(model, s_p, h_prev, cond, t, tau=tau_in)
        z_t = reparam_sample(mu_q, logvar_q, rng)
        g_t, x_hat_t, s_g = generator_step(model, s_g, h_prev, z_t, tau_in)

        if cpc_path == "prior":
            z_c = reparam_sample(mu_p, logvar_p, rng)
            h_in = h_prev_cpc if cpc_free_running else h_prev
            # intermediate decodes are only needed when the branch consumes
            # its own generated frames
            if cpc_free_running:
                _, x_hat_c, s_gc = generator_step(model, s_gc, h_in, z_c, tau_in)
                h_prev_cpc = model.encoder(x_hat_c)
                if i == total - 1:
                    rec.cpc_x_hat = x_hat_c
            else:
                tau_col = Tensor(np.full((batch, 1), tau_in))
                g_c, s_gc = model.generator.step(
                    concat([h_in, z_c, tau_col], axis=1), s_gc
                )
                if i == total - 1:
                    rec.cpc_x_hat = model.decoder(g_c)

        rec.mu_q[i], rec.logvar_q[i] = mu_q, logvar_q
        rec.mu_p[i], rec.logvar_p[i] = mu_p, logvar_p
        rec.z[i], rec.h[i], rec.g[i], rec.x_hat[i] = z_t, h_t, g_t, x_hat_t
        rec.kept.append(i)
        h_prev = h_t

    if cpc_path == "posterior":
        rec.cpc_x_hat = rec.x_hat[total - 1]
    rec.final_states = {"posterior": s_q, "prior": s_p, "generator": s_g}
    return rec


def _free_rollout(model, x0, h_T, total, rng):
    """Prior-driven rollout on the model's own outputs. Runs without a tape."""
    batch = x0.shape[0]
    out = np.empty((batch, total, model.frame_dim))
    out[:, 0] = x0
    cond = GenerationCondition(h_T, total) if h_T is not None else None
    with no_tape():
        s_p = model.prior.init_state(batch)
        s_g = model.generator.init_state(batch)
        h_prev = model.encoder(Tensor(x0))
        for t in range(2, total + 1):
            tau = time_counter(t, total) if cond is not None else 0.0
            mu_p, logvar_p, s_p = prior_step(model, s_p, h_prev, cond, t, tau=tau)
            z_t = reparam_sample(mu_p, logvar_p, rng)
            _, x_hat, s_g = generator_step(model, s_g, h_prev, z_t, tau)
            out[:, t - 1] = x_hat.data
            h_prev = model.encoder(x_hat)
    return out


def _as_frame(model, x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.frame_dim,):
        raise ShapeError(f"{name} must have shape ({model.frame_dim},), got {x.shape}")
    return x


def sample_sequence(model, x_start, x_end, total, rng):
    """Generate T frames from the prior path; frame 1 is x_start verbatim and
    frame T is the model's attempt at x_end."""
    return sample_batch(model, x_start, x_end, total, 1, rng)[0]


def sample_batch(model, x_start, x_end, total, n, rng):
    """n independent rollouts for one (start, end) pair; returns [n, T, dim]."""
    if total < 2:
        raise ValueError(f"generation length must be >= 2, got {total}")
    x_start = _as_frame(model, x_start, "x_start")
    x_end = _as_frame(model, x_end, "x_end")
    if model.conditioned:
        with no_tape():
            h_T = global_descriptor(model, x_end)
        h_T = Tensor(np.broadcast_to(h_T.data, (n, model.descriptor_dim)))
    else:
        h_T = None
    x0 = np.broadcast_to(x_start, (n, model.frame_dim)).copy()
    return _free_rollout(model, x0, h_T, total, rng)


def posterior_reconstruct(model, seq, n, rng):
    """n teacher-forced reconstructions with z ~ posterior; returns [n, T, dim]."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != model.frame_dim:
        raise ShapeError(f"sequence must be [T, {model.frame_dim}], got {seq.shape}")
    total = seq.shape[0]
    if total < 2:
        raise ValueError("sequence length must be >= 2")
    out = np.empty((n, total, model.frame_dim))
    out[:, 0] = seq[0]
    with no_tape():
        if model.conditioned:
            h_T = global_descriptor(model, seq[-1])
            cond = GenerationCondition(
                Tensor(np.broadcast_to(h_T.data, (n, model.descriptor_dim))), total
            )
        else:
            cond = None
        s_q = model.posterior.init_state(n)
        s_g = model.generator.init_state(n)
        h_prev = model.encoder(Tensor(np.broadcast_to(seq[0], (n, model.frame_dim))))
        for t in range(2, total + 1):
            tau = time_counter(t, total) if cond is not None else 0.0
            h_t = model.encoder(Tensor(np.broadcast_to(seq[t - 1], (n, model.frame_dim))))
            mu_q, logvar_q, s_q = posterior_step(model, s_q, h_t, cond, t, tau=tau)
            z_t = reparam_sample(mu_q, logvar_q, rng)
            _, x_hat, s_g = generator_step(model, s_g, h_prev, z_t, tau)
            out[:, t - 1] = x_hat.data
            h_prev = h_t
    return out


def stitch_generate(model, control_points, lengths, rng):
    """Chain clips through a list of control points into one merged sequence.

    Clip i runs from control point i toward control point i+1. At every
    interior junction the verbatim control point is emitted once (the
    incoming clip's generated end-frame is dropped in its favor); the final
    clip keeps its own generated end-frame.
    """
    points = [_as_frame(model, p, f"control point {k}") for k, p in enumerate(control_points)]
    if len(points) < 2:
        raise ValueError("need at least 2 control points")
    if len(lengths) != len(points) - 1:
        raise ValueError(
            f"got {len(lengths)} lengths for {len(points)} control points"
        )
    for L in lengths:
        if L < 2:
            raise ValueError("each clip length must be >= 2")
    pieces = []
    last = len(lengths) - 1
    for i, L in enumerate(lengths):
        clip = sample_sequence(model, points[i], points[i + 1], L, rng)
        pieces.append(clip if i == last else clip[:-1])
    return np.concatenate(pieces, axis=0)


def stitch_boundaries(lengths):
    """0-based merged-sequence indices of the control points."""
    idx = [0]
    for L in lengths:
        idx.append(idx[-1] + L - 1)
    return idx


def loop_generate(model, x, total, rng):
    """Loop clip: targeted start- and end-frames are the same frame."""
    if total < 3:
        raise ValueError(f"loop length must be >= 3, got {total}")
    return sample_sequence(model, x, x, total, rng)


# ---------------------------------------------------------------------------
# checkpoint format: little-endian header, float64 payload, trailing checksum

_CKPT_MAGIC = b"P2PMODEL"
_CKPT_VERSION = 1
_HEADER = struct.Struct("<8sI7IQ")


def _checksum(blob):
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def save_checkpoint(model, path):
    header = _HEADER.pack(
        _CKPT_MAGIC,
        _CKPT_VERSION,
        model.frame_dim,
        model.descriptor_dim,
        model.latent_dim,
        model.hidden_dim,
        model.GENERATOR_LAYERS,
        model.ENCODER_BLOCKS,
        int(model.conditioned),
        model.parameter_count(),
    )
    payload = b"".join(p.data.astype("<f8").tobytes(order="C") for p in model.parameters())
    blob = header + payload
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(struct.pack("<Q", _checksum(blob)))


def load_checkpoint(path, expect=None):
    """Rebuild a model from a checkpoint; rejects dimension or checksum mismatch.

    `expect` optionally pins (frame_dim, descriptor_dim, latent_dim, hidden_dim).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 8:
        raise CheckpointError(f"checkpoint truncated at {len(blob)} bytes")
    magic, version, d, dh, z, hd, gl, eb, cflag, n_params = _HEADER.unpack_from(blob, 0)
    if magic != _CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if gl != P2PModel.GENERATOR_LAYERS or eb != P2PModel.ENCODER_BLOCKS:
        raise CheckpointError(f"layer counts ({gl}, {eb}) not supported")
    if expect is not None and (d, dh, z, hd) != tuple(expect):
        raise CheckpointError(
            f"dimension mismatch: file has {(d, dh, z, hd)}, expected {tuple(expect)}"
        )
    body, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(body):
        raise CheckpointError("checksum mismatch")
    model = P2PModel(d, dh, z, hd, conditioned=bool(cflag))
    if n_params != model.parameter_count():
        raise CheckpointError(
            f"dimension mismatch: header claims {n_params} parameters, "
            f"architecture has {model.parameter_count()}"
        )
    expected_bytes = _HEADER.size + 8 * n_params
    if len(body) != expected_bytes:
        raise CheckpointError(
            f"payload truncated: {len(body)} bytes, expected {expected_bytes}"
        )
    flat = np.frombuffer(body, dtype="<f8", offset=_HEADER.size)
    off = 0
    for p in model.parameters():
        p.data[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size
    return model
