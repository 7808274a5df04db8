import numpy as np
import pytest

from p2pgen import tensor as tt
from p2pgen.layers import init_params
from p2pgen.model import (
    CheckpointError,
    GenerationCondition,
    P2PModel,
    expected_parameter_count,
    generator_step,
    global_descriptor,
    load_checkpoint,
    loop_generate,
    make_condition,
    posterior_reconstruct,
    posterior_step,
    prior_step,
    sample_batch,
    sample_sequence,
    save_checkpoint,
    stitch_boundaries,
    stitch_generate,
    time_counter,
    train_unroll,
)
from p2pgen.tensor import ShapeError, Tensor, backward, tape

from conftest import assert_grads_match, fd_gradient


def small_model(seed=0, frame_dim=2, conditioned=True):
    return P2PModel(
        frame_dim, descriptor_dim=8, latent_dim=3, hidden_dim=12,
        conditioned=conditioned, rng=np.random.default_rng(seed),
    )


def random_frames(rng, batch, total, dim=2):
    return rng.uniform(0.0, 1.0, size=(batch, total, dim))


# ---------------------------------------------------------------------------
# time counter and descriptor


def test_time_counter_values():
    assert time_counter(10, 10) == 1.0
    assert time_counter(1, 2) == 0.5
    assert time_counter(5, 10) == 0.5


def test_time_counter_out_of_range():
    with pytest.raises(ValueError):
        time_counter(0, 5)
    with pytest.raises(ValueError):
        time_counter(6, 5)


def test_global_descriptor_deterministic_and_bounded():
    m = small_model(1)
    x = np.array([0.3, 0.8])
    a = global_descriptor(m, x)
    b = global_descriptor(m, x)
    assert np.array_equal(a.data, b.data)
    assert np.max(np.abs(a.data)) < 1.0
    assert m.descriptor_reads == 2


def test_global_descriptor_separates_random_frames():
    m = small_model(2)
    rng = np.random.default_rng(3)
    a = global_descriptor(m, rng.uniform(0, 1, 2))
    b = global_descriptor(m, rng.uniform(0, 1, 2))
    assert not np.allclose(a.data, b.data)


# ---------------------------------------------------------------------------
# single steps


def _cond_for(m, batch, total, rng):
    x_end = rng.uniform(0, 1, (batch, m.frame_dim))
    return make_condition(m, x_end, total)


def test_posterior_step_deterministic_and_tau_sensitive():
    m = small_model(4)
    rng = np.random.default_rng(5)
    cond = _cond_for(m, 2, 10, rng)
    h_t = m.encode(rng.uniform(0, 1, (2, 2)))
    s0 = m.posterior.init_state(2)
    mu1, lv1, _ = posterior_step(m, s0, h_t, cond, 3)
    mu2, lv2, _ = posterior_step(m, s0, h_t, cond, 3)
    assert np.array_equal(mu1.data, mu2.data)
    assert np.array_equal(lv1.data, lv2.data)
    mu3, _, _ = posterior_step(m, s0, h_t, cond, 7)
    assert not np.allclose(mu1.data, mu3.data)


def test_prior_step_deterministic_and_tau_sensitive():
    m = small_model(6)
    rng = np.random.default_rng(7)
    cond = _cond_for(m, 2, 10, rng)
    h_prev = m.encode(rng.uniform(0, 1, (2, 2)))
    s0 = m.prior.init_state(2)
    mu1, _, _ = prior_step(m, s0, h_prev, cond, 3)
    mu2, _, _ = prior_step(m, s0, h_prev, cond, 3)
    mu3, _, _ = prior_step(m, s0, h_prev, cond, 7)
    assert np.array_equal(mu1.data, mu2.data)
    assert not np.allclose(mu1.data, mu3.data)


def test_posterior_and_prior_gradient_reaches_encoder():
    m = small_model(8)
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(0, 1, (2, 2)))
    x_end = Tensor(rng.uniform(0, 1, (2, 2)))
    enc_w = m.encoder.in_proj.W

    for step_fn, core in ((posterior_step, m.posterior), (prior_step, m.prior)):
        def f():
            with tt.no_tape():
                cond = GenerationCondition(m.encoder(x_end), 10)
                h = m.encoder(x)
                mu, _, _ = step_fn(m, core.init_state(2), h, cond, 3)
                return tt.sum(mu).item()

        with tape():
            cond = GenerationCondition(m.encoder(x_end), 10)
            h = m.encoder(x)
            mu, _, _ = step_fn(m, core.init_state(2), h, cond, 3)
            backward(tt.sum(mu))
        assert enc_w.grad is not None and np.any(enc_w.grad != 0.0)
        assert_grads_match([enc_w.grad], fd_gradient(f, [enc_w]))
        for p in m.parameters():
            p.grad = None


def test_generator_step_decoder_determinism_and_z_sensitivity():
    m = small_model(10)
    rng = np.random.default_rng(11)
    h_prev = m.encode(rng.uniform(0, 1, (1, 2)))
    z1 = Tensor(rng.standard_normal((1, 3)))
    z2 = Tensor(rng.standard_normal((1, 3)))
    s0 = m.generator.init_state(1)
    _, xa, _ = generator_step(m, s0, h_prev, z1, 0.5)
    _, xb, _ = generator_step(m, s0, h_prev, z1, 0.5)
    _, xc, _ = generator_step(m, s0, h_prev, z2, 0.5)
    assert np.array_equal(xa.data, xb.data)
    assert not np.allclose(xa.data, xc.data)
    with pytest.raises(ShapeError):
        generator_step(m, s0, h_prev, Tensor(np.zeros((1, 5))), 0.5)


def test_generator_reconstruction_gradient_reaches_latent():
    m = small_model(12)
    rng = np.random.default_rng(13)
    h_prev = m.encode(rng.uniform(0, 1, (1, 2)))
    z = Tensor(rng.standard_normal((1, 3)))
    target = rng.uniform(0, 1, (1, 2))

    def f():
        with tt.no_tape():
            _, x_hat, _ = generator_step(m, m.generator.init_state(1), h_prev, z, 0.5)
            return float(((x_hat.data - target) ** 2).sum())

    with tape():
        _, x_hat, _ = generator_step(m, m.generator.init_state(1), h_prev, z, 0.5)
        backward(tt.sum(tt.square(tt.sub(x_hat, Tensor(target)))))
    assert z.grad is not None and np.any(z.grad != 0.0)
    assert_grads_match([z.grad], fd_gradient(f, [z]))


# ---------------------------------------------------------------------------
# training unroll


def test_train_unroll_keeps_all_steps_without_skip():
    m = small_model(14)
    rng = np.random.default_rng(15)
    frames = random_frames(rng, 3, 6)
    cond = make_condition(m, frames[:, -1], 6)
    rec = train_unroll(m, frames, cond, np.ones(6), rng, cpc_path="prior")
    assert rec.kept == [1, 2, 3, 4, 5]
    assert all(x is not None for x in rec.x_hat)
    assert all(rec.mu_q[i] is not None for i in rec.kept)
    assert rec.cpc_x_hat is not None and rec.cpc_path == "prior"
    assert np.array_equal(rec.x_hat[0].data, frames[:, 0])


def test_train_unroll_reproducible_under_seed():
    def run():
        m = small_model(16)
        rng = np.random.default_rng(17)
        frames = random_frames(np.random.default_rng(18), 2, 5)
        cond = make_condition(m, frames[:, -1], 5)
        rec = train_unroll(m, frames, cond, np.ones(5), rng, cpc_path="prior")
        return np.concatenate([rec.x_hat[i].data.reshape(-1) for i in rec.kept])

    assert run().tobytes() == run().tobytes()


def test_train_unroll_rejects_bad_masks_and_lengths():
    m = small_model(19)
    rng = np.random.default_rng(20)
    frames = random_frames(rng, 1, 4)
    cond = make_condition(m, frames[:, -1], 4)
    with pytest.raises(ValueError):
        train_unroll(m, frames, cond, np.array([1, 1, 1, 0]), rng)
    with pytest.raises(ValueError):
        train_unroll(m, frames, cond, np.array([0, 1, 1, 1]), rng)
    with pytest.raises(ValueError):
        train_unroll(m, frames, cond, np.ones(3), rng)
    with pytest.raises(ValueError):
        train_unroll(m, frames[:, :1], None, np.ones(1), rng)


def _unroll_signature(rec):
    parts = []
    for i in rec.kept:
        for field in (rec.mu_q, rec.logvar_q, rec.mu_p, rec.logvar_p, rec.z, rec.x_hat):
            parts.append(field[i].data.reshape(-1))
    for key in ("posterior", "prior"):
        h, c = rec.final_states[key]
        parts += [h.data.reshape(-1), c.data.reshape(-1)]
    for h, c in rec.final_states["generator"]:
        parts += [h.data.reshape(-1), c.data.reshape(-1)]
    if rec.cpc_x_hat is not None:
        parts.append(rec.cpc_x_hat.data.reshape(-1))
    return np.concatenate(parts)


def test_skip_step_equals_frame_deletion():
    """Masking step k must reproduce the unroll on the sequence with frame k
    deleted, keeping the original wall-clock tau values."""
    m = small_model(21)
    rng_data = np.random.default_rng(22)
    frames = random_frames(rng_data, 2, 7)
    total = 7
    mask = np.array([1, 1, 0, 1, 0, 1, 1])
    cond = make_condition(m, frames[:, -1], total)

    rec_masked = train_unroll(
        m, frames, cond, mask, np.random.default_rng(23), cpc_path="prior"
    )

    keep = mask.astype(bool)
    deleted = frames[:, keep]
    taus = (np.arange(1, total + 1) / total)[keep]
    cond2 = GenerationCondition(cond.h_T, int(keep.sum()))
    rec_deleted = train_unroll(
        m, deleted, cond2, np.ones(int(keep.sum())), np.random.default_rng(23),
        cpc_path="prior", taus=taus,
    )

    sig_a = _unroll_signature(rec_masked)
    sig_b = _unroll_signature(rec_deleted)
    assert np.max(np.abs(sig_a - sig_b)) <= 1e-12


# ---------------------------------------------------------------------------
# generation


def test_sample_sequence_minimal_length():
    m = small_model(24)
    rng = np.random.default_rng(25)
    start, end = np.array([0.1, 0.9]), np.array([0.8, 0.2])
    seq = sample_sequence(m, start, end, 2, rng)
    assert seq.shape == (2, 2)
    assert np.array_equal(seq[0], start)
    with pytest.raises(ValueError):
        sample_sequence(m, start, end, 1, rng)


def test_sample_sequence_reproducible():
    m = small_model(26)
    start, end = np.array([0.1, 0.9]), np.array([0.8, 0.2])
    a = sample_sequence(m, start, end, 8, np.random.default_rng(1))
    b = sample_sequence(m, start, end, 8, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()


def test_sample_batch_rows_are_independent_samples():
    m = small_model(27)
    samples = sample_batch(
        m, np.array([0.2, 0.2]), np.array([0.9, 0.9]), 6, 4, np.random.default_rng(2)
    )
    assert samples.shape == (4, 6, 2)
    assert np.array_equal(samples[:, 0], np.tile([0.2, 0.2], (4, 1)))
    assert not np.allclose(samples[0, 1:], samples[1, 1:])


def test_posterior_reconstruct_shape_and_start():
    m = small_model(28)
    rng = np.random.default_rng(29)
    seq = random_frames(rng, 1, 6)[0]
    recon = posterior_reconstruct(m, seq, 3, rng)
    assert recon.shape == (3, 6, 2)
    assert np.array_equal(recon[:, 0], np.tile(seq[0], (3, 1)))


def test_stitch_merges_with_shared_boundaries():
    m = small_model(30)
    rng = np.random.default_rng(31)
    cps = [np.array([0.1, 0.1]), np.array([0.5, 0.5]), np.array([0.9, 0.9])]
    merged = stitch_generate(m, cps, [5, 5], rng)
    assert merged.shape == (9, 2)
    bounds = stitch_boundaries([5, 5])
    assert bounds == [0, 4, 8]
    # interior control points are emitted verbatim; the final frame is the
    # model's consistency attempt toward the last control point
    assert np.array_equal(merged[0], cps[0])
    assert np.array_equal(merged[4], cps[1])


def test_stitch_two_points_degenerates_to_sample_sequence():
    m = small_model(32)
    cps = [np.array([0.2, 0.3]), np.array([0.7, 0.6])]
    merged = stitch_generate(m, cps, [6], np.random.default_rng(3))
    direct = sample_sequence(m, cps[0], cps[1], 6, np.random.default_rng(3))
    assert np.array_equal(merged, direct)


def test_stitch_validates_lengths():
    m = small_model(33)
    cps = [np.zeros(2), np.ones(2), np.ones(2)]
    with pytest.raises(ValueError):
        stitch_generate(m, cps, [5], np.random.default_rng(0))
    with pytest.raises(ValueError):
        stitch_generate(m, cps, [5, 1], np.random.default_rng(0))


def test_loop_first_frame_and_reproducibility():
    m = small_model(34)
    x = np.array([0.4, 0.6])
    a = loop_generate(m, x, 5, np.random.default_rng(4))
    b = loop_generate(m, x, 5, np.random.default_rng(4))
    assert np.array_equal(a[0], x)
    assert a.shape == (5, 2)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        loop_generate(m, x, 2, np.random.default_rng(4))


def test_unconditioned_model_never_reads_descriptor():
    m = small_model(35, conditioned=False)
    rng = np.random.default_rng(36)
    frames = random_frames(rng, 2, 5)
    train_unroll(m, frames, None, np.ones(5), rng)
    sample_sequence(m, frames[0, 0], frames[0, -1], 5, rng)
    assert m.descriptor_reads == 0


# ---------------------------------------------------------------------------
# checkpointing


def test_parameter_count_matches_formula():
    m = small_model(37)
    assert m.parameter_count() == expected_parameter_count(2, 8, 3, 12)
    big = P2PModel(4, 64, 8, 128)
    assert big.parameter_count() == expected_parameter_count(4, 64, 8, 128)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    m = small_model(38)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(m, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.conditioned == m.conditioned
    for a, b in zip(m.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data)


def test_checkpoint_rejects_corruption_and_mismatch(tmp_path):
    m = small_model(39)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)

    blob = bytearray(path.read_bytes())
    blob[60] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)

    with pytest.raises(CheckpointError, match="dimension"):
        load_checkpoint(path, expect=(2, 8, 3, 99))

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)

    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"NOTAMODL" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(garbage)
