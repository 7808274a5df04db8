"""Evaluation metrics: SSIM / PSNR / MSE primitives and the sampling- and
reconstruction-side aggregates (S-Best, S-Div, S-CPC, R-Best) with 95%
confidence intervals over the test set.

Frames here are plain numpy vectors; SSIM uses a single global window
(mean/variance statistics over the whole frame), which is the right reading
for non-raster data. The default kind for the built-in vector datasets is
MSE.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import split_rng
from .model import posterior_reconstruct, sample_batch

KINDS = ("ssim", "psnr", "mse")
HIGHER_BETTER = {"ssim": True, "psnr": True, "mse": False}

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
PSNR_CLAMP_DB = 100.0

REPORT_SCHEMA_VERSION = 1
REPORT_CSV_HEADER = (
    "schema,kind,n_samples,n_test_sequences,"
    "s_best,s_best_ci,s_div,s_div_ci,s_cpc,s_cpc_ci,r_best,r_best_ci"
)


def _check_pair(a, b, op):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range=1.0):
    """10*log10(range^2 / mse), clamped at +100 dB for (near-)identical frames."""
    a, b = _check_pair(a, b, "psnr")
    err = np.mean((a - b) ** 2)
    if err == 0.0:
        return PSNR_CLAMP_DB
    return float(min(10.0 * np.log10(data_range * data_range / err), PSNR_CLAMP_DB))


def ssim(a, b, data_range=1.0):
    """Structural similarity with a single global window (K1=0.01, K2=0.03)."""
    a, b = _check_pair(a, b, "ssim")
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return float(
        ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    )


def frame_metric(kind, a, b):
    if kind not in KINDS:
        raise ValueError(f"unknown metric kind {kind!r}")
    return {"ssim": ssim, "psnr": psnr, "mse": mse}[kind](a, b)


def _frame_scores(kind, frames, ref):
    """Per-frame metric between [..., T, D] frames and [T, D] reference."""
    if kind == "mse":
        return np.mean((frames - ref) ** 2, axis=-1)
    flat = frames.reshape(-1, frames.shape[-2], frames.shape[-1])
    out = np.array(
        [[frame_metric(kind, f, r) for f, r in zip(sample, ref)] for sample in flat]
    )
    return out.reshape(frames.shape[:-1])


def sequence_score(kind, sample, reference):
    """Mean over timesteps of the per-frame metric."""
    sample, reference = _check_pair(sample, reference, "sequence_score")
    return float(np.mean(_frame_scores(kind, sample, reference)))


def s_cpc(samples, target_end, kind):
    """Mean metric between each sample's generated end-frame and the target."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ValueError(f"samples must be non-empty [n, T, D], got {samples.shape}")
    return float(np.mean([frame_metric(kind, s[-1], target_end) for s in samples]))


def _per_sample_scores(samples, reference, kind):
    samples = np.asarray(samples, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ValueError(f"samples must be non-empty [n, T, D], got {samples.shape}")
    if samples.shape[1:] != reference.shape:
        raise ValueError(
            f"sample shape {samples.shape[1:]} does not match reference {reference.shape}"
        )
    return np.array([sequence_score(kind, s, reference) for s in samples])


def s_best(samples, reference, kind):
    """Best per-sample sequence score: max for SSIM/PSNR, min for MSE."""
    scores = _per_sample_scores(samples, reference, kind)
    return float(scores.max() if HIGHER_BETTER[kind] else scores.min())


def s_div(samples, reference, kind):
    """Across-sample diversity (population variance convention).

    SSIM/PSNR: variance across samples of the per-sample mean score. MSE:
    per-coordinate variance across samples of (sample - reference), averaged
    over coordinates, so identical samples give exactly zero.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 2:
        raise ValueError("s_div needs at least 2 samples")
    if kind == "mse":
        diffs = samples - np.asarray(reference, dtype=np.float64)[None]
        return float(np.mean(diffs.var(axis=0)))
    scores = _per_sample_scores(samples, reference, kind)
    return float(scores.var())


def r_best(model, test_seq, n, rng, kind):
    """S-Best over n posterior-driven reconstructions of one test sequence."""
    recon = posterior_reconstruct(model, test_seq, n, rng)
    return s_best(recon, test_seq, kind)


def confidence_interval(values):
    """(mean, 1.96 * sample stddev / sqrt(n)); needs at least two values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("confidence interval needs >= 2 values")
    half = 1.96 * values.std(ddof=1) / np.sqrt(values.size)
    return float(values.mean()), float(half)


@dataclass
class MetricsReport:
    kind: str
    n_samples: int
    n_test_sequences: int
    s_best: tuple
    s_div: tuple | None  # absent when only one sample is drawn
    s_cpc: tuple
    r_best: tuple

    def to_dict(self):
        def pair(p):
            return None if p is None else {"mean": p[0], "ci95": p[1]}

        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": self.kind,
            "n_samples": self.n_samples,
            "n_test_sequences": self.n_test_sequences,
            "s_best": pair(self.s_best),
            "s_div": pair(self.s_div),
            "s_cpc": pair(self.s_cpc),
            "r_best": pair(self.r_best),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv_row(self):
        def cell(p):
            return ("", "") if p is None else (f"{p[0]:.10g}", f"{p[1]:.10g}")

        cells = [str(REPORT_SCHEMA_VERSION), self.kind, str(self.n_samples),
                 str(self.n_test_sequences)]
        for p in (self.s_best, self.s_div, self.s_cpc, self.r_best):
            cells += cell(p)
        return ",".join(cells)


def evaluate_model(model, test_sequences, n_samples=100, kind="mse", rng=None,
                   include_r_best=True):
    """Paper-protocol evaluation: n samples per test sequence, 95% CIs across
    the test set."""
    if rng is None:
        rng = split_rng(0, "eval")
    seqs = list(test_sequences)
    if len(seqs) < 2:
        raise ValueError("need >= 2 test sequences for confidence intervals")
    best_v, div_v, cpc_v, rbest_v = [], [], [], []
    for seq in seqs:
        total = seq.shape[0]
        samples = sample_batch(model, seq[0], seq[-1], total, n_samples, rng)
        best_v.append(s_best(samples, seq, kind))
        cpc_v.append(s_cpc(samples, seq[-1], kind))
        if n_samples >= 2:
            div_v.append(s_div(samples, seq, kind))
        if include_r_best:
            rbest_v.append(r_best(model, seq, n_samples, rng, kind))
    return MetricsReport(
        kind=kind,
        n_samples=n_samples,
        n_test_sequences=len(seqs),
        s_best=confidence_interval(best_v),
        s_div=confidence_interval(div_v) if div_v else None,
        s_cpc=confidence_interval(cpc_v),
        r_best=confidence_interval(rbest_v) if rbest_v else (float("nan"), float("nan")),
    )


def diversity_through_time(model, test_sequences, n_samples=100, kind="mse", rng=None):
    """Per-timestep S-Div averaged over the test set; needs equal lengths."""
    if rng is None:
        rng = split_rng(0, "eval")
    seqs = list(test_sequences)
    total = seqs[0].shape[0]
    per_t = np.zeros(total)
    for seq in seqs:
        if seq.shape[0] != total:
            raise ValueError("diversity_through_time needs equal-length sequences")
        samples = sample_batch(model, seq[0], seq[-1], total, n_samples, rng)
        if kind == "mse":
            diffs = samples - seq[None]
            per_t += diffs.var(axis=0).mean(axis=-1)
        else:
            scores = _frame_scores(kind, samples, seq)
            per_t += scores.var(axis=0)
    return per_t / len(seqs)


def quality_through_time(model, test_sequences, n_samples=100, kind="mse", rng=None):
    """Per-timestep best frame score averaged over the test set."""
    if rng is None:
        rng = split_rng(0, "eval")
    seqs = list(test_sequences)
    total = seqs[0].shape[0]
    per_t = np.zeros(total)
    for seq in seqs:
        if seq.shape[0] != total:
            raise ValueError("quality_through_time needs equal-length sequences")
        samples = sample_batch(model, seq[0], seq[-1], total, n_samples, rng)
        scores = _frame_scores(kind, samples, seq)
        per_t += scores.max(axis=0) if HIGHER_BETTER[kind] else scores.min(axis=0)
    return per_t / len(seqs)
