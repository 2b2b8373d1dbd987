"""Evaluation metrics: scale-invariant SDR and FIR-projection SDR.

The scale-invariant metric has a single implementation, a differentiable
torch kernel (`sisdr_tensor`) that the training loss reuses; the public
`sisdr` wraps it for waveforms/arrays and returns a plain float in dB.
The FIR-projection SDR (`bss_sdr`) is evaluation-only and solves the
least-squares distortion filter with scipy.

Both metrics are clamped to +/-CLAMP_DB through an epsilon floor inside
the log ratio so that reports and losses stay finite.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.linalg import solve_toeplitz, toeplitz
from scipy.signal import fftconvolve

from .audio import Waveform

CLAMP_DB = 120.0
_EPS = 1e-12


def _as_samples(signal) -> np.ndarray:
    if isinstance(signal, Waveform):
        return signal.samples
    if isinstance(signal, torch.Tensor):
        return signal.detach().cpu().double().numpy()
    return np.asarray(signal, dtype=np.float64)


def sisdr_tensor(
    reference: torch.Tensor,
    estimate: torch.Tensor,
    clamp: bool = True,
) -> torch.Tensor:
    """Scale-invariant SDR in dB over the last axis, differentiable.

    Args:
        reference (torch.Tensor): Ground truth signal(s), shape (..., time).
        estimate (torch.Tensor): Estimated signal(s), same shape.
        clamp (bool): Clip the result to [-CLAMP_DB, CLAMP_DB].

    Returns:
        torch.Tensor: SiSDR value(s) of shape (...).

    Both signals are zero-meaned, the estimate is projected onto the
    reference, and the energy ratio of projection to residual is taken in
    dB. A 1e-12 floor relative to the total estimate energy guards both
    sides of the ratio, so the value is finite and exactly invariant to
    rescaling the estimate.
    """
    if reference.shape != estimate.shape:
        raise ValueError(
            f"length mismatch: reference {tuple(reference.shape)} vs "
            f"estimate {tuple(estimate.shape)}"
        )
    ref = reference - reference.mean(dim=-1, keepdim=True)
    est = estimate - estimate.mean(dim=-1, keepdim=True)
    dot = (est * ref).sum(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    tiny = torch.finfo(ref_energy.dtype).tiny
    projection = dot / ref_energy.clamp_min(tiny) * ref
    residual = est - projection
    num = (projection * projection).sum(dim=-1)
    den = (residual * residual).sum(dim=-1)
    floor = _EPS * (num + den).clamp_min(tiny)
    value = 10.0 * torch.log10((num + floor) / (den + floor))
    if clamp:
        value = value.clamp(-CLAMP_DB, CLAMP_DB)
    return value


def sisdr(reference, estimate, clamp: bool = True) -> float:
    """Scale-invariant SDR between two equal-length signals, in dB.

    Args:
        reference: Ground truth (Waveform or 1-D array).
        estimate: Estimated signal, same length.
        clamp (bool): Clip to [-CLAMP_DB, CLAMP_DB]; disable to inspect
            the pre-clamp value.

    Returns:
        float: SiSDR in dB.

    Raises:
        ValueError: on length mismatch, length < 2, or a reference that is
            identically zero after mean removal.
    """
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    if ref.ndim != 1 or ref.size < 2:
        raise ValueError("signals must be 1-D with at least 2 samples")
    if not np.any(ref - ref.mean()):
        raise ValueError("reference is all-zero after mean removal")
    value = sisdr_tensor(torch.from_numpy(ref), torch.from_numpy(est), clamp=clamp)
    return float(value.item())


def bss_sdr(reference, estimate, filter_taps: int = 512) -> float:
    """Signal-to-distortion ratio with an FIR distortion filter, in dB.

    The allowed distortion is the least-squares projection of the estimate
    onto delayed copies of the reference (filter_taps taps, signals
    zero-padded to the full convolution length):

        SDR = 10 log10(||projection||^2 / ||estimate - projection||^2)

    With filter_taps=1 and zero-mean inputs this coincides with sisdr.

    Args:
        reference: Ground truth signal.
        estimate: Estimated signal, same length.
        filter_taps (int): Length of the allowed distortion filter.

    Returns:
        float: SDR in dB, clamped to [-CLAMP_DB, CLAMP_DB].
    """
    ref = _as_samples(reference)
    est = _as_samples(estimate)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    if filter_taps < 1:
        raise ValueError("filter_taps must be >= 1")
    if ref.size <= filter_taps:
        raise ValueError(
            f"signal length {ref.size} must exceed filter_taps {filter_taps}"
        )
    if not np.any(ref):
        raise ValueError("reference is all-zero")

    n = ref.size
    # Gram matrix of the shifted references is Toeplitz in the zero-padded
    # autocorrelation; the right-hand side is the cross-correlation.
    autocorr = fftconvolve(ref, ref[::-1])[n - 1 : n - 1 + filter_taps]
    crosscorr = fftconvolve(est, ref[::-1])[n - 1 : n - 1 + filter_taps]
    taps = _solve_projection(autocorr, crosscorr)
    projection = fftconvolve(ref, taps)
    padded = np.zeros(n + filter_taps - 1)
    padded[:n] = est
    num = float(np.sum(projection**2))
    den = float(np.sum((padded - projection) ** 2))
    floor = _EPS * max(num + den, np.finfo(np.float64).tiny)
    value = 10.0 * np.log10((num + floor) / (den + floor))
    return float(np.clip(value, -CLAMP_DB, CLAMP_DB))


def _solve_projection(autocorr: np.ndarray, crosscorr: np.ndarray) -> np.ndarray:
    if autocorr.size == 1:
        return crosscorr / np.maximum(autocorr, _EPS)
    try:
        taps = solve_toeplitz((autocorr, autocorr), crosscorr)
        if np.all(np.isfinite(taps)):
            return taps
    except np.linalg.LinAlgError:
        pass
    # Levinson fails on (near-)singular Gram matrices, e.g. narrowband
    # references; fall back to the minimum-norm least-squares solution.
    taps, *_ = np.linalg.lstsq(toeplitz(autocorr), crosscorr, rcond=None)
    return taps


def sisdr_improvement(reference, mixture_ref_channel, estimate) -> float:
    """SiSDR gain of the estimate over the unprocessed mixture channel.

    Args:
        reference: Ground truth target signal.
        mixture_ref_channel: Reference-channel mixture (the no-op baseline).
        estimate: Estimated target signal.

    Returns:
        float: sisdr(reference, estimate) - sisdr(reference, mixture), dB.
    """
    return sisdr(reference, estimate) - sisdr(reference, mixture_ref_channel)
