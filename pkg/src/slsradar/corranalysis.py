"""Windowed correlation of the probing signal and resolution diagnostics.

The windowed correlation

    Phi(tau, tau_bar) = (1/E_chi) * int_{Tw1}^{Tw2} s*(t-tau) s(t-tau_bar) dt

measures how well a delayed copy of the probe matches another delayed copy
inside the processing window; its peak/sidelobe structure decides which
window presets give unambiguous ranging.  E_chi is the composite-pulse
energy, which makes the zero-offset value approximately the number of
integrated chips (the coherent processing gain).

Integrals are trapezoidal on a grid of ``oversample`` points per chip;
profiles over many delays are computed with one FFT cross-correlation.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

from .params import SPEED_OF_LIGHT, delay_to_range
from .waveform import probe_lattice, probe_samples

DEFAULT_OVERSAMPLE = 8


def _quad_grid(win, oversample):
    dt = win.t_sample / oversample
    n = int(round(win.duration / dt)) + 1
    times = win.t_start + dt * np.arange(n)
    weights = np.ones(n)
    weights[0] = weights[-1] = 0.5
    return times, weights, dt


def windowed_correlation(tau, tau_bar, win, sym, chi,
                         oversample=DEFAULT_OVERSAMPLE):
    """Phi at a single delay pair, by direct quadrature."""
    times, weights, dt = _quad_grid(win, oversample)
    a = probe_samples(sym, chi, times - tau)
    b = probe_samples(sym, chi, times - tau_bar)
    return complex(np.sum(weights * np.conj(a) * b) * dt / chi.energy)


@dataclass(frozen=True)
class CorrelationProfile:
    """|Phi| trace versus delay for a fixed reference delay."""

    ref_delay_s: float
    delays_s: np.ndarray
    values: np.ndarray
    normalization: float

    @property
    def magnitudes(self):
        return np.abs(self.values)

    def to_csv(self, path):
        """Write (c*tau/2 [m], |Phi|) rows."""
        with open(path, "w") as fh:
            fh.write("range_m,abs_phi\n")
            for tau, mag in zip(self.delays_s, self.magnitudes):
                fh.write(f"{delay_to_range(tau)!r},{mag!r}\n")


def correlation_profile(tau_bar, win, sym, chi, delay_start, delay_stop,
                        delay_step, oversample=DEFAULT_OVERSAMPLE):
    """Dense |Phi| trace over a delay sweep.

    The sweep is snapped to the quadrature lattice (step T/oversample) so
    the whole trace reduces to one FFT cross-correlation of the windowed
    probe against a shifted copy.
    """
    times, weights, dt = _quad_grid(win, oversample)
    q = max(1, int(round(delay_step / dt)))
    j0 = int(round(delay_start / dt))
    n_delays = int(np.floor((delay_stop - delay_start) / (q * dt) + 1e-9)) + 1
    delays = (j0 + q * np.arange(n_delays)) * dt

    ref = weights * probe_samples(sym, chi, times - tau_bar)
    # lattice covering s(t_m - tau_j) for every quadrature instant and delay
    lat = probe_lattice(sym, chi, times[0] - delays[-1], times[-1] - delays[0], dt)
    shifted = lat.values
    n = shifted.size
    # Phi[j] = sum_m ref[m] * conj(shifted[m + l_j]), l_j = q*(n_delays-1-j),
    # and correlate(ref, shifted)[n-1-l] realizes that sum at lag l.
    corr = correlate(ref, shifted, mode="full", method="fft")
    lags = q * (n_delays - 1 - np.arange(n_delays))
    vals = corr[n - 1 - lags] * dt / chi.energy
    return CorrelationProfile(tau_bar, delays, vals, chi.energy)


def correlation_map(win, sym, chi, delays, ref_delays,
                    oversample=DEFAULT_OVERSAMPLE):
    """Matrix of |Phi| over (ref delay, delay), normalized to its peak."""
    delays = np.asarray(delays, dtype=np.float64)
    rows = []
    for tb in ref_delays:
        prof = correlation_profile(tb, win, sym, chi, delays[0], delays[-1],
                                   delays[1] - delays[0], oversample)
        rows.append(prof.magnitudes[: delays.size])
    mat = np.vstack(rows)
    return mat / mat.max()


def correlation_map_to_csv(mat, delays, ref_delays, path):
    """Dense map CSV: first row/column carry the range axes in meters."""
    with open(path, "w") as fh:
        header = ",".join(
            ["ref_range_m\\range_m"] + [repr(delay_to_range(t)) for t in delays])
        fh.write(header + "\n")
        for tb, row in zip(ref_delays, mat):
            fh.write(",".join([repr(delay_to_range(tb))] +
                              [repr(float(v)) for v in row]) + "\n")


def doppler_resolution(win, tau, carrier_hz=60e9):
    """Smallest resolvable Doppler split for an echo at delay tau.

    Returns (Hz, m/s).  The usable echo duration is the window length
    clipped at the echo arrival, so late echoes resolve worse.
    """
    duration = win.t_end - max(win.t_start, tau)
    if duration <= 0:
        raise ValueError("echo delay beyond the processing window")
    dnu = 1.0 / duration
    dv = SPEED_OF_LIGHT * dnu / (2.0 * carrier_hz)
    return dnu, dv
