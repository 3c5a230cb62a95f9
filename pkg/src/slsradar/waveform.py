"""Control-PHY probing waveform: chip stream, pulses, echo signatures.

The transmitted packet is the IEEE 802.11ad control-PHY frame used during
a sector sweep: a 7552-chip preamble built from length-128 Golay
complementary pairs, followed by a header/payload body that behaves like a
pseudo-random +/-1 stream spread by a length-32 Golay sequence.  Chips are
pi/2-BPSK rotated and shaped with a truncated raised-cosine pulse; the
receive filter is matched to it, so every sampled quantity downstream is
built from the composite (tx conv rx) pulse tabulated here.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .params import (
    GOLAY_LEN,
    K_MAX,
    K_MIN,
    PREAMBLE_LEN,
    SPREAD_LEN,
    STF_GB_REPS,
    T_SYMBOL,
)

# Delay/weight schedule of the standard's length-128 Golay generator.
_GOLAY128_DELAYS = (1, 8, 2, 4, 16, 32, 64)
_GOLAY128_WEIGHTS = (-1, -1, -1, -1, 1, -1, -1)

DEFAULT_PULSE_OVERSAMPLE = 4096


@dataclass(frozen=True)
class GolayPair:
    """A +/-1 complementary pair: autocorrelations sum to a delta."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.int64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.int64))

    @property
    def length(self):
        return self.a.size


def aperiodic_autocorrelation(seq):
    """Full aperiodic autocorrelation, lags -(n-1)..(n-1)."""
    x = np.asarray(seq, dtype=np.float64)
    return np.correlate(x, x, mode="full")


def golay_pair(length=GOLAY_LEN):
    """Generate a Golay complementary pair of the given power-of-two length.

    Length 128 uses the 802.11ad delay/weight schedule (so the pair is the
    standard's Ga128/Gb128); other powers of two use the plain recursive
    construction with delays 1, 2, 4, ...  Complementarity is exact in
    integer arithmetic either way.
    """
    if length < 2 or (length & (length - 1)) != 0:
        raise ValueError(f"unsupported Golay length {length}: need a power of two >= 2")
    stages = length.bit_length() - 1
    if length == GOLAY_LEN:
        delays, weights = _GOLAY128_DELAYS, _GOLAY128_WEIGHTS
    else:
        delays = tuple(2 ** i for i in range(stages))
        weights = (-1,) * stages

    a = np.array([1], dtype=np.int64)
    b = np.array([1], dtype=np.int64)
    for d, w in zip(delays, weights):
        n = a.size + d
        aa = np.zeros(n, dtype=np.int64)
        bb = np.zeros(n, dtype=np.int64)
        aa[: a.size] = w * a
        aa[d:] += b
        bb[: a.size] = w * a
        bb[d:] -= b
        a, b = aa, bb
    # time-reversed readout, matching the standard's indexing
    return GolayPair(a[::-1].copy(), b[::-1].copy())


def control_preamble(pair=None):
    """The 7552-chip control-PHY preamble.

    STF: 48 repetitions of Gb, then -Gb and -Ga as field terminator.
    CEF: Gu512 = [-Gb -Ga +Gb -Ga], Gv512 = [-Gb +Ga -Gb -Ga], then -Gb.
    """
    if pair is None:
        pair = golay_pair(GOLAY_LEN)
    ga, gb = pair.a, pair.b
    stf = np.concatenate([np.tile(gb, STF_GB_REPS), -gb, -ga])
    gu = np.concatenate([-gb, -ga, gb, -ga])
    gv = np.concatenate([-gb, ga, -gb, -ga])
    cef = np.concatenate([gu, gv, -gb])
    preamble = np.concatenate([stf, cef])
    assert preamble.size == PREAMBLE_LEN
    return preamble


@dataclass(frozen=True)
class SymbolSequence:
    """The +/-1 chip stream of one transmitted packet.

    ``rotated_chips`` carries the pi/2-BPSK constellation points
    chips[k] * i^k actually entering the modulator; it is derived once at
    construction.
    """

    chips: np.ndarray
    preamble_len: int = PREAMBLE_LEN
    seed: int | None = None
    rotated_chips: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        chips = np.asarray(self.chips, dtype=np.int8)
        object.__setattr__(self, "chips", chips)
        rot = np.array([1, 1j, -1, -1j], dtype=np.complex128)
        k = np.arange(chips.size)
        object.__setattr__(
            self, "rotated_chips", chips.astype(np.complex128) * rot[k & 3])

    @property
    def length(self):
        return self.chips.size


def build_symbols(length, seed):
    """Assemble a packet: fixed preamble plus a pseudo-random spread body.

    The body stands in for the scrambled/LDPC-coded header and payload:
    i.i.d. equiprobable bits, differentially encoded, then spread by a
    length-32 Golay sequence so the near-in sidelobe structure of the real
    coded stream is preserved.
    """
    if not K_MIN <= length <= K_MAX:
        raise ValueError(
            f"packet length {length} outside [{K_MIN}, {K_MAX}] chips")
    preamble = control_preamble()
    body_len = length - PREAMBLE_LEN
    spreader = golay_pair(SPREAD_LEN).a
    n_bits = -(-body_len // SPREAD_LEN)
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=n_bits).astype(np.int64) * 2 - 1
    encoded = np.cumprod(bits)
    body = np.multiply.outer(encoded, spreader).ravel()[:body_len]
    return SymbolSequence(np.concatenate([preamble, body]), seed=seed)


@dataclass(frozen=True)
class PulseShape:
    """Unit-energy truncated raised-cosine chip pulse on [0, 2T]."""

    roll_off: float = 0.3
    symbol_interval_s: float = T_SYMBOL
    kind: str = "truncated-raised-cosine"
    amplitude: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "amplitude", 1.0)
        energy = _pulse_energy(self)
        object.__setattr__(self, "amplitude", 1.0 / np.sqrt(energy))

    @property
    def support_s(self):
        return (0.0, 2.0 * self.symbol_interval_s)

    def __call__(self, t):
        """Evaluate the pulse; zero outside its support."""
        t = np.asarray(t, dtype=np.float64)
        T = self.symbol_interval_s
        beta = self.roll_off
        x = t / T - 1.0
        inside = (t >= 0.0) & (t <= 2.0 * T)
        x = np.where(inside, x, 0.0)
        denom = 1.0 - (2.0 * beta * x) ** 2
        singular = np.abs(denom) < 1e-12
        denom = np.where(singular, 1.0, denom)
        vals = np.sinc(x) * np.cos(np.pi * beta * x) / denom
        # limit value at |x| = 1/(2 beta), relevant only for beta >= 0.5
        limit = np.sinc(1.0 / (2.0 * beta)) * np.pi / 4.0
        vals = np.where(singular, limit, vals)
        return self.amplitude * vals * inside


def _pulse_energy(pulse):
    from scipy.integrate import quad
    T = pulse.symbol_interval_s
    val, _ = quad(lambda t: float(pulse(t)) ** 2, 0.0, 2.0 * T, limit=200)
    return val


@dataclass(frozen=True)
class PulseTable:
    """A pulse-derived kernel tabulated on a fine uniform grid.

    Used both for the composite tx*rx pulse and for pulse autocorrelations.
    Linear interpolation off the grid; the default grid is fine enough
    (T/4096) that the interpolation error is ~1e-7 relative.
    """

    t_start: float
    dt: float
    values: np.ndarray
    symbol_interval_s: float

    @property
    def t_stop(self):
        return self.t_start + (self.values.size - 1) * self.dt

    @property
    def support_s(self):
        return (self.t_start, self.t_stop)

    @property
    def energy(self):
        """Integral of the squared kernel over its support."""
        return float(np.trapz(self.values ** 2, dx=self.dt))

    @property
    def area(self):
        return float(np.trapz(self.values, dx=self.dt))

    def __call__(self, t):
        # uniform grid: direct linear interpolation beats np.interp's search
        pos = (np.asarray(t, dtype=np.float64) - self.t_start) / self.dt
        idx = np.floor(pos).astype(np.int64)
        frac = pos - idx
        inside = (idx >= 0) & (idx < self.values.size - 1)
        idx = np.clip(idx, 0, self.values.size - 2)
        out = (1.0 - frac) * self.values[idx] + frac * self.values[idx + 1]
        return np.where(inside, out, 0.0)

    def derivative(self, t):
        grad = np.gradient(self.values, self.dt)
        return np.interp(t, self.t_start + self.dt * np.arange(self.values.size),
                         grad, left=0.0, right=0.0)


def composite_pulse(tx, rx=None, oversample=DEFAULT_PULSE_OVERSAMPLE):
    """Tabulate the composite pulse (tx conv rx) seen after the rx filter."""
    if rx is None:
        rx = tx
    T = tx.symbol_interval_s
    dt = T / oversample
    t_tx = np.arange(0.0, tx.support_s[1] + dt / 2, dt)
    t_rx = np.arange(0.0, rx.support_s[1] + dt / 2, dt)
    vals = fftconvolve(tx(t_tx), rx(t_rx)) * dt
    return PulseTable(0.0, dt, vals, T)


def pulse_autocorrelation(pulse, oversample=DEFAULT_PULSE_OVERSAMPLE):
    """Deterministic autocorrelation, tabulated over two-sided lags."""
    T = pulse.symbol_interval_s
    dt = T / oversample
    t = np.arange(0.0, pulse.support_s[1] + dt / 2, dt)
    v = pulse(t)
    vals = fftconvolve(v, v[::-1]) * dt
    t_start = -(v.size - 1) * dt
    return PulseTable(t_start, dt, vals, T)


@dataclass(frozen=True)
class ProcessingWindow:
    """The slice [t_start, t_end] of the received signal that is sampled."""

    t_start: float
    t_end: float
    t_sample: float = T_SYMBOL

    def __post_init__(self):
        if not 0.0 <= self.t_start < self.t_end:
            raise ValueError("need 0 <= t_start < t_end")
        if self.t_sample <= 0.0:
            raise ValueError("sampling interval must be positive")

    @property
    def num_samples(self):
        return int(np.floor((self.t_end - self.t_start) / self.t_sample + 1e-9)) + 1

    def sample_times(self):
        return self.t_start + self.t_sample * np.arange(self.num_samples)

    @property
    def duration(self):
        return self.t_end - self.t_start


# Window presets, in chip counts (start, end); None means the packet end K.
_WINDOW_PRESETS = {
    "a": (0, None),
    "b": (0, PREAMBLE_LEN),
    "c": (PREAMBLE_LEN, None),
    "d": (15744, 16256),
    "e": (8 * GOLAY_LEN, 12 * GOLAY_LEN),
    "f": (51 * GOLAY_LEN, 55 * GOLAY_LEN),
}


def window_preset(name, packet_len=K_MIN, t_sample=T_SYMBOL,
                  symbol_interval_s=T_SYMBOL):
    """One of the six named processing windows (a)-(f)."""
    try:
        lo, hi = _WINDOW_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown window preset {name!r}: choose from "
            f"{sorted(_WINDOW_PRESETS)}") from None
    hi = packet_len if hi is None else hi
    if hi > packet_len:
        raise ValueError(
            f"window {name!r} needs at least {hi} chips, packet has {packet_len}")
    T = symbol_interval_s
    return ProcessingWindow(lo * T, hi * T, t_sample)


def probe_samples(sym, chi, times, chip_energy=1.0):
    """Sample the probing signal s(t) at arbitrary instants.

    s(t) = sqrt(P*T) * sum_k c(k) chi(t - kT) with c(k) the rotated chips;
    only the handful of chips whose composite-pulse support covers t
    contribute.  ``chip_energy`` is P*T (unit transmit power by default).
    """
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    T = chi.symbol_interval_s
    span = int(np.ceil(chi.t_stop / T)) + 1
    k_hi = np.floor(t / T).astype(np.int64)
    ks = k_hi[:, None] - np.arange(span)[None, :]
    valid = (ks >= 0) & (ks < sym.length)
    chips = np.where(valid, sym.rotated_chips[np.clip(ks, 0, sym.length - 1)], 0.0)
    kernel = chi(t[:, None] - ks * T)
    out = np.sqrt(chip_energy) * (chips * kernel).sum(axis=1)
    if np.isscalar(times) or np.ndim(times) == 0:
        return complex(out[0])
    return out


@dataclass(frozen=True)
class ProbeLattice:
    """The probe signal pre-sampled on a uniform lattice.

    Signatures whose delays are lattice-aligned become pure index gathers,
    which is what the detector grids rely on.
    """

    t_start: float
    dt: float
    values: np.ndarray

    def index_of(self, t):
        return (t - self.t_start) / self.dt

    def gather(self, idx):
        out = np.zeros(idx.shape, dtype=np.complex128)
        ok = (idx >= 0) & (idx < self.values.size)
        out[ok] = self.values[idx[ok]]
        return out


def probe_lattice(sym, chi, t_start, t_stop, dt, chip_energy=1.0):
    n = int(round((t_stop - t_start) / dt)) + 1
    times = t_start + dt * np.arange(n)
    return ProbeLattice(t_start, dt, probe_samples(sym, chi, times, chip_energy))


@dataclass(frozen=True)
class Signature:
    """Sampled echo expected from a point target at (delay, doppler)."""

    samples: np.ndarray
    delay_s: float
    doppler_hz: float


def doppler_vector(nu, win):
    """Doppler steering vector over the window's sampling instants."""
    return np.exp(2j * np.pi * nu * win.sample_times())


def validate_feasible(tau, nu, bounds):
    if not bounds.tau_min_s <= tau <= bounds.tau_max_s:
        raise ValueError(
            f"delay {tau:.3e} s outside feasible "
            f"[{bounds.tau_min_s:.3e}, {bounds.tau_max_s:.3e}]")
    if abs(nu) > bounds.nu_max_hz:
        raise ValueError(
            f"Doppler {nu:.3e} Hz outside feasible +/-{bounds.nu_max_hz:.3e}")


def signature(tau, nu, win, sym, chi, bounds=None):
    """Echo signature x = d_nu (Hadamard) s_tau over the window samples."""
    if bounds is not None:
        validate_feasible(tau, nu, bounds)
    delayed = probe_samples(sym, chi, win.sample_times() - tau)
    if nu == 0.0:
        samples = delayed
    else:
        samples = doppler_vector(nu, win) * delayed
    return Signature(samples, tau, nu)


def signature_matrix(taus, win, sym, chi):
    """Zero-Doppler signatures for many delays, stacked as columns (M x n)."""
    taus = np.asarray(taus, dtype=np.float64)
    times = win.sample_times()[:, None] - taus[None, :]
    flat = probe_samples(sym, chi, times.ravel())
    return flat.reshape(times.shape)


def export_chips_csv(sym, path):
    """Dump the chip stream as (index, value) rows."""
    with open(path, "w") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(sym.chips):
            fh.write(f"{i},{int(v)}\n")


def export_pulse_csv(table, path):
    """Dump a tabulated pulse as (index, value) rows."""
    with open(path, "w") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(table.values):
            fh.write(f"{i},{v!r}\n")
