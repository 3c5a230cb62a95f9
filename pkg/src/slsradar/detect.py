"""Multi-target detection on one received snapshot.

Three detectors share the whitened matched-filter metric

    M(tau, nu) = |x^H C^-1 r|^2 / (x^H C^-1 x):

* ``std_detect``   - single-target GLRT: one argmax over the search grid.
* ``mf_pd_detect`` - thresholding plus local peak finding; cheap but leaks
  false detections through the probe's correlation sidelobes.
* ``iic_amfd``     - iterative interference-cancelling adaptive matched
  filter: extracts echoes strongest-first, each time extending the
  interference covariance with the expected outer product of the detected
  echo's signature over its localization-uncertainty rectangle, and
  re-whitening.  The running inverse is maintained with rank-k
  matrix-inversion-lemma updates.

``refine`` then re-estimates each detection on a fine delay grid while
whitening against every *other* detection.
"""

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import (
    cho_factor,
    cho_solve,
    cho_solve_banded,
    cholesky_banded,
    solve_triangular,
)

from .params import delay_to_range, doppler_to_velocity
from .scene import noise_covariance
from .waveform import PulseShape, composite_pulse, signature_matrix

REFINE_STEP_DIVISOR = 512          # fine search step, in fractions of T
Q_QUAD_NODES = 33                  # Gauss-Legendre nodes per active axis
Q_RANK_CUTOFF = 1e-6               # relative singular-value floor
LAMBDA_DIVISOR = 16.0              # lambda_n = metric/16 (or gamma/16)


@dataclass(frozen=True)
class SearchGrid:
    """Uniform delay/Doppler grid covering the feasible set."""

    delay_step_s: float
    j_min: int
    j_max: int
    doppler_step_hz: float = 0.0
    n_doppler: int = 0

    @classmethod
    def from_params(cls, params, delay_step_s, doppler_step_hz=0.0,
                    n_doppler=0):
        j_min = int(np.ceil(params.tau_min_s / delay_step_s - 1e-9))
        j_max = int(np.floor(params.tau_max_s / delay_step_s + 1e-9))
        if j_min > j_max:
            raise ValueError("delay step too coarse for the feasible delays")
        return cls(delay_step_s, j_min, j_max, doppler_step_hz, n_doppler)

    @property
    def delays_s(self):
        return self.delay_step_s * np.arange(self.j_min, self.j_max + 1)

    @property
    def dopplers_hz(self):
        if self.n_doppler == 0:
            return np.zeros(1)
        return self.doppler_step_hz * np.arange(-self.n_doppler,
                                                self.n_doppler + 1)

    @property
    def size(self):
        return (self.j_max - self.j_min + 1) * (2 * self.n_doppler + 1)


@dataclass
class Detection:
    """One extracted echo; refined fields are filled by ``refine``."""

    amplitude: complex
    delay_s: float
    doppler_hz: float
    metric: float
    iteration: int
    extent_delay_s: float = 0.0
    extent_doppler_hz: float = 0.0
    refined_amplitude: complex | None = None
    refined_delay_s: float | None = None
    refined_doppler_hz: float | None = None
    refined_metric: float | None = None

    @property
    def best_delay_s(self):
        return self.delay_s if self.refined_delay_s is None else self.refined_delay_s

    @property
    def best_amplitude(self):
        return (self.amplitude if self.refined_amplitude is None
                else self.refined_amplitude)


@dataclass(frozen=True)
class QFactor:
    """Economy factorization Q = U diag(lam) U^H of one echo's
    uncertainty-averaged signature outer product."""

    basis: np.ndarray
    weights: np.ndarray
    center_delay_s: float
    center_doppler_hz: float

    @property
    def rank(self):
        return self.weights.size

    def dense(self):
        return (self.basis * self.weights) @ self.basis.conj().T


@dataclass
class InterferenceModel:
    """Running interference-plus-noise state of the iterative detector.

    The inverse of C(p) = C_w + sum coeff_sq_n Q_n is kept in factored
    form: C(p)^-1 = base_inverse - sum_k GL_k GL_k^H, one correction
    factor per absorbed detection.  Dense views are materialized on
    demand.
    """

    noise_cov: np.ndarray
    base_inverse: np.ndarray
    corrections: list = field(default_factory=list)   # GL factors (M x d_k)
    entries: list = field(default_factory=list)       # (coeff_sq, QFactor)

    def apply_inverse(self, x):
        """C(p)^-1 @ x for a vector or matrix x."""
        out = self.base_inverse @ x
        for gl in self.corrections:
            out = out - gl @ (gl.conj().T @ x)
        return out

    @property
    def cov_inverse(self):
        return self.apply_inverse(np.eye(self.noise_cov.shape[0],
                                         dtype=np.complex128))

    @property
    def cov(self):
        total = self.noise_cov.astype(np.complex128)
        for coeff_sq, qf in self.entries:
            total = total + coeff_sq * qf.dense()
        return total


class DetectorContext:
    """Precomputed machinery shared by every snapshot of a campaign.

    Holds the grid signatures X, the noise covariance and its inverse, and
    the whitened signature bank C_w^-1 X, so a single snapshot costs one
    matrix-vector product per detector iteration.
    """

    def __init__(self, grid, win, sym, chi, params, noise_model=None,
                 rx_pulse=None):
        self.grid = grid
        self.win = win
        self.sym = sym
        self.chi = chi
        self.params = params
        if noise_model is None:
            noise_model = noise_covariance(win, params,
                                           rx_pulse or PulseShape())
        self.noise = noise_model

        delays = grid.delays_s
        dopplers = grid.dopplers_hz
        self.point_delays = np.repeat(delays, dopplers.size)
        self.point_dopplers = np.tile(dopplers, delays.size)
        base = signature_matrix(delays, win, sym, chi)
        if dopplers.size == 1 and dopplers[0] == 0.0:
            self.signatures = base
        else:
            steer = np.exp(2j * np.pi * np.outer(win.sample_times(), dopplers))
            # column order: delay-major, doppler inner (matches point_* arrays)
            self.signatures = (base[:, :, None] * steer[:, None, :]).reshape(
                base.shape[0], -1)

        cw = noise_model.covariance
        # C_w is Toeplitz-banded (the pulse autocorrelation has finite
        # support), so all its solves run in O(M * bandwidth)
        col = np.abs(cw[:, 0])
        bw = int(np.max(np.nonzero(col > col[0] * 1e-14)[0]))
        ab = np.zeros((bw + 1, cw.shape[0]))
        for k in range(bw + 1):
            ab[bw - k, k:] = np.diagonal(cw, k)
        self._cw_banded = cholesky_banded(ab, lower=False)
        self.cov_inv0 = self.solve_noise(np.eye(cw.shape[0]))
        self.whitened = self.solve_noise(self.signatures)
        den = np.einsum("mj,mj->j", self.signatures.conj(), self.whitened)
        self.den0 = np.maximum(den.real, 0.0)
        self._fine_lattice = None
        self._q_cache = {}

    def solve_noise(self, b):
        """C_w^-1 @ b via the banded Cholesky factor."""
        if np.iscomplexobj(b):
            return (cho_solve_banded((self._cw_banded, False), b.real)
                    + 1j * cho_solve_banded((self._cw_banded, False), b.imag))
        return cho_solve_banded((self._cw_banded, False), b)

    @property
    def n_points(self):
        return self.signatures.shape[1]

    def glrt_numerator(self, r):
        """x_j^H C_w^-1 r for every grid point."""
        return self.whitened.conj().T @ r

    def fine_lattice(self, step=None):
        """Probe samples on the refinement lattice (built lazily)."""
        from .waveform import probe_lattice
        T = self.params.symbol_interval_s
        step = T / REFINE_STEP_DIVISOR if step is None else step
        if self._fine_lattice is None or self._fine_lattice.dt != step:
            # anchor the lattice on multiples of the step so that window
            # sample times minus lattice-aligned delays hit nodes exactly
            lo = step * np.floor(
                (self.win.t_start - self.params.tau_max_s - 8 * T) / step)
            self._fine_lattice = probe_lattice(self.sym, self.chi, lo,
                                               self.win.t_end + step, step)
        return self._fine_lattice

    def fine_signatures(self, taus, step):
        """Signature columns for lattice-aligned delays (index gather)."""
        lat = self.fine_lattice(step)
        t = self.win.sample_times()
        idx = np.rint((t[:, None] - taus[None, :] - lat.t_start) / lat.dt
                      ).astype(np.int64)
        return lat.gather(idx)

    def q_factor(self, tau, nu, extent_delay, extent_doppler):
        """``build_q`` with memoization on the exact argument tuple.

        Coarse estimates live on the grid lattice and, on the unit-step
        grid, the extents saturate at half a grid cell, so identical
        rectangles recur constantly across Monte Carlo trials.
        """
        key = (tau, nu, extent_delay, extent_doppler)
        hit = self._q_cache.get(key)
        if hit is None:
            hit = build_q(tau, nu, extent_delay, extent_doppler, self.win,
                          self.sym, self.chi, self.params,
                          doppler_active=self.grid.n_doppler > 0)
            if len(self._q_cache) > 8192:
                self._q_cache.clear()
            self._q_cache[key] = hit
        return hit


def mf_metric(r, x, cov_inv):
    """Whitened matched-filter output power at one look direction.

    ``cov_inv`` may be a dense inverse or a callable applying it.  A
    signature with no energy in the window scores 0.
    """
    cx = cov_inv(x) if callable(cov_inv) else cov_inv @ x
    den = float(np.real(np.vdot(x, cx)))
    if den <= 0.0:
        return 0.0
    return float(np.abs(np.vdot(cx, r)) ** 2 / den)


def _metric_from_arrays(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.abs(num) ** 2 / den
    return np.where(den > 0.0, vals, 0.0)


def metric_profile(r, ctx):
    """First-iteration (GLRT) metric over the whole grid."""
    return _metric_from_arrays(ctx.glrt_numerator(r), ctx.den0)


def uncertainty_extents(metric, grid, win, params, lambda_mode="metric",
                        gamma=None, divisor=LAMBDA_DIVISOR):
    """Half-widths (E, Theta) of the localization-uncertainty rectangle.

    The scale parameter lambda is metric/divisor by default, or
    gamma/divisor for the conservative data-independent variant.
    """
    if lambda_mode == "metric":
        lam = metric / divisor
    elif lambda_mode == "threshold":
        if gamma is None:
            raise ValueError("threshold mode needs gamma")
        lam = gamma / divisor
    else:
        raise ValueError(f"unknown lambda_mode {lambda_mode!r}")
    w = params.bandwidth_hz
    extent_delay = 0.5 * max(grid.delay_step_s,
                             lam ** -0.5 / (2.0 * np.pi * w))
    duration = win.t_end - max(win.t_start, params.tau_max_s)
    if duration <= 0.0:
        duration = win.duration
    extent_doppler = 0.5 * max(grid.doppler_step_hz, lam ** -0.5 / duration)
    return extent_delay, extent_doppler


def _gauss_legendre_nodes(center, half_width, lo, hi, nodes):
    a = max(lo, center - half_width)
    b = min(hi, center + half_width)
    if b <= a or nodes == 1:
        mid = min(max(center, lo), hi)
        return np.array([mid]), np.array([1.0])
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (b + a) + 0.5 * (b - a) * x, w / w.sum()


def build_q(tau, nu, extent_delay, extent_doppler, win, sym, chi, params,
            nodes=Q_QUAD_NODES, cutoff=Q_RANK_CUTOFF, doppler_active=False):
    """Average signature outer product over the uncertainty rectangle.

    Deterministic Gauss-Legendre tensor quadrature of E[x x^H] with the
    rectangle clipped to the feasible set; returned in economy SVD form
    with small singular values dropped.
    """
    taus, wt = _gauss_legendre_nodes(tau, extent_delay, params.tau_min_s,
                                     params.tau_max_s, nodes)
    if doppler_active and extent_doppler > 0.0:
        nus, wn = _gauss_legendre_nodes(nu, extent_doppler, -params.nu_max_hz,
                                        params.nu_max_hz, nodes)
    else:
        nus, wn = np.array([nu]), np.array([1.0])

    base = signature_matrix(taus, win, sym, chi)
    cols = []
    weights = []
    t = win.sample_times()
    for knu, wnu in zip(nus, wn):
        steer = np.exp(2j * np.pi * knu * t)[:, None] if knu != 0.0 else 1.0
        cols.append(base * steer)
        weights.append(wt * wnu)
    stacked = np.hstack(cols) * np.sqrt(np.concatenate(weights))[None, :]
    # economy SVD of the node bundle, via the small Gram eigenproblem
    gram = stacked.conj().T @ stacked
    lam, v = np.linalg.eigh(gram)
    lam, v = lam[::-1], v[:, ::-1]
    lam = np.maximum(lam, 0.0)
    keep = lam >= cutoff * lam[0] if lam.size else np.zeros(0, bool)
    keep &= lam > 0.0
    rank = int(np.count_nonzero(keep))
    basis = (stacked @ v[:, :rank]) / np.sqrt(lam[:rank])[None, :]
    return QFactor(basis, lam[:rank].copy(), tau, nu)


def update_inverse(cov_inv, qfactor, coeff_sq, cov=None):
    """Rank-k inverse update: (C + coeff_sq * Q)^-1 from C^-1.

    Uses the matrix-inversion lemma on the economy factors; if the inner
    system is too ill-conditioned the inverse is recomputed from the dense
    C + coeff_sq * Q (requires ``cov``).
    """
    if coeff_sq == 0.0 or qfactor.rank == 0:
        return cov_inv
    u = qfactor.basis
    g = cov_inv @ u
    inner = np.diag(1.0 / (coeff_sq * qfactor.weights)) + u.conj().T @ g
    try:
        cond = np.linalg.cond(inner)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned inner system")
        middle = np.linalg.solve(inner, g.conj().T)
        return cov_inv - g @ middle
    except np.linalg.LinAlgError:
        if cov is None:
            raise
        dense = cov + coeff_sq * qfactor.dense()
        cho = cho_factor(dense, lower=True)
        return cho_solve(cho, np.eye(dense.shape[0]))


def _amplitude_scale(params):
    # detections report channel amplitudes; signatures are unit power
    return np.sqrt(params.chip_energy_j)


def std_detect(r, ctx, gamma, lambda_mode="metric"):
    """Single-target GLRT: at most one detection, the global grid maximum."""
    num = ctx.glrt_numerator(r)
    vals = _metric_from_arrays(num, ctx.den0)
    j = int(np.argmax(vals))
    if vals[j] <= gamma:
        return None
    amp = num[j] / ctx.den0[j] / _amplitude_scale(ctx.params)
    ext_d, ext_f = uncertainty_extents(float(vals[j]), ctx.grid, ctx.win,
                                       ctx.params, lambda_mode, gamma)
    return Detection(complex(amp), float(ctx.point_delays[j]),
                     float(ctx.point_dopplers[j]), float(vals[j]), 1,
                     ext_d, ext_f)


def mf_pd_detect(r, ctx, gamma, peak_radius=1):
    """Threshold crossings of the GLRT metric, thinned to local delay peaks.

    ``peak_radius`` = 0 keeps every crossing.  All detections share the
    first-iteration metric, so spillover from strong echoes shows up as
    spurious entries.
    """
    num = ctx.glrt_numerator(r)
    vals = _metric_from_arrays(num, ctx.den0)
    n_dop = ctx.grid.dopplers_hz.size
    n_del = ctx.grid.delays_s.size
    field_vals = vals.reshape(n_del, n_dop)
    detections = []
    for j in range(n_del):
        for k in range(n_dop):
            v = field_vals[j, k]
            if v <= gamma:
                continue
            lo = max(0, j - peak_radius)
            hi = min(n_del, j + peak_radius + 1)
            if peak_radius > 0 and v < field_vals[lo:hi, k].max():
                continue
            idx = j * n_dop + k
            amp = num[idx] / ctx.den0[idx] / _amplitude_scale(ctx.params)
            detections.append(Detection(
                complex(amp), float(ctx.point_delays[idx]),
                float(ctx.point_dopplers[idx]), float(v), 1))
    detections.sort(key=lambda d: -d.metric)
    return detections


def default_p_max(params):
    return int(np.floor((params.tau_max_s - params.tau_min_s)
                        / params.symbol_interval_s))


def iic_amfd(r, ctx, gamma, p_max=None, lambda_mode="metric",
             collect_profiles=None, return_model=False):
    """Iterative interference-cancelling adaptive matched-filter detector.

    Per iteration: maximize the adaptive metric over the still-active grid
    points; on a threshold crossing, estimate the echo, excise its
    uncertainty rectangle from the search set, absorb its expected
    covariance into the whitener, and continue; otherwise stop.

    ``collect_profiles``, if a list, receives the full-grid metric of each
    iteration (diagnostic traces).  With ``return_model=True`` the running
    interference model is returned alongside the detections.
    """
    params = ctx.params
    if p_max is None:
        p_max = default_p_max(params)
    scale = _amplitude_scale(params)

    num = ctx.glrt_numerator(r)
    den = ctx.den0.copy()
    active = den > 0.0
    model = InterferenceModel(ctx.noise.covariance, ctx.cov_inv0)
    detections = []

    for p in range(1, p_max + 1):
        vals = _metric_from_arrays(num, den)
        if collect_profiles is not None:
            collect_profiles.append(vals.copy())
        if not active.any():
            break
        masked = np.where(active, vals, -np.inf)
        j = int(np.argmax(masked))
        peak = float(masked[j])
        if peak <= gamma:
            break
        coeff = num[j] / den[j]
        tau_hat = float(ctx.point_delays[j])
        nu_hat = float(ctx.point_dopplers[j])
        ext_d, ext_f = uncertainty_extents(peak, ctx.grid, ctx.win, params,
                                           lambda_mode, gamma)
        detections.append(Detection(complex(coeff / scale), tau_hat, nu_hat,
                                    peak, p, ext_d, ext_f))

        active &= ~((np.abs(ctx.point_delays - tau_hat) <= ext_d)
                    & (np.abs(ctx.point_dopplers - nu_hat) <= ext_f))

        qf = ctx.q_factor(tau_hat, nu_hat, ext_d, ext_f)
        coeff_sq = float(np.abs(coeff) ** 2)
        model.entries.append((coeff_sq, qf))
        if qf.rank == 0:
            continue
        try:
            # rank-k inversion-lemma correction, applied both to the
            # factored inverse and to the cached per-point num/den
            g = model.apply_inverse(qf.basis)
            inner = (np.diag(1.0 / (coeff_sq * qf.weights))
                     + qf.basis.conj().T @ g)
            li = np.linalg.cholesky(inner)
            gl = solve_triangular(li, g.conj().T, lower=True).conj().T
            f = ctx.signatures.conj().T @ gl
            num = num - f @ (gl.conj().T @ r)
            den = np.maximum(den - np.einsum("jd,jd->j", f, f.conj()).real,
                             0.0)
            model.corrections.append(gl)
        except np.linalg.LinAlgError:
            # ill-conditioned inner system: refactor densely and rebuild
            cho = cho_factor(model.cov, lower=True)
            model.base_inverse = cho_solve(cho, np.eye(r.size))
            model.corrections = []
            bank = model.base_inverse @ ctx.signatures
            num = bank.conj().T @ r
            den = np.maximum(
                np.einsum("mj,mj->j", ctx.signatures.conj(), bank).real, 0.0)

    if return_model:
        return detections, model
    return detections


def refine(r, detections, ctx, fine_step=None, model=None,
           lambda_mode="metric", gamma=None):
    """Fine-grid re-estimation of each detection.

    For detection p the interference covariance is rebuilt from every
    *other* detection, and the adaptive metric is maximized over a fine
    delay lattice spanning p's uncertainty rectangle (Doppler kept at the
    coarse estimate when no Doppler search is configured).  Returns new
    Detection objects with the refined fields set.
    """
    if not detections:
        return []
    params = ctx.params
    T = params.symbol_interval_s
    fine_step = T / REFINE_STEP_DIVISOR if fine_step is None else fine_step
    scale = _amplitude_scale(params)

    if model is None:
        entries = []
        for det in detections:
            qf = ctx.q_factor(det.delay_s, det.doppler_hz, det.extent_delay_s,
                              det.extent_doppler_hz)
            coeff_sq = float(np.abs(det.amplitude * scale) ** 2)
            entries.append((coeff_sq, qf))
    else:
        entries = model.entries

    factors = [np.sqrt(csq * qf.weights)[None, :] * qf.basis
               for csq, qf in entries]

    refined = []
    for p, det in enumerate(detections):
        # C_bar = C_w + B B^H with B collecting every other detection;
        # the Woodbury inner matrix I + B^H C_w^-1 B is always
        # well-conditioned, so this path needs no fallback
        others = [f for k, f in enumerate(factors) if k != p and f.size]
        b = np.hstack(others) if others else None
        if b is not None:
            s = (np.eye(b.shape[1], dtype=np.complex128)
                 + b.conj().T @ ctx.solve_noise(b))
            ls = np.linalg.cholesky(s)

        half = int(np.floor(det.extent_delay_s / fine_step + 1e-9))
        offsets = fine_step * np.arange(-half, half + 1)
        taus = det.delay_s + offsets
        ok = (taus >= params.tau_min_s) & (taus <= params.tau_max_s)
        taus = taus[ok]
        xf = ctx.fine_signatures(taus, fine_step)
        if det.doppler_hz != 0.0:
            xf = xf * np.exp(2j * np.pi * det.doppler_hz
                             * ctx.win.sample_times())[:, None]

        t1 = ctx.solve_noise(xf)
        u = solve_triangular(ls, b.conj().T @ t1, lower=True)
        den = (np.einsum("mj,mj->j", xf.conj(), t1).real
               - np.einsum("dj,dj->j", u.conj(), u).real)
        zr = ctx.solve_noise(r)
        ur = solve_triangular(ls, b.conj().T @ zr, lower=True)
        # num_j = x_j^H C_bar^-1 r = x_j^H C_w^-1 r - u_j^H u_r
        num = t1.conj().T @ r - u.conj().T @ ur
        vals = _metric_from_arrays(num, np.maximum(den, 0.0))
        j = int(np.argmax(vals))
        refined.append(replace(
            det,
            refined_delay_s=float(taus[j]),
            refined_doppler_hz=det.doppler_hz,
            refined_amplitude=complex(num[j] / den[j] / scale),
            refined_metric=float(vals[j]),
        ))
    return refined


def detections_to_rows(detections, carrier_hz=60e9):
    rows = []
    for d in detections:
        rows.append({
            "iteration": d.iteration,
            "range_m": delay_to_range(d.best_delay_s),
            "velocity_mps": doppler_to_velocity(d.doppler_hz, carrier_hz),
            "amp_re": d.amplitude.real,
            "amp_im": d.amplitude.imag,
            "metric": d.metric,
            "refined_range_m": (delay_to_range(d.refined_delay_s)
                                if d.refined_delay_s is not None else ""),
            "refined_amp_re": (d.refined_amplitude.real
                               if d.refined_amplitude is not None else ""),
            "refined_amp_im": (d.refined_amplitude.imag
                               if d.refined_amplitude is not None else ""),
            "refined_metric": (d.refined_metric
                               if d.refined_metric is not None else ""),
        })
    return rows


def detections_to_csv(detections, path, carrier_hz=60e9):
    rows = detections_to_rows(detections, carrier_hz)
    fields = ["iteration", "range_m", "velocity_mps", "amp_re", "amp_im",
              "metric", "refined_range_m", "refined_amp_re",
              "refined_amp_im", "refined_metric"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def detections_to_json(detections, path, carrier_hz=60e9):
    with open(path, "w") as fh:
        json.dump(detections_to_rows(detections, carrier_hz), fh, indent=2)
