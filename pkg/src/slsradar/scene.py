"""Multi-target scenes, echo amplitudes, colored noise, received snapshots.

Echo amplitudes follow the radar equation with log-normal shadowing and
Rice fast fading; the receiver noise is white thermal noise shaped by the
receive filter, so its sampled covariance is Toeplitz with the pulse
autocorrelation on the diagonals.
"""

from dataclasses import dataclass, replace

import numpy as np
import yaml
from scipy.linalg import toeplitz

from .params import (
    RadioParams,
    SPEED_OF_LIGHT,
    db_to_linear,
    range_to_delay,
    velocity_to_doppler,
)
from .waveform import pulse_autocorrelation, signature


class SceneConfigError(ValueError):
    """Scene description file failed validation."""


@dataclass(frozen=True)
class Target:
    """A point scatterer; ``amplitude`` is None until drawn."""

    range_m: float
    rcs_m2: float
    velocity_mps: float = 0.0
    amplitude: complex | None = None

    @property
    def delay_s(self):
        return range_to_delay(self.range_m)

    def doppler_hz(self, carrier_hz=60e9):
        return velocity_to_doppler(self.velocity_mps, carrier_hz)


def path_loss(tau_s, params):
    """Two-way radar-equation path loss (linear): (4 pi)^3 (c tau/2)^4 / lambda^2."""
    r = SPEED_OF_LIGHT * tau_s / 2.0
    return (4.0 * np.pi) ** 3 * r ** 4 / params.wavelength_m ** 2


def _rice_fast_fading(params, rng):
    # sqrt(A_fast) is Rice with unit power and the configured shape factor
    k = db_to_linear(params.rice_shape_db)
    mean = np.sqrt(k / (k + 1.0))
    sigma = np.sqrt(1.0 / (2.0 * (k + 1.0)))
    g = rng.standard_normal(2)
    return abs(mean + sigma * (g[0] + 1j * g[1])) ** 2


def draw_amplitude(target, params, rng, shadowing=True, fading=True,
                   random_phase=True):
    """Draw the complex echo amplitude of one target.

    |alpha|^2 = G * A_slow * A_fast * rcs / L with log-normal shadowing
    A_slow (std ``shadowing_std_db``), Rice-faded A_fast (unit mean), and a
    uniform phase.  The three randomizations can be disabled for
    deterministic checks.
    """
    loss = path_loss(target.delay_s, params)
    a_slow = db_to_linear(rng.normal(0.0, params.shadowing_std_db)) \
        if shadowing else 1.0
    a_fast = _rice_fast_fading(params, rng) if fading else 1.0
    phase = rng.uniform(0.0, 2.0 * np.pi) if random_phase else 0.0
    mag = np.sqrt(params.gain_linear * a_slow * a_fast * target.rcs_m2 / loss)
    return mag * np.exp(-1j * phase)


def realize_scene(targets, params, rng, **draw_kwargs):
    """Return targets with freshly drawn amplitudes."""
    return [replace(t, amplitude=draw_amplitude(t, params, rng, **draw_kwargs))
            for t in targets]


def expected_amplitude_sq(target, params):
    """Analytic E[|alpha|^2] (over shadowing and fading)."""
    sigma_ln = params.shadowing_std_db * np.log(10.0) / 10.0
    e_slow = np.exp(sigma_ln ** 2 / 2.0)
    return params.gain_linear * e_slow * target.rcs_m2 / path_loss(
        target.delay_s, params)


def average_snr(target, params, win):
    """Mean post-processing SNR: gain * P * E|alpha|^2 / (2 W F_u sigma_u^2)."""
    gain = round(win.duration / params.symbol_interval_s)
    return gain * params.tx_power_w * expected_amplitude_sq(target, params) / (
        2.0 * params.bandwidth_hz * params.noise_level_w_per_hz)


@dataclass(frozen=True)
class NoiseModel:
    """Sampled-noise covariance C_w and its Cholesky factor."""

    covariance: np.ndarray
    cholesky: np.ndarray
    level_w: float

    @property
    def dim(self):
        return self.covariance.shape[0]

    def sample(self, rng, count=None):
        """Draw circular complex noise vectors with covariance C_w."""
        shape = (self.dim,) if count is None else (self.dim, count)
        z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        return self.cholesky @ (z / np.sqrt(2.0))


def noise_covariance(win, params, rx_pulse):
    """Toeplitz covariance [C_w]_ij = F_u sigma_u^2 * rho((i-j) T_c)."""
    rho = pulse_autocorrelation(rx_pulse)
    lags = win.t_sample * np.arange(win.num_samples)
    col = params.noise_level_w_per_hz * rho(lags)
    cov = toeplitz(col)
    return NoiseModel(cov, np.linalg.cholesky(cov), params.noise_level_w_per_hz)


@dataclass(frozen=True)
class Snapshot:
    """One received vector with its ground truth attached."""

    samples: np.ndarray
    truth: tuple
    hypothesis: str
    seed: object = None


def synthesize(targets, win, sym, chi, params, noise_model, rng, noise=True,
               seed=None):
    """Received vector r = sum_p alpha_p sqrt(P T) x_p + w.

    Targets must carry drawn amplitudes (see ``realize_scene``); pass
    ``noise=False`` for a noiseless signal-model check.
    """
    r = np.zeros(win.num_samples, dtype=np.complex128)
    scale = np.sqrt(params.chip_energy_j)
    for t in targets:
        if t.amplitude is None:
            raise ValueError("target amplitude not drawn; use realize_scene()")
        sig = signature(t.delay_s, t.doppler_hz(params.carrier_hz), win, sym, chi)
        r += t.amplitude * scale * sig.samples
    if noise:
        r = r + noise_model.sample(rng)
    hypo = "H0" if not targets else "H1"
    return Snapshot(r, tuple(targets), hypo, seed)


def place_random_scene(count, params, rng, rcs_range=(0.05, 0.2),
                       min_spacing_m=0.4, with_velocity=False):
    """Uniformly scatter targets in [r_min, r_max] with a spacing floor.

    Rejection sampling; refuses up front when the requested spacing cannot
    fit in the surveyed interval.
    """
    if count == 0:
        return []
    span = params.r_max_m - params.r_min_m
    if count * min_spacing_m * 2.0 >= span:
        raise ValueError(
            f"cannot place {count} targets with {min_spacing_m} m spacing "
            f"in a {span} m interval")
    ranges = []
    while len(ranges) < count:
        cand = rng.uniform(params.r_min_m, params.r_max_m)
        if all(abs(cand - r) >= min_spacing_m for r in ranges):
            ranges.append(cand)
    targets = []
    for r in ranges:
        v = rng.uniform(-params.v_max_mps, params.v_max_mps) if with_velocity else 0.0
        rcs = rng.uniform(*rcs_range)
        targets.append(Target(range_m=r, rcs_m2=rcs, velocity_mps=v))
    return targets


def snapshot_to_csv(snap, path):
    """Dump the received vector as (re, im) rows."""
    with open(path, "w") as fh:
        fh.write("re,im\n")
        for v in snap.samples:
            fh.write(f"{v.real!r},{v.imag!r}\n")


def read_snapshot_csv(path):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.size == 0:
        raise SceneConfigError(f"snapshot file {path} contains no samples")
    data = np.atleast_2d(data)
    return data[:, 0] + 1j * data[:, 1]


_RADIO_KEYS = {
    "tx_power_mw": ("tx_power_w", lambda v: v * 1e-3),
    "carrier_ghz": ("carrier_hz", lambda v: v * 1e9),
    "two_way_gain_dbi": ("two_way_gain_db", float),
    "noise_psd_dbm_hz": ("noise_psd_dbm_hz", float),
    "noise_figure_db": ("noise_figure_db", float),
    "shadowing_std_db": ("shadowing_std_db", float),
    "rice_shape_db": ("rice_shape_db", float),
    "r_min_m": ("r_min_m", float),
    "r_max_m": ("r_max_m", float),
    "v_max_mps": ("v_max_mps", float),
}


def parse_scene_config(doc, path="<scene>"):
    """Validate a scene mapping into (RadioParams, fixed targets, random spec)."""
    if not isinstance(doc, dict):
        raise SceneConfigError(f"{path}: top level must be a mapping")
    radio_kwargs = {}
    for key, value in (doc.get("radio") or {}).items():
        if key not in _RADIO_KEYS:
            raise SceneConfigError(f"{path}: unknown radio key {key!r}")
        name, conv = _RADIO_KEYS[key]
        radio_kwargs[name] = conv(value)
    params = RadioParams(**radio_kwargs)

    targets = []
    for i, entry in enumerate(doc.get("targets") or []):
        if not isinstance(entry, dict) or "range_m" not in entry \
                or "rcs_m2" not in entry:
            raise SceneConfigError(
                f"{path}: target #{i} needs range_m and rcs_m2")
        extra = set(entry) - {"range_m", "rcs_m2", "velocity_mps"}
        if extra:
            raise SceneConfigError(
                f"{path}: target #{i} has unknown keys {sorted(extra)}")
        targets.append(Target(range_m=float(entry["range_m"]),
                              rcs_m2=float(entry["rcs_m2"]),
                              velocity_mps=float(entry.get("velocity_mps", 0.0))))

    random_spec = doc.get("random_targets")
    if random_spec is not None:
        allowed = {"count", "rcs_m2_min", "rcs_m2_max", "min_spacing_m"}
        extra = set(random_spec) - allowed
        if extra:
            raise SceneConfigError(
                f"{path}: random_targets has unknown keys {sorted(extra)}")
        if "count" not in random_spec:
            raise SceneConfigError(f"{path}: random_targets needs a count")
    return params, targets, random_spec


def load_scene_config(path):
    """Read and validate a YAML scene file.

    Syntax errors surface with the line/column reported by the YAML
    parser; schema errors name the offending key.
    """
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            line = mark.line + 1 if mark else "?"
            raise SceneConfigError(
                f"{path}:{line}: {exc.problem}") from exc
    return parse_scene_config(doc, path=str(path))
