"""Physical constants and radio-link parameters.

Everything downstream (waveform synthesis, noise model, detector grids)
pulls its numbers from here, so units can be audited in one place.
Linear/dB conversions are explicit: dB-valued fields keep a ``_db``/"dbm"
suffix and are converted on access.
"""

from dataclasses import dataclass, replace

SPEED_OF_LIGHT = 299792458.0  # m/s

# IEEE 802.11ad control-PHY chip clock: 1/T = 1760 MHz
SYMBOL_RATE = 1.76e9
T_SYMBOL = 1.0 / SYMBOL_RATE
# one-sided effective bandwidth of the chip stream
BANDWIDTH = 1.0 / (2.0 * T_SYMBOL)

GOLAY_LEN = 128          # preamble Golay sequence length
PREAMBLE_LEN = 7552      # control-PHY preamble chips (STF + CEF)
STF_GB_REPS = 48         # repetitions of Gb at packet start
SPREAD_LEN = 32          # body spreading sequence length
K_MIN = 23168            # shortest control-PHY packet, in chips
K_MAX = 539520           # longest control-PHY packet, in chips


def db_to_linear(x_db):
    return 10.0 ** (x_db / 10.0)


def linear_to_db(x):
    import math
    return 10.0 * math.log10(x)


def dbm_per_hz_to_w_per_hz(x_dbm_hz):
    return 10.0 ** ((x_dbm_hz - 30.0) / 10.0)


@dataclass(frozen=True)
class RadioParams:
    """Link budget and geometry for the opportunistic radar receiver.

    Defaults are the 60 GHz short-range patrol setup: 10 mW transmit
    power, 46 dBi two-way antenna gain, -177 dBm/Hz thermal noise floor
    with a 7 dB receiver noise figure, ranges 5..40 m and speeds up to
    5 m/s.
    """

    tx_power_w: float = 10e-3
    carrier_hz: float = 60e9
    two_way_gain_db: float = 46.0
    noise_psd_dbm_hz: float = -177.0
    noise_figure_db: float = 7.0
    shadowing_std_db: float = 3.0
    rice_shape_db: float = 15.0
    symbol_interval_s: float = T_SYMBOL
    sample_interval_s: float = T_SYMBOL
    r_min_m: float = 5.0
    r_max_m: float = 40.0
    v_max_mps: float = 5.0

    @property
    def wavelength_m(self):
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def bandwidth_hz(self):
        """One-sided effective bandwidth W = 1/(2T)."""
        return 1.0 / (2.0 * self.symbol_interval_s)

    @property
    def gain_linear(self):
        return db_to_linear(self.two_way_gain_db)

    @property
    def noise_level_w_per_hz(self):
        """Post-noise-figure white PSD: F_u * sigma_u^2 in W/Hz."""
        return db_to_linear(self.noise_figure_db) * dbm_per_hz_to_w_per_hz(
            self.noise_psd_dbm_hz)

    @property
    def chip_energy_j(self):
        """Transmit energy per chip, P*T."""
        return self.tx_power_w * self.symbol_interval_s

    @property
    def tau_min_s(self):
        return 2.0 * self.r_min_m / SPEED_OF_LIGHT

    @property
    def tau_max_s(self):
        return 2.0 * self.r_max_m / SPEED_OF_LIGHT

    @property
    def nu_max_hz(self):
        return 2.0 * self.v_max_mps * self.carrier_hz / SPEED_OF_LIGHT

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)


def delay_to_range(tau_s):
    """Two-way delay to one-way range: r = c*tau/2."""
    return SPEED_OF_LIGHT * tau_s / 2.0


def range_to_delay(r_m):
    return 2.0 * r_m / SPEED_OF_LIGHT


def doppler_to_velocity(nu_hz, carrier_hz=60e9):
    return SPEED_OF_LIGHT * nu_hz / (2.0 * carrier_hz)


def velocity_to_doppler(v_mps, carrier_hz=60e9):
    return 2.0 * v_mps * carrier_hz / SPEED_OF_LIGHT
