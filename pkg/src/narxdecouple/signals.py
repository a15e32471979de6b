"""Synthetic forced-Duffing data lab and CSV signal I/O.

The lab stands in for measurement data of a forced Duffing oscillator::

    m y'' + c y' + (alpha + beta y^2) y = u

Training records are steady-state responses to random-phase odd multisines,
validation is band-limited Gaussian noise with a linearly increasing
amplitude that ends above the training level.
"""

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import BinOutOfRange, ConfigError, NonFinite, ParseError, ZeroSignal


@dataclass
class SignalRecord:
    fs: float
    u: np.ndarray
    y: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.fs > 0:
            raise ValueError("sample rate must be positive")
        self.u = np.asarray(self.u, dtype=float).ravel()
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).ravel()
            if self.y.shape != self.u.shape:
                raise ValueError(f"u has {self.u.size} samples, y has {self.y.size}")
        for a in (self.u, self.y):
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError("samples must be finite")

    def __len__(self):
        return self.u.size


@dataclass(frozen=True)
class DuffingParams:
    m: float = 1.0
    c: float = 0.7
    alpha: float = 1.0
    beta: float = 5.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("mass must be positive")


# ---------------------------------------------------------------- excitation

def odd_bins(k_max):
    """Odd harmonic indices ``1, 3, ..., <= k_max``."""
    return np.arange(1, int(k_max) + 1, 2)


def multisine(fs, period, bins, amplitude=1.0, seed=None, phases=None):
    """One period of ``amplitude * sum_k cos(2 pi k n / period + phi_k)``.

    Phases are i.i.d. uniform on ``[0, 2 pi)`` from ``numpy.random.default_rng(seed)``
    unless given explicitly.
    """
    bins = np.asarray(bins, dtype=int).ravel()
    if bins.size == 0 or bins.min() < 1 or 2 * bins.max() >= period:
        raise BinOutOfRange(f"excited bins must lie in [1, {period // 2})")
    if phases is None:
        phases = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, bins.size)
    spectrum = np.zeros(period // 2 + 1, dtype=complex)
    spectrum[bins] = 0.5 * amplitude * period * np.exp(1j * np.asarray(phases, dtype=float))
    u = np.fft.irfft(spectrum, n=period)
    return SignalRecord(fs, u, meta={"seed": seed, "period": period, "n_bins": int(bins.size)})


def bandlimited_noise(length, fs, f_max, seed=None):
    """Unit-RMS Gaussian noise with its spectrum restricted to ``(0, f_max]``."""
    rng = np.random.default_rng(seed)
    k_max = int(math.floor(f_max * length / fs))
    spectrum = np.zeros(length // 2 + 1, dtype=complex)
    spectrum[1:k_max + 1] = rng.standard_normal(k_max) + 1j * rng.standard_normal(k_max)
    x = np.fft.irfft(spectrum, n=length)
    return x / np.sqrt(np.mean(x ** 2))


# ---------------------------------------------------------------- plant

@njit(cache=True)
def _duffing_rk4(u, h, substeps, m, c, alpha, beta, y0, v0, out_y, out_v):
    y, v = y0, v0
    out_y[0] = y
    out_v[0] = v
    hs = h / substeps
    for n in range(u.shape[0] - 1):
        f = u[n + 1]
        for _ in range(substeps):
            k1y = v
            k1v = (f - c * v - (alpha + beta * y * y) * y) / m
            y2 = y + 0.5 * hs * k1y
            v2 = v + 0.5 * hs * k1v
            k2y = v2
            k2v = (f - c * v2 - (alpha + beta * y2 * y2) * y2) / m
            y3 = y + 0.5 * hs * k2y
            v3 = v + 0.5 * hs * k2v
            k3y = v3
            k3v = (f - c * v3 - (alpha + beta * y3 * y3) * y3) / m
            y4 = y + hs * k3y
            v4 = v + hs * k3v
            k4y = v4
            k4v = (f - c * v4 - (alpha + beta * y4 * y4) * y4) / m
            y += hs / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            v += hs / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        if not (abs(y) < 1e150 and abs(v) < 1e150):
            return n + 1
        out_y[n + 1] = y
        out_v[n + 1] = v
    return -1


def duffing_simulate(p, u, fs, y0=0.0, v0=0.0, substeps=1, return_velocity=False):
    """Fixed-step RK4 response of the Duffing oscillator sampled at ``fs``.

    ``u`` is held constant between samples (zero-order hold).  Sample ``u[n]``
    drives the interval ``(t[n-1], t[n]]`` that ends at its own time stamp, so
    ``y[n]`` depends on ``u[n]`` and earlier samples, just as a NARX regressor
    containing ``u(t)`` assumes.  Each interval is integrated with ``substeps``
    RK4 steps; ``y[0] = y0``.
    """
    u = np.ascontiguousarray(u, dtype=float).ravel()
    if not fs > 0:
        raise ValueError("sample rate must be positive")
    y = np.empty(u.size)
    v = np.empty(u.size)
    if u.size:
        bad = _duffing_rk4(u, 1.0 / fs, int(substeps), p.m, p.c, p.alpha, p.beta,
                           float(y0), float(v0), y, v)
        if bad >= 0:
            raise NonFinite(f"Duffing state blew up at sample {bad}")
    return (y, v) if return_velocity else y


# ---------------------------------------------------------------- noise

def signal_power(y):
    return float(np.mean(np.square(y)))


def add_noise(y, snr_db, seed=None):
    """Add white Gaussian noise scaled so the realised SNR equals ``snr_db`` exactly.

    ``snr_db = inf`` returns an unchanged copy.
    """
    y = np.asarray(y, dtype=float).ravel()
    if math.isinf(snr_db) and snr_db > 0:
        return y.copy()
    p_y = signal_power(y)
    if p_y == 0:
        raise ZeroSignal("cannot set an SNR relative to a zero signal")
    e = np.random.default_rng(seed).standard_normal(y.size)
    e *= np.sqrt(p_y / (signal_power(e) * 10.0 ** (snr_db / 10.0)))
    return y + e


def realized_snr_db(clean, noisy):
    clean = np.asarray(clean, dtype=float)
    return 10.0 * math.log10(signal_power(clean) / signal_power(np.asarray(noisy) - clean))


# ---------------------------------------------------------------- CSV

def csv_write(record, path):
    """Write ``# fs=...`` (plus ``# key=value`` meta lines), a header and the samples.

    Floats are written with ``repr`` so reading back is bit-exact.
    """
    with open(path, "w", newline="") as fh:
        fh.write(f"# fs={record.fs!r}\n")
        for k in sorted(record.meta):
            fh.write(f"# {k}={record.meta[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        if record.y is None:
            w.writerow(["u"])
            w.writerows([repr(float(a))] for a in record.u)
        else:
            w.writerow(["u", "y"])
            w.writerows([repr(float(a)), repr(float(b))] for a, b in zip(record.u, record.y))


def csv_read(path):
    fs = None
    meta = {}
    cols = None
    data = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, val = line[1:].strip().partition("=")
                if not sep:
                    continue
                key, val = key.strip(), val.strip()
                if key == "fs":
                    try:
                        fs = float(val)
                    except ValueError:
                        raise ParseError(f"bad sample rate {val!r}", lineno) from None
                else:
                    meta[key] = val
                continue
            fields = [f.strip() for f in line.split(",")]
            if cols is None:
                cols = [f.lower() for f in fields]
                if cols not in (["u"], ["u", "y"]):
                    raise ParseError(f"expected header 'u' or 'u,y', got {line!r}", lineno)
                continue
            if len(fields) != len(cols):
                raise ParseError(f"expected {len(cols)} fields, got {len(fields)}", lineno)
            try:
                data.append([float(f) for f in fields])
            except ValueError:
                raise ParseError(f"non-numeric row {line!r}", lineno) from None
    if fs is None:
        raise ParseError("missing '# fs=<value>' line")
    if cols is None:
        raise ParseError("missing column header")
    arr = np.array(data, dtype=float).reshape(-1, len(cols))
    return SignalRecord(fs, arr[:, 0], arr[:, 1] if len(cols) == 2 else None, meta)


# ---------------------------------------------------------------- protocol

@dataclass(frozen=True)
class LabConfig:
    """Generator settings for the synthetic benchmark.

    ``rms`` is the RMS level of each training multisine; validation noise ramps
    linearly from zero to ``val_gain * rms`` local RMS.  Seeds for every record
    derive from ``seed``.
    """

    fs: float = 2.0
    period: int = 8192
    k_max: int = 2684
    rms: float = 0.4
    realisations: int = 9
    transient_periods: int = 1
    val_length: int = 16384
    val_gain: float = 1.2
    snr_db: float = 40.0
    seed: int = 0
    substeps: int = 16
    duffing: DuffingParams = DuffingParams()

    @property
    def f_max(self):
        """Highest excited frequency, ``k_max * fs / period``."""
        return self.k_max * self.fs / self.period

    def validate(self):
        checks = {
            "fs": self.fs > 0, "period": self.period >= 16, "k_max": 1 <= self.k_max < self.period / 2,
            "rms": self.rms > 0, "realisations": self.realisations >= 1,
            "transient_periods": self.transient_periods >= 0,
            "val_length": self.val_length >= 16, "val_gain": self.val_gain > 0,
            "substeps": self.substeps >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(name, f"invalid value {getattr(self, name)!r}")
        if self.duffing.m <= 0:
            raise ConfigError("duffing.m", "mass must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        try:
            if "duffing" in d:
                duff = dict(d["duffing"])
                for k in duff:
                    if k not in DuffingParams.__dataclass_fields__:
                        raise ConfigError(f"duffing.{k}", "unknown field")
                d["duffing"] = DuffingParams(**{k: float(v) for k, v in duff.items()})
            casts = {f.name: f.type for f in cls.__dataclass_fields__.values()}
            for k, v in list(d.items()):
                if casts[k] in (int, "int"):
                    if isinstance(v, bool) or float(v) != int(float(v)):
                        raise ConfigError(k, f"expected an integer, got {v!r}")
                    d[k] = int(float(v))
                elif casts[k] in (float, "float"):
                    d[k] = float(v)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(k, str(exc)) from None
        return cls(**d).validate()


def _seeds(cfg):
    ss = np.random.SeedSequence(cfg.seed)
    phase, noise = ss.spawn(2)
    return ([int(s.generate_state(1)[0]) for s in phase.spawn(cfg.realisations + 1)],
            [int(s.generate_state(1)[0]) for s in noise.spawn(cfg.realisations + 1)])


def generate_training(cfg):
    """``cfg.realisations`` steady-state multisine records, one period each."""
    cfg.validate()
    phase_seeds, noise_seeds = _seeds(cfg)
    bins = odd_bins(cfg.k_max)
    records = []
    for i in range(cfg.realisations):
        ms = multisine(cfg.fs, cfg.period, bins, 1.0, seed=phase_seeds[i])
        u = ms.u * (cfg.rms / np.sqrt(np.mean(ms.u ** 2)))
        drive = np.tile(u, cfg.transient_periods + 1)
        y = duffing_simulate(cfg.duffing, drive, cfg.fs, substeps=cfg.substeps)[-cfg.period:]
        y_noisy = add_noise(y, cfg.snr_db, seed=noise_seeds[i])
        records.append(SignalRecord(cfg.fs, u, y_noisy, meta={
            "kind": "training", "realisation": i, "phase_seed": phase_seeds[i],
            "noise_seed": noise_seeds[i]}))
    return records


def generate_validation(cfg):
    """Band-limited noise with a linear amplitude ramp up to ``val_gain * rms``."""
    cfg.validate()
    phase_seeds, noise_seeds = _seeds(cfg)
    x = bandlimited_noise(cfg.val_length, cfg.fs, cfg.f_max, seed=phase_seeds[-1])
    ramp = np.arange(cfg.val_length) / (cfg.val_length - 1)
    u = cfg.val_gain * cfg.rms * ramp * x
    y = duffing_simulate(cfg.duffing, u, cfg.fs, substeps=cfg.substeps)
    y_noisy = add_noise(y, cfg.snr_db, seed=noise_seeds[-1])
    return SignalRecord(cfg.fs, u, y_noisy, meta={
        "kind": "validation", "signal_seed": phase_seeds[-1], "noise_seed": noise_seeds[-1]})
