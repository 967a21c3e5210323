"""Simulated broadcast physical layer.

Bit frames are BPSK-mapped to unit-energy symbols and corrupted per receiver
by AWGN or Rayleigh block fading. SNR is drawn per transmission from a
per-receiver normal distribution (mean and spread in dB) to model receivers
with heterogeneous channel quality. Receivers get soft (real-valued)
observations; hard decisions are left to the learned dequantizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array

SNR_CLAMP_DB = (-10.0, 40.0)
CHANNEL_KINDS = ("awgn", "rayleigh")


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "awgn"
    mu_snr_db: float = 10.0
    delta_snr_db: float = 1.0
    receiver: int = 0
    per_symbol_fading: bool = False

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"channel kind must be one of {CHANNEL_KINDS}, got {self.kind!r}")
        if self.delta_snr_db < 0:
            raise ValueError(f"delta_snr_db must be >= 0, got {self.delta_snr_db}")


@dataclass
class ChannelRealization:
    snr_db: float
    noise_sigma: float
    gain: float | Array = 1.0


def sample_snr(config: ChannelConfig, rng: np.random.Generator) -> float:
    snr = config.mu_snr_db + config.delta_snr_db * rng.standard_normal()
    return float(np.clip(snr, *SNR_CLAMP_DB))


def noise_sigma(snr_db: float) -> float:
    """Noise standard deviation for unit symbol power: var = 10^(-SNR/10)."""
    return 10.0 ** (-snr_db / 20.0)


def modulate(bits: Array) -> Array:
    """BPSK map 0 -> -1, 1 -> +1 (unit average symbol energy)."""
    bits = np.asarray(bits, dtype=np.float64)
    if not np.isin(bits, (0.0, 1.0)).all():
        raise ValueError("modulate expects a binary frame")
    return 2.0 * bits - 1.0


def transmit_awgn(symbols: Array, snr_db: float, rng: np.random.Generator) -> Array:
    sigma = noise_sigma(snr_db)
    return symbols + sigma * rng.standard_normal(symbols.shape)


def _draw_gain(shape, per_symbol: bool, rng: np.random.Generator):
    # Unit mean-square Rayleigh magnitude: scale 1/sqrt(2).
    scale = 1.0 / np.sqrt(2.0)
    if per_symbol:
        return rng.rayleigh(scale, size=shape)
    if len(shape) <= 2:
        return float(rng.rayleigh(scale))
    # batched frames: one gain per leading row
    lead = shape[0]
    return rng.rayleigh(scale, size=(lead,) + (1,) * (len(shape) - 1))


def transmit_rayleigh(symbols: Array, snr_db: float, rng: np.random.Generator,
                      force_gain=None, per_symbol: bool = False):
    """Multiplicative fading then AWGN; returns (received, gain).

    One gain per frame by default (block fading); ``force_gain`` is a test
    hook that pins the gain (1.0 reduces the channel to AWGN)."""
    gain = force_gain if force_gain is not None else _draw_gain(
        np.shape(symbols), per_symbol, rng)
    sigma = noise_sigma(snr_db)
    return gain * symbols + sigma * rng.standard_normal(np.shape(symbols)), gain


def transmit(config: ChannelConfig, bits: Array, rng: np.random.Generator,
             snr_db: float | None = None):
    """One realization of a receiver's channel applied to a bit frame.

    Returns (soft received frame, realization). The SNR is drawn from the
    receiver's distribution unless pinned by ``snr_db``."""
    snr = sample_snr(config, rng) if snr_db is None else float(snr_db)
    symbols = modulate(bits)
    if config.kind == "awgn":
        received = transmit_awgn(symbols, snr, rng)
        gain = 1.0
    else:
        received, gain = transmit_rayleigh(symbols, snr, rng,
                                           per_symbol=config.per_symbol_fading)
    return received, ChannelRealization(snr, noise_sigma(snr), gain)


def broadcast(bits: Array, configs: list[ChannelConfig], rng: np.random.Generator,
              snr_db: float | None = None):
    """Fan one frame out to every receiver, each with its own realization."""
    if not configs:
        raise ValueError("broadcast needs at least one receiver config")
    return [transmit(cfg, bits, rng, snr_db=snr_db) for cfg in configs]
