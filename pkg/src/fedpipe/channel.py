"""Uplink simulation: orthogonal digital links and the over-the-air
Gaussian multiple-access channel with time-varying precoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoding import EncodedUpdate, ModelUpdate
from .exceptions import ChannelError, DimensionError


@dataclass(frozen=True)
class LinkSpec:
    """One user's flat-fading link to the access point.

    Attributes:
        bandwidth: resource-block bandwidth ``b`` in Hz.
        power: transmit power ``P``.
        gain: channel gain ``h_i`` (proportional to distance ** -2).
        noise_psd: noise power per Hz, ``sigma_w^2``.
        interference: interference power ``sigma_{v,k}^2`` of each block.
    """

    bandwidth: float
    power: float
    gain: float
    noise_psd: float
    interference: tuple = (0.0,)

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.power > 0):
            raise ChannelError("bandwidth and power must be positive")
        if self.gain < 0 or self.noise_psd < 0 or any(v < 0 for v in self.interference):
            raise ChannelError("gain, noise and interference must be non-negative")


def link_rate(link: LinkSpec, block: int) -> float:
    """Shannon rate in bits/s of ``link`` on resource block ``block``."""
    denom = link.interference[block] + link.noise_psd * link.bandwidth
    if denom <= 0:
        raise ChannelError(f"block {block}: zero noise plus interference gives unbounded rate")
    return link.bandwidth * math.log2(1.0 + link.gain * link.power / denom)


def gains_from_distances(distances, reference: float = 1.0) -> np.ndarray:
    """``h_i = reference * d_i ** -2``."""
    distances = np.asarray(distances, dtype=float)
    if np.any(distances <= 0):
        raise ChannelError("distances must be positive")
    return reference * distances ** -2.0


@dataclass(frozen=True, eq=False)
class Delivery:
    user_id: int
    update: EncodedUpdate
    delay: float


@dataclass(frozen=True, eq=False)
class OrthogonalOutput:
    deliveries: list = field(default_factory=list)
    kind = "orthogonal"

    @property
    def round_delay(self) -> float:
        """The slowest scheduled user dictates the round delay."""
        return max((d.delay for d in self.deliveries), default=0.0)


@dataclass(frozen=True, eq=False)
class OtaOutput:
    y: np.ndarray
    kind = "ota"


def orthogonal_transmit(e: EncodedUpdate, rate: float) -> tuple[EncodedUpdate, float]:
    """Capacity-achieving error-free link: the record arrives intact after
    ``bit_cost / rate`` seconds."""
    if not rate > 0:
        raise ChannelError(f"rate must be positive, got {rate}")
    delivered = EncodedUpdate.from_bytes(e.to_bytes())
    return delivered, e.bit_cost / rate


# -- over-the-air ---------------------------------------------------------------


@dataclass(frozen=True)
class OtaSpec:
    """Over-the-air channel and precoder settings.

    Attributes:
        noise_var: per-coordinate noise variance ``sigma_w^2``.
        gains: static fading gains per user; ``None`` means unfaded.
        inversion_threshold: users whose gain falls below it stay silent.
        precoder: ``"cotaf"`` (time-varying) or ``"fixed"``.
        power: per-user energy budget ``P``.
        fixed_alpha: constant precoder for ``"fixed"``; ``None`` freezes the
            first-round COTAF value.
        pilot_sqnorm: first-round estimate of the largest squared update norm;
            ``None`` measures it from the first round's updates.
        safety: factor applied to last round's largest squared norm.
    """

    noise_var: float = 0.0
    gains: Optional[tuple] = None
    inversion_threshold: float = 1e-3
    precoder: str = "cotaf"
    power: float = 1.0
    fixed_alpha: Optional[float] = None
    pilot_sqnorm: Optional[float] = 1.0
    safety: float = 1.1

    def __post_init__(self):
        if self.noise_var < 0:
            raise ChannelError("noise variance must be non-negative")
        if not self.inversion_threshold > 0:
            raise ChannelError("inversion threshold must be positive")
        if self.precoder not in ("cotaf", "fixed"):
            raise ChannelError(f"unknown precoder {self.precoder!r}")
        if not (self.power > 0 and self.safety > 0) or (self.pilot_sqnorm is not None and not self.pilot_sqnorm > 0):
            raise ChannelError("power, pilot_sqnorm and safety must be positive")

    def gain(self, user_id: int) -> float:
        return 1.0 if self.gains is None else float(self.gains[user_id])


def cotaf_alpha(power: float, max_expected_sqnorm: float) -> float:
    if not max_expected_sqnorm > 0:
        raise ChannelError("precoder needs a positive estimate of the update energy")
    return power / max_expected_sqnorm


class Precoder:
    """Server-side precoder state carried across rounds.

    COTAF mode estimates ``max_i E||delta_i||^2`` by last round's largest
    squared update norm times ``spec.safety``. Before any round has been
    observed the estimate is ``spec.pilot_sqnorm``, or, when that is ``None``,
    whatever the caller supplies through :meth:`prime` (a pilot exchange).
    Fixed mode freezes the first value it hands out.
    """

    def __init__(self, spec: OtaSpec, estimate: Optional[float] = None, frozen: Optional[float] = None):
        self.spec = spec
        self.estimate = spec.pilot_sqnorm if estimate is None else estimate
        self.frozen = frozen

    @property
    def primed(self) -> bool:
        return self.estimate is not None or self.spec.fixed_alpha is not None or self.frozen is not None

    def prime(self, sqnorms: Sequence[float]) -> None:
        """Seed the estimate from pilot measurements of the current updates."""
        if self.estimate is None:
            peak = max(sqnorms, default=0.0)
            self.estimate = self.spec.safety * peak if peak > 0 else 1.0

    def alpha(self) -> float:
        if self.spec.precoder == "fixed":
            if self.spec.fixed_alpha is not None:
                return self.spec.fixed_alpha
            if self.frozen is None:
                self.frozen = cotaf_alpha(self.spec.power, self._estimate())
            return self.frozen
        return cotaf_alpha(self.spec.power, self._estimate())

    def _estimate(self) -> float:
        if self.estimate is None:
            raise ChannelError("precoder has no energy estimate; set pilot_sqnorm or call prime()")
        return self.estimate

    def observe(self, sqnorms: Sequence[float]) -> None:
        peak = max(sqnorms, default=0.0)
        if peak > 0:
            self.estimate = self.spec.safety * peak

    def state(self) -> dict:
        return {"estimate": self.estimate, "frozen": self.frozen}


def ota_precode(u: ModelUpdate, alpha: float, gain: float, spec: OtaSpec) -> tuple[np.ndarray, bool]:
    """Channel input ``sqrt(alpha) * u / h`` under truncated channel inversion.

    Returns the input vector and whether the user was truncated (silent).
    """
    if not alpha > 0:
        raise ChannelError(f"precoder must be positive, got {alpha}")
    if spec.gains is None:
        return math.sqrt(alpha) * u.delta, False
    if gain < spec.inversion_threshold:
        return np.zeros(u.d), True
    return math.sqrt(alpha) * u.delta / gain, False


def ota_mac(inputs: Sequence[np.ndarray], noise_var: float, rng: np.random.Generator,
            gains: Optional[Sequence[float]] = None) -> OtaOutput:
    """Superpose ``h_i * x_i`` in list order and add white Gaussian noise."""
    if not inputs:
        raise DimensionError("the channel needs at least one input")
    d = len(inputs[0])
    y = np.zeros(d)
    for i, x in enumerate(inputs):
        if len(x) != d:
            raise DimensionError(f"input {i} has length {len(x)}, expected {d}")
        y = y + (x if gains is None else gains[i] * np.asarray(x))
    if noise_var > 0:
        y = y + math.sqrt(noise_var) * rng.standard_normal(d)
    return OtaOutput(y)


def ota_decode(y: np.ndarray, alpha: float, n_users: int, theta_ref) -> np.ndarray:
    """``theta = y / (N sqrt(alpha)) + theta_ref``."""
    if not alpha > 0 or n_users < 1:
        raise ChannelError("decoding needs alpha > 0 and at least one user")
    return np.asarray(y, dtype=float) / (n_users * math.sqrt(alpha)) + np.asarray(theta_ref, dtype=float)
