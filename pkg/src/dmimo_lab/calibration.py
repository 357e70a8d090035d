"""Reciprocity calibration on a simulated phase model.

Each AP ``i`` has transmit, receive and cable phases. Three measurements
are taken per AP:

* reference: ``phi_ref - phi_rx[i] + phi_cable[i]`` (shared tone over the cable)
* pilot:     ``phi_pilot - phi_rx[i] + phi_ch[i]`` (UE continuous-wave pilot)
* loopback:  ``phi_tx[i] - phi_rx[i]``

In the default ``anchored`` mode pilot and loopback are first referenced
against the reference measurement, which cancels the RX chain:

    phi_csi[i]  = (pilot[i] - ref[i]) + phi_cable[i]
    theta_tx[i] = theta_bf[i] - (loop[i] - ref[i]) - phi_cable[i]

The ``literal`` mode applies the two corrections without the reference.
Its residual phase per AP is ``2 (phi_rx[i] - phi_cable[i])`` up to a
common offset, so it only stays coherent when that difference happens to
agree across APs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream

TWO_PI = 2 * np.pi
MODES = ("anchored", "literal")


class IncompleteLedger(RuntimeError):
    """A compensation step needs a measurement that has not been taken."""


def wrap(phase):
    """Map phases to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(phase, dtype=float), TWO_PI)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class HardwarePhaseModel:
    """Per-device hardware phases and the true narrowband channel.

    ``phi_ch`` and ``a`` have shape (M, K); everything per AP has shape (M,)
    and per UE shape (K,).
    """

    phi_tx: np.ndarray
    phi_rx: np.ndarray
    phi_cable: np.ndarray
    phi_ch: np.ndarray
    a: np.ndarray
    phi_tx_ue: np.ndarray = None
    phi_rx_ue: np.ndarray = None
    phi_ref: float = 0.0
    meas_noise_std: float = 0.0

    def __post_init__(self):
        self.phi_tx, self.phi_rx, self.phi_cable = (
            np.atleast_1d(np.asarray(x, dtype=float)) for x in (self.phi_tx, self.phi_rx, self.phi_cable)
        )
        self.phi_ch = np.asarray(self.phi_ch, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.phi_ch.ndim == 1:
            self.phi_ch = self.phi_ch[:, None]
        if self.a.ndim == 1:
            self.a = self.a[:, None]
        M, K = self.phi_ch.shape
        if self.phi_tx_ue is None:
            self.phi_tx_ue = np.zeros(K)
        if self.phi_rx_ue is None:
            self.phi_rx_ue = np.zeros(K)
        self.phi_tx_ue = np.atleast_1d(np.asarray(self.phi_tx_ue, dtype=float))
        self.phi_rx_ue = np.atleast_1d(np.asarray(self.phi_rx_ue, dtype=float))
        for name in ("phi_tx", "phi_rx", "phi_cable"):
            if getattr(self, name).shape != (M,):
                raise ValueError(f"{name} must have shape ({M},)")
        if self.a.shape != (M, K):
            raise ValueError(f"a must have shape ({M}, {K})")
        if self.phi_tx_ue.shape != (K,) or self.phi_rx_ue.shape != (K,):
            raise ValueError(f"UE phases must have shape ({K},)")
        if np.any(self.a <= 0):
            raise ValueError("channel amplitudes must be positive")
        arrays = (self.phi_tx, self.phi_rx, self.phi_cable, self.phi_ch, self.a,
                  self.phi_tx_ue, self.phi_rx_ue)
        if not all(np.all(np.isfinite(x)) for x in arrays) or not np.isfinite(self.phi_ref):
            raise ValueError("phases must be finite")

    @property
    def M(self) -> int:
        return self.phi_ch.shape[0]

    @property
    def K(self) -> int:
        return self.phi_ch.shape[1]

    @property
    def channel(self) -> np.ndarray:
        """True reciprocal channel ``a * exp(j phi_ch)``, shape (M, K)."""
        return self.a * np.exp(1j * self.phi_ch)

    @classmethod
    def random(cls, rng: RngStream, M: int, K: int = 1, channel=None, a=None,
               meas_noise_std: float = 0.0) -> "HardwarePhaseModel":
        """Uniform random hardware phases.

        ``channel`` (complex (M, K)) fixes amplitudes and channel phases;
        otherwise channel phases are uniform and amplitudes come from ``a``
        (default 1).
        """
        u = lambda name, shape: rng.child(name).uniform(0.0, TWO_PI, shape)  # noqa: E731
        if channel is not None:
            channel = np.asarray(getattr(channel, "H", channel), dtype=complex)
            M, K = channel.shape
            phi_ch, amp = np.angle(channel), np.abs(channel)
        else:
            phi_ch = u("ch", (M, K))
            amp = np.ones((M, K))
            if a is not None:
                a = np.asarray(a, dtype=float)
                amp = np.broadcast_to(a[:, None] if a.ndim == 1 else a, (M, K)).copy()
        return cls(u("tx", M), u("rx", M), u("cable", M), phi_ch, amp,
                   u("tx_ue", K), u("rx_ue", K), float(u("ref", None)), meas_noise_std)

    def _noise(self, rng, shape=None):
        if self.meas_noise_std == 0 or rng is None:
            return 0.0
        return self.meas_noise_std * rng.normal(shape)


def measure_reference(hw: HardwarePhaseModel, i: int, rng: RngStream | None = None) -> float:
    return wrap(hw.phi_ref - hw.phi_rx[i] + hw.phi_cable[i] + hw._noise(rng))


def measure_pilot(hw: HardwarePhaseModel, i: int, k: int = 0, rng: RngStream | None = None) -> float:
    """Phase of UE ``k``'s pilot at AP ``i``; the pilot phase is the UE TX chain."""
    return wrap(hw.phi_tx_ue[k] - hw.phi_rx[i] + hw.phi_ch[i, k] + hw._noise(rng))


def measure_loopback(hw: HardwarePhaseModel, i: int, rng: RngStream | None = None) -> float:
    return wrap(hw.phi_tx[i] - hw.phi_rx[i] + hw._noise(rng))


def measure_ue_loopback(hw: HardwarePhaseModel, k: int = 0) -> float:
    """Stage-I loopback at the UE; common to all APs, so it only sets an absolute offset."""
    return wrap(hw.phi_tx_ue[k] - hw.phi_rx_ue[k])


@dataclass
class PhaseLedger:
    """Measurements collected per AP (``None`` until measured)."""

    phi_cable: np.ndarray
    phi_Ref: list = field(default=None)
    phi_Pilot: dict = field(default_factory=dict)
    phi_Loop: list = field(default=None)
    mode: str = "anchored"

    def __post_init__(self):
        self.phi_cable = np.asarray(self.phi_cable, dtype=float)
        M = len(self.phi_cable)
        if self.phi_Ref is None:
            self.phi_Ref = [None] * M
        if self.phi_Loop is None:
            self.phi_Loop = [None] * M
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def M(self) -> int:
        return len(self.phi_cable)

    def complete(self, K: int = 1) -> bool:
        return all(
            self.phi_Ref[i] is not None and self.phi_Loop[i] is not None
            and all((i, k) in self.phi_Pilot for k in range(K))
            for i in range(self.M)
        )


def measure_all(hw: HardwarePhaseModel, mode: str = "anchored", rng: RngStream | None = None) -> PhaseLedger:
    """Run all three measurements on every AP (and every UE pilot)."""
    ledger = PhaseLedger(hw.phi_cable.copy(), mode=mode)
    for i in range(hw.M):
        ledger.phi_Loop[i] = measure_loopback(hw, i, rng)
        ledger.phi_Ref[i] = measure_reference(hw, i, rng)
        for k in range(hw.K):
            ledger.phi_Pilot[(i, k)] = measure_pilot(hw, i, k, rng)
    return ledger


def align_csi(ledger: PhaseLedger, i: int, k: int = 0) -> float:
    """Channel-phase estimate for AP ``i`` and UE ``k``."""
    pilot = ledger.phi_Pilot.get((i, k))
    if pilot is None:
        raise IncompleteLedger(f"AP {i}: pilot phase for UE {k} not measured")
    if ledger.mode == "literal":
        return wrap(pilot + ledger.phi_cable[i])
    if ledger.phi_Ref[i] is None:
        raise IncompleteLedger(f"AP {i}: reference phase not measured")
    return wrap(pilot - ledger.phi_Ref[i] + ledger.phi_cable[i])


def compensate_downlink(ledger: PhaseLedger, theta_bf, i: int):
    """Transmit phase(s) for AP ``i`` that radiate the intended ``theta_bf``."""
    loop = ledger.phi_Loop[i]
    if loop is None:
        raise IncompleteLedger(f"AP {i}: loopback phase not measured")
    if ledger.mode == "literal":
        offset = loop + ledger.phi_cable[i]
    else:
        if ledger.phi_Ref[i] is None:
            raise IncompleteLedger(f"AP {i}: reference phase not measured")
        offset = (loop - ledger.phi_Ref[i]) + ledger.phi_cable[i]
    return wrap(np.asarray(theta_bf, dtype=float) - offset)


def estimate_channel(ledger: PhaseLedger, amplitudes) -> np.ndarray:
    """Assemble ``a * exp(j phi_csi)`` from per-AP amplitudes of shape (M, K)."""
    amplitudes = np.asarray(amplitudes, dtype=float)
    if amplitudes.ndim == 1:
        amplitudes = amplitudes[:, None]
    M, K = amplitudes.shape
    phases = np.array([[align_csi(ledger, i, k) for k in range(K)] for i in range(M)])
    return amplitudes * np.exp(1j * phases)


def compensate_precoder(ledger: PhaseLedger, W) -> np.ndarray:
    """Apply per-AP downlink compensation to every entry of a precoder."""
    W = np.asarray(W, dtype=complex)
    theta = np.stack([compensate_downlink(ledger, np.angle(W[i]), i) for i in range(W.shape[0])])
    return np.abs(W) * np.exp(1j * theta)


def simulate_downlink(hw: HardwarePhaseModel, theta_tx, amplitudes=None, k: int = 0) -> complex:
    """Complex baseband sum received by UE ``k`` for per-AP transmit phases."""
    theta_tx = np.asarray(theta_tx, dtype=float)
    amp = np.ones(hw.M) if amplitudes is None else np.asarray(amplitudes, dtype=float)
    field_ = amp * hw.a[:, k] * np.exp(1j * (theta_tx + hw.phi_tx + hw.phi_ch[:, k]))
    return complex(np.sum(field_) * np.exp(1j * hw.phi_rx_ue[k]))


def simulate_downlink_matrix(hw: HardwarePhaseModel, W_tx) -> np.ndarray:
    """Effective gains ``G[k, l]`` seen by UE ``k`` from stream ``l`` for radiated weights."""
    W_tx = np.asarray(W_tx, dtype=complex)
    chain = np.exp(1j * hw.phi_tx)[:, None] * W_tx
    return np.exp(1j * hw.phi_rx_ue)[:, None] * (hw.channel.T @ chain)


def calibrated_mrt_power(hw: HardwarePhaseModel, mode: str = "anchored", k: int = 0,
                         compensate: bool = True) -> float:
    """Received power at UE ``k`` after measure -> align -> MRT phases -> compensate.

    Every AP transmits with unit amplitude. ``compensate=False`` skips the
    downlink step (uncalibrated baseline).
    """
    ledger = measure_all(hw, mode)
    theta_bf = np.array([-align_csi(ledger, i, k) for i in range(hw.M)])
    if compensate:
        theta_tx = np.array([compensate_downlink(ledger, theta_bf[i], i) for i in range(hw.M)])
    else:
        theta_tx = theta_bf
    return abs(simulate_downlink(hw, theta_tx, k=k)) ** 2
