"""Synthetic fingerprints from a log-distance propagation model.

Each AP contributes ``power - 10 * exponent * log10(d)`` dBm at distance
``d`` (clamped to at least 1 m), plus a per-device bias and Gaussian noise.
Readings below the detection floor become the -105 non-detection code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seqloc.dataset import NONDETECT, RSSI_MAX, RSSI_MIN, Dataset
from seqloc.exceptions import InvalidArgumentError

FLOOR_HEIGHT = 4.0


@dataclass(frozen=True)
class Building:
    building_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    n_floors: int = 1

    def contains(self, x, y) -> np.ndarray:
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class AccessPoint:
    x: float
    y: float
    floor: int = 0
    power: float = -30.0
    exponent: float = 3.0

    @property
    def position(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.floor * FLOOR_HEIGHT)


@dataclass(frozen=True)
class SceneConfig:
    buildings: tuple[Building, ...]
    aps: tuple[AccessPoint, ...]
    n_devices: int = 1
    device_sigma: float = 0.0
    noise_sigma: float = 0.0
    detection_floor: float = -100.0
    seed: int = 0

    def __post_init__(self):
        if not self.aps:
            raise InvalidArgumentError("a scene needs at least one AP")
        if not self.buildings:
            raise InvalidArgumentError("a scene needs at least one building")
        if self.noise_sigma < 0 or self.device_sigma < 0:
            raise InvalidArgumentError("noise and device sigmas must be >= 0")
        if not -104 <= self.detection_floor <= -50:
            raise InvalidArgumentError("detection_floor must lie in [-104, -50]")
        if self.n_devices < 1:
            raise InvalidArgumentError("n_devices must be >= 1")

    @property
    def diameter(self) -> float:
        xs = [b.x_min for b in self.buildings] + [b.x_max for b in self.buildings]
        ys = [b.y_min for b in self.buildings] + [b.y_max for b in self.buildings]
        return float(np.hypot(max(xs) - min(xs), max(ys) - min(ys)))


def default_scene(n_buildings: int = 2, n_aps: int = 20, n_floors: int = 3, noise_sigma: float = 0.0,
                  n_devices: int = 1, device_sigma: float = 0.0, seed: int = 0) -> SceneConfig:
    """Buildings of 40 m x 20 m in a row, 30 m apart, APs spread evenly across them."""
    rng = np.random.default_rng([seed, 7])
    buildings = tuple(
        Building(b, 70.0 * b, 0.0, 70.0 * b + 40.0, 20.0, n_floors) for b in range(n_buildings)
    )
    aps = []
    for k in range(n_aps):
        b = buildings[k % n_buildings]
        aps.append(
            AccessPoint(
                x=float(rng.uniform(b.x_min, b.x_max)),
                y=float(rng.uniform(b.y_min, b.y_max)),
                floor=int(rng.integers(0, b.n_floors)),
                power=float(rng.uniform(-35.0, -25.0)),
                exponent=float(rng.uniform(2.5, 3.5)),
            )
        )
    return SceneConfig(buildings=buildings, aps=tuple(aps), n_devices=n_devices, device_sigma=device_sigma,
                       noise_sigma=noise_sigma, seed=seed)


def rssi_at(scene: SceneConfig, x, y, floor, device_offset=0.0, noise=None) -> np.ndarray:
    """Readings of every AP at the given points, shape ``(n, n_aps)``."""
    x, y, floor = np.atleast_1d(x), np.atleast_1d(y), np.atleast_1d(floor)
    ap = np.array([a.position for a in scene.aps])
    power = np.array([a.power for a in scene.aps])
    expo = np.array([a.exponent for a in scene.aps])
    z = floor * FLOOR_HEIGHT
    d = np.sqrt((x[:, None] - ap[:, 0]) ** 2 + (y[:, None] - ap[:, 1]) ** 2 + (z[:, None] - ap[:, 2]) ** 2)
    d = np.maximum(d, 1.0)
    s = power - 10.0 * expo * np.log10(d) + np.reshape(device_offset, (-1, 1))
    if noise is not None:
        s = s + noise
    out = np.clip(s, RSSI_MIN, RSSI_MAX)
    out[s < scene.detection_floor] = NONDETECT
    return out


def sample_locations(scene: SceneConfig, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    weights = np.array([b.area * b.n_floors for b in scene.buildings])
    pick = rng.choice(len(scene.buildings), size=n, p=weights / weights.sum())
    x, y, floor, bid = np.empty(n), np.empty(n), np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64)
    for k, b in enumerate(scene.buildings):
        sel = pick == k
        m = int(sel.sum())
        x[sel] = rng.uniform(b.x_min, b.x_max, m)
        y[sel] = rng.uniform(b.y_min, b.y_max, m)
        floor[sel] = rng.integers(0, b.n_floors, m)
        bid[sel] = b.building_id
    inside = np.zeros(n, dtype=bool)
    for b in scene.buildings:
        inside |= b.contains(x, y) & (bid == b.building_id)
    if not inside.all():
        raise RuntimeError("sampled a location outside every building")
    return x, y, floor, bid


def generate(scene: SceneConfig, n: int) -> tuple[Dataset, Dataset]:
    """Sample ``n`` integer-dBm fingerprints; the first 90% (in sampling order) train, the rest validate."""
    if n < 2:
        raise InvalidArgumentError("n must be >= 2")
    rng = np.random.default_rng(scene.seed)
    x, y, floor, bid = sample_locations(scene, n, rng)
    device_bias = rng.normal(0.0, scene.device_sigma, scene.n_devices) if scene.device_sigma > 0 else np.zeros(scene.n_devices)
    phone = rng.integers(0, scene.n_devices, n)
    noise = rng.normal(0.0, scene.noise_sigma, (n, len(scene.aps))) if scene.noise_sigma > 0 else None
    # receivers report whole dBm; rounding keeps readings inside [-104, 0] and -105 exact
    rssi = np.round(rssi_at(scene, x, y, floor, device_bias[phone], noise))

    n_train = max(1, min(n - 1, int(round(0.9 * n))))
    full = Dataset(
        rssi=rssi,
        longitude=x,
        latitude=y,
        floor=floor,
        building=bid,
        space_id=np.zeros(n, dtype=np.int64),
        user_id=np.zeros(n, dtype=np.int64),
        phone_id=phone,
        timestamp=np.arange(n, dtype=np.int64),
    )
    train = full.subset(np.arange(n_train))
    val = full.subset(np.arange(n_train, n))
    return train, val.with_role("validation")

