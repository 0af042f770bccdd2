"""Synthetic WiFi CSI in the ``[6, 75, 30]`` feature layout.

Feature layout of one sample::

    channel c in 0..2   amplitude seen by receive antenna c
    channel c in 3..5   phase (radians, [-pi, pi)) seen by antenna c - 3
    row     a*25 + p    AP a, packet p   (AP-major)
    column  k           subcarrier k

The channel between the device and each AP antenna is the sum of the
line-of-sight path and first-order wall reflections found with the image
method; every packet adds independent complex Gaussian noise.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import container

SPEED_OF_LIGHT = 299_792_458.0
N_APS = 3
N_ANTENNAS = 3
N_PACKETS = 25
N_SUBCARRIERS = 30
FEATURE_SHAPE = (2 * N_ANTENNAS, N_APS * N_PACKETS, N_SUBCARRIERS)
N_FEATURES = int(np.prod(FEATURE_SHAPE))  # 13,500
HALF_FEATURES = N_FEATURES // 2
D_MIN = 0.1

# float32 bounds that stay inside [-pi, pi) after widening back to float64
PHASE_LO = np.nextafter(np.float32(-np.pi), np.float32(0))
PHASE_HI = np.nextafter(np.float32(np.pi), np.float32(0))

Point = tuple[float, float]
Segment = tuple[Point, Point]


class SceneError(ValueError):
    pass


def default_frequencies() -> tuple[float, ...]:
    return tuple(float(f) for f in np.linspace(2.402e9, 2.482e9, N_SUBCARRIERS))


def room_walls(width: float, length: float) -> tuple[Segment, ...]:
    return (
        ((0.0, 0.0), (width, 0.0)),
        ((width, 0.0), (width, length)),
        ((width, length), (0.0, length)),
        ((0.0, length), (0.0, 0.0)),
    )


@dataclass(frozen=True)
class Scene:
    width: float = 10.0
    length: float = 8.0
    ap_positions: tuple[Point, ...] = ((0.5, 0.5), (9.5, 0.5), (0.5, 7.5))
    frequencies: tuple[float, ...] = field(default_factory=default_frequencies)
    reflectors: tuple[Segment, ...] = room_walls(10.0, 8.0)
    path_loss_exponent: float = 2.0
    packet_noise_std: float = 0.01
    # receive antennas per AP lie on a horizontal line, centred on the AP
    antenna_spacing: float = 0.0614

    def __post_init__(self) -> None:
        if len(self.ap_positions) != N_APS:
            raise SceneError(f"scene needs exactly {N_APS} APs, got {len(self.ap_positions)}")
        if len(self.frequencies) != N_SUBCARRIERS:
            raise SceneError(f"scene needs {N_SUBCARRIERS} subcarriers, got {len(self.frequencies)}")
        if self.width <= 0 or self.length <= 0:
            raise SceneError("room dimensions must be positive")
        if self.packet_noise_std < 0 or self.antenna_spacing < 0:
            raise SceneError("noise std and antenna spacing must be non-negative")
        for ap in self.antenna_positions().reshape(-1, 2):
            if not self.contains(ap):
                raise SceneError(f"AP antenna at {tuple(ap)} lies outside the room")

    def contains(self, p: Sequence[float]) -> bool:
        return 0.0 <= p[0] <= self.width and 0.0 <= p[1] <= self.length

    def antenna_positions(self) -> np.ndarray:
        """``[N_APS, N_ANTENNAS, 2]`` antenna coordinates."""
        offsets = (np.arange(N_ANTENNAS) - (N_ANTENNAS - 1) / 2) * self.antenna_spacing
        aps = np.asarray(self.ap_positions, dtype=np.float64)
        out = np.repeat(aps[:, None, :], N_ANTENNAS, axis=1)
        out[:, :, 0] += offsets
        return out

    @classmethod
    def room(cls, width: float, length: float, **kwargs) -> "Scene":
        """Scene whose reflectors are the four walls of a ``width x length`` room."""
        kwargs.setdefault("reflectors", room_walls(width, length))
        return cls(width=width, length=length, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            width=d["width"],
            length=d["length"],
            ap_positions=tuple(tuple(p) for p in d["ap_positions"]),
            frequencies=tuple(d["frequencies"]),
            reflectors=tuple(tuple(tuple(p) for p in seg) for seg in d["reflectors"]),
            path_loss_exponent=d["path_loss_exponent"],
            packet_noise_std=d["packet_noise_std"],
            antenna_spacing=d["antenna_spacing"],
        )


def wrap_phase(theta: np.ndarray) -> np.ndarray:
    """Wrap radians into [-pi, pi)."""
    out = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    # np.mod can round up to the divisor itself
    return np.where(out >= np.pi, -np.pi, out)


def phase_to_float32(theta: np.ndarray) -> np.ndarray:
    return np.clip(wrap_phase(theta).astype(np.float32), PHASE_LO, PHASE_HI)


def _mirror(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    t = np.dot(p - a, d) / np.dot(d, d)
    foot = a + t * d
    return 2 * foot - p


def _segments_cross(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray) -> bool:
    """True when segment p-q meets segment a-b (endpoints included)."""
    r, s = q - p, b - a
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < 1e-12:
        return False
    ap = a - p
    t = (ap[0] * s[1] - ap[1] * s[0]) / denom
    u = (ap[0] * r[1] - ap[1] * r[0]) / denom
    tol = 1e-9
    return -tol <= t <= 1 + tol and -tol <= u <= 1 + tol


def path_lengths(scene: Scene, position: Sequence[float], antenna: np.ndarray) -> list[float]:
    """Line-of-sight plus valid first-order reflection path lengths to one antenna."""
    p = np.asarray(position, dtype=np.float64)
    out = [float(np.linalg.norm(p - antenna))]
    for a, b in scene.reflectors:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        img = _mirror(p, a, b)
        if _segments_cross(img, antenna, a, b):
            out.append(float(np.linalg.norm(img - antenna)))
    return out


def channel_response(scene: Scene, position: Sequence[float]) -> np.ndarray:
    """Noise-free complex CSI ``[N_APS, N_ANTENNAS, N_SUBCARRIERS]``."""
    freqs = np.asarray(scene.frequencies, dtype=np.float64)
    ants = scene.antenna_positions()
    h = np.zeros((N_APS, N_ANTENNAS, N_SUBCARRIERS), dtype=np.complex128)
    for a in range(N_APS):
        for r in range(N_ANTENNAS):
            d = np.maximum(np.asarray(path_lengths(scene, position, ants[a, r])), D_MIN)
            gain = d ** (-scene.path_loss_exponent / 2)
            h[a, r] = (gain[:, None] * np.exp(-2j * np.pi * freqs[None, :] * d[:, None] / SPEED_OF_LIGHT)).sum(0)
    return h


@dataclass(frozen=True)
class CsiSample:
    features: np.ndarray  # float32 [6, 75, 30]
    label: tuple[float, float]

    @property
    def flat(self) -> np.ndarray:
        return self.features.reshape(-1)


def synthesize_csi(scene: Scene, position: Sequence[float], seed: int) -> CsiSample:
    if not scene.contains(position):
        raise SceneError(f"position {tuple(position)} lies outside the {scene.width}x{scene.length} room")
    h = channel_response(scene, position)
    rng = np.random.default_rng(seed)
    shape = (N_APS, N_PACKETS, N_ANTENNAS, N_SUBCARRIERS)
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    packets = h[:, None, :, :] + (scene.packet_noise_std / math.sqrt(2)) * noise
    # [ap, packet, antenna, k] -> [antenna, ap*25 + packet, k]
    packets = packets.transpose(2, 0, 1, 3).reshape(N_ANTENNAS, N_APS * N_PACKETS, N_SUBCARRIERS)
    features = np.empty(FEATURE_SHAPE, dtype=np.float32)
    features[:N_ANTENNAS] = np.abs(packets)
    features[N_ANTENNAS:] = phase_to_float32(np.angle(packets))
    return CsiSample(features, (float(position[0]), float(position[1])))


def derive_seed(root: int, *keys: int) -> int:
    """Independent u64 seed for a sub-stream keyed by integers."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class Dataset:
    scene: Scene
    features: np.ndarray  # float32 [n, 6, 75, 30]
    labels: np.ndarray  # float32 [n, 2]
    seed: int
    indices: np.ndarray | None = None  # positions in the parent dataset, when split

    def __post_init__(self) -> None:
        n = len(self.features)
        if n == 0:
            raise ValueError("dataset must not be empty")
        if self.features.shape[1:] != FEATURE_SHAPE or self.labels.shape != (n, 2):
            raise ValueError(
                f"bad dataset shapes: features {self.features.shape}, labels {self.labels.shape}"
            )
        if self.indices is None:
            self.indices = np.arange(n)

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> CsiSample:
        return CsiSample(self.features[i], (float(self.labels[i, 0]), float(self.labels[i, 1])))

    def __iter__(self) -> Iterator[CsiSample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[CsiSample]:
        return list(self)

    def flat(self) -> np.ndarray:
        return self.features.reshape(len(self), N_FEATURES)

    def amplitude(self) -> np.ndarray:
        return self.features[:, :N_ANTENNAS].reshape(len(self), HALF_FEATURES)

    def phase(self) -> np.ndarray:
        return self.features[:, N_ANTENNAS:].reshape(len(self), HALF_FEATURES)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.scene, self.features[idx], self.labels[idx], self.seed, self.indices[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.asarray(self.indices, dtype=np.int64).tobytes())
        return h.hexdigest()


def generate_dataset(scene: Scene, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(derive_seed(seed, 0))
    pos = np.column_stack(
        [rng.uniform(0, scene.width, n), rng.uniform(0, scene.length, n)]
    ).astype(np.float32)
    features = np.empty((n, *FEATURE_SHAPE), dtype=np.float32)
    for i in range(n):
        # labels are float32, so synthesize from exactly the stored position
        features[i] = synthesize_csi(scene, pos[i].astype(np.float64), derive_seed(seed, 1, i)).features
    return Dataset(scene, features, pos, seed)


def split_dataset(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(ds)
    k = math.floor(n * train_fraction)
    if k == 0 or k == n:
        raise ValueError(f"split of {n} samples at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))


def save_dataset(ds: Dataset, path: str | os.PathLike, generation: dict | None = None) -> None:
    meta = {
        "type": "dataset",
        "scene": ds.scene.to_dict(),
        "seed": int(ds.seed),
        "n": len(ds),
        "generation": generation or {},
    }
    arrays = {
        "features": ds.features,
        "labels": ds.labels,
        "indices": np.asarray(ds.indices, dtype=np.float32),
    }
    container.write(path, arrays, meta)


def load_dataset(path: str | os.PathLike) -> Dataset:
    arrays, meta = container.read(path)
    if meta.get("type") != "dataset":
        raise container.CorruptError(f"{path} does not hold a dataset")
    try:
        return Dataset(
            Scene.from_dict(meta["scene"]),
            arrays["features"],
            arrays["labels"],
            int(meta["seed"]),
            arrays["indices"].astype(np.int64),
        )
    except (KeyError, ValueError) as exc:
        raise container.CorruptError(f"dataset entries are inconsistent: {exc}") from None


def dataset_generation_meta(path: str | os.PathLike) -> dict:
    return container.read(path)[1].get("generation", {})
