"""Model-update encoders: delta coding, sparsification, dithered quantization
and Gaussian noising for differential privacy.

Every encoder returns an :class:`EncodedUpdate` whose ``bit_cost`` is what the
channel charges. Quantized payloads are charged the empirical entropy of their
lattice indices (no real entropy codec is run) plus 32 bits per transmitted
full-precision scalar.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ._rng import substream
from .exceptions import DimensionError, NonFiniteError, SeedMismatchError

FLOAT_BITS = 32

# Normalized second moments of the unit-volume cells.
_G_INTEGER = 1.0 / 12.0
_G_HEXAGONAL = 5.0 / (36.0 * math.sqrt(3.0))
# rounding in the generator basis lands within one step of the nearest point
_NEIGHBOURS = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], dtype=float)


@dataclass(frozen=True)
class ModelUpdate:
    """A user's model delta ``theta_local - theta_ref`` with its metadata."""

    delta: np.ndarray
    user_id: int = 0
    round: int = 0
    n_samples: int = 1

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError(f"update of user {self.user_id} has non-finite entries")
        object.__setattr__(self, "delta", delta)

    @property
    def d(self) -> int:
        return int(self.delta.shape[0])

    def replace(self, **changes) -> "ModelUpdate":
        fields_ = dict(delta=self.delta, user_id=self.user_id, round=self.round, n_samples=self.n_samples)
        fields_.update(changes)
        return ModelUpdate(**fields_)


# -- lattices ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LatticeSpec:
    """An ``dim``-dimensional lattice used to quantize normalized subvectors.

    Attributes:
        dim: subvector length L (1 or 2).
        generator: ``dim x dim`` matrix whose columns span the lattice.
        zeta: normalization factor; updates are divided by ``zeta * ||u||``.
            ``None`` quantizes raw values.
        shape_moment: normalized second moment of the cell shape
            (1/12 for the integer lattice, 5/(36 sqrt 3) for the hexagonal one).
    """

    dim: int
    generator: np.ndarray
    zeta: Optional[float] = 2.0
    shape_moment: float = _G_INTEGER

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.generator, dtype=float))
        if self.dim not in (1, 2) or G.shape != (self.dim, self.dim):
            raise DimensionError(f"generator must be {self.dim}x{self.dim} with dim in (1, 2), got {G.shape}")
        if abs(np.linalg.det(G)) < 1e-300:
            raise ValueError("lattice generator is singular")
        if self.zeta is not None and not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        object.__setattr__(self, "generator", G)
        object.__setattr__(self, "_inv", np.linalg.inv(G))

    @classmethod
    def integer(cls, step: float = 1.0, zeta: Optional[float] = 2.0) -> "LatticeSpec":
        return cls(1, np.array([[step]]), zeta, _G_INTEGER)

    @classmethod
    def hexagonal(cls, step: float = 1.0, zeta: Optional[float] = 2.0) -> "LatticeSpec":
        """Hexagonal lattice with nearest-neighbour distance ``step``."""
        G = step * np.array([[1.0, 0.5], [0.0, math.sqrt(3.0) / 2.0]])
        return cls(2, G, zeta, _G_HEXAGONAL)

    @classmethod
    def for_dim(cls, dim: int, step: float = 1.0, zeta: Optional[float] = 2.0) -> "LatticeSpec":
        if dim == 1:
            return cls.integer(step, zeta)
        if dim == 2:
            return cls.hexagonal(step, zeta)
        raise ValueError(f"only 1- and 2-dimensional lattices are supported, got {dim}")

    @property
    def cell_volume(self) -> float:
        return float(abs(np.linalg.det(self.generator)))

    @property
    def second_moment(self) -> float:
        """Per-dimension second moment of the Voronoi cell at this scale."""
        return self.shape_moment * self.cell_volume ** (2.0 / self.dim)

    def n_subvectors(self, d: int) -> int:
        return -(-d // self.dim)

    def nearest(self, x: np.ndarray) -> np.ndarray:
        """Integer coordinates of the nearest lattice point to each row of ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        base = np.rint(x @ self._inv.T)
        if self.dim == 1:
            return base.astype(np.int64)
        cand = base[:, None, :] + _NEIGHBOURS[None, :, :]
        dist = np.sum((cand @ self.generator.T - x[:, None, :]) ** 2, axis=2)
        best = np.argmin(dist, axis=1)
        return cand[np.arange(x.shape[0]), best].astype(np.int64)

    def points(self, codes: np.ndarray) -> np.ndarray:
        return np.asarray(codes, dtype=float).reshape(-1, self.dim) @ self.generator.T

    def sample_cell(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` i.i.d. points uniform over the Voronoi cell around the origin."""
        if self.dim == 1:
            return (rng.random((n, 1)) - 0.5) * self.generator[0, 0]
        z = rng.random((n, self.dim)) @ self.generator.T
        return z - self.points(self.nearest(z))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "generator": self.generator.tolist(), "zeta": self.zeta,
                "shape_moment": self.shape_moment}


def lattice_for_rate(dim: int, bits_per_param: float, d: int, zeta: float = 2.0,
                     seed: int = 0, trials: int = 8) -> LatticeSpec:
    """Scale a lattice so a Gaussian update of length ``d`` costs about
    ``bits_per_param`` bits per coordinate after subtractive dithering.

    Bisection on the log step size against the empirical index entropy.
    """
    rng = np.random.default_rng(seed)
    samples = [rng.standard_normal(d) for _ in range(trials)]

    def rate(step):
        lat = LatticeSpec.for_dim(dim, step, zeta)
        bits = [
            uveqfed_encode(ModelUpdate(u), lat, shared_seed=seed + i).bit_cost - FLOAT_BITS
            for i, u in enumerate(samples)
        ]
        return float(np.mean(bits)) / d

    lo, hi = -12.0, 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if rate(math.exp(mid)) > bits_per_param:
            lo = mid
        else:
            hi = mid
    return LatticeSpec.for_dim(dim, math.exp(0.5 * (lo + hi)), zeta)


# -- payloads ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensePayload:
    values: np.ndarray
    kind = "dense"


@dataclass(frozen=True, eq=False)
class SparsePayload:
    indices: np.ndarray
    values: np.ndarray
    d: int
    kind = "sparse"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.d):
            raise ValueError("sparse indices must be strictly increasing and within [0, d)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))


@dataclass(frozen=True, eq=False)
class LatticePayload:
    """Lattice indices of ``n_subvectors x dim`` plus the update norm.

    ``subtractive`` payloads need the shared ``seed`` to be decoded.
    """

    codes: np.ndarray
    d: int
    norm: float
    lattice: LatticeSpec
    seed: Optional[int] = None
    subtractive: bool = True
    kind = "lattice"


@dataclass(frozen=True, eq=False)
class NoisedPayload:
    values: np.ndarray
    sigma: float
    kind = "noised"


Payload = Union[DensePayload, SparsePayload, LatticePayload, NoisedPayload]
_KIND_TAGS = {"dense": 0, "sparse": 1, "lattice": 2, "noised": 3}
_MAGIC = b"FPEU"


@dataclass(frozen=True, eq=False)
class EncodedUpdate:
    payload: Payload
    bit_cost: int
    user_id: int = 0
    round: int = 0
    n_samples: int = 1
    dither_zero: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.bit_cost < 0:
            raise ValueError("bit_cost must be non-negative")

    @property
    def kind(self) -> str:
        return self.payload.kind

    def to_bytes(self) -> bytes:
        """Self-describing little-endian record: header, kind tag, lengths, payload."""
        p = self.payload
        head = _MAGIC + struct.pack("<BBqqqQ", 1, _KIND_TAGS[p.kind], self.user_id, self.round,
                                    self.n_samples, self.bit_cost)
        if p.kind in ("dense", "noised"):
            body = struct.pack("<Q", p.values.size)
            if p.kind == "noised":
                body += struct.pack("<d", p.sigma)
            return head + body + p.values.astype("<f8").tobytes()
        if p.kind == "sparse":
            return (head + struct.pack("<QQ", p.d, p.indices.size) + p.indices.astype("<i8").tobytes()
                    + p.values.astype("<f8").tobytes())
        lat = p.lattice
        flags = int(p.subtractive) | (int(p.seed is not None) << 1) | (int(lat.zeta is not None) << 2) \
            | (int(self.dither_zero) << 3)
        body = struct.pack("<QBQBdqdd", p.d, lat.dim, p.codes.shape[0], flags, p.norm,
                           -1 if p.seed is None else p.seed,
                           0.0 if lat.zeta is None else lat.zeta, lat.shape_moment)
        return head + body + lat.generator.astype("<f8").tobytes() + p.codes.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncodedUpdate":
        if raw[:4] != _MAGIC:
            raise ValueError("not an encoded-update record")
        off = 4
        version, tag, user_id, rnd, n_samples, bit_cost = struct.unpack_from("<BBqqqQ", raw, off)
        if version != 1:
            raise ValueError(f"unsupported record version {version}")
        off += struct.calcsize("<BBqqqQ")
        kind = {v: k for k, v in _KIND_TAGS.items()}[tag]
        meta = dict(bit_cost=bit_cost, user_id=user_id, round=rnd, n_samples=n_samples)
        if kind in ("dense", "noised"):
            (n,) = struct.unpack_from("<Q", raw, off)
            off += 8
            sigma = None
            if kind == "noised":
                (sigma,) = struct.unpack_from("<d", raw, off)
                off += 8
            values = np.frombuffer(raw, "<f8", n, off).astype(float)
            payload = DensePayload(values) if kind == "dense" else NoisedPayload(values, sigma)
            return cls(payload, **meta)
        if kind == "sparse":
            d, k = struct.unpack_from("<QQ", raw, off)
            off += 16
            idx = np.frombuffer(raw, "<i8", k, off).astype(np.int64)
            vals = np.frombuffer(raw, "<f8", k, off + 8 * k).astype(float)
            return cls(SparsePayload(idx, vals, int(d)), **meta)
        fmt = "<QBQBdqdd"
        d, dim, m, flags, norm, seed, zeta, moment = struct.unpack_from(fmt, raw, off)
        off += struct.calcsize(fmt)
        G = np.frombuffer(raw, "<f8", dim * dim, off).reshape(dim, dim).astype(float)
        off += 8 * dim * dim
        codes = np.frombuffer(raw, "<i8", m * dim, off).reshape(m, dim).astype(np.int64)
        lat = LatticeSpec(dim, G, zeta if flags & 4 else None, moment)
        payload = LatticePayload(codes, int(d), norm, lat, seed if flags & 2 else None, bool(flags & 1))
        return cls(payload, dither_zero=bool(flags & 8), **meta)


def _meta(u: ModelUpdate) -> dict:
    return dict(user_id=u.user_id, round=u.round, n_samples=u.n_samples)


def empirical_entropy(codes: np.ndarray) -> float:
    """Total bits to entropy-code the rows of ``codes`` at their empirical frequencies."""
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    if codes.shape[0] == 0:
        return 0.0
    rows = np.ascontiguousarray(codes, dtype=np.int64)
    keys = rows.view(np.dtype((np.void, 8 * rows.shape[1]))).reshape(-1)
    _, counts = np.unique(keys, return_counts=True)
    prob = counts / codes.shape[0]
    return float(-codes.shape[0] * np.sum(prob * np.log2(prob)))


# -- encoders ---------------------------------------------------------------


def delta_encode(theta_local, theta_ref, user_id: int = 0, round: int = 0, n_samples: int = 1) -> ModelUpdate:
    theta_local = np.asarray(theta_local, dtype=float)
    theta_ref = np.asarray(theta_ref, dtype=float)
    if theta_local.shape != theta_ref.shape:
        raise DimensionError(f"local model {theta_local.shape} vs reference {theta_ref.shape}")
    return ModelUpdate(theta_local - theta_ref, user_id, round, n_samples)


def dense_encode(u: ModelUpdate) -> EncodedUpdate:
    return EncodedUpdate(DensePayload(u.delta.copy()), FLOAT_BITS * u.d, **_meta(u))


def _sparse_bits(k: int, d: int) -> int:
    return k * (FLOAT_BITS + max(1, math.ceil(math.log2(d))))


def topk_sparsify(u: ModelUpdate, k: int) -> EncodedUpdate:
    """Keep the ``k`` largest-magnitude entries; ties keep the lowest index."""
    if not 1 <= k <= u.d:
        raise ValueError(f"k must lie in [1, {u.d}], got {k}")
    keep = np.sort(np.argsort(-np.abs(u.delta), kind="stable")[:k])
    return EncodedUpdate(SparsePayload(keep, u.delta[keep], u.d), _sparse_bits(k, u.d), **_meta(u))


def mask_sparsify(u: ModelUpdate, keep_prob: float, rng: np.random.Generator) -> EncodedUpdate:
    """Random mask with rescaling by ``1 / keep_prob`` (unbiased)."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    keep = np.flatnonzero(rng.random(u.d) < keep_prob)
    return EncodedUpdate(SparsePayload(keep, u.delta[keep] / keep_prob, u.d),
                         _sparse_bits(keep.size, u.d), **_meta(u))


def qsgd_quantize(u: ModelUpdate, step: float, rng: np.random.Generator, dither: bool = True,
                  zeta: Optional[float] = None) -> EncodedUpdate:
    """Scalar quantization with non-subtractive uniform dither.

    With ``zeta`` set, the update is first normalized by ``zeta * ||u||``
    exactly as in :func:`uveqfed_encode` with a 1-D lattice; the server then
    decodes without removing the dither.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    lattice = LatticeSpec.integer(step, zeta)
    norm = float(np.linalg.norm(u.delta))
    x = u.delta / (zeta * norm) if zeta is not None and norm > 0 else u.delta
    noise = rng.uniform(-step / 2, step / 2, size=u.d) if dither else np.zeros(u.d)
    codes = np.rint((x + noise) / step).astype(np.int64)[:, None]
    bits = empirical_entropy(codes) + (FLOAT_BITS if zeta is not None else 0)
    payload = LatticePayload(codes, u.d, norm, lattice, seed=None, subtractive=False)
    return EncodedUpdate(payload, int(math.ceil(bits)), **_meta(u))


def _dither(lattice: LatticeSpec, m: int, shared_seed: int) -> np.ndarray:
    return lattice.sample_cell(m, substream(shared_seed, "lattice-dither"))


def uveqfed_encode(u: ModelUpdate, lattice: LatticeSpec, shared_seed: int, dither: bool = True) -> EncodedUpdate:
    """Subtractive dithered lattice quantization of a normalized update.

    ``dither=False`` is a test mode that quantizes without dither; the payload
    remembers it so the decoder subtracts nothing.
    """
    norm = float(np.linalg.norm(u.delta))
    m = lattice.n_subvectors(u.d)
    if norm == 0.0:
        codes = np.zeros((0, lattice.dim), dtype=np.int64)
        return EncodedUpdate(LatticePayload(codes, u.d, 0.0, lattice, int(shared_seed)), FLOAT_BITS,
                             dither_zero=not dither, **_meta(u))
    scale = lattice.zeta * norm if lattice.zeta is not None else 1.0
    x = np.zeros(m * lattice.dim)
    x[:u.d] = u.delta / scale
    x = x.reshape(m, lattice.dim)
    z = _dither(lattice, m, shared_seed) if dither else 0.0
    codes = lattice.nearest(x + z)
    bits = empirical_entropy(codes) + FLOAT_BITS
    return EncodedUpdate(LatticePayload(codes, u.d, norm, lattice, int(shared_seed)), int(math.ceil(bits)),
                         dither_zero=not dither, **_meta(u))


def uveqfed_decode(e: EncodedUpdate, lattice: LatticeSpec, shared_seed: int) -> ModelUpdate:
    p = e.payload
    if not isinstance(p, LatticePayload) or not p.subtractive:
        raise TypeError("uveqfed_decode needs a subtractive lattice payload")
    if p.seed != shared_seed:
        raise SeedMismatchError(
            f"payload of user {e.user_id} round {e.round} was dithered with seed {p.seed}, "
            f"decoder holds {shared_seed}"
        )
    if p.norm == 0.0:
        return ModelUpdate(np.zeros(p.d), e.user_id, e.round, e.n_samples)
    m = p.codes.shape[0]
    y = lattice.points(p.codes)
    if not e.dither_zero:
        y = y - _dither(lattice, m, shared_seed)
    scale = lattice.zeta * p.norm if lattice.zeta is not None else 1.0
    return ModelUpdate(scale * y.reshape(-1)[:p.d], e.user_id, e.round, e.n_samples)


@dataclass(frozen=True)
class DPSpec:
    """Gaussian-mechanism parameters.

    Attributes:
        epsilon: privacy level, must lie in (0, 1).
        delta: failure probability in (0, 1).
        exposures: number of uploads an adversary may observe.
        clip: norm bound applied to each update before noising.
        min_n: smallest local dataset size.
    """

    epsilon: float
    delta: float
    exposures: int = 1
    clip: float = 1.0
    min_n: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1) for the Gaussian mechanism, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.exposures < 1 or not self.clip > 0 or self.min_n < 1:
            raise ValueError("exposures, clip and min_n must be positive")

    @property
    def c(self) -> float:
        return math.sqrt(2.0 * math.log(1.25 / self.delta))

    @property
    def sigma(self) -> float:
        return 4.0 * self.c * self.exposures * self.clip / (self.epsilon * self.min_n)


def clip_update(delta: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(delta))
    return delta * (bound / norm) if norm > bound else delta.copy()


def dp_gaussianize(u: ModelUpdate, dp: DPSpec, rng: np.random.Generator, add_noise: bool = True) -> EncodedUpdate:
    clipped = clip_update(u.delta, dp.clip)
    sigma = dp.sigma
    values = clipped + sigma * rng.standard_normal(u.d) if add_noise else clipped
    return EncodedUpdate(NoisedPayload(values, sigma), FLOAT_BITS * u.d, **_meta(u))


def decode(e: EncodedUpdate, shared_seed: Optional[int] = None) -> ModelUpdate:
    """Reconstruct the dense delta from any payload kind."""
    p = e.payload
    meta = dict(user_id=e.user_id, round=e.round, n_samples=e.n_samples)
    if p.kind in ("dense", "noised"):
        return ModelUpdate(p.values.copy(), **meta)
    if p.kind == "sparse":
        out = np.zeros(p.d)
        out[p.indices] = p.values
        return ModelUpdate(out, **meta)
    if p.subtractive:
        return uveqfed_decode(e, p.lattice, p.seed if shared_seed is None else shared_seed)
    values = p.lattice.points(p.codes).reshape(-1)[:p.d]
    if p.lattice.zeta is not None and p.norm > 0:
        values = values * p.lattice.zeta * p.norm
    return ModelUpdate(values, **meta)
