"""Channel generation: geometry, pathloss, fading, datasets and CSI files.

The large-scale gain follows the indoor-hotspot NLOS law

    PL(d) [dB] = 32.4 + 31.9 log10(d) + 20 log10(fc)

with ``d`` the 3-D AP-UE distance in metres and ``fc`` in GHz. Every channel
entry is ``H[m, k] = sqrt(beta[m, k]) * h[m, k]`` with ``beta = 10**(-PL/10)``.

A second, parametric "measured" domain (flatter pathloss, shadowing and a
Ricean line-of-sight component) stands in for real testbed measurements so
that fine-tuning experiments have a reproducible source -> target gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._jsonio import dumps17
from .numkit import RngStream

SPEED_OF_LIGHT = 299_792_458.0
CSI_FORMAT = "dmimo-csi"
CSI_VERSION = 1

SPLITS = ("train", "val", "test")
REGIONS = ("interp", "extrap")


class DegenerateGeometry(ValueError):
    """An AP and a UE coincide, or a distance is otherwise non-positive."""


class CsiFormatError(ValueError):
    """A CSI file does not follow the dmimo-csi schema."""


def wavelength(fc_ghz: float) -> float:
    return SPEED_OF_LIGHT / (fc_ghz * 1e9)


def pathloss_db(d, fc_ghz, offset_db=32.4, distance_coeff=31.9):
    """Pathloss in dB for distance ``d`` (m) at carrier ``fc_ghz`` (GHz).

    Vectorized over ``d``. Raises DegenerateGeometry for ``d <= 0``.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise DegenerateGeometry("distance must be positive and finite")
    if fc_ghz <= 0:
        raise ValueError("carrier frequency must be positive")
    pl = offset_db + distance_coeff * np.log10(d) + 20.0 * np.log10(fc_ghz)
    return float(pl) if pl.ndim == 0 else pl


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def grid_layout(M: int, x_range=(0.0, 4.0), y_range=(0.0, 8.0), height=2.4) -> np.ndarray:
    """Place ``M`` APs on a near-square grid covering the ceiling rectangle.

    Cells are filled row by row from the smallest grid (with the aspect ratio
    of the area) holding at least ``M`` tiles; each AP sits at its cell centre.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    wx = x_range[1] - x_range[0]
    wy = y_range[1] - y_range[0]
    nx = max(1, int(round(math.sqrt(M * wx / wy))))
    ny = int(math.ceil(M / nx))
    xs = x_range[0] + (np.arange(nx) + 0.5) * wx / nx
    ys = y_range[0] + (np.arange(ny) + 0.5) * wy / ny
    pts = [(x, y, height) for y in ys for x in xs][:M]
    return np.array(pts, dtype=float)


@dataclass(frozen=True)
class Site:
    """AP deployment and service area without any UE placed yet."""

    ap_positions: np.ndarray
    fc_ghz: float = 0.92
    area_bounds: tuple = ((0.0, 4.0), (0.0, 8.0), (0.0, 2.4))
    ue_height: float = 0.0

    def __post_init__(self):
        ap = np.atleast_2d(np.asarray(self.ap_positions, dtype=float))
        if ap.shape[1] != 3 or ap.shape[0] < 1:
            raise ValueError("ap_positions must have shape (M, 3), M >= 1")
        object.__setattr__(self, "ap_positions", ap)
        object.__setattr__(self, "area_bounds", tuple(tuple(map(float, b)) for b in self.area_bounds))
        if self.fc_ghz <= 0:
            raise ValueError("carrier frequency must be positive")
        if not all(_inside(p, self.area_bounds) for p in ap):
            raise ValueError("AP positions must lie inside area_bounds")

    @property
    def M(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def wavelength(self) -> float:
        return wavelength(self.fc_ghz)

    def place(self, ue_positions) -> "Topology":
        return Topology(self.ap_positions, np.atleast_2d(ue_positions), self.fc_ghz, self.area_bounds)

    def subset(self, M: int) -> "Site":
        """Site with ``M`` APs laid out afresh on the same ceiling."""
        (x0, x1), (y0, y1), _ = self.area_bounds
        height = float(self.ap_positions[0, 2])
        return replace(self, ap_positions=grid_layout(M, (x0, x1), (y0, y1), height))


def default_site(M: int = 33, fc_ghz: float = 0.92, width=4.0, length=8.0, ap_height=2.4) -> Site:
    """Techtile-like ceiling deployment over a ``width`` x ``length`` floor."""
    aps = grid_layout(M, (0.0, width), (0.0, length), ap_height)
    return Site(aps, fc_ghz, ((0.0, width), (0.0, length), (0.0, ap_height)))


def _inside(p, bounds, tol=1e-12) -> bool:
    return all(lo - tol <= c <= hi + tol for c, (lo, hi) in zip(p, bounds))


@dataclass(frozen=True)
class Topology:
    ap_positions: np.ndarray
    ue_positions: np.ndarray
    fc_ghz: float
    area_bounds: tuple

    def __post_init__(self):
        ap = np.atleast_2d(np.asarray(self.ap_positions, dtype=float))
        ue = np.atleast_2d(np.asarray(self.ue_positions, dtype=float))
        if ap.shape[1] != 3 or ue.shape[1] != 3 or len(ap) < 1 or len(ue) < 1:
            raise ValueError("positions must have shape (n, 3) with n >= 1")
        if self.fc_ghz <= 0:
            raise ValueError("carrier frequency must be positive")
        for p in np.vstack([ap, ue]):
            if not _inside(p, self.area_bounds):
                raise ValueError(f"position {p.tolist()} outside area bounds")
        object.__setattr__(self, "ap_positions", ap)
        object.__setattr__(self, "ue_positions", ue)

    @property
    def M(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def K(self) -> int:
        return self.ue_positions.shape[0]

    def distances(self) -> np.ndarray:
        """(M, K) matrix of 3-D AP-UE distances."""
        diff = self.ap_positions[:, None, :] - self.ue_positions[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


# --------------------------------------------------------------------------
# Channel realizations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainConfig:
    """Large- and small-scale parameters of a propagation domain."""

    pathloss_offset_db: float = 32.4
    pathloss_exponent_coeff: float = 31.9
    shadowing_sigma_db: float = 0.0
    rice_factor_db: float | None = None
    los_phase_enabled: bool = False

    def __post_init__(self):
        vals = [self.pathloss_offset_db, self.pathloss_exponent_coeff, self.shadowing_sigma_db]
        if self.rice_factor_db is not None:
            vals.append(self.rice_factor_db)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("domain parameters must be finite")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")


SOURCE_DOMAIN = DomainConfig()
SHIFTED_DOMAIN = DomainConfig(
    pathloss_exponent_coeff=25.0, shadowing_sigma_db=4.0, rice_factor_db=5.0, los_phase_enabled=True
)


@dataclass
class ChannelMatrix:
    """One M x K channel with its large- and small-scale factors."""

    H: np.ndarray
    beta: np.ndarray | None = None
    h_small: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    def composition_error(self) -> float:
        """Max deviation from ``H = sqrt(beta) * h_small``."""
        return float(np.max(np.abs(self.H - np.sqrt(self.beta) * self.h_small)))


def _synth_batch(ap, ue, fc_ghz, domain: DomainConfig, rng: RngStream):
    """Channels for UE positions ``ue`` of shape (N, K, 3).

    Returns ``(H, beta, h_small)`` each of shape (N, M, K).
    """
    d = np.sqrt(np.sum((ap[None, :, None, :] - ue[:, None, :, :]) ** 2, axis=-1))
    if np.any(d <= 0):
        raise DegenerateGeometry("an AP and a UE share the same position")
    pl = pathloss_db(d, fc_ghz, domain.pathloss_offset_db, domain.pathloss_exponent_coeff)
    shape = d.shape
    if domain.shadowing_sigma_db > 0:
        pl = pl + domain.shadowing_sigma_db * rng.child("shadowing").normal(shape)
    beta = 10.0 ** (-pl / 10.0)
    h = rng.child("fading").complex_gaussian(shape)
    if domain.rice_factor_db is not None:
        kr = 10.0 ** (domain.rice_factor_db / 10.0)
        if domain.los_phase_enabled:
            los = np.exp(-2j * np.pi * d / wavelength(fc_ghz))
        else:
            los = np.exp(1j * rng.child("los_phase").uniform(0.0, 2 * np.pi, shape))
        h = np.sqrt(kr / (kr + 1.0)) * los + np.sqrt(1.0 / (kr + 1.0)) * h
    return np.sqrt(beta) * h, beta, h


def synth_channel(topology: Topology, domain: DomainConfig, rng: RngStream) -> ChannelMatrix:
    """Draw one channel realization for the given topology."""
    H, beta, h = _synth_batch(
        topology.ap_positions, topology.ue_positions[None], topology.fc_ghz, domain, rng
    )
    return ChannelMatrix(H[0], beta[0], h[0])


def los_channel(site: Site, target, domain: DomainConfig = SOURCE_DOMAIN) -> ChannelMatrix:
    """Deterministic line-of-sight channel (M x 1) towards ``target``.

    ``H[m] = sqrt(beta(d_m)) * exp(-j 2 pi d_m / lambda)``.
    """
    target = np.asarray(target, dtype=float)
    if target.shape == (2,):
        target = np.append(target, site.ue_height)
    if not _inside(target, site.area_bounds):
        raise ValueError(f"target {target.tolist()} outside area bounds")
    d = np.sqrt(np.sum((site.ap_positions - target) ** 2, axis=-1))
    if np.any(d <= 0):
        raise DegenerateGeometry("target coincides with an AP")
    beta = 10.0 ** (-pathloss_db(d, site.fc_ghz, domain.pathloss_offset_db,
                                 domain.pathloss_exponent_coeff) / 10.0)
    h = np.exp(-2j * np.pi * d / site.wavelength)
    return ChannelMatrix((np.sqrt(beta) * h)[:, None], beta[:, None], h[:, None])


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class ChannelDataset:
    """A stack of N channel samples of shape (M, K) with labels and tags.

    ``beta`` and ``h_small`` are optional (files may only carry ``H``).
    """

    H: np.ndarray
    positions: np.ndarray
    fc_ghz: float
    split: np.ndarray = None
    region: np.ndarray = None
    ids: np.ndarray = None
    beta: np.ndarray | None = None
    h_small: np.ndarray | None = None

    def __post_init__(self):
        n = self.H.shape[0]
        if self.H.ndim != 3:
            raise ValueError("H must have shape (N, M, K)")
        if self.positions.shape != (n, self.H.shape[2], 3):
            raise ValueError("positions must have shape (N, K, 3)")
        if self.split is None:
            self.split = np.full(n, "train", dtype=object)
        if self.region is None:
            self.region = np.full(n, "interp", dtype=object)
        if self.ids is None:
            self.ids = np.arange(n)
        self.split = np.asarray(self.split, dtype=object)
        self.region = np.asarray(self.region, dtype=object)
        self.ids = np.asarray(self.ids, dtype=int)

    def __len__(self) -> int:
        return self.H.shape[0]

    @property
    def M(self) -> int:
        return self.H.shape[1]

    @property
    def K(self) -> int:
        return self.H.shape[2]

    def sample(self, i: int) -> ChannelMatrix:
        beta = None if self.beta is None else self.beta[i]
        h = None if self.h_small is None else self.h_small[i]
        return ChannelMatrix(self.H[i], beta, h)

    def select(self, mask) -> "ChannelDataset":
        mask = np.asarray(mask)
        opt = lambda a: None if a is None else a[mask]  # noqa: E731
        return ChannelDataset(
            self.H[mask], self.positions[mask], self.fc_ghz, self.split[mask],
            self.region[mask], self.ids[mask], opt(self.beta), opt(self.h_small),
        )

    def subset(self, split: str | None = None, region: str | None = None) -> "ChannelDataset":
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.split == split
        if region is not None:
            keep &= self.region == region
        return self.select(keep)

    def counts(self) -> dict:
        out = {}
        for r in REGIONS:
            for s in SPLITS:
                c = int(np.sum((self.region == r) & (self.split == s)))
                if c:
                    out[f"{r}/{s}"] = c
        return out


def generate_dataset(site: Site, domain: DomainConfig, n_samples: int, K: int,
                     rng: RngStream, positions_pool=None) -> ChannelDataset:
    """Draw ``n_samples`` channel samples with ``K`` users each.

    UE positions are uniform over the floor area. For ``K > 1`` each sample
    pairs ``K`` distinct single-user positions. When ``positions_pool`` is
    given, positions are drawn without replacement from it instead.
    """
    if n_samples < 1 or K < 1:
        raise ValueError("n_samples and K must be >= 1")
    (x0, x1), (y0, y1), _ = site.area_bounds
    if positions_pool is not None:
        pool = np.atleast_2d(np.asarray(positions_pool, dtype=float))
        if pool.shape[1] == 2:
            pool = np.column_stack([pool, np.full(len(pool), site.ue_height)])
        n_distinct = len(np.unique(pool, axis=0))
        if K > n_distinct:
            raise ValueError(f"cannot pair K={K} users from {n_distinct} distinct positions")
        prng = rng.child("pairing")
        idx = np.stack([_distinct_draw(pool, K, prng) for _ in range(n_samples)])
        ue = pool[idx]
    else:
        prng = rng.child("positions")
        xy = np.column_stack([
            prng.uniform(x0, x1, n_samples * K), prng.uniform(y0, y1, n_samples * K)
        ]).reshape(n_samples, K, 2)
        ue = np.concatenate([xy, np.full((n_samples, K, 1), site.ue_height)], axis=-1)
        for i in range(n_samples):
            if K > 1 and len(np.unique(ue[i], axis=0)) < K:
                raise DegenerateGeometry(f"sample {i}: duplicate UE positions")
    H, beta, h = _synth_batch(site.ap_positions, ue, site.fc_ghz, domain, rng.child("channel"))
    return ChannelDataset(H, ue, site.fc_ghz, beta=beta, h_small=h)


def _distinct_draw(pool, K, rng: RngStream):
    while True:
        idx = rng.generator.choice(len(pool), size=K, replace=False)
        if len(np.unique(pool[idx], axis=0)) == K:
            return idx


def _in_mask(xy, mask) -> np.ndarray:
    (mx0, mx1), (my0, my1) = mask
    return (xy[..., 0] >= mx0) & (xy[..., 0] <= mx1) & (xy[..., 1] >= my0) & (xy[..., 1] <= my1)


def spatial_split(dataset: ChannelDataset, mask, val_fraction: float, rng: RngStream,
                  test_fraction: float | None = None) -> ChannelDataset:
    """Tag samples by region and split.

    Samples with any UE inside the axis-aligned ``mask`` ((x0, x1), (y0, y1))
    become extrapolation test samples. The remainder is shuffled and split
    into validation, test and train (interpolation) samples. ``mask=None``
    means no extrapolation region.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    test_fraction = val_fraction if test_fraction is None else test_fraction
    if not 0 <= test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise ValueError("val_fraction + test_fraction must be < 1")
    n = len(dataset)
    if mask is None:
        extrap = np.zeros(n, dtype=bool)
    else:
        mask = tuple(tuple(map(float, m)) for m in mask)
        _check_mask(dataset, mask)
        extrap = np.any(_in_mask(dataset.positions, mask), axis=1)
    if extrap.all():
        raise ValueError("mask covers every sample; nothing left for training")
    region = np.where(extrap, "extrap", "interp").astype(object)
    split = np.full(n, "test", dtype=object)
    interp_idx = np.flatnonzero(~extrap)
    order = interp_idx[rng.child("split").permutation(len(interp_idx))]
    n_val = int(round(val_fraction * len(order)))
    n_test = int(round(test_fraction * len(order)))
    split[order[:n_val]] = "val"
    split[order[n_val:n_val + n_test]] = "test"
    split[order[n_val + n_test:]] = "train"
    out = dataset.select(np.ones(n, dtype=bool))
    out.split, out.region = split, region
    return out


def _check_mask(dataset, mask):
    lo = dataset.positions.reshape(-1, 3).min(axis=0)
    hi = dataset.positions.reshape(-1, 3).max(axis=0)
    (mx0, mx1), (my0, my1) = mask
    if mx0 > mx1 or my0 > my1:
        raise ValueError("mask bounds must be ordered (lo, hi)")
    if mx1 < lo[0] or mx0 > hi[0] or my1 < lo[1] or my0 > hi[1]:
        raise ValueError("mask does not intersect the sampled area")


# --------------------------------------------------------------------------
# CSI files
# --------------------------------------------------------------------------


def export_csi(dataset: ChannelDataset, path) -> None:
    """Write ``dataset`` as JSON lines (versioned header + one record per sample)."""
    if not np.all(np.isfinite(dataset.H)):
        raise ValueError("dataset contains non-finite channel entries")
    header = {"format": CSI_FORMAT, "version": CSI_VERSION, "M": dataset.M, "K": dataset.K,
              "fc_ghz": float(dataset.fc_ghz)}
    lines = [dumps17(header)]
    for i in range(len(dataset)):
        rec = {
            "id": int(dataset.ids[i]),
            "ue_pos": dataset.positions[i],
            "H_re": dataset.H[i].real,
            "H_im": dataset.H[i].imag,
            "region": str(dataset.region[i]),
            "split": str(dataset.split[i]),
        }
        if dataset.beta is not None:
            rec["beta"] = dataset.beta[i]
        lines.append(dumps17(rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _matrix(rec, key, shape, where):
    try:
        arr = np.array(rec[key], dtype=float)
    except KeyError:
        raise CsiFormatError(f"{where}: missing field {key!r}") from None
    except (TypeError, ValueError):
        raise CsiFormatError(f"{where}: field {key!r} is not a numeric matrix") from None
    if arr.shape != shape:
        raise CsiFormatError(f"{where}: field {key!r} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise CsiFormatError(f"{where}: field {key!r} contains non-finite values")
    return arr


def import_csi(path) -> ChannelDataset:
    """Read a dmimo-csi JSON-lines file. Errors name the offending line."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CsiFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CsiFormatError(f"{path}: line 1 (header): invalid JSON: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != CSI_FORMAT:
        raise CsiFormatError(f"{path}: line 1: not a {CSI_FORMAT} header")
    if header.get("version") != CSI_VERSION:
        raise CsiFormatError(
            f"{path}: line 1: unsupported version {header.get('version')!r} (expected {CSI_VERSION})"
        )
    try:
        M, K, fc = int(header["M"]), int(header["K"]), float(header["fc_ghz"])
    except (KeyError, TypeError, ValueError):
        raise CsiFormatError(f"{path}: line 1: header needs integer M, K and numeric fc_ghz") from None
    if M < 1 or K < 1 or not fc > 0:
        raise CsiFormatError(f"{path}: line 1: invalid dimensions or carrier")

    H, pos, split, region, ids, betas = [], [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{path}: line {lineno}"
        try:
            rec = json.loads(line, parse_constant=_reject_constant)
        except json.JSONDecodeError as exc:
            raise CsiFormatError(f"{where}: invalid JSON: {exc.msg}") from None
        except ValueError as exc:
            raise CsiFormatError(f"{where}: {exc}") from None
        if not isinstance(rec, dict):
            raise CsiFormatError(f"{where}: record must be a JSON object")
        where = f"{where} (record id={rec.get('id')!r})"
        re_ = _matrix(rec, "H_re", (M, K), where)
        im_ = _matrix(rec, "H_im", (M, K), where)
        p = _matrix(rec, "ue_pos", (K, 3), where)
        if rec.get("region") not in REGIONS:
            raise CsiFormatError(f"{where}: region must be one of {REGIONS}")
        if rec.get("split") not in SPLITS:
            raise CsiFormatError(f"{where}: split must be one of {SPLITS}")
        if not isinstance(rec.get("id"), int):
            raise CsiFormatError(f"{where}: id must be an integer")
        if "beta" in rec:
            betas.append(_matrix(rec, "beta", (M, K), where))
        H.append(re_ + 1j * im_)
        pos.append(p)
        split.append(rec["split"])
        region.append(rec["region"])
        ids.append(rec["id"])
    if not H:
        raise CsiFormatError(f"{path}: no records after header")
    if betas and len(betas) != len(H):
        raise CsiFormatError(f"{path}: 'beta' present on some records only")
    H = np.array(H)
    beta = np.array(betas) if betas else None
    h_small = H / np.sqrt(beta) if beta is not None else None
    return ChannelDataset(H, np.array(pos), fc, np.array(split, dtype=object),
                          np.array(region, dtype=object), np.array(ids), beta, h_small)


def _reject_constant(name):
    raise ValueError(f"non-finite value {name}")
