"""Time-resolved Monte Carlo photon transport through a slab with a mask plane.

Photons enter at the illumination spot on the front face (z = 0) travelling
along +z, scatter with a Henyey-Greenstein phase function, and lose weight
continuously as ``exp(-mu_a * path)``. Crossing the target plane at
``z = d1`` (in either direction) a photon survives with probability
``T(x, y)`` of the pixel it crosses. Photons leaving the back face
(``z = d1 + d2``) are binned by exit pixel and arrival time
``path * n / c``. Boundaries are index matched: the first crossing exits.

Two interchangeable transport kernels exist: a scalar loop compiled with
numba and a batch-vectorized numpy version. They consume different random
streams, so they agree statistically but not bit for bit; each is
deterministic for a given seed.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, numba_enabled
from .diffusion import C_VACUUM, SceneGeometry
from .tensor import Image2D, Volume3D

__all__ = [
    "McConfig",
    "McCounters",
    "McResult",
    "sample_step",
    "sample_hg_deflection",
    "trace",
]

# tally layout shared by both kernels
(LAUNCHED, SPLIT_COPIES, TRANSMITTED, REFLECTED, ROULETTE_KILLED, BLOCKED, TERMINATED,
 W_TRANSMITTED, W_REFLECTED, W_BLOCKED, W_TERMINATED, W_ABSORBED, W_ROULETTE_LOST,
 W_ROULETTE_GAIN, W_DETECTED) = range(15)
N_TALLIES = 15


def sample_step(rng, mu_t, size=None):
    """Free path length ``-ln(xi) / mu_t`` with ``xi`` uniform on (0, 1]."""
    if mu_t <= 0:
        raise ValueError(f"mu_t must be positive, got {mu_t}")
    xi = 1.0 - rng.random(size)
    return -np.log(xi) / mu_t


def _hg_cos(xi, g):
    if g == 0.0:
        return 2.0 * xi - 1.0
    tmp = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
    return np.clip((1.0 + g * g - tmp * tmp) / (2.0 * g), -1.0, 1.0)


def sample_hg_deflection(rng, g, size=None):
    """Cosine of the Henyey-Greenstein deflection angle (inverse CDF)."""
    if not 0.0 <= g < 1.0:
        raise ValueError(f"g must lie in [0, 1), got {g}")
    return _hg_cos(rng.random(size), g)


@dataclass(frozen=True)
class McConfig:
    """Medium, geometry, target and sampling controls for one MC run."""

    mu_s: float = 20.0
    g: float = 0.9
    mu_a: float = 0.01
    refractive_index: float = 1.4
    geometry: SceneGeometry = field(default_factory=SceneGeometry)
    mask: object = None
    photons: int = 1_000_000
    seed: int = 0
    split: int = 1
    batch_size: int = 100_000
    mask_outside: float = 0.0
    roulette_weight: float = 1e-4
    roulette_survival: float = 0.1
    prune: bool = False
    spot_sigma: float = 0.0

    def __post_init__(self):
        if not self.mu_s > 0:
            raise ValueError(f"mu_s must be positive, got {self.mu_s}")
        if not 0.0 <= self.g < 1.0:
            raise ValueError(f"g must lie in [0, 1), got {self.g}")
        if self.mu_a < 0:
            raise ValueError(f"mu_a must be >= 0, got {self.mu_a}")
        if self.photons < 1:
            raise ValueError("photons must be >= 1")
        if self.spot_sigma < 0:
            raise ValueError("spot_sigma must be >= 0")
        if self.split < 1 or self.batch_size < 1:
            raise ValueError("split and batch_size must be >= 1")
        geo = self.geometry
        if self.mask is None:
            mask = np.ones((geo.nx, geo.ny))
        else:
            mask = self.mask.data if isinstance(self.mask, Image2D) else np.asarray(self.mask, dtype=float)
        if mask.shape != (geo.nx, geo.ny):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(geo.nx, geo.ny)}")
        if np.any(mask < 0) or np.any(mask > 1):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "mask", Image2D(mask, geo.pixel_size))

    @property
    def mu_s_prime(self):
        return self.mu_s * (1.0 - self.g)


@dataclass(frozen=True)
class McCounters:
    """Photon-packet fates (counts) and the weights they carried.

    ``launched + split_copies`` equals the sum of the five fate counts.
    Weight tallies close the balance ``launched + roulette_gain =
    transmitted_w + reflected_w + blocked_w + terminated_w + absorbed_w +
    roulette_lost_w``. ``terminated`` covers time overflow and packets that
    can no longer reach the detector in time.
    """

    launched: int
    split_copies: int
    transmitted: int
    reflected: int
    absorbed: int
    mask_blocked: int
    terminated: int
    transmitted_weight: float
    reflected_weight: float
    mask_blocked_weight: float
    terminated_weight: float
    absorbed_weight: float
    roulette_lost_weight: float
    roulette_gain_weight: float
    detected_weight: float

    @classmethod
    def from_tallies(cls, t):
        return cls(
            launched=int(t[LAUNCHED]), split_copies=int(t[SPLIT_COPIES]),
            transmitted=int(t[TRANSMITTED]), reflected=int(t[REFLECTED]),
            absorbed=int(t[ROULETTE_KILLED]), mask_blocked=int(t[BLOCKED]),
            terminated=int(t[TERMINATED]),
            transmitted_weight=float(t[W_TRANSMITTED]), reflected_weight=float(t[W_REFLECTED]),
            mask_blocked_weight=float(t[W_BLOCKED]), terminated_weight=float(t[W_TERMINATED]),
            absorbed_weight=float(t[W_ABSORBED]), roulette_lost_weight=float(t[W_ROULETTE_LOST]),
            roulette_gain_weight=float(t[W_ROULETTE_GAIN]), detected_weight=float(t[W_DETECTED]),
        )

    def as_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class McResult:
    measurement: Volume3D
    counters: McCounters


def _kernel_params(cfg):
    geo = cfg.geometry
    sx, sy = geo.source_position()
    x_lo = geo.x_centers()[0] - 0.5 * geo.pixel_size
    y_lo = geo.y_centers()[0] - 0.5 * geo.pixel_size
    l_max = geo.nt * geo.bin_width * C_VACUUM / cfg.refractive_index
    return dict(
        mu_s=float(cfg.mu_s), mu_a=float(cfg.mu_a), g=float(cfg.g),
        ps_per_mm=cfg.refractive_index / C_VACUUM,
        d1=float(geo.d1), d_tot=float(geo.thickness),
        mask=np.ascontiguousarray(cfg.mask.data), mask_outside=float(cfg.mask_outside),
        x_lo=float(x_lo), y_lo=float(y_lo), px=float(geo.pixel_size),
        nx=geo.nx, ny=geo.ny, nt=geo.nt, bin_width=float(geo.bin_width),
        src_x=sx, src_y=sy, l_max=float(l_max), split=int(cfg.split),
        rr_weight=float(cfg.roulette_weight), rr_survival=float(cfg.roulette_survival),
        prune=bool(cfg.prune), spot_sigma=float(cfg.spot_sigma),
    )


@njit(nogil=True)
def _mask_at(mask, x, y, x_lo, y_lo, px, nx, ny, outside):
    ix = int(np.floor((x - x_lo) / px))
    iy = int(np.floor((y - y_lo) / px))
    if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
        return outside
    return mask[ix, iy]


@njit(nogil=True)
def _unreachable(x, y, z, remaining, d_tot, x_lo, y_lo, x_hi, y_hi):
    # shortest path to any detector pixel on the back face
    dx = 0.0
    if x < x_lo:
        dx = x_lo - x
    elif x > x_hi:
        dx = x - x_hi
    dy = 0.0
    if y < y_lo:
        dy = y_lo - y
    elif y > y_hi:
        dy = y - y_hi
    dz = d_tot - z
    return dx * dx + dy * dy + dz * dz > remaining * remaining


@njit(nogil=True)
def _rr_path(a, p0, mu_a, rr_weight):
    # path at which a * exp(-mu_a * (path - p0)) drops below rr_weight
    if a < rr_weight:
        return p0
    if mu_a <= 0.0:
        return np.inf
    return p0 + np.log(a / rr_weight) / mu_a


@njit(nogil=True)
def _trace_batch_jit(n_photons, seed, mu_s, mu_a, g, ps_per_mm, d1, d_tot, mask, mask_outside,
                     x_lo, y_lo, px, nx, ny, nt, bin_width, src_x, src_y, l_max, split,
                     rr_weight, rr_survival, prune, spot_sigma, hist, tallies):
    # Packet weight is a * exp(-mu_a * (path - p0)), materialized only at
    # events; a is the weight at the start p0 of the current segment.
    np.random.seed(seed)
    x_hi = x_lo + nx * px
    y_hi = y_lo + ny * px
    # pending split copies: x, y, z, ux, uy, uz, path, a
    stack = np.empty((max(split - 1, 1), 8))
    for _ in range(n_photons):
        tallies[LAUNCHED] += 1.0
        n_pending = 0
        x = src_x
        y = src_y
        if spot_sigma > 0.0:
            x += spot_sigma * np.random.standard_normal()
            y += spot_sigma * np.random.standard_normal()
        z = 0.0
        ux = 0.0
        uy = 0.0
        uz = 1.0
        path = 0.0
        a = 1.0
        p0 = 0.0
        p_rr = _rr_path(a, p0, mu_a, rr_weight)
        side = 0
        has_split = False
        while True:
            s = -np.log(1.0 - np.random.random()) / mu_s
            z_new = z + s * uz
            alive = True
            fate = -1
            if (side == 0 and uz > 0.0 and z_new >= d1) or (side == 1 and uz < 0.0 and z_new < d1):
                sc = (d1 - z) / uz
                x += ux * sc
                y += uy * sc
                z = d1
                path += sc
                T = _mask_at(mask, x, y, x_lo, y_lo, px, nx, ny, mask_outside)
                if T < 1.0 and (T <= 0.0 or np.random.random() >= T):
                    fate = BLOCKED
                else:
                    side = 1 - side
                    if side == 1 and split > 1 and not has_split:
                        has_split = True
                        w = a * np.exp(-mu_a * (path - p0))
                        tallies[W_ABSORBED] += a - w
                        a = w / split
                        p0 = path
                        p_rr = _rr_path(a, p0, mu_a, rr_weight)
                        for _k in range(split - 1):
                            stack[n_pending, 0] = x
                            stack[n_pending, 1] = y
                            stack[n_pending, 2] = z
                            stack[n_pending, 3] = ux
                            stack[n_pending, 4] = uy
                            stack[n_pending, 5] = uz
                            stack[n_pending, 6] = path
                            stack[n_pending, 7] = a
                            n_pending += 1
                        tallies[SPLIT_COPIES] += split - 1
            elif uz > 0.0 and z_new >= d_tot:
                sc = (d_tot - z) / uz
                x += ux * sc
                y += uy * sc
                path += sc
                fate = TRANSMITTED
            elif uz < 0.0 and z_new <= 0.0:
                path += -z / uz
                fate = REFLECTED
            else:
                x += ux * s
                y += uy * s
                z = z_new
                path += s
                if path >= l_max or (prune and _unreachable(x, y, z, l_max - path, d_tot,
                                                            x_lo, y_lo, x_hi, y_hi)):
                    fate = TERMINATED
                elif path >= p_rr:
                    w = a * np.exp(-mu_a * (path - p0))
                    if np.random.random() < rr_survival:
                        tallies[W_ABSORBED] += a - w
                        tallies[W_ROULETTE_GAIN] += w / rr_survival - w
                        a = w / rr_survival
                        p0 = path
                        p_rr = _rr_path(a, p0, mu_a, rr_weight)
                    else:
                        fate = ROULETTE_KILLED
                if fate < 0:
                    xi = np.random.random()
                    if g == 0.0:
                        cost = 2.0 * xi - 1.0
                    else:
                        tmp = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi)
                        cost = (1.0 + g * g - tmp * tmp) / (2.0 * g)
                        cost = min(1.0, max(-1.0, cost))
                    sint = np.sqrt(1.0 - cost * cost)
                    xi = np.random.random()
                    cosp = np.cos(2.0 * np.pi * xi)
                    sinp = np.sqrt(1.0 - cosp * cosp)
                    if xi > 0.5:
                        sinp = -sinp
                    if abs(uz) > 0.99999:
                        ux = sint * cosp
                        uy = sint * sinp
                        uz = cost if uz > 0.0 else -cost
                    else:
                        tmp = np.sqrt(1.0 - uz * uz)
                        nux = sint * (ux * uz * cosp - uy * sinp) / tmp + ux * cost
                        nuy = sint * (uy * uz * cosp + ux * sinp) / tmp + uy * cost
                        nuz = -sint * cosp * tmp + uz * cost
                        ux = nux
                        uy = nuy
                        uz = nuz
            if fate >= 0:
                w = a * np.exp(-mu_a * (path - p0))
                tallies[W_ABSORBED] += a - w
                tallies[fate] += 1.0
                if fate == TRANSMITTED:
                    tallies[W_TRANSMITTED] += w
                    kt = int(path * ps_per_mm / bin_width)
                    ix = int(np.floor((x - x_lo) / px))
                    iy = int(np.floor((y - y_lo) / px))
                    if 0 <= kt < nt and 0 <= ix < nx and 0 <= iy < ny:
                        hist[ix, iy, kt] += w
                        tallies[W_DETECTED] += w
                elif fate == REFLECTED:
                    tallies[W_REFLECTED] += w
                elif fate == BLOCKED:
                    tallies[W_BLOCKED] += w
                elif fate == TERMINATED:
                    tallies[W_TERMINATED] += w
                else:
                    tallies[W_ROULETTE_LOST] += w
                if n_pending == 0:
                    break
                n_pending -= 1
                x = stack[n_pending, 0]
                y = stack[n_pending, 1]
                z = stack[n_pending, 2]
                ux = stack[n_pending, 3]
                uy = stack[n_pending, 4]
                uz = stack[n_pending, 5]
                path = stack[n_pending, 6]
                a = stack[n_pending, 7]
                p0 = path
                p_rr = _rr_path(a, p0, mu_a, rr_weight)
                side = 1
                has_split = True


def _trace_batch_numpy(n_photons, seed, mu_s, mu_a, g, ps_per_mm, d1, d_tot, mask, mask_outside,
                       x_lo, y_lo, px, nx, ny, nt, bin_width, src_x, src_y, l_max, split,
                       rr_weight, rr_survival, prune, spot_sigma, hist, tallies):
    rng = np.random.default_rng(seed)
    x_hi = x_lo + nx * px
    y_hi = y_lo + ny * px
    n = n_photons
    x = np.full(n, src_x)
    y = np.full(n, src_y)
    if spot_sigma > 0.0:
        x += spot_sigma * rng.standard_normal(n)
        y += spot_sigma * rng.standard_normal(n)
    z = np.zeros(n)
    ux = np.zeros(n)
    uy = np.zeros(n)
    uz = np.ones(n)
    path = np.zeros(n)
    w = np.ones(n)
    side = np.zeros(n, dtype=np.int8)
    has_split = np.zeros(n, dtype=bool)
    tallies[LAUNCHED] += n

    def lookup(xs, ys):
        ix = np.floor((xs - x_lo) / px).astype(np.int64)
        iy = np.floor((ys - y_lo) / px).astype(np.int64)
        inside = (ix >= 0) & (iy >= 0) & (ix < nx) & (iy < ny)
        out = np.full(xs.shape, mask_outside)
        out[inside] = mask[ix[inside], iy[inside]]
        return out

    def attenuate(idx, length):
        att = np.exp(-mu_a * length)
        tallies[W_ABSORBED] += np.sum(w[idx] * (1.0 - att))
        w[idx] *= att

    while n > 0:
        s = -np.log(1.0 - rng.random(n)) / mu_s
        z_new = z + s * uz
        cross = ((side == 0) & (uz > 0) & (z_new >= d1)) | ((side == 1) & (uz < 0) & (z_new < d1))
        exit_back = ~cross & (uz > 0) & (z_new >= d_tot)
        exit_front = ~cross & (uz < 0) & (z_new <= 0)
        move = ~(cross | exit_back | exit_front)
        dead = np.zeros(n, dtype=bool)
        new_rows = None

        idx = np.flatnonzero(cross)
        if idx.size:
            sc = (d1 - z[idx]) / uz[idx]
            x[idx] += ux[idx] * sc
            y[idx] += uy[idx] * sc
            z[idx] = d1
            path[idx] += sc
            attenuate(idx, sc)
            T = lookup(x[idx], y[idx])
            u = rng.random(idx.size)
            blocked = (T < 1.0) & ((T <= 0.0) | (u >= T))
            b = idx[blocked]
            tallies[BLOCKED] += b.size
            tallies[W_BLOCKED] += np.sum(w[b])
            dead[b] = True
            passed = idx[~blocked]
            side[passed] = 1 - side[passed]
            if split > 1:
                fresh = passed[(side[passed] == 1) & ~has_split[passed]]
                if fresh.size:
                    has_split[fresh] = True
                    w[fresh] /= split
                    new_rows = np.repeat(fresh, split - 1)
                    tallies[SPLIT_COPIES] += new_rows.size

        idx = np.flatnonzero(exit_back)
        if idx.size:
            sc = (d_tot - z[idx]) / uz[idx]
            x[idx] += ux[idx] * sc
            y[idx] += uy[idx] * sc
            path[idx] += sc
            attenuate(idx, sc)
            tallies[TRANSMITTED] += idx.size
            tallies[W_TRANSMITTED] += np.sum(w[idx])
            kt = (path[idx] * ps_per_mm / bin_width).astype(np.int64)
            ix = np.floor((x[idx] - x_lo) / px).astype(np.int64)
            iy = np.floor((y[idx] - y_lo) / px).astype(np.int64)
            ok = (kt >= 0) & (kt < nt) & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
            np.add.at(hist, (ix[ok], iy[ok], kt[ok]), w[idx][ok])
            tallies[W_DETECTED] += np.sum(w[idx][ok])
            dead[idx] = True

        idx = np.flatnonzero(exit_front)
        if idx.size:
            sc = -z[idx] / uz[idx]
            path[idx] += sc
            attenuate(idx, sc)
            tallies[REFLECTED] += idx.size
            tallies[W_REFLECTED] += np.sum(w[idx])
            dead[idx] = True

        idx = np.flatnonzero(move)
        if idx.size:
            si = s[idx]
            x[idx] += ux[idx] * si
            y[idx] += uy[idx] * si
            z[idx] = z_new[idx]
            path[idx] += si
            attenuate(idx, si)
            over = path[idx] >= l_max
            if prune:
                rem = l_max - path[idx]
                dx = np.maximum(np.maximum(x_lo - x[idx], x[idx] - x_hi), 0.0)
                dy = np.maximum(np.maximum(y_lo - y[idx], y[idx] - y_hi), 0.0)
                dz = d_tot - z[idx]
                over |= dx * dx + dy * dy + dz * dz > rem * rem
            t_idx = idx[over]
            tallies[TERMINATED] += t_idx.size
            tallies[W_TERMINATED] += np.sum(w[t_idx])
            dead[t_idx] = True
            idx = idx[~over]

            low = idx[w[idx] < rr_weight]
            if low.size:
                survive = rng.random(low.size) < rr_survival
                lost = low[~survive]
                won = low[survive]
                tallies[ROULETTE_KILLED] += lost.size
                tallies[W_ROULETTE_LOST] += np.sum(w[lost])
                tallies[W_ROULETTE_GAIN] += np.sum(w[won] / rr_survival - w[won])
                w[won] /= rr_survival
                dead[lost] = True
                idx = idx[~np.isin(idx, lost)]

            m = idx.size
            cost = _hg_cos(rng.random(m), g)
            sint = np.sqrt(1.0 - cost * cost)
            phi = 2.0 * np.pi * rng.random(m)
            cosp, sinp = np.cos(phi), np.sin(phi)
            a, b_, c = ux[idx], uy[idx], uz[idx]
            vertical = np.abs(c) > 0.99999
            tmp = np.sqrt(np.where(vertical, 1.0, 1.0 - c * c))
            nux = np.where(vertical, sint * cosp, sint * (a * c * cosp - b_ * sinp) / tmp + a * cost)
            nuy = np.where(vertical, sint * sinp, sint * (b_ * c * cosp + a * sinp) / tmp + b_ * cost)
            nuz = np.where(vertical, np.where(c > 0, cost, -cost), -sint * cosp * tmp + c * cost)
            ux[idx], uy[idx], uz[idx] = nux, nuy, nuz

        keep = ~dead
        if new_rows is not None:
            keep_idx = np.concatenate([np.flatnonzero(keep), new_rows])
        else:
            keep_idx = np.flatnonzero(keep)
        x, y, z = x[keep_idx], y[keep_idx], z[keep_idx]
        ux, uy, uz = ux[keep_idx], uy[keep_idx], uz[keep_idx]
        path, w, side, has_split = path[keep_idx], w[keep_idx], side[keep_idx], has_split[keep_idx]
        n = keep_idx.size


def _batch_seeds(seed, n_batches):
    children = np.random.SeedSequence(seed).spawn(n_batches)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def trace(config, threads=1, use_numba=None):
    """Run the Monte Carlo simulation described by ``config``.

    Photons are processed in fixed-size batches with independent seeds split
    from ``config.seed``; batch tallies are reduced in batch order, so the
    result does not depend on ``threads``.
    """
    if use_numba is None:
        use_numba = numba_enabled()
    kernel = _trace_batch_jit if use_numba else _trace_batch_numpy
    geo = config.geometry
    params = _kernel_params(config)
    sizes = [config.batch_size] * (config.photons // config.batch_size)
    if config.photons % config.batch_size:
        sizes.append(config.photons % config.batch_size)
    seeds = _batch_seeds(config.seed, len(sizes))

    def run(job):
        size, s = job
        hist = np.zeros(geo.shape)
        tallies = np.zeros(N_TALLIES)
        kernel(size, s, hist=hist, tallies=tallies, **params)
        return hist, tallies

    jobs = list(zip(sizes, seeds))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    hist = np.zeros(geo.shape)
    tallies = np.zeros(N_TALLIES)
    for h, t in parts:
        hist += h
        tallies += t
    return McResult(Volume3D(hist, geo.pixel_size, geo.bin_width), McCounters.from_tallies(tallies))
