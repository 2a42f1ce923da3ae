"""Euler-Maruyama sampling of the diffusion generated by ``div(a grad) + b.grad``.

The SDE is ``dX = (b + div a) dt + sqrt(2 a) dW``. Regions are balls or
ball complements tested in continuous space, so the estimates do not depend
on any lattice. Between two steps that both stay inside, the path may still
have crossed the boundary; this is accounted for by the Brownian-bridge
crossing probability ``exp(-2 d0 d1 / (s^2 dt))`` with ``s^2 = n.(2a)n``
the diffusivity normal to the boundary.

Trajectories are simulated in fixed-size blocks. Block ``i`` draws from
the ``i``-th child of ``SeedSequence(seed)``, so results do not depend on
how blocks are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffs import CoefficientField
from .grid import BallSpec, RegionMask, minimum_image

CENSOR_LIMIT = 0.01


@dataclass(frozen=True)
class SdeConfig:
    dt: float = 1e-5
    max_steps: int = 10**7
    n_paths: int = 100_000
    seed: int = 0
    block: int = 25_000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if self.max_steps < 1 or self.n_paths < 1 or self.block < 1:
            raise ValueError("step cap, path count and block size must be >= 1")

    @classmethod
    def for_grid(cls, h: float, **kw) -> "SdeConfig":
        """Default step ``h^2 / 10`` for comparisons with a lattice of spacing ``h``."""
        return cls(dt=h * h / 10, **kw)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_paths: int
    censored: float
    seed: int = 0

    @property
    def reliable(self) -> bool:
        return self.censored <= CENSOR_LIMIT

    def as_dict(self) -> dict:
        return {"provenance": "mc", "mean": self.mean, "stderr": self.stderr, "n_paths": self.n_paths,
                "censored": self.censored, "reliable": self.reliable, "seed": self.seed}


@dataclass(frozen=True)
class Region:
    """Interior of ``ball`` (``inside=True``) or its complement."""

    ball: BallSpec
    inside: bool = True

    def depth(self, x, length: float) -> np.ndarray:
        """Distance to the boundary, positive in the region."""
        s = self.ball.signed_distance(x, length)
        return -s if self.inside else s

    def normal(self, x, length: float) -> np.ndarray:
        diff = minimum_image(x - np.asarray(self.ball.center), length)
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        return diff / np.where(norm == 0, 1.0, norm)


def as_region(region) -> Region:
    if isinstance(region, Region):
        return region
    if isinstance(region, BallSpec):
        return Region(region, True)
    if isinstance(region, RegionMask) and region.geometry is not None:
        return Region(*region.geometry)
    raise TypeError(f"cannot interpret {type(region).__name__} as a continuous region")


def _block_sizes(cfg: SdeConfig):
    full, rest = divmod(cfg.n_paths, cfg.block)
    return [cfg.block] * full + ([rest] if rest else [])


def _streams(cfg: SdeConfig):
    sizes = _block_sizes(cfg)
    children = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    return [(size, np.random.default_rng(child)) for size, child in zip(sizes, children)]


class _Dynamics:
    def __init__(self, field: CoefficientField):
        self.field = field

    def drift(self, x):
        return self.field.b(x) + self.field.div_a(x)

    def diffusivity(self, x):
        # diagonal of 2a; every builtin family has diagonal a
        return 2.0 * self.field.a_diag(x)

    def step(self, x, noise, dt):
        return x + self.drift(x) * dt + np.sqrt(self.diffusivity(x) * dt) * noise


def _crossed(region: Region, x0, d0, x1, d1, dyn: _Dynamics, dt, length, u):
    """Which paths left ``region`` during the step from ``x0`` (depth ``d0``) to ``x1`` (depth ``d1``)."""
    out = d1 <= 0
    diff = dyn.diffusivity(x0)
    # n.(2a)n <= max_i 2a_ii, so the crossing probability is below exp(-40) off this set
    near = ~out & (d0 * d1 < 20.0 * diff.max(axis=1) * dt)
    if near.any():
        k = np.flatnonzero(near)
        nrm = region.normal(x0[k], length)
        s2 = np.maximum(np.sum(nrm * nrm * diff[k], axis=1), 1e-300)
        p = np.exp(-2.0 * np.maximum(d0[k], 0.0) * d1[k] / (s2 * dt))
        out[k] = u[k] < p
    return out


def _exit_block(dyn, region, x, size, rng, dt, max_steps, length):
    pos = np.repeat(np.asarray(x, dtype=float)[None, :], size, axis=0)
    depth = region.depth(pos, length)
    ids = np.arange(size)
    times = np.full(size, max_steps * dt)
    done = np.zeros(size, dtype=bool)
    for step in range(1, max_steps + 1):
        if ids.size == 0:
            break
        new = dyn.step(pos, rng.standard_normal(pos.shape), dt)
        d1 = region.depth(new, length)
        gone = _crossed(region, pos, depth, new, d1, dyn, dt, length, rng.random(ids.size))
        times[ids[gone]] = step * dt
        done[ids[gone]] = True
        keep = ~gone
        pos, depth, ids = new[keep], d1[keep], ids[keep]
    return times, done


def _summary(values, ok, seed) -> McEstimate:
    n = values.size
    used = values[ok] if ok.any() else values
    mean = float(np.mean(used))
    stderr = float(np.std(used, ddof=1) / np.sqrt(used.size)) if used.size > 1 else 0.0
    return McEstimate(mean, stderr, n, float(1.0 - ok.mean()), seed)


def simulate_exit_time(field: CoefficientField, D, x, cfg: SdeConfig) -> McEstimate:
    """Mean first exit time from ``D`` started at ``x``.

    Censored paths (no exit within ``max_steps``) enter with the capped time;
    the estimate is flagged unreliable when more than 1% are censored.
    """
    region = as_region(D)
    x = np.asarray(x, dtype=float)
    if region.depth(x[None, :], field.length)[0] < 0:
        raise ValueError("start point outside the region")
    dyn = _Dynamics(field)
    times, done = [], []
    for size, rng in _streams(cfg):
        t, ok = _exit_block(dyn, region, x, size, rng, cfg.dt, cfg.max_steps, field.length)
        times.append(t)
        done.append(ok)
    times, done = np.concatenate(times), np.concatenate(done)
    est = _summary(times, np.ones_like(done), cfg.seed)
    return McEstimate(est.mean, est.stderr, est.n_paths, float(1.0 - done.mean()), cfg.seed)


def simulate_hitting_probability(field: CoefficientField, A, B, x, cfg: SdeConfig) -> McEstimate:
    """Fraction of paths from ``x`` that reach ``A`` before ``B``; censored paths are left out."""
    A, B = as_region(A), as_region(B)
    x = np.asarray(x, dtype=float)
    length = field.length
    if A.depth(x[None, :], length)[0] >= 0:
        return McEstimate(1.0, 0.0, cfg.n_paths, 0.0, cfg.seed)
    if B.depth(x[None, :], length)[0] >= 0:
        return McEstimate(0.0, 0.0, cfg.n_paths, 0.0, cfg.seed)
    # leaving the complement of A means hitting A, and likewise for B
    avoid_A = Region(A.ball, not A.inside)
    avoid_B = Region(B.ball, not B.inside)
    dyn = _Dynamics(field)
    hits, settled = [], []
    for size, rng in _streams(cfg):
        pos = np.repeat(x[None, :], size, axis=0)
        dA, dB = avoid_A.depth(pos, length), avoid_B.depth(pos, length)
        ids = np.arange(size)
        hit = np.zeros(size)
        ok = np.zeros(size, dtype=bool)
        for _ in range(cfg.max_steps):
            if ids.size == 0:
                break
            new = dyn.step(pos, rng.standard_normal(pos.shape), cfg.dt)
            nA, nB = avoid_A.depth(new, length), avoid_B.depth(new, length)
            u = rng.random((2, ids.size))
            in_A = _crossed(avoid_A, pos, dA, new, nA, dyn, cfg.dt, length, u[0])
            in_B = _crossed(avoid_B, pos, dB, new, nB, dyn, cfg.dt, length, u[1]) & ~in_A
            hit[ids[in_A]] = 1.0
            ok[ids[in_A | in_B]] = True
            keep = ~(in_A | in_B)
            pos, dA, dB, ids = new[keep], nA[keep], nB[keep], ids[keep]
        hits.append(hit)
        settled.append(ok)
    return _summary(np.concatenate(hits), np.concatenate(settled), cfg.seed)


def coupled_exit_times(field: CoefficientField, D, x, cfg: SdeConfig):
    """Exit-time estimates at ``dt`` and ``dt/2`` driven by the same Brownian path.

    Each coarse increment is the sum of two fine increments, so the
    difference of the two estimates isolates the time-step bias. Returns
    ``(coarse, fine, difference)`` where ``difference`` is the estimate of
    the mean of ``T_fine - T_coarse`` with its own standard error.
    """
    region = as_region(D)
    dyn = _Dynamics(field)
    x = np.asarray(x, dtype=float)
    dt, half = cfg.dt, cfg.dt / 2
    length = field.length
    coarse_all, fine_all, ok_all = [], [], []
    for size, rng in _streams(cfg):
        pc = np.repeat(x[None, :], size, axis=0)
        pf = pc.copy()
        dc = region.depth(pc, length)
        df = dc.copy()
        tc = np.full(size, cfg.max_steps * dt)
        tf = tc.copy()
        live_c = np.ones(size, dtype=bool)
        live_f = np.ones(size, dtype=bool)
        for step in range(1, cfg.max_steps + 1):
            # both members of a pair keep consuming the shared increments until both exit
            active = np.flatnonzero(live_c | live_f)
            if active.size == 0:
                break
            z = rng.standard_normal((2, active.size, x.size))
            u = rng.random((3, active.size))
            for k in range(2):
                sel = live_f[active]
                idx = active[sel]
                if idx.size:
                    new = dyn.step(pf[idx], z[k, sel], half)
                    d1 = region.depth(new, length)
                    gone = _crossed(region, pf[idx], df[idx], new, d1, dyn, half, length, u[k, sel])
                    tf[idx[gone]] = (2 * (step - 1) + k + 1) * half
                    live_f[idx[gone]] = False
                    pf[idx], df[idx] = new, d1
            sel = live_c[active]
            idx = active[sel]
            if idx.size:
                noise = (z[0, sel] + z[1, sel]) / np.sqrt(2.0)
                new = dyn.step(pc[idx], noise, dt)
                d1 = region.depth(new, length)
                gone = _crossed(region, pc[idx], dc[idx], new, d1, dyn, dt, length, u[2, sel])
                tc[idx[gone]] = step * dt
                live_c[idx[gone]] = False
                pc[idx], dc[idx] = new, d1
        coarse_all.append(tc)
        fine_all.append(tf)
        ok_all.append(~(live_c | live_f))
    tc, tf = np.concatenate(coarse_all), np.concatenate(fine_all)
    ok = np.concatenate(ok_all)
    everything = np.ones_like(ok)
    censored = float(1.0 - ok.mean())

    def pack(values):
        est = _summary(values, everything, cfg.seed)
        return McEstimate(est.mean, est.stderr, est.n_paths, censored, cfg.seed)

    return pack(tc), pack(tf), pack(tf - tc)
