"""Benchmark environments: gridworld MDP/POMDP, random mazes and mountain car."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import MdpSpec, PomdpSpec

ACTIONS = ("up", "down", "left", "right")
MOVES = {0: (0, 1), 1: (0, -1), 2: (-1, 0), 3: (1, 0)}


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid. Cell ``(x, y)`` has index ``y * width + x``; ``y = 0`` is the bottom row.

    ``walls`` is a collection of blocked cell pairs ``((x1, y1), (x2, y2))``.
    ``feature_mode`` is ``"coordinates"`` (``(x, y)`` scaled to [-1, 1]) or
    ``"rgb"`` (a color per cell, from ``colors`` or drawn with ``seed``).
    ``start`` is the initial cell; ``None`` means the bottom-left cell for the
    MDP and the uniform belief for the POMDP.
    """

    width: int
    height: int
    walls: frozenset = frozenset()
    feature_mode: str = "coordinates"
    noise: float = 0.0
    seed: int | None = None
    gamma: float = 0.9
    start: int | None = None
    colors: tuple | None = None
    stop_action: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be at least 1")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must lie in [0, 1)")
        if self.feature_mode not in ("coordinates", "rgb"):
            raise ValueError("feature_mode must be 'coordinates' or 'rgb'")
        walls = frozenset(frozenset(map(tuple, w)) for w in self.walls)
        object.__setattr__(self, "walls", walls)

    @property
    def num_cells(self):
        return self.width * self.height

    def index(self, x, y):
        return y * self.width + x

    def cell(self, s):
        return s % self.width, s // self.width

    def move(self, s, a):
        """Deterministic successor; bumping into a wall or the border stays put."""
        x, y = self.cell(s)
        dx, dy = MOVES[a]
        nx, ny = x + dx, y + dy
        if not (0 <= nx < self.width and 0 <= ny < self.height):
            return s
        if frozenset({(x, y), (nx, ny)}) in self.walls:
            return s
        return self.index(nx, ny)

    def neighbors(self, s):
        """Open neighboring cells (excluding ``s``), in action order."""
        out = []
        for a in range(4):
            n = self.move(s, a)
            if n != s and n not in out:
                out.append(n)
        return out


def _edges(width, height):
    for y in range(height):
        for x in range(width):
            if x + 1 < width:
                yield (x, y), (x + 1, y)
            if y + 1 < height:
                yield (x, y), (x, y + 1)


def connected(spec: GridSpec):
    """Flood fill from cell 0; True if every cell is reachable."""
    seen = {0}
    queue = deque([0])
    while queue:
        s = queue.popleft()
        for n in spec.neighbors(s):
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == spec.num_cells


def random_maze(width, height, seed, density=0.2, max_tries=1000, **kwargs):
    """Grid with i.i.d. interior walls, resampled until fully connected."""
    rng = np.random.default_rng(seed)
    edges = list(_edges(width, height))
    for _ in range(max_tries):
        mask = rng.random(len(edges)) < density
        walls = frozenset(frozenset(e) for e, m in zip(edges, mask) if m)
        spec = GridSpec(width, height, walls=walls, seed=seed, **kwargs)
        if connected(spec):
            return spec
    raise RuntimeError("could not sample a connected maze; lower the density")


def grid_features(spec: GridSpec):
    """Per-cell feature table ``(k, d)``."""
    k = spec.num_cells
    if spec.feature_mode == "rgb":
        if spec.colors is not None:
            colors = np.asarray(spec.colors, dtype=float)
        else:
            colors = np.random.default_rng(spec.seed).random((k, 3))
        if colors.shape != (k, 3):
            raise ValueError("need one RGB triple per cell")
        return colors
    xs = np.arange(k) % spec.width
    ys = np.arange(k) // spec.width
    sx = 2.0 * xs / (spec.width - 1) - 1.0 if spec.width > 1 else np.zeros(k)
    sy = 2.0 * ys / (spec.height - 1) - 1.0 if spec.height > 1 else np.zeros(k)
    return np.stack([sx, sy], axis=1)


def _actions(spec):
    return 5 if spec.stop_action else 4


def _move_matrix(spec, a):
    k = spec.num_cells
    T = np.zeros((k, k))
    for s in range(k):
        T[spec.move(s, a) if a < 4 else s, s] = 1.0
    return T


def _feature_table(spec):
    table = grid_features(spec)
    A = _actions(spec)
    f = np.repeat(table[:, None, :], A, axis=1)
    if spec.stop_action:
        # idling earns nothing, so the zero continuation is achievable
        f[:, 4, :] = 0.0
    return f


def gridworld_mdp(spec: GridSpec) -> MdpSpec:
    """Deterministic up/down/left/right moves; features depend on the current cell.

    With ``stop_action`` a fifth action idles in place with zero features.
    """
    k = spec.num_cells
    T = np.stack([_move_matrix(spec, a) for a in range(_actions(spec))])
    b1 = np.zeros(k)
    b1[spec.start if spec.start is not None else 0] = 1.0
    return MdpSpec(T, _feature_table(spec), b1, spec.gamma,
                   meta={"env": "gridworld", "width": spec.width, "height": spec.height})


def gridworld_pomdp(spec: GridSpec) -> PomdpSpec:
    """Noisy gridworld.

    With probability ``noise`` the agent moves to a uniformly random open
    neighbor instead of its intended cell; it observes its true cell with
    probability ``1 - noise`` and otherwise a uniformly random open neighbor.
    Observations are cell indices.
    """
    k = spec.num_cells
    eps = spec.noise
    Ts = []
    for a in range(_actions(spec)):
        T = (1.0 - eps) * _move_matrix(spec, a)
        for s in range(k):
            nb = spec.neighbors(s)
            if a == 4 or not nb:
                T[spec.move(s, a) if a < 4 else s, s] += eps
            else:
                T[nb, s] += eps / len(nb)
        Ts.append(T)
    D = np.zeros((k, k))
    for s in range(k):
        nb = spec.neighbors(s)
        D[s, s] = 1.0 - eps if nb else 1.0
        for n in nb:
            D[n, s] += eps / len(nb)
    if spec.start is None:
        b1 = np.full(k, 1.0 / k)
    else:
        b1 = np.zeros(k)
        b1[spec.start] = 1.0
    return PomdpSpec(np.stack(Ts), _feature_table(spec), b1, spec.gamma,
                     meta={"env": "gridworld-pomdp", "width": spec.width,
                           "height": spec.height, "noise": eps},
                     observation_matrix=D)


@dataclass(frozen=True)
class MountainCarSpec:
    """Mountain car discretized on a ``mesh`` grid of (position, velocity) cells.

    One decision step applies the classic update ``substeps`` times. With a
    single substep no cell-center trajectory leaves its cell on a 12 x 12
    mesh, so the default uses several.
    """

    mesh: tuple = (12, 12)
    position_range: tuple = (-1.2, 0.6)
    velocity_range: tuple = (-0.07, 0.07)
    rbf_grid: tuple = (-0.8, 0.0, 0.8)
    rbf_width: float = 0.8
    gamma: float = 0.9
    substeps: int = 5
    force: float = 0.001
    gravity: float = 0.0025

    def __post_init__(self):
        if min(self.mesh) < 1 or self.substeps < 1:
            raise ValueError("mesh and substeps must be positive")

    @property
    def centers(self):
        """``(k, 2)`` cell centers, index ``iv * mesh[0] + ip``."""
        npos, nvel = self.mesh
        (p0, p1), (v0, v1) = self.position_range, self.velocity_range
        pc = p0 + (np.arange(npos) + 0.5) * (p1 - p0) / npos
        vc = v0 + (np.arange(nvel) + 0.5) * (v1 - v0) / nvel
        P, V = np.meshgrid(pc, vc)
        return np.stack([P.ravel(), V.ravel()], axis=1)

    def rbf_centers(self):
        g = np.asarray(self.rbf_grid, dtype=float)
        P, V = np.meshgrid(g, g)
        return np.stack([P.ravel(), V.ravel()], axis=1)

    def rescale(self, states):
        states = np.asarray(states, dtype=float)
        lo = np.array([self.position_range[0], self.velocity_range[0]])
        hi = np.array([self.position_range[1], self.velocity_range[1]])
        return 2.0 * (states - lo) / (hi - lo) - 1.0

    def rbf(self, states):
        """Unnormalized Gaussian RBFs of raw ``(n, 2)`` states, values in (0, 1]."""
        x = self.rescale(states)
        diff = x[:, None, :] - self.rbf_centers()[None, :, :]
        return np.exp(-np.sum(diff**2, axis=2) / (2.0 * self.rbf_width**2))

    def step(self, position, velocity, accel):
        """Continuous classic dynamics for one decision step (``accel`` in {-1, +1})."""
        (p0, p1), (v0, v1) = self.position_range, self.velocity_range
        for _ in range(self.substeps):
            velocity = velocity + self.force * accel - self.gravity * np.cos(3.0 * position)
            velocity = min(max(velocity, v0), v1)
            position = min(max(position + velocity, p0), p1)
            if position == p0:
                velocity = max(velocity, 0.0)
        return position, velocity

    def cell_of(self, position, velocity):
        npos, nvel = self.mesh
        (p0, p1), (v0, v1) = self.position_range, self.velocity_range
        ip = min(max(int(np.floor((position - p0) / (p1 - p0) * npos)), 0), npos - 1)
        iv = min(max(int(np.floor((velocity - v0) / (v1 - v0) * nvel)), 0), nvel - 1)
        return iv * npos + ip


MOUNTAIN_CAR_ACTIONS = ("left", "right")


def mountain_car(spec: MountainCarSpec | None = None) -> MdpSpec:
    """Deterministic cell-to-cell mountain car with RBF features."""
    spec = spec or MountainCarSpec()
    centers = spec.centers
    k = len(centers)
    T = np.zeros((2, k, k))
    for a, accel in enumerate((-1.0, 1.0)):
        for s, (p, v) in enumerate(centers):
            T[a, spec.cell_of(*spec.step(p, v, accel)), s] = 1.0
    phi = spec.rbf(centers)
    features = np.repeat(phi[:, None, :], 2, axis=1)
    # classic start: position in [-0.6, -0.4] at rest
    vel_cells = np.abs(centers[:, 1]) == np.abs(centers[:, 1]).min()
    start = vel_cells & (centers[:, 0] >= -0.6) & (centers[:, 0] <= -0.4)
    b1 = start / start.sum()
    return MdpSpec(T, features, b1, spec.gamma,
                   meta={"env": "mountain-car", "mesh": list(spec.mesh),
                         "substeps": spec.substeps})
