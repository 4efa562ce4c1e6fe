"""Ground-truth dynamical systems and synthetic video dataset generation.

Each system is a set of unit-mass point objects on springs, written in
first-order state-space form: states are the moving positions followed by
their velocities, accelerations are K @ p + C * v + cubic * p^3 plus the
forcing g on selected equations. Videos plot one sprite per object on a
textured background; the mapping from physical positions to pixels is a
per-object similarity transform shared by every trajectory of a dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import arrayio, coordxform, sprite_codec
from .errors import InexpressibleTruthError, OutOfFrameError
from .physics import ExactModel, rollout
from .sindy import CandidateLibrary

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SystemSpec:
    """Mass-normalized system definition (stiffness 1/s^2, damping 1/s)."""

    kind: str
    object_axes: tuple          # per object, tuple of moving axis names ("x", "y")
    stiffness: tuple            # K row-major [n_pos][n_pos], acceleration = K p + C v + cubic p^3
    damping: tuple              # diagonal C, per position state
    cubic: tuple                # cubic stiffness per position state
    forced: tuple               # per position state: velocity equation receives input

    def __post_init__(self):
        if not (1 <= self.n_objects <= 2):
            raise ValueError("supported object counts are 1 and 2")
        if any(len(a) not in (1, 2) for a in self.object_axes):
            raise ValueError("objects move along 1 or 2 axes")

    @property
    def n_objects(self) -> int:
        return len(self.object_axes)

    @property
    def n_pos(self) -> int:
        return sum(len(a) for a in self.object_axes)

    @property
    def state_dim(self) -> int:
        return 2 * self.n_pos

    @property
    def n_channels(self) -> int:
        return int(np.sum(self.forced))

    def state_names(self):
        if self.n_objects == 1 and self.n_pos == 1:
            pos = ["x"]
            vel = ["v"]
        elif self.n_objects == 1:
            pos = list(self.object_axes[0])
            vel = ["v" + a for a in pos]
        else:
            pos = [f"{ax}{k + 1}" for k, axes in enumerate(self.object_axes) for ax in axes]
            vel = [f"v{k + 1}" for k, axes in enumerate(self.object_axes) for _ in axes]
        return pos + vel

    def pos_slot(self, obj: int, axis: str):
        """Index of (object, axis) in the position-state vector, or None."""
        slot = 0
        for k, axes in enumerate(self.object_axes):
            for a in axes:
                if k == obj and a == axis:
                    return slot
                slot += 1
        return None

    def input_rows(self) -> np.ndarray:
        """Per state equation: does it receive forcing (velocity rows only)."""
        return np.concatenate([np.zeros(self.n_pos, dtype=bool), np.asarray(self.forced, dtype=bool)])

    def expand_channels(self, g_channels: np.ndarray) -> np.ndarray:
        """Map input channel columns [m, n_channels] to acceleration slots [m, n_pos]."""
        g_channels = np.atleast_2d(np.asarray(g_channels, dtype=float))
        out = np.zeros((g_channels.shape[0], self.n_pos))
        out[:, np.asarray(self.forced, dtype=bool)] = g_channels
        return out

    def f(self, state: np.ndarray, g_pos: np.ndarray = None) -> np.ndarray:
        """State-space right-hand side; g_pos is forcing per position state."""
        state = np.asarray(state, dtype=float)
        P = self.n_pos
        p, v = state[..., :P], state[..., P:]
        K = np.asarray(self.stiffness, dtype=float).reshape(P, P)
        acc = p @ K.T + np.asarray(self.damping) * v + np.asarray(self.cubic) * p ** 3
        if g_pos is not None:
            acc = acc + g_pos
        return np.concatenate([v, acc], axis=-1)

    def true_coefficients(self, lib: CandidateLibrary) -> np.ndarray:
        """Generating equation expressed over the candidate library."""
        P = self.n_pos
        if lib.n_states != self.state_dim:
            raise InexpressibleTruthError(f"library has {lib.n_states} states, system {self.state_dim}")
        xi = np.zeros((lib.n_terms, self.state_dim))

        def unit(idx):
            e = [0] * self.state_dim
            e[idx] = 1
            return tuple(e)

        try:
            for j in range(P):
                xi[lib.index_of(unit(P + j)), j] = 1.0  # dq/dt = v
            K = np.asarray(self.stiffness, dtype=float).reshape(P, P)
            for j in range(P):
                col = P + j
                for l in range(P):
                    if K[j, l] != 0.0:
                        xi[lib.index_of(unit(l)), col] += K[j, l]
                if self.damping[j] != 0.0:
                    xi[lib.index_of(unit(P + j)), col] += self.damping[j]
                if self.cubic[j] != 0.0:
                    e = [0] * self.state_dim
                    e[j] = 3
                    xi[lib.index_of(tuple(e)), col] += self.cubic[j]
        except ValueError as exc:
            raise InexpressibleTruthError(str(exc)) from exc
        return xi

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"],
                   object_axes=tuple(tuple(a) for a in d["object_axes"]),
                   stiffness=tuple(d["stiffness"]),
                   damping=tuple(d["damping"]),
                   cubic=tuple(d["cubic"]),
                   forced=tuple(bool(b) for b in d["forced"]))


def smsd(k: float = 5.0, c: float = 0.5) -> SystemSpec:
    """Single mass, one horizontal degree of freedom: a = -k q - c v + g."""
    return SystemSpec("smsd", (("x",),), (-k,), (-c,), (0.0,), (True,))


def smtd(kx: float = 5.0, ky: float = 9.0) -> SystemSpec:
    """Single mass moving in the plane with independent axis springs."""
    return SystemSpec("smtd", (("x", "y"),), (-kx, 0.0, 0.0, -ky), (0.0, 0.0), (0.0, 0.0), (True, True))


def tmtd(k1: float = 5.0, kc: float = 2.0) -> SystemSpec:
    """Two coupled masses on one axis: a1 = -k1 x1 + kc (x2 - x1) + g1, a2 = -kc (x2 - x1) + g2."""
    return SystemSpec("tmtd", (("x",), ("x",)), (-k1 - kc, kc, kc, -kc), (0.0, 0.0), (0.0, 0.0), (True, True))


def duffing(k: float = 1.0, c: float = 0.2, beta: float = 5.0) -> SystemSpec:
    """Nonlinear spring: a = -k q - beta q^3 - c v + g."""
    return SystemSpec("duffing", (("x",),), (-k,), (-c,), (-beta,), (True,))


SYSTEMS = {"smsd": smsd, "smtd": smtd, "tmtd": tmtd, "duffing": duffing}


@dataclass
class InputSignal:
    """Forcing series shared by every trajectory of a dataset."""

    values: np.ndarray   # [m, n_channels], each column zero-mean
    dt: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)


@dataclass
class Trajectory:
    states: np.ndarray   # [m, d], positions then velocities
    dt: float
    ic: np.ndarray


def make_input(kind: str, params, m: int, dt: float, seed: int = 0, channels: int = 1) -> InputSignal:
    """Synthesize a forcing signal and zero its temporal mean.

    params: dict or list of per-channel dicts. sine takes amp/omega/phase,
    two_sine takes amp1/omega1/amp2/omega2/phase. Missing phases are drawn
    deterministically from the seed.
    """
    if m < 1:
        raise ValueError("need at least one sample")
    if isinstance(params, dict) or params is None:
        params = [dict(params or {}) for _ in range(channels)]
    channels = len(params)
    rng = np.random.default_rng(seed)
    t = np.arange(m) * dt
    cols = []
    for p in params:
        phase = p.get("phase", float(rng.uniform(0, 2 * np.pi)))
        if kind == "zero":
            col = np.zeros(m)
        elif kind == "sine":
            col = p.get("amp", 1.0) * np.sin(p.get("omega", 2 * np.pi * 0.5) * t + phase)
        elif kind == "two_sine":
            col = (p.get("amp1", 1.0) * np.sin(p.get("omega1", 2 * np.pi * 0.3) * t)
                   + p.get("amp2", 0.6) * np.sin(p.get("omega2", 2 * np.pi * 0.85) * t + phase))
        else:
            raise ValueError(f"unknown input kind {kind!r}")
        if kind != "zero":
            col = col - col.mean()
        cols.append(col)
    return InputSignal(np.stack(cols, axis=1), dt)


def simulate(spec: SystemSpec, ic, input_signal: InputSignal, dt: float, m: int) -> Trajectory:
    """Advance the exact dynamics by RK4 for m steps from the given initial state."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    ic = np.asarray(ic, dtype=float)
    if ic.shape != (spec.state_dim,):
        raise ValueError(f"initial condition must have {spec.state_dim} states, got {ic.shape}")
    if input_signal.values.shape[0] < m:
        raise ValueError(f"input signal has {input_signal.values.shape[0]} samples, need {m}")
    g_pos = spec.expand_channels(input_signal.values[:m])
    model = ExactModel(lambda x, g: spec.f(x, g))
    states = rollout(ic, g_pos, dt, m - 1, model)
    return Trajectory(states=states, dt=dt, ic=ic)


def add_noise(frame: np.ndarray, variance: float, seed) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian pixel noise and clamp to [0, 1]."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    frame = np.asarray(frame, dtype=float)
    if variance == 0:
        return frame.copy()
    rng = np.random.default_rng(seed)
    return np.clip(frame + rng.normal(0.0, np.sqrt(variance), frame.shape), 0.0, 1.0)


def render(positions, assets: sprite_codec.SceneAssets, transforms) -> np.ndarray:
    """Plot the objects at physical positions through their frame transforms.

    positions: [n_objects, 2] physical (x, y); static axes are zero by
    convention so they land on the transform's translation row/column.
    """
    H = assets.background.shape[0]
    w = assets.window
    coords = np.stack([coordxform.to_spatial(np.asarray(p, dtype=float), tf)
                       for p, tf in zip(positions, transforms)])
    corner = coords - (w - 1) / 2.0
    base = np.floor(corner)
    if np.any(base < 0) or np.any(base + w + 1 > H):
        raise OutOfFrameError(
            f"sprite window leaves the frame at spatial coords {coords.tolist()}; "
            "regenerate with a smaller motion scale"
        )
    return sprite_codec.decode(coords, assets)


@dataclass
class GenConfig:
    """Dataset generation knobs (defaults reproduce the desk-scale setup)."""

    H: int = 64
    sprite_size: int = 16
    dt: float = 0.02
    frames: int = 500
    n_traj: int = 3
    noise_variance: float = 0.0
    motion_span: float = 0.55        # fraction of H the largest motion covers
    margin: float = 2.0              # extra pixels between footprint and border
    write_float32: bool = True
    input_kind: str = "two_sine"
    input_params: tuple = None       # per-channel dicts; defaults per system
    ics: tuple = None                # per-trajectory initial states


# Default forcing and initial conditions per system kind, chosen so the pooled
# position mean over the default 3 trajectories stays near zero (keeps the
# constant library term inactive) and no sine sits on a resonance.
_DEFAULT_INPUTS = {
    "smsd": [{"amp1": 1.6, "omega1": 2 * np.pi * 0.31, "amp2": 0.9, "omega2": 2 * np.pi * 0.83, "phase": 0.9}],
    "smtd": [{"amp1": 1.7, "omega1": 2 * np.pi * 0.27, "amp2": 1.0, "omega2": 2 * np.pi * 0.81, "phase": 0.7},
             {"amp1": 2.2, "omega1": 2 * np.pi * 0.36, "amp2": 1.2, "omega2": 2 * np.pi * 0.93, "phase": 2.1}],
    "tmtd": [{"amp1": 1.5, "omega1": 2 * np.pi * 0.29, "amp2": 0.8, "omega2": 2 * np.pi * 0.77, "phase": 1.3},
             {"amp1": 1.1, "omega1": 2 * np.pi * 0.41, "amp2": 0.7, "omega2": 2 * np.pi * 0.69, "phase": 2.6}],
    "duffing": [{"amp1": 1.1, "omega1": 2 * np.pi * 0.23, "amp2": 0.6, "omega2": 2 * np.pi * 0.57, "phase": 0.4}],
}

# Initial conditions balanced so the pooled position mean over the default
# three trajectories vanishes for the default forcing; a nonzero pooled mean
# would surface as a spurious constant term during discovery.
_DEFAULT_ICS = {
    "smsd": [(1.705588, 1.771886), (0.205588, 2.171886), (1.055588, 0.871886)],
    "smtd": [(0.642338, -0.372818, 0.430331, 0.431136),
             (-0.857662, 0.727182, 0.830331, -0.068864),
             (-0.057662, 0.427182, -0.369669, -0.668864)],
    "tmtd": [(0.636427, -0.139615, -0.267982, 0.192269),
             (-0.663573, 0.760385, 0.032018, -0.307731),
             (-0.013573, 0.510385, -0.867982, 0.292269)],
    "duffing": [(1.03651, 0.050868), (-0.735641, 0.192735), (-0.004701, -0.792328)],
}


def _make_background(H: int, rng) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.uniform(0.0, 1.0, (H, H)), 3.0)
    lo, hi = field_.min(), field_.max()
    return 0.15 + 0.35 * (field_ - lo) / (hi - lo)


def _make_sprite(w: int, shape: str, rng):
    yy, xx = np.mgrid[0:w, 0:w] - (w - 1) / 2.0
    r = np.hypot(yy, xx)
    if shape == "disk":
        alpha = 1.0 / (1.0 + np.exp((r - 0.36 * w) / 0.7))
        intensity = np.clip(0.95 - 0.25 * (r / (0.5 * w)) ** 2, 0.0, 1.0)
    else:  # diamond
        d = np.abs(yy) + np.abs(xx)
        alpha = 1.0 / (1.0 + np.exp((d - 0.45 * w) / 0.7))
        intensity = np.clip(0.88 - 0.2 * (d / (0.7 * w)) ** 2 + 0.06 * np.sign(xx + 0.01), 0.0, 1.0)
    logits = np.log(np.clip(alpha, 1e-7, 1 - 1e-7) / (1 - np.clip(alpha, 1e-7, 1 - 1e-7)))
    return intensity, logits


def _fit_transforms(spec: SystemSpec, trajs, config: GenConfig):
    """Shared pixels-per-unit scale plus per-object anchors centering motion."""
    H, w = config.H, config.sprite_size
    half = (w - 1) / 2.0
    lo_center = half + config.margin
    hi_center = H - half - 2.0 - config.margin  # footprint needs floor(corner)+w+1 <= H
    band = hi_center - lo_center
    span_px = config.motion_span * H
    if span_px > band:
        raise OutOfFrameError(f"motion span {span_px:.1f}px exceeds usable band {band:.1f}px; "
                              "regenerate with a smaller motion scale")
    all_pos = np.concatenate([tr.states[:, :spec.n_pos] for tr in trajs], axis=0)
    ranges = all_pos.max(axis=0) - all_pos.min(axis=0)
    ppu = span_px / float(ranges.max())
    anchors_y = [H / 2.0] if spec.n_objects == 1 else [0.3125 * H, 0.6875 * H]
    transforms = []
    slot = 0
    for k, axes in enumerate(spec.object_axes):
        t = np.array([H / 2.0, anchors_y[k]])
        for a in axes:
            mid = 0.5 * (all_pos[:, slot].max() + all_pos[:, slot].min())
            axis_idx = 0 if a == "x" else 1
            t[axis_idx] = (H / 2.0 if axis_idx == 0 else anchors_y[k]) - ppu * mid
            slot += 1
        transforms.append(coordxform.FrameTransform(rho=float(np.log(1.0 / ppu)), t=t))
    return transforms


@dataclass
class DatasetManifest:
    """Everything needed to load, evaluate and regenerate one dataset."""

    schema_version: int
    spec: SystemSpec
    H: int
    sprite_size: int
    dt: float
    frames: int
    n_traj: int
    noise_variance: float
    seed: int
    state_names: list
    input_names: list
    transforms: list                 # generation FrameTransform per object
    asset_dir: str
    trajectories: list               # dicts: frames_dir, truth_csv, placement_csv, ic
    write_float32: bool
    base_dir: Path = field(default=None, repr=False)

    def to_json(self) -> str:
        d = {
            "schema_version": self.schema_version,
            "system": self.spec.to_dict(),
            "H": self.H,
            "sprite_size": self.sprite_size,
            "dt": self.dt,
            "frames": self.frames,
            "n_traj": self.n_traj,
            "noise_variance": self.noise_variance,
            "seed": self.seed,
            "state_names": self.state_names,
            "input_names": self.input_names,
            "transforms": [tf.to_dict() for tf in self.transforms],
            "asset_dir": self.asset_dir,
            "trajectories": self.trajectories,
            "write_float32": self.write_float32,
        }
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        return cls(
            schema_version=d["schema_version"],
            spec=SystemSpec.from_dict(d["system"]),
            H=d["H"], sprite_size=d["sprite_size"], dt=d["dt"], frames=d["frames"],
            n_traj=d["n_traj"], noise_variance=d["noise_variance"], seed=d["seed"],
            state_names=d["state_names"], input_names=d["input_names"],
            transforms=[coordxform.FrameTransform.from_dict(t) for t in d["transforms"]],
            asset_dir=d["asset_dir"], trajectories=d["trajectories"],
            write_float32=d["write_float32"], base_dir=path.parent,
        )

    def validate(self):
        missing = []
        base = self.base_dir
        for tr in self.trajectories:
            for key in ("truth_csv", "placement_csv"):
                if not (base / tr[key]).exists():
                    missing.append(tr[key])
            fdir = base / tr["frames_dir"]
            for j in range(self.frames):
                if not (fdir / f"f{j:04d}.png").exists():
                    missing.append(str(Path(tr["frames_dir"]) / f"f{j:04d}.png"))
                    break
        if not (base / self.asset_dir / "background.f32").exists():
            missing.append(self.asset_dir + "/background.f32")
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")

    def load_frames(self) -> np.ndarray:
        """All PNG frames as float64 in [0,1], shaped [n_traj, m, H, H]."""
        out = np.empty((self.n_traj, self.frames, self.H, self.H))
        for r, tr in enumerate(self.trajectories):
            fdir = self.base_dir / tr["frames_dir"]
            for j in range(self.frames):
                out[r, j] = np.asarray(Image.open(fdir / f"f{j:04d}.png"), dtype=float) / 255.0
        return out

    def load_truth(self):
        """Ground-truth states [n_traj, m, d] and inputs [m, n_channels]."""
        states = []
        g = None
        for tr in self.trajectories:
            data = np.genfromtxt(self.base_dir / tr["truth_csv"], delimiter=",", names=True)
            cols = [data[name] for name in self.state_names]
            states.append(np.stack(cols, axis=1))
            g = np.stack([data[name] for name in self.input_names], axis=1)
        return np.stack(states), g

    def load_placements(self):
        """Renderer placement inputs [n_traj, m, n_objects, 2]."""
        out = []
        for tr in self.trajectories:
            data = np.genfromtxt(self.base_dir / tr["placement_csv"], delimiter=",", names=True)
            per_obj = []
            for k in range(self.spec.n_objects):
                per_obj.append(np.stack([data[f"xs{k + 1}"], data[f"ys{k + 1}"]], axis=1))
            out.append(np.stack(per_obj, axis=1))
        return np.stack(out)


def _save_png(path, frame):
    img = Image.fromarray(np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L")
    img.save(path, optimize=False)


def generate_dataset(spec: SystemSpec, n_traj: int, config: GenConfig, seed: int, out_dir) -> DatasetManifest:
    """Simulate, render and write a complete dataset under out_dir.

    Deterministic: (spec, config, seed) fixes every emitted byte. All
    trajectories share one forcing signal and differ in initial conditions.
    """
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    background = _make_background(config.H, rng)
    shapes = ["disk", "diamond"]
    sprites, logits = [], []
    for k in range(spec.n_objects):
        s, l = _make_sprite(config.sprite_size, shapes[k % 2], rng)
        sprites.append(s)
        logits.append(l)
    assets = sprite_codec.SceneAssets(background, np.stack(sprites), np.stack(logits))

    params = config.input_params if config.input_params is not None else _DEFAULT_INPUTS[spec.kind]
    signal = make_input(config.input_kind, list(params), config.frames, config.dt, seed=seed,
                        channels=spec.n_channels)
    ics = config.ics if config.ics is not None else _DEFAULT_ICS[spec.kind]
    if len(ics) < n_traj:
        raise ValueError(f"{n_traj} trajectories requested but only {len(ics)} initial conditions")
    trajs = [simulate(spec, np.asarray(ic, dtype=float), signal, config.dt, config.frames)
             for ic in ics[:n_traj]]
    transforms = _fit_transforms(spec, trajs, config)

    assets.save(out_dir / "assets")
    state_names = spec.state_names()
    input_names = [f"g{i + 1}" for i in range(spec.n_channels)]
    traj_entries = []
    P = spec.n_pos
    for r, traj in enumerate(trajs):
        frames_dir = out_dir / "frames" / f"t{r:02d}"
        frames_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "truth").mkdir(exist_ok=True)
        placements = np.zeros((config.frames, spec.n_objects, 2))
        for j in range(config.frames):
            # per-object physical (x, y); static axes sit at 0
            pos = []
            for k, axes in enumerate(spec.object_axes):
                xy = np.zeros(2)
                for a in axes:
                    xy[0 if a == "x" else 1] = traj.states[j, spec.pos_slot(k, a)]
                pos.append(xy)
            coords = np.stack([coordxform.to_spatial(p, tf) for p, tf in zip(pos, transforms)])
            placements[j] = coords
            frame = render(pos, assets, transforms)
            if config.noise_variance > 0:
                frame = add_noise(frame, config.noise_variance, seed=(seed, 101, r, j))
            _save_png(frames_dir / f"f{j:04d}.png", frame)
            if config.write_float32:
                arrayio.write_f32_frame(frames_dir / f"f{j:04d}.f32", frame)

        t = np.arange(config.frames) * config.dt
        truth = np.column_stack([t, traj.states, signal.values])
        header = ",".join(["t"] + state_names + input_names)
        np.savetxt(out_dir / "truth" / f"t{r:02d}.csv", truth, delimiter=",",
                   header=header, comments="", fmt="%.17g")
        place_cols = [t]
        place_names = ["t"]
        for k in range(spec.n_objects):
            place_cols += [placements[:, k, 0], placements[:, k, 1]]
            place_names += [f"xs{k + 1}", f"ys{k + 1}"]
        np.savetxt(out_dir / "truth" / f"t{r:02d}_placement.csv", np.column_stack(place_cols),
                   delimiter=",", header=",".join(place_names), comments="", fmt="%.17g")
        traj_entries.append({
            "frames_dir": f"frames/t{r:02d}",
            "truth_csv": f"truth/t{r:02d}.csv",
            "placement_csv": f"truth/t{r:02d}_placement.csv",
            "ic": [float(v) for v in traj.ic],
        })

    manifest = DatasetManifest(
        schema_version=SCHEMA_VERSION, spec=spec, H=config.H, sprite_size=config.sprite_size,
        dt=config.dt, frames=config.frames, n_traj=n_traj,
        noise_variance=config.noise_variance, seed=seed, state_names=state_names,
        input_names=input_names, transforms=transforms, asset_dir="assets",
        trajectories=traj_entries, write_float32=config.write_float32, base_dir=out_dir,
    )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest
