"""Synthetic sequence worlds with exactly known static and dynamic factors.

Each sequence draws static factors ``s = eps_s ~ N(0, I)`` and a masked random
walk for the dynamic factors::

    d_1 = sigma(s) * eps_d[1]
    d_t = clamp(d_{t-1} + A_t * sigma(s) * eps_d[t])      t >= 2

where ``A_t`` has i.i.d. Bernoulli(mask_rate) entries. Frames are
``x_t = g(concat(s, d_t))`` with ``g`` a stack of blocks ``u -> v + tanh(v)``,
``v = Q u`` for orthogonal ``Q``, which is exactly invertible.

Coupling modes:

* ``independent``: ``sigma(s) = 0.3``;
* ``causal_scale``: ``sigma_i(s) = 0.3 * softplus(w_i . s + b_i)``;
* ``causal_bounce``: as ``causal_scale`` plus reflection into ``[-2, 2]``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

FORMAT_VERSION = 1
COUPLING_MODES = ("independent", "causal_scale", "causal_bounce")
BASE_SCALE = 0.3
BOUNCE_LIMIT = 2.0


class WorldSpecError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid world spec: " + "; ".join(problems))


class DatasetFormatError(ValueError):
    """Raised for corrupt, inconsistent or incompatible dataset containers."""


class InverseNotConverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    n_s: int = 2
    n_d: int = 2
    T: int = 8
    N: int = 5000
    coupling_mode: str = "independent"
    mask_rate: float = 0.75
    mixing_depth: int = 3
    observation_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_s < 1:
            problems.append("n_s must be >= 1")
        if self.n_d < 1:
            problems.append("n_d must be >= 1")
        if self.T < 2:
            problems.append("T must be >= 2")
        if self.N < 1:
            problems.append("N must be >= 1")
        if self.coupling_mode not in COUPLING_MODES:
            problems.append(f"coupling_mode must be one of {COUPLING_MODES}")
        if not 0.0 < self.mask_rate <= 1.0:
            problems.append("mask_rate must lie in (0, 1]")
        if self.mixing_depth < 0:
            problems.append("mixing_depth must be >= 0")
        if self.observation_noise_std < 0:
            problems.append("observation_noise_std must be >= 0")
        if problems:
            raise WorldSpecError(problems)

    @property
    def k(self) -> int:
        return self.n_s + self.n_d

    @property
    def n(self) -> int:
        return self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MixingMap:
    """Composition of blocks ``u -> v + tanh(v)``, ``v = Q u``."""

    Q: list[np.ndarray]
    elementwise: bool = True  # test hook: False leaves only the rotations

    @property
    def k(self) -> int:
        return self.Q[0].shape[0] if self.Q else 0


@dataclass
class GroundTruthRecord:
    eps_s: np.ndarray
    s: np.ndarray
    eps_d: np.ndarray
    d: np.ndarray
    masks: np.ndarray  # (T-1, n_d), masks[t-2] is A_t


@dataclass
class World:
    spec: WorldSpec
    mixing: MixingMap
    w: np.ndarray  # (n_d, n_s) coupling weights; unused in independent mode
    b: np.ndarray

    def sigma(self, s: np.ndarray) -> np.ndarray:
        return dynamic_scale(self.spec, s, self.w, self.b)

    def mix(self, s, d):
        return mix(self.mixing, s, d)

    def unmix(self, x):
        return unmix(self.mixing, x, self.spec.n_s)


@dataclass
class SequenceDataset:
    x: np.ndarray  # (N, T, n)
    s: np.ndarray | None = None  # (N, n_s)
    eps_d: np.ndarray | None = None  # (N, T, n_d)
    d: np.ndarray | None = None  # (N, T, n_d)
    masks: np.ndarray | None = None  # (N, T-1, n_d) uint8
    noise: np.ndarray | None = None  # (N, T, n), only when observation noise is on
    spec: WorldSpec | None = None
    fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def n(self) -> int:
        return self.x.shape[2]

    @property
    def has_truth(self) -> bool:
        return self.s is not None

    def record(self, i: int) -> GroundTruthRecord:
        if not self.has_truth:
            raise LookupError("dataset carries no ground truth")
        return GroundTruthRecord(self.s[i].copy(), self.s[i].copy(), self.eps_d[i], self.d[i],
                                 self.masks[i].astype(bool))

    def subset(self, idx) -> "SequenceDataset":
        pick = lambda a: None if a is None else a[idx]
        return SequenceDataset(self.x[idx], pick(self.s), pick(self.eps_d), pick(self.d),
                               pick(self.masks), pick(self.noise), self.spec, self.fingerprint)


# -- world construction ------------------------------------------------------

def _haar_orthogonal(rng: np.random.Generator, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    return q * np.sign(np.diag(r))


def make_mixing_map(k: int, depth: int, rng: np.random.Generator) -> MixingMap:
    return MixingMap([_haar_orthogonal(rng, k) for _ in range(depth)])


def make_world(spec: WorldSpec) -> World:
    mixing = make_mixing_map(spec.k, spec.mixing_depth, stream(spec.seed, "mixing"))
    rng = stream(spec.seed, "coupling")
    w = rng.standard_normal((spec.n_d, spec.n_s))
    b = rng.uniform(-0.5, 0.5, spec.n_d)
    return World(spec, mixing, w, b)


# -- dynamics ----------------------------------------------------------------

def dynamic_scale(spec: WorldSpec, s: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-component increment scale ``sigma(s)``, shape ``s.shape[:-1] + (n_d,)``."""
    s = np.asarray(s, dtype=np.float64)
    if spec.coupling_mode == "independent":
        return np.full(s.shape[:-1] + (spec.n_d,), BASE_SCALE)
    return BASE_SCALE * np.logaddexp(0.0, s @ w.T + b)


def reflect(d: np.ndarray, limit: float = BOUNCE_LIMIT) -> np.ndarray:
    """Fold values into ``[-limit, limit]`` by mirror reflection at the edges."""
    period = 4.0 * limit
    y = np.mod(d + limit, period)
    y = np.where(y > 2.0 * limit, period - y, y)
    return y - limit


def transition(spec: WorldSpec, s, eps_d, masks, w, b) -> np.ndarray:
    """Dynamic factors ``d[1..T]`` from exogenous noise and varying-component masks.

    Works on a single sequence (``eps_d`` of shape ``(T, n_d)``) or a batch
    (leading axis N). ``masks`` has ``T-1`` rows, one per step ``t = 2..T``.
    """
    eps_d = np.asarray(eps_d, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    sigma = dynamic_scale(spec, s, w, b)
    bounce = spec.coupling_mode == "causal_bounce"
    d = np.empty_like(eps_d)
    cur = sigma * eps_d[..., 0, :]
    if bounce:
        cur = reflect(cur)
    d[..., 0, :] = cur
    for t in range(1, eps_d.shape[-2]):
        m = masks[..., t - 1, :]
        step = cur + sigma * eps_d[..., t, :]
        if bounce:
            step = reflect(step)
        # components outside A_t are carried over bit-exactly
        cur = np.where(m, step, cur)
        d[..., t, :] = cur
    return d


def _draw_exogenous(spec: WorldSpec, rng: np.random.Generator):
    eps_s = rng.standard_normal(spec.n_s)
    eps_d = rng.standard_normal((spec.T, spec.n_d))
    masks = rng.random((spec.T - 1, spec.n_d)) < spec.mask_rate
    while spec.T == 2 and not masks.any():
        masks = rng.random((1, spec.n_d)) < spec.mask_rate
    return eps_s, eps_d, masks


def sample_ground_truth(spec: WorldSpec, rng: np.random.Generator, world: World | None = None) -> GroundTruthRecord:
    world = world or make_world(spec)
    eps_s, eps_d, masks = _draw_exogenous(spec, rng)
    s = eps_s.copy()
    d = transition(spec, s, eps_d, masks, world.w, world.b)
    return GroundTruthRecord(eps_s, s, eps_d, d, masks)


# -- mixing ------------------------------------------------------------------

def _check_k(mixing: MixingMap, k: int) -> None:
    if mixing.Q and mixing.k != k:
        raise ValueError(f"mixing map acts on dimension {mixing.k}, got {k}")


def mix(mixing: MixingMap, s, d) -> np.ndarray:
    """``x = (B_L o ... o B_1)(concat(s, d))``; broadcasts over leading axes."""
    s, d = np.asarray(s, dtype=np.float64), np.asarray(d, dtype=np.float64)
    if s.shape[:-1] != d.shape[:-1]:
        s = np.broadcast_to(s, d.shape[:-1] + s.shape[-1:])
    u = np.concatenate([s, d], axis=-1)
    _check_k(mixing, u.shape[-1])
    for Q in mixing.Q:
        v = u @ Q.T
        u = v + np.tanh(v) if mixing.elementwise else v
    return u


def invert_elementwise(y: np.ndarray, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Solve ``v + tanh(v) = y`` elementwise by safeguarded Newton iteration."""
    y = np.asarray(y, dtype=np.float64)
    lo, hi = y - 1.0, y + 1.0  # |tanh| < 1 brackets the root
    v = 0.5 * y
    for _ in range(max_iter):
        f = v + np.tanh(v) - y
        lo = np.where(f < 0, v, lo)
        hi = np.where(f > 0, v, hi)
        newton = v - f / (2.0 - np.tanh(v) ** 2)
        bad = (newton <= lo) | (newton >= hi)
        nxt = np.where(bad, 0.5 * (lo + hi), newton)
        if np.max(np.abs(nxt - v), initial=0.0) < tol:
            return nxt
        v = nxt
    raise InverseNotConverged(f"elementwise inverse did not converge in {max_iter} steps")


def unmix(mixing: MixingMap, x, n_s: int):
    """Exact inverse of :func:`mix`; returns ``(s, d)`` split after ``n_s`` coordinates."""
    u = np.asarray(x, dtype=np.float64)
    _check_k(mixing, u.shape[-1])
    for Q in reversed(mixing.Q):
        v = invert_elementwise(u) if mixing.elementwise else u
        u = v @ Q
    return u[..., :n_s], u[..., n_s:]


# -- datasets ----------------------------------------------------------------

def generate_dataset(spec: WorldSpec, with_truth: bool = True) -> SequenceDataset:
    """Deterministic in ``spec.seed``; sequence ``i`` uses its own random stream."""
    world = make_world(spec)
    N, T = spec.N, spec.T
    eps_s = np.empty((N, spec.n_s))
    eps_d = np.empty((N, T, spec.n_d))
    masks = np.empty((N, T - 1, spec.n_d), dtype=bool)
    for i in range(N):
        eps_s[i], eps_d[i], masks[i] = _draw_exogenous(spec, stream(spec.seed, "sequence", i))
    s = eps_s
    d = transition(spec, s, eps_d, masks, world.w, world.b)
    x = mix(world.mixing, s[:, None, :], d)
    noise = None
    if spec.observation_noise_std > 0:
        noise = spec.observation_noise_std * stream(spec.seed, "observation").standard_normal(x.shape)
        x = x + noise
    ds = SequenceDataset(x, spec=spec, fingerprint=spec.fingerprint())
    if with_truth:
        ds.s, ds.eps_d, ds.d, ds.masks, ds.noise = s, eps_d, d, masks.astype(np.uint8), noise
    return ds


_SECTIONS = {"x": "f64", "s": "f64", "eps_d": "f64", "d": "f64", "masks": "u8", "noise": "f64"}
_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def write_dataset(ds: SequenceDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes, files, sums, dtypes = {}, {}, {}, {}
    for name, kind in _SECTIONS.items():
        arr = getattr(ds, name)
        if arr is None:
            continue
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        fname = f"{name}.{kind}"
        (path / fname).write_bytes(payload)
        shapes[name], files[name], sums[name], dtypes[name] = list(arr.shape), fname, _sha256(payload), kind
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": ds.spec.to_dict() if ds.spec else None,
        "fingerprint": ds.fingerprint,
        "dtype": "f64le",
        "section_dtypes": dtypes,
        "shapes": shapes,
        "sections": files,
        "checksums": sums,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_dataset(path) -> SequenceDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetFormatError(f"no manifest.json in {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"corrupt manifest in {path}: {exc}") from None
    required = ("format_version", "shapes", "sections", "checksums", "section_dtypes")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DatasetFormatError(f"manifest missing fields: {missing}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format_version {manifest['format_version']}")
    if "x" not in manifest["sections"]:
        raise DatasetFormatError("manifest declares no 'x' section")
    arrays = {}
    for name, fname in manifest["sections"].items():
        if name not in _SECTIONS:
            raise DatasetFormatError(f"unknown section {name!r}")
        dt = _DTYPES[manifest["section_dtypes"][name]]
        shape = tuple(manifest["shapes"][name])
        payload = (path / fname).read_bytes()
        if len(payload) != int(np.prod(shape)) * dt.itemsize:
            raise DatasetFormatError(
                f"section {name}: payload has {len(payload)} bytes, manifest shape {shape} needs "
                f"{int(np.prod(shape)) * dt.itemsize}")
        if _sha256(payload) != manifest["checksums"][name]:
            raise DatasetFormatError(f"section {name}: checksum mismatch")
        arrays[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(
            np.float64 if dt.kind == "f" else np.uint8)
    spec = WorldSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    ds = SequenceDataset(spec=spec, fingerprint=manifest.get("fingerprint"), **arrays)
    N = ds.x.shape[0]
    for name, arr in arrays.items():
        if arr.shape[0] != N:
            raise DatasetFormatError(f"section {name}: {arr.shape[0]} sequences, x has {N}")
    if spec is not None and ds.fingerprint != spec.fingerprint():
        raise DatasetFormatError("fingerprint does not match the embedded world spec")
    return ds
