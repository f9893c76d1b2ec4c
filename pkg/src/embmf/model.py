"""Model parameters, hyperparameters, rating prediction and the model file format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal

import numpy as np

ModelMode = Literal["emb_mf", "pmf_baseline"]

MAGIC = b"EMBMF\x00\x00\x00"
FORMAT_VERSION = 1
_BLOCKS = ("theta", "beta", "rho", "alpha", "b", "c")


@dataclass(frozen=True)
class Hyperparams:
    """Latent size, regularization weights and optimizer controls.

    ``lam`` weights the PPMI reconstruction term; the ``lambda_*`` fields
    are the ridge weights of the corresponding parameter blocks, with
    ``lambda_beta`` pulling each rating-side item vector toward its click
    embedding.  ``decoupled`` is a diagnostic switch that permits
    ``lambda_beta = 0`` (rating and click halves then train independently).
    """

    d: int = 20
    lam: float = 1.0
    lambda_theta: float = 1.0
    lambda_beta: float = 20.0
    lambda_rho: float = 0.1
    lambda_alpha: float = 0.1
    lambda_b: float = 1.0
    lambda_c: float = 1.0
    max_sweeps: int = 50
    rel_tol: float = 1e-4
    init_scale: float = 0.1
    seed: int = 0
    mode: ModelMode = "emb_mf"
    decoupled: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        for name in ("lam", "lambda_theta", "lambda_beta", "lambda_rho",
                     "lambda_alpha", "lambda_b", "lambda_c"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.mode not in ("emb_mf", "pmf_baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "emb_mf" and self.lambda_beta <= 0 and not self.decoupled:
            raise ValueError("lambda_beta must be > 0 in emb_mf mode (set decoupled=True for diagnostics)")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    def replace(self, **changes) -> "Hyperparams":
        return type(self)(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        return cls(**obj)


@dataclass
class ModelParams:
    theta: np.ndarray  # N x d user vectors
    beta: np.ndarray   # M x d rating-side item vectors
    rho: np.ndarray    # M x d item embeddings
    alpha: np.ndarray  # M x d item context vectors
    b: np.ndarray      # N user biases
    c: np.ndarray      # M item biases
    mu: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return self.theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.beta.shape[0]

    @property
    def d(self) -> int:
        return self.theta.shape[1]

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _BLOCKS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()}, mu=self.mu, meta=dict(self.meta))

    def check_finite(self) -> None:
        from .trainer import NumericalError

        for name, arr in self.blocks().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in parameter block {name!r}")
        if not np.isfinite(self.mu):
            raise NumericalError("non-finite global mean")


def init_params(n_users: int, n_items: int, hyper: Hyperparams) -> ModelParams:
    """Gaussian latent vectors (std ``init_scale``), zero biases, ``mu = 0``.

    Draw order is theta, beta, rho, alpha from one generator seeded with
    ``hyper.seed``.  In ``pmf_baseline`` mode rho and alpha are zero.
    """
    if n_users < 0 or n_items < 0:
        raise ValueError("counts must be >= 0")
    rng = np.random.default_rng(hyper.seed)
    d, s = hyper.d, hyper.init_scale
    theta = rng.normal(0.0, 1.0, (n_users, d)) * s
    beta = rng.normal(0.0, 1.0, (n_items, d)) * s
    rho = rng.normal(0.0, 1.0, (n_items, d)) * s
    alpha = rng.normal(0.0, 1.0, (n_items, d)) * s
    if hyper.mode == "pmf_baseline":
        rho[:] = 0.0
        alpha[:] = 0.0
    return ModelParams(theta, beta, rho, alpha, np.zeros(n_users), np.zeros(n_items), 0.0)


def predict(params: ModelParams, u: int | None, i: int | None) -> float:
    """``mu + b_u + c_i + theta_u . beta_i``; absent or unknown indices contribute zero."""
    known_u = u is not None and 0 <= u < params.n_users
    known_i = i is not None and 0 <= i < params.n_items
    r = params.mu
    if known_u:
        r += params.b[u]
    if known_i:
        r += params.c[i]
    if known_u and known_i:
        r += float(params.theta[u] @ params.beta[i])
    return float(r)


def predict_many(params: ModelParams, users, items) -> np.ndarray:
    """Vectorized :func:`predict`; negative or out-of-range indices count as absent."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ku = (users >= 0) & (users < params.n_users)
    ki = (items >= 0) & (items < params.n_items)
    uu = np.where(ku, users, 0)
    ii = np.where(ki, items, 0)
    out = np.full(len(users), params.mu, dtype=np.float64)
    if params.n_users:
        out += np.where(ku, params.b[uu], 0.0)
    if params.n_items:
        out += np.where(ki, params.c[ii], 0.0)
    if params.n_users and params.n_items:
        dots = np.einsum("ij,ij->i", params.theta[uu], params.beta[ii])
        out += np.where(ku & ki, dots, 0.0)
    return out


# ---------------------------------------------------------------------------
# Model file: 8-byte magic, little-endian u64 header length, JSON header,
# then theta, beta, rho, alpha, b, c as row-major little-endian float64.

class ModelFileError(Exception):
    pass


class CorruptModelError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class DimensionMismatchError(ModelFileError):
    pass


def save_model(params: ModelParams, hyper: Hyperparams, path, id_maps: str | None = None,
               training: dict | None = None) -> None:
    header = {
        "magic": "EMBMF",
        "version": FORMAT_VERSION,
        "mode": hyper.mode,
        "d": params.d,
        "n_users": params.n_users,
        "n_items": params.n_items,
        "mu": params.mu,
        "id_maps": id_maps,
        "hyper": hyper.to_dict(),
        "training": training if training is not None else params.meta.get("training", {}),
        "shapes": {k: list(v.shape) for k, v in params.blocks().items()},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for name in _BLOCKS:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def read_model_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, Path(path))


def _read_header(f, path: Path) -> dict:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CorruptModelError(f"corrupt model file {path}: bad magic")
    size = f.read(8)
    if len(size) != 8:
        raise CorruptModelError(f"corrupt model file {path}: truncated header")
    (n,) = struct.unpack("<Q", size)
    raw = f.read(n)
    if len(raw) != n:
        raise CorruptModelError(f"corrupt model file {path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptModelError(f"corrupt model file {path}: unreadable header ({e})") from None
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"model file {path} has format version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    return header


def load_model(path) -> tuple[ModelParams, Hyperparams]:
    path = Path(path)
    with open(path, "rb") as f:
        header = _read_header(f, path)
        d, N, M = header["d"], header["n_users"], header["n_items"]
        expected = {"theta": [N, d], "beta": [M, d], "rho": [M, d], "alpha": [M, d], "b": [N], "c": [M]}
        shapes = header.get("shapes", {})
        for name in _BLOCKS:
            if shapes.get(name) != expected[name]:
                raise DimensionMismatchError(
                    f"model file {path}: block {name} has shape {shapes.get(name)}, header implies {expected[name]}"
                )
        arrays = {}
        for name in _BLOCKS:
            shape = tuple(expected[name])
            nbytes = 8 * int(np.prod(shape))
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise CorruptModelError(f"corrupt model file {path}: truncated block {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise CorruptModelError(f"corrupt model file {path}: trailing bytes")
    hyper = Hyperparams.from_dict(header["hyper"])
    if hyper.d != d:
        raise DimensionMismatchError(f"model file {path}: hyperparameter d={hyper.d} but matrices have d={d}")
    params = ModelParams(**arrays, mu=float(header["mu"]),
                         meta={"training": header.get("training", {}), "id_maps": header.get("id_maps")})
    return params, hyper
