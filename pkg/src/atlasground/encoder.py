"""Hashed n-gram featurizer and a small three-headed grounding network.

The network is ``tanh(X W1 + b1)`` followed by three linear heads: a 3D
grounding head squashed by tanh into (-1, 1)^3, organ logits, and a
retrieval embedding.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

MASK_TOKEN = "[mask]"
PARAM_ORDER = ("W1", "b1", "Wg", "bg", "Wc", "bc", "We", "be")
CHECKPOINT_MAGIC = b"ATLASGROUND-CKPT 1\n"


@dataclass(frozen=True)
class Featurizer:
    hash_dims: int = 2048
    ngram_orders: tuple[int, ...] = (1, 2)

    def __post_init__(self) -> None:
        if self.hash_dims < 1 or not self.ngram_orders or min(self.ngram_orders) < 1:
            raise ValueError("invalid featurizer configuration")

    def _bucket(self, order: int, gram: Sequence[str]) -> int:
        key = f"{order}\x1f" + "\x1f".join(gram)
        return zlib.crc32(key.encode("utf-8")) % self.hash_dims

    def counts(self, tokens: Sequence[str]) -> dict[int, float]:
        """Raw hashed n-gram counts before normalization."""
        out: dict[int, float] = {}
        for n in self.ngram_orders:
            for i in range(len(tokens) - n + 1):
                b = self._bucket(n, tokens[i : i + n])
                out[b] = out.get(b, 0.0) + 1.0
        return out

    def featurize(self, tokens: Sequence[str]) -> sp.csr_matrix:
        """L2-normalized hashed counts as a ``1 x hash_dims`` sparse row."""
        return self.featurize_many([tokens])

    def featurize_many(self, docs: Sequence[Sequence[str]]) -> sp.csr_matrix:
        indptr, indices, data = [0], [], []
        for tokens in docs:
            c = self.counts(tokens)
            keys = sorted(c)
            vals = np.array([c[k] for k in keys], dtype=np.float64)
            norm = np.sqrt(vals @ vals)
            if norm > 0:
                vals /= norm
            indices.extend(keys)
            data.extend(vals.tolist())
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
            shape=(len(docs), self.hash_dims),
        )


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2048
    hidden: int = 64
    n_classes: int = 1
    embed_dim: int = 3
    seed: int = 0


class GroundingModel:
    def __init__(self, config: ModelConfig, class_ids: Sequence[int] | None = None, featurizer: Featurizer | None = None):
        self.config = config
        self.class_ids = list(class_ids) if class_ids is not None else list(range(config.n_classes))
        if len(self.class_ids) != config.n_classes:
            raise ValueError("class_ids length must equal n_classes")
        self.featurizer = featurizer or Featurizer(hash_dims=config.input_dim)
        self.optimizer_state: dict | None = None
        if self.featurizer.hash_dims != config.input_dim:
            raise ValueError("featurizer width does not match input_dim")
        rng = np.random.default_rng(config.seed)
        F, H, K, D = config.input_dim, config.hidden, config.n_classes, config.embed_dim

        def unif(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.params: dict[str, np.ndarray] = {
            "W1": unif(F, (F, H)),
            "b1": np.zeros(H),
            "Wg": unif(H, (H, 3)),
            "bg": np.zeros(3),
            "Wc": unif(H, (H, K)),
            "bc": unif(H, (K,)),
            "We": unif(H, (H, D)),
            "be": unif(H, (D,)),
        }

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "GroundingModel":
        other = object.__new__(GroundingModel)
        other.config, other.class_ids, other.featurizer = self.config, list(self.class_ids), self.featurizer
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.optimizer_state = None
        return other

    def _check(self, X):
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise ValueError(f"feature width {X.shape[-1]} does not match model input_dim {self.config.input_dim}")

    def hidden(self, X):
        X = _as_2d(X)
        self._check(X)
        return X, np.tanh(X @ self.params["W1"] + self.params["b1"])

    def _backward_hidden(self, X, H, dH, grads):
        dZ = dH * (1.0 - H * H)
        grads["W1"] = np.asarray(X.T @ dZ)
        grads["b1"] = dZ.sum(axis=0)
        return grads

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # grounding head
    def forward_ground(self, X):
        X, H = self.hidden(X)
        P = np.tanh(H @ self.params["Wg"] + self.params["bg"])
        return P, (X, H, P)

    def backward_ground(self, cache, dP) -> dict[str, np.ndarray]:
        X, H, P = cache
        dU = np.asarray(dP) * (1.0 - P * P)
        grads = self.zero_grads()
        grads["Wg"] = H.T @ dU
        grads["bg"] = dU.sum(axis=0)
        return self._backward_hidden(X, H, dU @ self.params["Wg"].T, grads)

    # classification head
    def forward_classify(self, X):
        X, H = self.hidden(X)
        return H @ self.params["Wc"] + self.params["bc"], (X, H)

    def backward_classify(self, cache, dlogits) -> dict[str, np.ndarray]:
        X, H = cache
        grads = self.zero_grads()
        grads["Wc"] = H.T @ dlogits
        grads["bc"] = dlogits.sum(axis=0)
        return self._backward_hidden(X, H, dlogits @ self.params["Wc"].T, grads)

    # embedding head
    def forward_embed(self, X):
        X, H = self.hidden(X)
        return H @ self.params["We"] + self.params["be"], (X, H)

    def backward_embed(self, cache, dE) -> dict[str, np.ndarray]:
        X, H = cache
        grads = self.zero_grads()
        grads["We"] = H.T @ dE
        grads["be"] = dE.sum(axis=0)
        return self._backward_hidden(X, H, dE @ self.params["We"].T, grads)

    # checkpoints
    def header(self) -> dict:
        return {
            "model": asdict(self.config),
            "class_ids": self.class_ids,
            "featurizer": {"hash_dims": self.featurizer.hash_dims, "ngram_orders": list(self.featurizer.ngram_orders)},
        }

    @classmethod
    def from_header(cls, header: dict, params: dict[str, np.ndarray]) -> "GroundingModel":
        fz = header["featurizer"]
        model = cls(
            ModelConfig(**header["model"]),
            header["class_ids"],
            Featurizer(int(fz["hash_dims"]), tuple(fz["ngram_orders"])),
        )
        for k in PARAM_ORDER:
            if params[k].shape != model.params[k].shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
            model.params[k] = params[k]
        return model


def _as_2d(X):
    if sp.issparse(X):
        return X.tocsr()
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def forward_ground(model: GroundingModel, features):
    return model.forward_ground(features)


def forward_classify(model: GroundingModel, features) -> np.ndarray:
    return model.forward_classify(features)[0]


def forward_embed(model: GroundingModel, features) -> np.ndarray:
    return model.forward_embed(features)[0]


def rescale_to_atlas(point_norm, dims) -> np.ndarray:
    """Map normalized coordinates in [-1, 1] to voxel coordinates [0, dim-1]."""
    p = np.asarray(point_norm, dtype=np.float64)
    if np.any(np.abs(p) > 1.0 + 1e-12) or not np.all(np.isfinite(p)):
        raise ValueError("normalized point outside [-1, 1]")
    span = np.asarray(dims, dtype=np.float64) - 1.0
    return (np.clip(p, -1.0, 1.0) + 1.0) * 0.5 * span


def normalize_from_atlas(voxel_point, dims) -> np.ndarray:
    """Inverse of :func:`rescale_to_atlas`; a 1-voxel axis maps to 0."""
    v = np.asarray(voxel_point, dtype=np.float64)
    span = np.asarray(dims, dtype=np.float64) - 1.0
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * v / safe - 1.0, 0.0)


# --- checkpoint files -------------------------------------------------------


def save_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a JSON header line followed by a little-endian float64 block."""
    names = list(arrays)
    header = dict(header, arrays=[[n, list(arrays[n].shape)] for n in names])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = blob[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    offset = nl + 1
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(rest, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        arrays[name] = arr
        offset += count * 8
    if offset != len(rest):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return header, arrays


def save_model(model: GroundingModel, path: str | Path) -> None:
    save_arrays(path, model.header(), {k: model.params[k] for k in PARAM_ORDER})


def load_model(path: str | Path) -> GroundingModel:
    header, arrays = load_arrays(path)
    return GroundingModel.from_header(header, arrays)
