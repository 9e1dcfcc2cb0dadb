"""Optimizer, target construction and the training driver."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .atlas import Atlas, sample_organ_points
from .corpus import Document, find_term_occurrences
from .encoder import MASK_TOKEN, Featurizer, GroundingModel, ModelConfig, load_arrays, normalize_from_atlas, rescale_to_atlas, save_arrays, save_model
from .losses import SodConfig, SodTargets, batch_hard_triplets, log_softmax, sod_batch_loss_and_grad
from .metrics import grounding_arrays, leave_one_out_recall

log = logging.getLogger(__name__)

MODES = ("supervised", "self_supervised", "self_supervised_masked")
OBJECTIVES = ("sod", "mse", "classifier", "triplet")

# sub-stream tags for np.random.default_rng([seed, tag, ...])
_SHUFFLE, _SAMPLE, _MASK, _INIT = 1, 2, 3, 4


class TrainingError(ValueError):
    pass


class NoTermOccurrence(TrainingError):
    """A self-supervised document mentions no glossary term."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-2
    clip_norm: float = 2.0
    epochs: int = 10
    batch_size: int = 32
    sod: SodConfig = field(default_factory=SodConfig)
    seed: int = 0
    mode: str = "supervised"
    objective: str = "sod"
    hidden: int = 64
    hash_dims: int = 2048
    embed_dim: int = 3
    margin: float = 1.0
    mask_prob: float = 0.5

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0 or not self.weight_decay >= 0 or not self.clip_norm > 0:
            raise TrainingError("learning_rate and weight_decay must be >= 0 and clip_norm > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}")
        if self.objective not in OBJECTIVES:
            raise TrainingError(f"unknown objective {self.objective!r}")
        if self.objective == "triplet" and self.mode != "supervised":
            raise TrainingError("the triplet objective needs annotation sets (supervised mode)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "sod" in d and isinstance(d["sod"], dict):
            d["sod"] = SodConfig(**d["sod"])
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        merged = self.to_dict()
        sod = dict(merged["sod"])
        sod.update(overrides.get("sod", {}))
        merged.update({k: v for k, v in overrides.items() if k != "sod"})
        merged["sod"] = sod
        return TrainConfig.from_dict(merged)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    val_metric_name: str = "IOR"
    selected_epoch: int = -1

    def to_tsv(self) -> str:
        lines = [f"epoch\ttrain_loss\t{self.val_metric_name}\tselected"]
        for e, (l, v) in enumerate(zip(self.train_loss, self.val_metric)):
            lines.append(f"{e}\t{l:.17g}\t{v:.17g}\t{int(e == self.selected_epoch)}")
        return "\n".join(lines) + "\n"


# --- optimizer --------------------------------------------------------------


def adamw_init(params: dict[str, np.ndarray]) -> dict:
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in params.items()}, "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adamw_step(params, grads, state, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update with bias correction.

    Weight decay is decoupled and scaled by the learning rate; it shrinks the
    pre-step parameter value.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    state["t"] += 1
    t = state["t"]
    bc1, bc2 = 1.0 - beta1**t, 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {g.shape} vs {p.shape}")
        m, v = state["m"][k], state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if wd:
            step = step + lr * wd * p
        p -= step
    return params, state


def global_norm(grads) -> float:
    arrs = grads.values() if isinstance(grads, dict) else grads
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in arrs)))


def clip_global_norm(grads, max_norm: float):
    """Rescale all gradients jointly when their global L2 norm exceeds ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    # multiply before dividing so that e.g. (3, 4) clipped to 2 gives exactly (1.2, 1.6)
    if isinstance(grads, dict):
        return {k: g * max_norm / norm for k, g in grads.items()}
    return [np.asarray(g) * max_norm / norm for g in grads]


def save_optimizer_state(state: dict, path: str | Path) -> None:
    arrays = {f"m/{k}": v for k, v in state["m"].items()}
    arrays.update({f"v/{k}": v for k, v in state["v"].items()})
    save_arrays(path, {"t": state["t"]}, arrays)


def load_optimizer_state(path: str | Path) -> dict:
    header, arrays = load_arrays(path)
    state = {"t": int(header["t"]), "m": {}, "v": {}}
    for name, arr in arrays.items():
        kind, key = name.split("/", 1)
        state[kind][key] = arr
    return state


# --- targets ----------------------------------------------------------------


@dataclass(frozen=True)
class TargetExample:
    tokens: tuple[str, ...]
    organ_ids: frozenset[int]
    sod_targets: SodTargets | None = None


def mask_occurrences(tokens: Sequence[str], spans, rng: np.random.Generator, prob: float) -> tuple[str, ...]:
    """Replace each matched span by a single mask token with probability ``prob``."""
    out, last = [], 0
    for _, (s, e) in spans:
        out.extend(tokens[last:s])
        out.extend([MASK_TOKEN] if rng.random() < prob else tokens[s:e])
        last = e
    out.extend(tokens[last:])
    return tuple(out)


def sample_sod_targets(organ_ids, atlas: Atlas, n_points: int, rng: np.random.Generator) -> SodTargets:
    """N voxel samples per organ, converted to normalized [-1, 1] coordinates."""
    return SodTargets(
        [normalize_from_atlas(sample_organ_points(atlas.organ(o), n_points, rng), atlas.dims) for o in sorted(organ_ids)]
    )


def build_targets(doc: Document, atlas: Atlas, mode: str, rng: np.random.Generator, n_points: int | None = 100, mask_prob: float = 0.5) -> TargetExample:
    """Input tokens and target organs for one training example.

    ``n_points=None`` skips point sampling (classifier/triplet objectives).
    """
    tokens = doc.tokens
    if mode == "supervised":
        if not doc.annotations:
            raise TrainingError(f"document {doc.id} has no annotations")
        ids = frozenset(doc.annotations)
    elif mode in ("self_supervised", "self_supervised_masked"):
        spans = find_term_occurrences(tokens, atlas.registry)
        if not spans:
            raise NoTermOccurrence(f"document {doc.id} mentions no organ term")
        ids = frozenset(o for o, _ in spans)
        if mode == "self_supervised_masked":
            tokens = mask_occurrences(tokens, spans, rng, mask_prob)
    else:
        raise TrainingError(f"unknown mode {mode!r}")
    sod = sample_sod_targets(ids, atlas, n_points, rng) if n_points else None
    return TargetExample(tuple(tokens), ids, sod)


# --- prediction -------------------------------------------------------------


def make_model(cfg: TrainConfig, atlas: Atlas) -> GroundingModel:
    ids = atlas.registry.ids
    mc = ModelConfig(input_dim=cfg.hash_dims, hidden=cfg.hidden, n_classes=len(ids), embed_dim=cfg.embed_dim, seed=cfg.seed)
    return GroundingModel(mc, ids, Featurizer(hash_dims=cfg.hash_dims))


def predict_points(model: GroundingModel, objective: str, X, atlas: Atlas) -> np.ndarray:
    """Voxel-space predictions; the classifier maps its argmax organ to its mean voxel."""
    if objective in ("sod", "mse"):
        P, _ = model.forward_ground(X)
        return rescale_to_atlas(P, atlas.dims)
    if objective == "classifier":
        logits, _ = model.forward_classify(X)
        best = np.argmax(logits, axis=1)
        means = np.stack([atlas.organ(o).mean_point() for o in model.class_ids])
        return means[best]
    raise TrainingError(f"objective {objective!r} does not produce atlas points")


def predict_embeddings(model: GroundingModel, X) -> np.ndarray:
    return model.forward_embed(X)[0]


# --- driver -----------------------------------------------------------------


def _validate(model, cfg: TrainConfig, Xv, val_docs, atlas) -> float:
    if cfg.objective == "triplet":
        E = predict_embeddings(model, Xv)
        return leave_one_out_recall(E, [d.annotations for d in val_docs], [1])[1].mean
    pts = predict_points(model, cfg.objective, Xv, atlas)
    sets = [d.annotations or frozenset(o for o, _ in find_term_occurrences(d.tokens, atlas.registry)) for d in val_docs]
    keep = [i for i, s in enumerate(sets) if s]
    hits, _ = grounding_arrays(pts[keep], [sets[i] for i in keep], atlas)
    return float(hits.mean())


def _batch_grads(model: GroundingModel, cfg: TrainConfig, X, examples: list[TargetExample], atlas: Atlas):
    B = len(examples)
    if cfg.objective == "sod":
        P, cache = model.forward_ground(X)
        loss, dP = sod_batch_loss_and_grad(P, [e.sod_targets for e in examples], cfg.sod)
        return float(loss.mean()), model.backward_ground(cache, dP / B)
    if cfg.objective == "mse":
        P, cache = model.forward_ground(X)
        t = np.stack([e.sod_targets.points.reshape(-1, 3).mean(axis=0) for e in examples])
        r = P - t
        return float((r * r).sum(axis=1).mean()), model.backward_ground(cache, 2.0 * r / B)
    if cfg.objective == "classifier":
        logits, cache = model.forward_classify(X)
        col = {o: i for i, o in enumerate(model.class_ids)}
        q = np.zeros_like(logits)
        for i, e in enumerate(examples):
            cols = [col[o] for o in e.organ_ids]
            q[i, cols] = 1.0 / len(cols)
        ls = log_softmax(logits)
        loss = -(q * ls).sum(axis=1)
        return float(loss.mean()), model.backward_classify(cache, (np.exp(ls) - q) / B)
    # triplet
    E, cache = model.forward_embed(X)
    triplets = batch_hard_triplets(E, [e.organ_ids for e in examples])
    dE = np.zeros_like(E)
    total = 0.0
    for a, p, n in triplets:
        dp, dn = np.linalg.norm(E[a] - E[p]), np.linalg.norm(E[a] - E[n])
        val = dp - dn + cfg.margin
        if val <= 0:
            continue
        total += val
        up = (E[a] - E[p]) / dp if dp > 0 else 0.0
        un = (E[a] - E[n]) / dn if dn > 0 else 0.0
        dE[a] += up - un
        dE[p] -= up
        dE[n] += un
    denom = max(len(triplets), 1)
    return total / denom, model.backward_embed(cache, dE / denom)


def train(
    model: GroundingModel | None,
    train_docs: Sequence[Document],
    val_docs: Sequence[Document],
    atlas: Atlas,
    cfg: TrainConfig,
) -> tuple[GroundingModel, TrainHistory]:
    """Train with AdamW and keep the epoch with the best validation score.

    The validation score is IOR for point-producing objectives and Recall@1
    on the validation split for the triplet objective. Ties keep the earliest
    epoch. All randomness comes from ``cfg.seed`` sub-streams keyed by
    (epoch, document index).
    """
    if not train_docs or not val_docs:
        raise TrainingError("train and validation splits must be nonempty")
    if model is None:
        model = make_model(cfg, atlas)
    missing = set().union(*(d.annotations for d in train_docs)) - set(model.class_ids)
    if missing:
        raise TrainingError(f"annotations {sorted(missing)} are not model classes")
    fz = model.featurizer
    needs_points = cfg.objective in ("sod", "mse")
    n_points = cfg.sod.n_points if needs_points else None

    usable = list(range(len(train_docs)))
    if cfg.mode != "supervised":
        usable = [i for i in usable if find_term_occurrences(train_docs[i].tokens, atlas.registry)]
        if not usable:
            raise TrainingError("no training document mentions an organ term")
    static_tokens = cfg.mode != "self_supervised_masked"
    X_static = fz.featurize_many([train_docs[i].tokens for i in usable]) if static_tokens else None
    row_of = {doc_idx: r for r, doc_idx in enumerate(usable)}
    Xv = fz.featurize_many([d.tokens for d in val_docs])

    state = adamw_init(model.params)
    history = TrainHistory(val_metric_name="R@1" if cfg.objective == "triplet" else "IOR")
    best_params, best_score = None, -np.inf
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(usable)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [int(i) for i in order[start : start + cfg.batch_size]]
            examples = [
                build_targets(train_docs[i], atlas, cfg.mode, np.random.default_rng([cfg.seed, _SAMPLE, epoch, i]), n_points, cfg.mask_prob)
                for i in batch
            ]
            if static_tokens:
                X = X_static[[row_of[i] for i in batch]]
            else:
                X = fz.featurize_many([e.tokens for e in examples])
            loss, grads = _batch_grads(model, cfg, X, examples, atlas)
            losses.append((loss, len(batch)))
            grads = clip_global_norm(grads, cfg.clip_norm)
            adamw_step(model.params, grads, state, cfg.learning_rate, cfg.weight_decay)
        history.train_loss.append(sum(l * n for l, n in losses) / sum(n for _, n in losses))
        score = _validate(model, cfg, Xv, val_docs, atlas)
        history.val_metric.append(score)
        if score > best_score:
            best_score, best_params = score, {k: v.copy() for k, v in model.params.items()}
            history.selected_epoch = epoch
        log.debug("epoch %d loss %.5f %s %.4f", epoch, history.train_loss[-1], history.val_metric_name, score)
    model.params = best_params
    model.optimizer_state = state
    return model, history


def write_run_dir(run_dir: str | Path, cfg: TrainConfig, model: GroundingModel, history: TrainHistory) -> Path:
    """Config snapshot, history table and checkpoints for one training run."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "history.tsv").write_text(history.to_tsv())
    save_model(model, run_dir / "model.ckpt")
    state = model.optimizer_state
    if state is not None:
        save_optimizer_state(state, run_dir / "optimizer.ckpt")
    return run_dir


def featurize_docs(model: GroundingModel, docs: Sequence[Document]) -> sp.csr_matrix:
    return model.featurizer.featurize_many([d.tokens for d in docs])
