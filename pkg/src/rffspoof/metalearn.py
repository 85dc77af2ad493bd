"""Episodic meta-learning: task sampling, first-order MAML and ADMM l1 shrinkage.

One meta-step, for a batch of episodes::

    theta_i' = inner_adapt(theta, support_i)           (SGD, inner_lr, inner_steps)
    g        = sum_i grad L(theta_i'; support_i, query_i)
    theta    = adam(theta, g, outer_lr)
    z        = soft_threshold(theta + u, lam / rho)     (regularised subset only)
    u        = u + theta - z
    theta    = z - u

The gradient is the first-order approximation (no differentiation through the
inner loop). ``admm_reassign_theta=False`` drops the last line and adds the
augmented-Lagrangian term ``rho * (theta - z + u)`` to ``g`` instead, which is
textbook scaled-form ADMM.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .dataio import FeatureSet, Registry
from .errors import DataError, NumericError, ValidationError
from .sigmodel import Label
from .tracking import FEATURES, resolve_feature_subset

log = logging.getLogger(__name__)

COMBOS = {
    "C1": ("ds2", "ds3"),
    "C2": ("ds4", "ds7"),
    "C3": ("ds7", "ds8"),
    "C4": ("ds3", "ds8"),
}

MAX_EPISODE_RESAMPLES = 10


def resolve_combo(combo: str | Sequence[str]) -> tuple[str, ...]:
    """``"C1"`` -> ``("ds2", "ds3")``; ``"a+b"`` -> ``("a", "b")``; ``"a"`` -> ``("a",)``.

    Names of the form C<digits> are reserved for presets.
    """
    if not isinstance(combo, str):
        tags = tuple(combo)
    elif combo.upper() in COMBOS:
        tags = COMBOS[combo.upper()]
    elif re.fullmatch(r"[cC]\d+", combo):
        raise ValidationError(f"unknown combo {combo!r}; presets are {sorted(COMBOS)} or 'tagA+tagB'")
    else:
        tags = tuple(t for t in combo.split("+") if t)
    if not tags:
        raise ValidationError("empty combo")
    return tags


@dataclass
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    epochs: int = 8
    query_size: int = 50
    inner_steps: int = 5
    shots_per_class: int = 5
    tasks_per_batch: int = 4
    lam: float = 1e-4
    rho: float = 1.0
    seed: int = 0
    steps_per_epoch: int = 1
    episode_source: str = "single"     # "single": one dataset of the combo per episode; "pooled"
    admm_scope: str = "fusion"         # "fusion" or "all"
    admm_z_source: str = "theta"       # "theta": z from theta + u; "z": from z + u
    admm_reassign_theta: bool = True
    feature_mode: str = "pre"          # "pre" or "prepost"
    postcorr: str = "all"
    threads: int = 1

    def __post_init__(self):
        for name in ("inner_lr", "outer_lr", "rho"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.lam < 0:
            raise ValidationError("lam must be non-negative")
        for name in ("epochs", "inner_steps", "shots_per_class", "tasks_per_batch",
                     "query_size", "steps_per_epoch", "threads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        choices = {"episode_source": ("single", "pooled"), "admm_scope": ("fusion", "all"),
                   "admm_z_source": ("theta", "z"), "feature_mode": ("pre", "prepost")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        resolve_feature_subset(self.postcorr)

    @property
    def feature_subset(self) -> tuple[str, ...]:
        return resolve_feature_subset(self.postcorr)

    def replace(self, **kw) -> "MetaConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, d: Mapping, base: "MetaConfig | None" = None) -> "MetaConfig":
        """Build from string or typed values; unknown keys are errors."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise ValidationError(f"unknown training config key {k!r}")
            kw[k] = _coerce(k, v, getattr(base, k))
        return dataclasses.replace(base, **kw)

    @classmethod
    def from_file(cls, path: str | Path, base: "MetaConfig | None" = None) -> "MetaConfig":
        """``key = value`` lines; ``#`` starts a comment."""
        d = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            d[k] = v
        return cls.from_mapping(d, base)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(key, value, like):
    if not isinstance(value, str):
        return type(like)(value) if not isinstance(like, bool) else bool(value)
    try:
        if isinstance(like, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {value!r}") from None
    return value


# --------------------------------------------------------------------------
# episodes


@dataclass
class ItemBatch:
    specs: np.ndarray             # (n, rows, cols)
    posts: np.ndarray | None      # (n, post_dim) or None
    labels: np.ndarray            # (n,)
    items: tuple = ()             # (tag, index) per row

    def __len__(self):
        return len(self.labels)


@dataclass
class Episode:
    task_id: int
    support: ItemBatch
    query: ItemBatch
    source_datasets: frozenset


def gather(registry: Registry, items: Sequence[tuple[str, int]], cfg: MetaConfig) -> ItemBatch:
    specs = np.stack([registry[t].specs[i] for t, i in items])
    labels = np.array([registry[t].labels[i] for t, i in items], dtype=np.int64)
    posts = None
    if cfg.feature_mode == "prepost":
        posts = np.stack([registry[t].post_vectors(cfg.feature_subset)[i] for t, i in items])
    return ItemBatch(specs, posts, labels, tuple(items))


def batch_from_featureset(fs: FeatureSet, idx, cfg: MetaConfig) -> ItemBatch:
    idx = np.asarray(idx, dtype=np.int64)
    posts = fs.post_vectors(cfg.feature_subset)[idx] if cfg.feature_mode == "prepost" else None
    return ItemBatch(fs.specs[idx], posts, fs.labels[idx], tuple((fs.tag, int(i)) for i in idx))


def _pool(registry: Registry, tags: Sequence[str]) -> list[tuple[str, int]]:
    return [(t, i) for t in sorted(tags) for i in range(len(registry[t]))]


def sample_episode(registry: Registry, combo, cfg: MetaConfig, rng: np.random.Generator,
                   task_id: int = 0) -> Episode:
    """Support: ``shots_per_class`` per class; query: ``query_size`` of the rest.

    Sampling is uniform without replacement. An episode whose source cannot
    supply both classes is redrawn up to 10 times before failing.
    """
    tags = sorted(resolve_combo(combo))
    for t in tags:
        registry[t]   # unknown tag -> ValidationError
    shots = cfg.shots_per_class
    last_error = None
    for _ in range(MAX_EPISODE_RESAMPLES + 1):
        src = tags if cfg.episode_source == "pooled" else [tags[int(rng.integers(len(tags)))]]
        pool = _pool(registry, src)
        labels = np.array([registry[t].labels[i] for t, i in pool])
        support = []
        for c in (Label.CLEAN, Label.SPOOFED):
            idx = np.flatnonzero(labels == int(c))
            if len(idx) < shots:
                last_error = ValidationError(
                    f"class {c.name} has {len(idx)} examples in {'+'.join(src)}; need {shots} shots")
                break
            support.extend(rng.choice(idx, shots, replace=False).tolist())
        else:
            rest = np.setdiff1d(np.arange(len(pool)), support)
            if len(rest) < cfg.query_size:
                raise ValidationError(
                    f"{'+'.join(src)}: {len(rest)} examples left for a query set of {cfg.query_size}")
            query = rng.choice(rest, cfg.query_size, replace=False).tolist()
            return Episode(task_id, gather(registry, [pool[i] for i in support], cfg),
                           gather(registry, [pool[i] for i in query], cfg), frozenset(src))
    raise last_error


# --------------------------------------------------------------------------
# inner loop and ADMM

LossFn = Callable[[Mapping, object, object], T.Tensor]


def inner_adapt(params: Mapping[str, np.ndarray], support, alpha: float, steps: int,
                loss_fn: LossFn) -> dict[str, np.ndarray]:
    """``steps`` SGD steps on ``loss_fn(p, support, support)``; ``params`` is not modified."""
    theta = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for s in range(steps):
        try:
            _, grads = T.value_and_grad(lambda p: loss_fn(p, support, support), theta)
        except NumericError as exc:
            raise NumericError(f"inner step {s}: {exc}") from None
        theta = T.sgd_step(theta, grads, alpha)
        if not all(np.all(np.isfinite(v)) for v in theta.values()):
            raise NumericError(f"inner step {s}: non-finite parameters")
    return theta


def soft_threshold(x, t):
    """``sign(x) * max(|x| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ValidationError("soft_threshold needs t >= 0")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


@dataclass
class AdmmState:
    z: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    rho: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValidationError("rho must be > 0")
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.z.keys() != self.u.keys():
            raise ValidationError("z and u cover different parameters")
        for k in self.z:
            if np.shape(self.z[k]) != np.shape(self.u[k]):
                raise ValidationError(f"z/u shape mismatch for {k}")

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(sorted(self.z))

    def copy(self) -> "AdmmState":
        return AdmmState({k: v.copy() for k, v in self.z.items()},
                         {k: v.copy() for k, v in self.u.items()}, self.rho, self.lam)


def init_admm(params: Mapping[str, np.ndarray], keys: Sequence[str] | None, rho: float,
              lam: float) -> AdmmState:
    """z starts at theta, u at zero; ``keys=None`` regularises every parameter."""
    keys = sorted(params) if keys is None else list(keys)
    missing = [k for k in keys if k not in params]
    if missing:
        raise ValidationError(f"regularised parameters not in model: {missing}")
    return AdmmState({k: np.array(params[k], dtype=np.float64) for k in keys},
                     {k: np.zeros(np.shape(params[k])) for k in keys}, rho, lam)


def admm_update(params: Mapping[str, np.ndarray], state: AdmmState, z_source: str = "theta",
                reassign_theta: bool = True) -> tuple[dict[str, np.ndarray], AdmmState]:
    """z <- soft(theta + u, lam/rho); u <- u + theta - z; theta <- z - u.

    ``z_source="z"`` thresholds ``z + u`` instead of ``theta + u``.
    ``reassign_theta=False`` leaves theta as it is.
    """
    out = dict(params)
    new = state.copy()
    for k in state.keys:
        theta = np.asarray(params[k], dtype=np.float64)
        if theta.shape != state.z[k].shape:
            raise ValidationError(f"admm_update: {k} has shape {theta.shape}, state has {state.z[k].shape}")
        src = theta if z_source == "theta" else state.z[k]
        z = soft_threshold(src + state.u[k], state.lam / state.rho)
        u = state.u[k] + (theta - z)
        new.z[k], new.u[k] = z, u
        out[k] = z - u if reassign_theta else theta
    return out, new


def sparse_params(params: Mapping[str, np.ndarray], state: AdmmState) -> dict[str, np.ndarray]:
    """Parameters with the regularised subset replaced by its sparse copy z."""
    out = dict(params)
    out.update({k: v.copy() for k, v in state.z.items()})
    return out


def zero_fraction(state: AdmmState) -> float:
    total = sum(v.size for v in state.z.values())
    return sum(int(np.sum(v == 0.0)) for v in state.z.values()) / total


# --------------------------------------------------------------------------
# outer loop


def reduce_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum that does not depend on the order of ``arrays``."""
    return np.sort(np.stack(arrays), axis=0).sum(axis=0)


def episode_gradient(params, episode: Episode, cfg: MetaConfig, loss_fn: LossFn):
    """(query loss, query gradient) at the parameters adapted on the support set."""
    try:
        adapted = inner_adapt(params, episode.support, cfg.inner_lr, cfg.inner_steps, loss_fn)
        return T.value_and_grad(lambda p: loss_fn(p, episode.support, episode.query), adapted)
    except NumericError as exc:
        raise NumericError(f"episode {episode.task_id}: {exc}") from None


def meta_gradient(params, episodes: Sequence[Episode], cfg: MetaConfig, loss_fn: LossFn):
    if not episodes:
        raise ValidationError("meta_step needs at least one episode")

    def one(ep):
        return episode_gradient(params, ep, cfg, loss_fn)

    if cfg.threads > 1 and len(episodes) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(one, episodes))
    else:
        results = [one(ep) for ep in episodes]
    losses = [r[0] for r in results]
    grads = {k: reduce_sum([r[1][k] for r in results]) for k in params}
    return float(np.mean(losses)), grads


def meta_step(params, episodes: Sequence[Episode], cfg: MetaConfig, adam: T.AdamState,
              loss_fn: LossFn, admm: AdmmState | None = None):
    """One outer Adam step. Returns (new params, mean query loss, meta-gradient)."""
    loss, grads = meta_gradient(params, episodes, cfg, loss_fn)
    if admm is not None and not cfg.admm_reassign_theta:
        for k in admm.keys:
            grads[k] = grads[k] + admm.rho * (params[k] - admm.z[k] + admm.u[k])
    return T.adam_step(adam, params, grads, cfg.outer_lr), loss, grads


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_history: list[float]
    admm: AdmmState
    trace: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def regularized_keys(learner, cfg: MetaConfig, params) -> list[str]:
    if cfg.admm_scope == "all":
        return sorted(params)
    keys = getattr(learner, "regularized", None)
    return sorted(params) if keys is None else list(keys)


def meta_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for parameter init and episode sampling."""
    s = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(s[0]), np.random.default_rng(s[1])


def meta_train(cfg: MetaConfig, registry: Registry, combos: Sequence, learner,
               checkpoint_dir: str | Path | None = None, init_params=None,
               keep_trace: bool = False, on_epoch: Callable | None = None) -> TrainResult:
    """``epochs`` x ``steps_per_epoch`` of {sample batch, meta_step, admm_update}.

    ``combos`` lists dataset combos; each episode picks one uniformly. The
    epoch loss is the mean query loss over that epoch's steps.
    """
    combos = [resolve_combo(c) for c in combos]
    if not combos:
        raise ValidationError("meta_train needs at least one combo")
    init_rng, ep_rng = meta_rngs(cfg.seed)
    params = learner.init_params(init_rng) if init_params is None else \
        {k: np.array(v, dtype=np.float64) for k, v in init_params.items()}
    admm = init_admm(params, regularized_keys(learner, cfg, params), cfg.rho, cfg.lam)
    adam = T.AdamState()
    result = TrainResult(params, [], admm)
    task_id = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            episodes = []
            for _ in range(cfg.tasks_per_batch):
                combo = combos[int(ep_rng.integers(len(combos)))] if len(combos) > 1 else combos[0]
                episodes.append(sample_episode(registry, combo, cfg, ep_rng, task_id))
                task_id += 1
            before = params
            stepped, loss, grads = meta_step(params, episodes, cfg, adam, learner.loss, admm)
            params, admm = admm_update(stepped, admm, cfg.admm_z_source, cfg.admm_reassign_theta)
            losses.append(loss)
            if keep_trace:
                result.trace.append({"epoch": epoch, "episodes": episodes, "theta_in": before,
                                     "grads": grads, "theta_adam": stepped, "loss": loss,
                                     "z": admm.z, "u": admm.u, "theta_out": params})
        result.loss_history.append(float(np.mean(losses)))
        log.info("epoch %d/%d mean meta loss %.6g", epoch, cfg.epochs, result.loss_history[-1])
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.spl"
            save_training_checkpoint(path, params, admm)
            result.checkpoints.append(path)
        if on_epoch is not None:
            on_epoch(epoch, result.loss_history[-1], params)
    result.params, result.admm = params, admm
    return result


def save_training_checkpoint(path: str | Path, params, admm: AdmmState | None = None) -> None:
    """Parameters plus ADMM ``z``/``u`` under ``admm.z.*`` / ``admm.u.*`` names."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    blob = dict(params)
    if admm is not None:
        blob.update({f"admm.z.{k}": v for k, v in admm.z.items()})
        blob.update({f"admm.u.{k}": v for k, v in admm.u.items()})
    T.save_checkpoint(path, blob)


def load_training_checkpoint(path: str | Path):
    """Returns (params, z, u); z and u are empty when absent."""
    blob = T.load_checkpoint(path)
    z = {k[7:]: v for k, v in blob.items() if k.startswith("admm.z.")}
    u = {k[7:]: v for k, v in blob.items() if k.startswith("admm.u.")}
    params = {k: v for k, v in blob.items() if not k.startswith("admm.")}
    return params, z, u


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    confusion: np.ndarray        # rows true (clean, spoofed), cols predicted
    query_loss: float
    query_embeddings: np.ndarray | None = None
    query_labels: np.ndarray | None = None
    predictions: np.ndarray | None = None

    @property
    def accuracy(self) -> float:
        return metrics_from_confusion(self.confusion)["accuracy"]


def metrics_from_confusion(cm) -> dict[str, float]:
    """Spoofed is the positive class."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise ValidationError("confusion matrix must be 2x2")
    tn, fp, fn, tp = (float(v) for v in cm.ravel())
    total = tn + fp + fn + tp
    acc = (tp + tn) / total if total else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}


def split_target(fs: FeatureSet, shots: int, rng: np.random.Generator,
                 query_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Few-shot support indices and query indices (the rest, or a random subset)."""
    support = []
    for c in (Label.CLEAN, Label.SPOOFED):
        idx = np.flatnonzero(fs.labels == int(c))
        if len(idx) < shots:
            raise ValidationError(f"{fs.tag}: class {c.name} has {len(idx)} examples; need {shots} shots")
        support.extend(rng.choice(idx, shots, replace=False).tolist())
    rest = np.setdiff1d(np.arange(len(fs)), support)
    if query_size is not None:
        if len(rest) < query_size:
            raise ValidationError(f"{fs.tag}: {len(rest)} examples left for a query set of {query_size}")
        rest = np.sort(rng.choice(rest, query_size, replace=False))
    if len(rest) == 0:
        raise DataError(f"{fs.tag}: no query examples left after the support draw")
    return np.array(support), rest


def adapt_and_evaluate(params, support: ItemBatch, query: ItemBatch, cfg: MetaConfig,
                       learner, steps: int | None = None) -> EvalResult:
    """Adapt on ``support``, then label every query item by its nearest prototype."""
    from .embedder import classify, prototypes

    steps = cfg.inner_steps if steps is None else steps
    adapted = inner_adapt(params, support, cfg.inner_lr, steps, learner.loss)
    s_emb = learner.embed(adapted, support)
    q_emb = s_emb if query is support else learner.embed(adapted, query)
    protos = prototypes(s_emb, support.labels)
    pred = np.array([int(classify(q, protos)) for q in q_emb])
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (query.labels, pred), 1)
    qloss = learner.loss(adapted, support, query).item()
    if not math.isfinite(qloss):
        raise NumericError("non-finite query loss")
    return EvalResult(cm, qloss, q_emb, np.asarray(query.labels), pred)


def crosstest(params, target: FeatureSet, shots: int, cfg: MetaConfig, learner,
              rng: np.random.Generator | int = 0, query_size: int | None = None) -> EvalResult:
    """Few-shot adaptation to an unseen dataset and evaluation on its remaining items."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    s_idx, q_idx = split_target(target, shots, rng, query_size)
    return adapt_and_evaluate(params, batch_from_featureset(target, s_idx, cfg),
                              batch_from_featureset(target, q_idx, cfg), cfg, learner)
