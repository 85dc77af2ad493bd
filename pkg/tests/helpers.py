"""Small learners and datasets shared by the meta-learning tests."""
import numpy as np

from rffspoof import tensor as T
from rffspoof.dataio import FeatureSet, Registry
from rffspoof.embedder import proto_loss_from_embeddings


class ToyLearner:
    """Linear embedding ``x @ W`` of a 5-vector into 2-D: 10 parameters."""

    regularized = None
    dim, out = 5, 2

    def init_params(self, rng):
        return {"W": rng.normal(0.0, 0.5, (self.dim, self.out))}

    def _x(self, batch):
        return T.Tensor(np.asarray(batch.specs).reshape(len(batch.labels), -1))

    def loss(self, params, support, evaluate):
        p = {k: v if isinstance(v, T.Tensor) else T.Tensor(v) for k, v in params.items()}
        es = T.dense(self._x(support), p["W"])
        ee = es if evaluate is support else T.dense(self._x(evaluate), p["W"])
        return proto_loss_from_embeddings(es, support.labels, ee, evaluate.labels)

    def embed(self, params, batch):
        return np.asarray(batch.specs).reshape(len(batch.labels), -1) @ params["W"]


class ConstantLearner(ToyLearner):
    """Loss that ignores its parameters (zero gradients everywhere)."""

    def loss(self, params, support, evaluate):
        p = {k: v if isinstance(v, T.Tensor) else T.Tensor(v) for k, v in params.items()}
        return T.scale(T.mean(p["W"]), 0.0)


def gaussian_set(tag, n_per_class, rng, shift=None, sep=3.0):
    """Two Gaussian classes in 5-D, shaped like (n, 1, 5) spectrograms."""
    shift = rng.normal(size=5) if shift is None else shift
    direction = rng.normal(size=5)
    direction /= np.linalg.norm(direction)
    x0 = rng.normal(size=(n_per_class, 5)) + shift
    x1 = rng.normal(size=(n_per_class, 5)) + shift + sep * direction
    specs = np.concatenate([x0, x1])[:, None, :]
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return FeatureSet(tag, specs, labels)


def toy_registry(seed=0, tags=("a", "b", "c"), n_per_class=40):
    rng = np.random.default_rng(seed)
    return Registry([gaussian_set(t, n_per_class, rng) for t in tags])


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    return passed
