"""scikit-learn style facade over the two training stages.

``DistilledStudent.fit`` takes image arrays plus optional teacher outputs,
``transform`` returns student embeddings and ``predict`` class labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .data.formats import TeacherStore
from .data.images import degrade
from .data.manifest import ImageSet
from .evaluation import embed_all
from .exceptions import PreconditionError
from .model import ModelConfig, StudentModel
from .tensor import Tensor
from .train import LOSS_COMPONENTS, OptimConfig, compute_features, train_stage1, train_stage2


def check_images(X, side: int) -> np.ndarray:
    """Coerce to float32 (n, 1, side, side), box-degrading larger square inputs.

    Accepts (n, h, w), (n, 1, h, w) or flattened (n, h*w) arrays with values in [0, 1].
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    n = X.shape[0]
    if X.ndim == 2:
        h = int(round(np.sqrt(X.shape[1])))
        if h * h != X.shape[1]:
            raise PreconditionError(f"flattened images must be square, got {X.shape[1]} pixels")
        X = X.reshape(n, 1, h, h)
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != X.shape[3]:
        raise PreconditionError(f"expected square single-channel images, got shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise PreconditionError("pixel values must lie in [0, 1]")
    if X.shape[2] != side:
        X = np.stack([degrade(x, side) for x in X])
    return X.astype(np.float32)


def _teacher(arr, n: int, what: str):
    if arr is None:
        return None
    arr = check_array(arr, dtype=np.float32)
    if arr.shape[0] != n:
        raise PreconditionError(f"{what} has {arr.shape[0]} rows for {n} images")
    return arr


class DistilledStudent(BaseEstimator, TransformerMixin, ClassifierMixin):
    """Low-resolution student trained against file-free teacher arrays.

    Stage 1 runs when ``gen_features`` is passed to :meth:`fit`; otherwise the
    backbone keeps its seeded initialization. The ``kd`` and ``rcd`` terms
    need ``disc_logits`` and ``disc_features`` respectively and are dropped
    from ``loss`` when those are absent.
    """

    def __init__(self, conv_channels=(128, 256, 512), embed_dim=512, input_side=16, loss=LOSS_COMPONENTS,
                 lr=0.05, batch_size=96, epochs_backbone=30, epochs_head=30, tau=0.4, kd_temperature=4.0,
                 seed=7):
        self.conv_channels = conv_channels
        self.embed_dim = embed_dim
        self.input_side = input_side
        self.loss = loss
        self.lr = lr
        self.batch_size = batch_size
        self.epochs_backbone = epochs_backbone
        self.epochs_head = epochs_head
        self.tau = tau
        self.kd_temperature = kd_temperature
        self.seed = seed

    def _optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size, epochs_backbone=self.epochs_backbone,
                           epochs_head=self.epochs_head, tau=self.tau, kd_temperature=self.kd_temperature,
                           seed=self.seed)

    def fit(self, X, y, gen_features=None, disc_features=None, disc_logits=None):
        images = check_images(X, self.input_side)
        y = np.asarray(y)
        if y.shape != (images.shape[0],):
            raise PreconditionError(f"y must have one label per image, got shape {y.shape}")
        self.classes_, labels = np.unique(y, return_inverse=True)
        n = images.shape[0]
        gen = _teacher(gen_features, n, "gen_features")
        disc = _teacher(disc_features, n, "disc_features")
        logits = _teacher(disc_logits, n, "disc_logits")
        if logits is not None and logits.shape[1] != self.classes_.size:
            raise PreconditionError(f"disc_logits has {logits.shape[1]} columns for {self.classes_.size} classes")

        switches = [s for s in self.loss if (s != "kd" or logits is not None) and (s != "rcd" or disc is not None)]
        if not switches:
            raise PreconditionError(f"no usable loss term among {tuple(self.loss)} with the teachers provided")
        config = ModelConfig(input_side=self.input_side, conv_channels=tuple(self.conv_channels),
                             gen_feature_dim=gen.shape[1] if gen is not None else self.embed_dim,
                             embed_dim=self.embed_dim, teacher_dim=self.embed_dim)
        if disc is not None and disc.shape[1] != self.embed_dim:
            raise PreconditionError(f"disc_features dim {disc.shape[1]} != embed_dim {self.embed_dim}")

        ids = [f"x{k:06d}" for k in range(n)]
        data = ImageSet(ids, images, labels.astype(np.int64), int(self.classes_.size))
        optim = self._optim()
        self.model_ = StudentModel(config, int(self.classes_.size), seed=self.seed)
        stage1 = None
        if gen is not None:
            stage1 = train_stage1(self.model_, data, TeacherStore(ids, gen), optim)
        # stage 2 always reads a feature store; without a discriminative teacher it is unused
        store = TeacherStore(ids, disc if disc is not None else np.zeros((n, self.embed_dim), np.float32), logits)
        train_stage2(self.model_, stage1, data, store, optim, switches)
        self.loss_used_ = tuple(sorted(switches))
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        """Student embeddings, shape (n, embed_dim)."""
        check_is_fitted(self, "model_")
        images = check_images(X, self.input_side)
        data = ImageSet([f"x{k:06d}" for k in range(len(images))], images,
                        np.zeros(len(images), np.int64), int(self.classes_.size))
        return embed_all(self.model_, data).matrix

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        feats = compute_features(self.model_, check_images(X, self.input_side))
        with T.no_grad():
            return self.model_.head(Tensor(feats))[1].data

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
