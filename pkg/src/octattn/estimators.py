"""scikit-learn style wrappers so the block composes with pipelines and grid search."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .attention import INFER, TRAIN, OTBConfig, init_otb_params, otb_apply
from .backbone import backbone_forward, init_backbone_params
from .grid import SparseVoxelGrid
from .semantic import SamConfig, focal_loss, init_seg_params, seg_branch
from .sparse_conv import neighbor_table
from .voxel import embed


def check_grid(X, n_features: Optional[int] = None, allow_empty: bool = False) -> SparseVoxelGrid:
    """Validate that ``X`` is a SparseVoxelGrid with the expected feature width."""
    if not isinstance(X, SparseVoxelGrid):
        raise TypeError(f"expected a SparseVoxelGrid, got {type(X).__name__}")
    if not allow_empty and len(X) == 0:
        raise ValueError("grid has no voxels")
    if n_features is not None and len(X) and X.num_features != n_features:
        raise ValueError(f"grid has {X.num_features} features, estimator expects {n_features}")
    if not np.isfinite(X.features.data).all():
        raise ValueError("grid features contain NaN or inf")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    return y.astype(bool)


def _check_mode(mode: str) -> str:
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return mode


class OctreeTransformerBlock(TransformerMixin, BaseEstimator):
    """One Octree Transformer Block over a grid of d-dimensional voxel features.

    ``fit`` draws the block parameters from ``random_state``; ``transform``
    returns the m x d block output.  Pass ``seg_scores`` to ``transform`` to
    enable the semantic embedding and mask.
    """

    def __init__(
        self,
        d=64,
        heads=2,
        head_dim=32,
        height=4,
        k=8,
        n_keys=32,
        tau=1.0,
        sam_delta_q=0.05,
        sam_delta_k=0.2,
        sam_gamma=10000.0,
        mode="infer",
        random_state=0,
    ):
        self.d = d
        self.heads = heads
        self.head_dim = head_dim
        self.height = height
        self.k = k
        self.n_keys = n_keys
        self.tau = tau
        self.sam_delta_q = sam_delta_q
        self.sam_delta_k = sam_delta_k
        self.sam_gamma = sam_gamma
        self.mode = mode
        self.random_state = random_state

    def _config(self) -> OTBConfig:
        return OTBConfig(
            d=self.d,
            heads=self.heads,
            head_dim=self.head_dim,
            height=self.height,
            k=self.k,
            keys=self.n_keys,
            tau=self.tau,
            sam=SamConfig(self.sam_delta_q, self.sam_delta_k, self.sam_gamma),
        )

    def fit(self, X, y=None):
        _check_mode(self.mode)
        self.config_ = self._config()
        check_grid(X, self.d)
        self.params_ = init_otb_params(self.config_, np.random.default_rng(self.random_state))
        self.n_features_in_ = self.d
        return self

    def transform(self, X, seg_scores=None):
        check_is_fitted(self, "params_")
        X = check_grid(X, self.n_features_in_)
        scores = None if seg_scores is None else T.Tensor(np.asarray(seg_scores, dtype=np.float64))
        rng = np.random.default_rng(self.random_state)
        out = otb_apply(X, self.params_, self.config_, scores, self.mode, rng)
        return out.data


class ForegroundSegmenter(ClassifierMixin, BaseEstimator):
    """Submanifold-conv foreground classifier trained by plain gradient descent on focal loss."""

    def __init__(self, steps=200, lr=0.5, alpha=0.25, gamma=2.0, random_state=0):
        self.steps = steps
        self.lr = lr
        self.alpha = alpha
        self.gamma = gamma
        self.random_state = random_state

    def fit(self, X, y):
        X = check_grid(X)
        y = check_labels(y, len(X))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        params = init_seg_params(X.num_features, np.random.default_rng(self.random_state))
        nbr = neighbor_table(X)
        self.loss_curve_ = []
        for _ in range(self.steps):
            leaves = {k: T.Tensor(v.data, requires_grad=True) for k, v in params.items()}
            loss = focal_loss(seg_branch(X, leaves, nbr), y, self.alpha, self.gamma)
            loss.backward()
            self.loss_curve_.append(loss.item())
            params = {k: T.Tensor(v.data - self.lr * v.grad) for k, v in leaves.items()}
        self.params_ = params
        self.classes_ = np.array([False, True])
        self.n_features_in_ = X.num_features
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_grid(X, self.n_features_in_)
        p = seg_branch(X, self.params_).data
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.predict_proba(X)[:, 1] >= 0.5


class OctreeBackbone(TransformerMixin, BaseEstimator):
    """Raw voxel grid -> embed -> segmentation -> OTB layers with 2x pooling in between.

    ``transform`` returns the final coarse grid; its features are in
    ``grid.features``.  With labels, ``fit`` also trains the segmentation
    branch for ``seg_steps`` gradient steps.
    """

    def __init__(self, d=64, heads=2, head_dim=32, heights=(4, 3), k=8, n_keys=32, tau=1.0,
                 mode="infer", semantic=True, seg_steps=0, seg_lr=0.5, random_state=0):
        self.d = d
        self.heads = heads
        self.head_dim = head_dim
        self.heights = heights
        self.k = k
        self.n_keys = n_keys
        self.tau = tau
        self.mode = mode
        self.semantic = semantic
        self.seg_steps = seg_steps
        self.seg_lr = seg_lr
        self.random_state = random_state

    def fit(self, X, y=None):
        _check_mode(self.mode)
        X = check_grid(X, 4)
        self.configs_ = [
            OTBConfig(d=self.d, heads=self.heads, head_dim=self.head_dim, height=h, k=self.k,
                      keys=self.n_keys, tau=self.tau)
            for h in self.heights
        ]
        self.params_ = init_backbone_params(self.configs_, np.random.default_rng(self.random_state))
        if y is not None and self.seg_steps:
            grid = embed(X, self.params_)
            seg = ForegroundSegmenter(self.seg_steps, self.seg_lr, random_state=self.random_state)
            seg.fit(grid, y)
            self.params_.update(seg.params_)
            self.seg_loss_curve_ = seg.loss_curve_
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_grid(X, 4)
        rng = np.random.default_rng(self.random_state)
        res = backbone_forward(X, self.params_, self.configs_, self.mode, rng, self.semantic)
        self.level_counts_ = res.level_counts
        return res.output
