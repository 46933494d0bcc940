"""scikit-learn style wrappers around the functional pipeline."""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import pipeline
from .autograd import ParamStore
from .graph import NODE_INPUT_WIDTH, encode_vessels, init_node_features
from .metrics import evaluate
from .nn import init_mlp
from .validation import as_array, check_binary_mask, check_label_volume


class VesselTopologyEncoder(TransformerMixin, BaseEstimator):
    """Vessel mask -> node feature matrix of its keypoint graph.

    ``fit`` draws the node-MLP weights from ``random_state``; ``transform``
    skeletonizes a mask, samples keypoints, builds the kNN graph and returns
    the MLP features (N x node_dim).  ``encode`` returns the whole graph.
    """

    def __init__(self, n_keypoints=256, k=8, node_dim=32, mlp_hidden=32, random_state=0):
        self.n_keypoints = n_keypoints
        self.k = k
        self.node_dim = node_dim
        self.mlp_hidden = mlp_hidden
        self.random_state = random_state

    @property
    def widths_(self):
        return (NODE_INPUT_WIDTH, self.mlp_hidden, self.node_dim)

    def fit(self, X=None, y=None):
        self.params_ = ParamStore(self.random_state)
        init_mlp(self.params_, self.widths_, "mlp")
        if X is not None:
            self.graph_ = self.encode(X)
        return self

    def encode(self, X):
        if not hasattr(self, "params_"):
            raise NotFittedError("VesselTopologyEncoder is not fitted yet")
        g = encode_vessels(check_binary_mask(X, "vessel mask"), self.n_keypoints, self.k)
        return init_node_features(g, self.params_, self.widths_, "mlp")

    def transform(self, X):
        return self.encode(X).node_features


class VasGuideSegmenter(BaseEstimator):
    """Topology-guided voxel classifier on the toy token backbone.

    ``X`` is an intensity volume, ``y`` its label map (0 = background) and
    ``vessel_mask`` the binary vessel mask, required unless ``fusion='none'``.
    """

    def __init__(
        self,
        fusion="cross_attention",
        scl="cats",
        patch_size=4,
        token_dim=32,
        d_k=32,
        lambda_scl=0.1,
        lr=0.05,
        iterations=200,
        n_keypoints=256,
        k=8,
        node_dim=32,
        mlp_hidden=32,
        gcn_widths=(32, 32, 32),
        temperature=0.1,
        percentile=95.0,
        memory_capacity=16,
        denominator_mode="paper_literal",
        random_state=0,
    ):
        self.fusion = fusion
        self.scl = scl
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.d_k = d_k
        self.lambda_scl = lambda_scl
        self.lr = lr
        self.iterations = iterations
        self.n_keypoints = n_keypoints
        self.k = k
        self.node_dim = node_dim
        self.mlp_hidden = mlp_hidden
        self.gcn_widths = gcn_widths
        self.temperature = temperature
        self.percentile = percentile
        self.memory_capacity = memory_capacity
        self.denominator_mode = denominator_mode
        self.random_state = random_state

    def _config(self, class_count):
        params = self.get_params()
        seed = params.pop("random_state")
        return pipeline.BackboneConfig(class_count=class_count, seed=seed, **params)

    def fit(self, X, y, vessel_mask=None):
        labels = check_label_volume(y)
        class_count = max(int(labels.max()) + 1, 2)
        cfg = self._config(class_count)
        self.model_ = pipeline.train(X, labels, vessel_mask, cfg)
        self.classes_ = np.arange(class_count)
        self.history_ = list(self.model_.history)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("VasGuideSegmenter is not fitted yet")

    def predict_proba(self, X, vessel_mask=None):
        self._check_fitted()
        return pipeline.predict_proba(self.model_, as_array(X), vessel_mask)

    def predict(self, X, vessel_mask=None):
        self._check_fitted()
        return pipeline.infer(self.model_, as_array(X), vessel_mask)

    def score(self, X, y, vessel_mask=None):
        """Macro Dice in [0, 1] over the foreground classes present in ``y``."""
        return evaluate(self.predict(X, vessel_mask), y).macro_dsc / 100.0

    @classmethod
    def from_model(cls, model):
        """Wrap a trained (e.g. checkpoint-loaded) model."""
        cfg = model.cfg
        names = cls().get_params()
        kwargs = {n: getattr(cfg, n) for n in names if n != "random_state"}
        est = cls(random_state=cfg.seed, **kwargs)
        est.model_ = model
        est.classes_ = np.arange(cfg.class_count)
        est.history_ = list(model.history)
        return est
