"""scikit-learn style wrappers around the target network and the weight predictor.

``TargetClassifier`` trains a residual CNN on image arrays.
``WeightPredictor`` fits a predictor to a trained network; ``transform`` maps
a network skeleton to the same architecture carrying predicted weights.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset, check_images, check_network, check_positive_int
from .numerics import softmax
from .permutation import compute_permutation
from .predictor import compression_ratio
from .target_net import (LabeledDataset, TargetTrainConfig, build_target, extract_weights,
                         preset_spec, train_target)
from .training import (TrainConfig, distill_phase, fit_baseline, fit_recon_only, loss_recon,
                       new_predictor, reconstructed_network)


class TargetClassifier(ClassifierMixin, BaseEstimator):
    """Residual CNN classifier trained with Adam and cross-entropy."""

    def __init__(self, arch="tiny", epochs=25, lr=1e-2, batch_size=64, augment_shift=0,
                 augment_noise=0.0, seed=0):
        self.arch = arch
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.augment_shift = augment_shift
        self.augment_noise = augment_noise
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        spec = preset_spec(self.arch, in_channels=X.shape[1], num_classes=len(self.classes_))
        net = build_target(spec, self.seed)
        cfg = TargetTrainConfig(lr=self.lr, batch_size=check_positive_int(self.batch_size, "batch_size"),
                                seed=self.seed, augment_shift=self.augment_shift,
                                augment_noise=self.augment_noise)
        self.network_, self.history_ = train_target(net, LabeledDataset(X, codes), self.epochs, cfg)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return self.network_.logits(check_images(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X)).data.astype(np.float64)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


# transform returns a network, not an array, so sklearn's output wrapping is switched off
class WeightPredictor(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Coordinate MLP that regenerates the conv weights of a trained network.

    ``fit(net)`` runs reconstruction-only training, or the joint objective
    with ``mode="baseline"`` (which needs ``data``). ``distill`` adds a
    KD-only second phase against any teacher with the same label set.
    """

    def __init__(self, hidden=64, mode="recon_only", epochs=150, lr=5e-3, alpha=1e-5, beta=1e-5,
                 p_uni=0.8, kernel_batch=256, data_batch=64, perm="in_filter", num_frequencies=8,
                 seed=0):
        self.hidden = hidden
        self.mode = mode
        self.epochs = epochs
        self.lr = lr
        self.alpha = alpha
        self.beta = beta
        self.p_uni = p_uni
        self.kernel_batch = kernel_batch
        self.data_batch = data_batch
        self.perm = perm
        self.num_frequencies = num_frequencies
        self.seed = seed

    def _config(self, phase, **kw):
        base = dict(alpha=self.alpha, beta=self.beta, p_uni=self.p_uni, kernel_batch=self.kernel_batch,
                    data_batch=self.data_batch, epochs=self.epochs, lr=self.lr, seed=self.seed,
                    phase=phase)
        base.update(kw)
        return TrainConfig(**base)

    def fit(self, X, y=None, data=None):
        net = check_network(X)
        check_positive_int(self.hidden, "hidden")
        atlas = extract_weights(net)
        self.permutation_ = compute_permutation(atlas, self.perm)
        pred = new_predictor(atlas, net.spec, self.hidden, self.seed,
                             num_frequencies=self.num_frequencies)
        if self.mode == "recon_only":
            result = fit_recon_only(pred, atlas, self.permutation_, self._config("recon_only"))
        elif self.mode == "baseline":
            if data is None:
                raise ValueError("mode='baseline' needs training data")
            result = fit_baseline(pred, net, check_dataset(data), self.permutation_,
                                  self._config("baseline"))
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.skeleton_ = net
        self.predictor_ = result.predictor
        self.history_ = result.history
        self.compression_ratio_ = compression_ratio(self.predictor_, atlas).ratio
        return self

    def distill(self, teacher, data=None, noise=False, epochs=None, lr=None, input_shape=None):
        """Second phase: KD from ``teacher`` on ``data`` (or uniform noise).

        Noise inputs take their ``[C, H, W]`` shape from ``data`` when given,
        otherwise from ``input_shape``.
        """
        check_is_fitted(self, "predictor_")
        teacher = check_network(teacher)
        cfg = TrainConfig.distill(p_uni=self.p_uni, kernel_batch=self.kernel_batch,
                                  data_batch=self.data_batch, seed=self.seed, noise_inputs=noise,
                                  epochs=self.epochs if epochs is None else epochs,
                                  lr=(1e-4 if noise else 1e-3) if lr is None else lr)
        data = None if data is None else check_dataset(data)
        shape = data.images.shape[1:] if data is not None else input_shape
        result = distill_phase(self.predictor_, teacher, self.skeleton_, None if noise else data,
                               self.permutation_, cfg, input_shape=shape)
        self.predictor_ = result.predictor
        self.distill_history_ = result.history
        return self

    def transform(self, X=None):
        """The network ``X`` (default: the fitted one) with predicted conv weights."""
        check_is_fitted(self, "predictor_")
        net = self.skeleton_ if X is None else check_network(X)
        if net.spec != self.skeleton_.spec:
            raise ValueError("network architecture differs from the one the predictor was fitted on")
        return reconstructed_network(self.predictor_, net, self.permutation_)

    def reconstruction_error(self):
        check_is_fitted(self, "predictor_")
        return loss_recon(extract_weights(self.skeleton_), extract_weights(self.transform()))
