"""scikit-learn style wrapper: ``fit`` on ground-truth images, ``predict`` from k-space."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .engine import BackpropMode
from .forward_model import FourierOperator
from .losses import LossConfig, nmse
from .model import IRIMModel, irim_rollout
from .numerics import from_complex
from .training import AdamConfig, train

__all__ = ["IRIMReconstructor", "check_images", "check_masks"]


def check_images(X, name="X"):
    """Coerce to a finite float ``(n, 2, H, W)`` real-pair batch.

    Complex ``(n, H, W)`` arrays are split into real and imaginary channels.
    """
    X = np.asarray(X)
    if np.iscomplexobj(X):
        if X.ndim != 3:
            raise ValueError(f"complex {name} must be (n, H, W), got {X.shape}")
        X = from_complex(X)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"{name} must be (n, 2, H, W) or complex (n, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    X = X.astype(np.float64, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_masks(masks, n, shape):
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (n, *masks.shape))
    if masks.shape != (n, *shape):
        raise ValueError(f"masks must be (H, W) or ({n}, H, W) matching {shape}, got {masks.shape}")
    return masks


class IRIMReconstructor(BaseEstimator):
    """Train an i-RIM on images and reconstruct images from undersampled k-space.

    Examples
    --------
    >>> est = IRIMReconstructor(n_steps=1, n_layers=1, schedule=(1,), iterations=2)
    >>> est.fit(images)                       # doctest: +SKIP
    >>> est.predict(kspace, masks=masks)      # doctest: +SKIP
    """

    def __init__(
        self,
        n_channels=16,
        n_steps=4,
        n_layers=6,
        schedule=(1, 2, 4, 4, 2, 1),
        hidden_channels=16,
        grad_mode="exact",
        backprop_mode="invertible",
        iterations=2000,
        batch_size=4,
        learning_rate=1e-3,
        keep_fraction=1.0,
        acceleration=4,
        center_fraction=0.08,
        precision="f64",
        random_state=0,
    ):
        self.n_channels = n_channels
        self.n_steps = n_steps
        self.n_layers = n_layers
        self.schedule = schedule
        self.hidden_channels = hidden_channels
        self.grad_mode = grad_mode
        self.backprop_mode = backprop_mode
        self.iterations = iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.keep_fraction = keep_fraction
        self.acceleration = acceleration
        self.center_fraction = center_fraction
        self.precision = precision
        self.random_state = random_state

    def _build(self):
        return IRIMModel(
            n_channels=self.n_channels,
            n_steps=self.n_steps,
            n_layers=self.n_layers,
            schedule=self.schedule,
            hidden_channels=self.hidden_channels,
            grad_mode=self.grad_mode,
            seed=self.random_state,
            dtype=self.precision,
        )

    def fit(self, X, y=None):
        """Fit on ground-truth images ``X``; measurements are simulated internally."""
        X = check_images(X)
        model = self._build()
        model.check_shape(X.shape[2:])
        _, log = train(
            model,
            X,
            LossConfig(keep_fraction=self.keep_fraction, seed=self.random_state),
            AdamConfig(lr=self.learning_rate),
            mode=BackpropMode(self.backprop_mode),
            iterations=self.iterations,
            seed=self.random_state,
            batch_size=self.batch_size,
            acceleration=self.acceleration,
            center_fraction=self.center_fraction,
        )
        self.model_ = model
        self.training_log_ = log
        self.image_shape_ = X.shape[2:]
        return self

    def predict(self, X, masks):
        """Reconstruct from k-space ``X`` ``(n, 2, H, W)`` sampled with ``masks``."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        masks = check_masks(masks, X.shape[0], X.shape[2:])
        return irim_rollout(self.model_, X, FourierOperator(masks))[0]

    def score(self, X, y=None, masks=None):
        """Negative mean NMSE of reconstructions of images ``X`` from noiseless data."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        if masks is None:
            raise ValueError("score needs the sampling masks")
        masks = check_masks(masks, X.shape[0], X.shape[2:])
        A = FourierOperator(masks)
        est = irim_rollout(self.model_, A.forward(X), A)[0]
        return -float(np.mean([nmse(e, x) for e, x in zip(est, X)]))
