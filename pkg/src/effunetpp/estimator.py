"""
scikit-learn style front end.

``SegmentationEstimator`` wraps model construction and training behind
``fit`` / ``predict`` / ``predict_proba`` / ``score`` so that it composes
with ``clone``, ``get_params`` and parameter searches. ``X`` is a stack of
grayscale images ``(N, H, W)`` (uint8, or float in [0, 1]); ``y`` holds
integer label masks of the same shape.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_masks
from .architecture import ModelSpec, build_model
from .data import AnnotatedImage, AugmentationPolicy
from .losses import LossConfig
from .training import TrainConfig, evaluate, train


class SegmentationEstimator(BaseEstimator):
    """Nested-decoder segmentation model trained with the penalized dice + focal loss.

    ``lr_drops=None`` drops the learning rate tenfold at one and two thirds
    of ``epochs``.
    """

    def __init__(
        self,
        encoder_id: str = "tiny",
        decoder_family: str = "efficient_unetpp",
        attention: Optional[str] = None,
        decoder_widths="default",
        encoder_widths: Optional[Sequence[int]] = None,
        pretrained: bool = False,
        freeze_encoder: bool = False,
        epochs: int = 150,
        batch_size: int = 8,
        lr: float = 1e-3,
        lr_drops: Optional[Sequence[int]] = None,
        lambda_: float = 1.0,
        k: float = 0.75,
        gamma: float = 2.0,
        alpha: float = 0.25,
        copies_per_sample: int = 3,
        val_fraction: float = 0.1,
        random_state: int = 0,
        device: str = "cpu",
    ):
        self.encoder_id = encoder_id
        self.decoder_family = decoder_family
        self.attention = attention
        self.decoder_widths = decoder_widths
        self.encoder_widths = encoder_widths
        self.pretrained = pretrained
        self.freeze_encoder = freeze_encoder
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drops = lr_drops
        self.lambda_ = lambda_
        self.k = k
        self.gamma = gamma
        self.alpha = alpha
        self.copies_per_sample = copies_per_sample
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.device = device

    def _model_spec(self) -> ModelSpec:
        return ModelSpec(
            encoder_id=self.encoder_id,
            decoder_family=self.decoder_family,
            decoder_widths=self.decoder_widths,
            attention=self.attention,
            pretrained=self.pretrained,
            freeze_encoder=self.freeze_encoder,
            encoder_widths=self.encoder_widths,
        )

    def _train_config(self) -> TrainConfig:
        drops = self.lr_drops
        if drops is None:
            drops = sorted({d for d in (round(self.epochs / 3), round(2 * self.epochs / 3)) if d > 1})
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_drops=drops,
            seeds=(self.random_state,),
            device=self.device,
            val_fraction=self.val_fraction,
        )

    def _loss_config(self) -> LossConfig:
        return LossConfig(lambda_=self.lambda_, k=self.k, gamma=self.gamma, alpha=self.alpha)

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        spec = self._model_spec()
        train_cfg, loss_cfg = self._train_config(), self._loss_config()
        policy = AugmentationPolicy(copies_per_sample=self.copies_per_sample)
        samples = [AnnotatedImage(img, m) for img, m in zip(X, y)]
        torch.manual_seed(self.random_state)
        model = build_model(spec)
        self.history_ = train(model, samples, train_cfg, loss_cfg, policy, seed=self.random_state)
        self.model_ = model.eval()
        self.classes_ = np.arange(spec.num_classes)
        self.n_classes_ = spec.num_classes
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities of shape ``(N, C, H, W)``."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        out = []
        with torch.no_grad():
            for start in range(0, len(X), self.batch_size):
                x = torch.from_numpy(X[start : start + self.batch_size]).float().div_(255.0).unsqueeze(1)
                out.append(self.model_.predict_proba(x.to(self.device)).cpu().numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        """Hard label masks ``(N, H, W)``."""
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean per-image generalized dice score."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        y = check_masks(y, X, self.n_classes_)
        _, mean = evaluate(self.model_, [AnnotatedImage(i, m) for i, m in zip(X, y)], self.device, self.batch_size)
        return mean["gds"]
