"""Synthetic feature simulator for desk-scale training and evaluation.

Stands in for GPU-scale visual/text encoders: each class gets a random
unit prototype in raw-image space and another in text space; records
sample around their prototypes with Gaussian noise.  An optional
crowding knob pulls chosen class prototypes toward one shared direction
in image space only, modelling visually-similar but semantically
distinct designs: the regime where class-level supervision pays off and
instance-only training struggles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class FeatureSet:
    """Per-record raw image features and paired text features."""

    image_raw: np.ndarray  # (N, d_in)
    text_feats: np.ndarray  # (N, d_text)
    class_ids: tuple


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def class_prototype_features(
    class_ids: Sequence[str],
    d_in: int = 32,
    d_text: int = 16,
    image_noise: float = 0.25,
    text_noise: float = 0.25,
    seed: int = 0,
    image_crowding: float = 0.0,
    crowded_classes: Optional[Sequence[str]] = None,
) -> FeatureSet:
    """Simulate encoder outputs for a list of per-record class labels.

    image_crowding in [0,1) blends the image prototypes of
    crowded_classes (default: every class) toward one shared random
    direction; text prototypes stay fully separated regardless.
    """
    class_ids = tuple(str(c) for c in class_ids)
    classes = sorted(set(class_ids))
    rng = np.random.default_rng(seed)
    img_proto = _unit_rows(rng.standard_normal((len(classes), d_in)))
    txt_proto = _unit_rows(rng.standard_normal((len(classes), d_text)))
    anchor = rng.standard_normal(d_in)
    anchor /= np.linalg.norm(anchor)
    if image_crowding > 0.0:
        targets = set(crowded_classes) if crowded_classes is not None else set(classes)
        for ci, cls in enumerate(classes):
            if cls not in targets:
                continue
            blended = (1.0 - image_crowding) * img_proto[ci] + image_crowding * anchor
            img_proto[ci] = blended / np.linalg.norm(blended)
    lookup = {c: i for i, c in enumerate(classes)}
    rows = np.array([lookup[c] for c in class_ids])
    image_raw = img_proto[rows] + image_noise * rng.standard_normal((len(class_ids), d_in))
    text_feats = txt_proto[rows] + text_noise * rng.standard_normal((len(class_ids), d_text))
    return FeatureSet(image_raw=image_raw, text_feats=text_feats, class_ids=class_ids)
