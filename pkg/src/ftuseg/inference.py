"""Flip-averaged inference, organ/domain thresholds, and RLE submissions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Domain, Organ, flip_h, flip_v
from .tensor import Array, Tensor, sigmoid_array


def tta_predict(model, image) -> Array:
    """Mean sigmoid probability map over the four flip variants of ``image``.

    Each variant's prediction is flipped back before averaging.  The mean is
    taken pairwise, ((identity + h) + (v + hv)) / 4, so flipping the input
    permutes whole sub-sums and the result is bitwise flip-equivariant.
    """
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)

    def prob(arr: Array) -> Array:
        logits, _ = model.forward(Tensor(arr))
        return sigmoid_array(logits.data)

    p_i = prob(x)
    p_h = flip_h(prob(flip_h(x)))
    p_v = flip_v(prob(flip_v(x)))
    p_hv = flip_h(flip_v(prob(flip_v(flip_h(x)))))
    return ((p_i + p_h) + (p_v + p_hv)) / 4.0


def threshold_mask(probs: Array, threshold: float) -> Array:
    """Binary mask from probabilities; strictly-above wins, ties go background."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    return (np.asarray(probs) > threshold).astype(np.float64)


@dataclass
class ThresholdTable:
    """Per-(organ, domain) probability cutoffs used to binarize predictions."""

    table: dict[tuple[Organ, Domain], float] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "ThresholdTable":
        # Lung tissue segments best with far looser cutoffs than the rest.
        table: dict[tuple[Organ, Domain], float] = {}
        for organ in Organ:
            table[(organ, Domain.HPA)] = 0.5
            table[(organ, Domain.HUBMAP)] = 0.4
        table[(Organ.LUNG, Domain.HPA)] = 0.15
        table[(Organ.LUNG, Domain.HUBMAP)] = 0.1
        return cls(table=table)

    def lookup(self, organ, domain) -> float:
        key = (Organ(organ), Domain(domain))
        if key not in self.table:
            raise KeyError(f"no threshold for {key[0].value}/{key[1].value}")
        return self.table[key]

    def with_overrides(self, overrides: dict[tuple[Organ, Domain], float]) -> "ThresholdTable":
        merged = dict(self.table)
        for key, value in overrides.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"threshold override {value} outside [0, 1]")
            merged[(Organ(key[0]), Domain(key[1]))] = float(value)
        return ThresholdTable(table=merged)


# -- run-length encoding -----------------------------------------------------


def rle_encode(mask: Array) -> str:
    """Row-major RLE: 1-indexed ``start length`` pairs over the flat mask."""
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected [H, W] or [1, H, W] mask, got shape {mask.shape}")
    flat = (arr.reshape(-1) != 0).astype(np.int8)
    padded = np.concatenate([[0], flat, [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1) + 1  # 1-indexed
    ends = np.flatnonzero(edges == -1) + 1
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def rle_decode(text: str, shape: tuple[int, int], column_major: bool = False) -> Array:
    """Inverse of :func:`rle_encode`; returns a ``[1, H, W]`` binary mask.

    ``column_major=True`` reads runs over the column-major flattening (the
    histology competition convention).  Runs must be 1-indexed, sorted,
    non-overlapping, and inside the mask.
    """
    h, w = int(shape[0]), int(shape[1])
    if h < 1 or w < 1:
        raise ValueError(f"mask shape must be positive, got {shape}")
    flat = np.zeros(h * w, dtype=np.float64)
    tokens = text.split()
    if tokens:
        if len(tokens) % 2:
            raise ValueError("RLE text must hold start/length pairs")
        try:
            numbers = [int(tok) for tok in tokens]
        except ValueError as exc:
            raise ValueError(f"malformed RLE token: {exc}") from None
        prev_end = 0
        for start, length in zip(numbers[::2], numbers[1::2]):
            if start < 1 or length < 1:
                raise ValueError(f"RLE runs must be positive, got {start} {length}")
            if start <= prev_end:
                raise ValueError(f"RLE runs overlap or are unsorted at start {start}")
            end = start + length - 1
            if end > h * w:
                raise ValueError(f"RLE run {start} {length} exceeds {h * w} pixels")
            flat[start - 1 : end] = 1.0
            prev_end = end
    order = "F" if column_major else "C"
    return flat.reshape((h, w), order=order)[None]
