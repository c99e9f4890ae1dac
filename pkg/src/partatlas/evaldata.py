"""Ground-truth containers shared by the generator and the eval bench."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError
from .geometry import Region

__all__ = ["GTBox", "GroundTruth"]


@dataclass(frozen=True)
class GTBox:
    concept: str
    region: Region
    difficult: bool = False
    truncated: bool = False

    @property
    def ignored(self) -> bool:
        """Flagged boxes are excluded from evaluation: matches to them are
        neither true nor false positives."""
        return self.difficult or self.truncated


class GroundTruth:
    """Per-image annotated boxes over a fixed concept vocabulary."""

    def __init__(self, vocabulary: tuple[str, ...]):
        self.vocabulary = tuple(vocabulary)
        self._by_image: dict[str, list[GTBox]] = {}

    def add(self, image_id: str, box: GTBox) -> None:
        if box.concept not in self.vocabulary:
            raise DataError(
                f"concept {box.concept!r} is not in the vocabulary {self.vocabulary}"
            )
        self._by_image.setdefault(image_id, []).append(box)

    def boxes(self, image_id: str, concept: str | None = None) -> list[GTBox]:
        boxes = self._by_image.get(image_id, [])
        if concept is None:
            return list(boxes)
        return [b for b in boxes if b.concept == concept]

    def image_ids(self) -> list[str]:
        return sorted(self._by_image)

    def require_concept(self, concept: str) -> None:
        if concept not in self.vocabulary:
            raise DataError(f"unknown concept {concept!r}; vocabulary is {self.vocabulary}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroundTruth):
            return NotImplemented
        return self.vocabulary == other.vocabulary and self._by_image == other._by_image
