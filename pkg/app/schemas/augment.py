from enum import Enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import Self


class AugmentationId(str, Enum):
    SOBEL_FILTER = "sobel_filter"
    INTENSITY_MAPPING = "intensity_mapping"
    SYNTHETIC_MODALITY = "synthetic_modality"
    MASK_CONTOUR = "mask_contour"
    MASK_DILATE = "mask_dilate"
    MASK_INVERT = "mask_invert"
    PERMUTE_CHANNELS = "permute_channels"
    DUPLICATE_CHANNELS = "duplicate_channels"
    SPATIAL = "spatial"


MASK_AUGMENTATIONS = frozenset({
    AugmentationId.MASK_CONTOUR,
    AugmentationId.MASK_DILATE,
    AugmentationId.MASK_INVERT,
})
INTENSITY_AUGMENTATIONS = frozenset({
    AugmentationId.SOBEL_FILTER,
    AugmentationId.INTENSITY_MAPPING,
    AugmentationId.SYNTHETIC_MODALITY,
})
CHANNEL_AUGMENTATIONS = frozenset({
    AugmentationId.PERMUTE_CHANNELS,
    AugmentationId.DUPLICATE_CHANNELS,
})


class AugNode(BaseModel):
    """Узел дерева аугментаций: compose, one_of или leaf."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["compose", "one_of", "leaf"]
    p: float = Field(1.0, ge=0.0, le=1.0)
    children: list["AugNode"] = Field(default_factory=list)
    aug: AugmentationId | None = None
    params: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_shape(self) -> Self:
        if self.kind == "leaf":
            if self.aug is None or self.children:
                raise ValueError("leaf nodes need `aug` and no children")
        else:
            if self.aug is not None or not self.children:
                raise ValueError(f"{self.kind} nodes need children and no `aug`")
        return self


def leaf(aug: AugmentationId, p: float = 1.0, **params: float) -> AugNode:
    return AugNode(kind="leaf", aug=aug, p=p, params=params)


def compose(*children: AugNode, p: float = 1.0) -> AugNode:
    return AugNode(kind="compose", children=list(children), p=p)


def one_of(*children: AugNode, p: float = 1.0) -> AugNode:
    return AugNode(kind="one_of", children=list(children), p=p)


def default_tree() -> AugNode:
    """
    Дерево по умолчанию: маски, интенсивности, каналы, геометрия (в этом порядке).

    Необязательные узлы применяются с вероятностью 0.5, one_of выбирает равновероятно.
    """
    return compose(
        compose(
            one_of(
                leaf(AugmentationId.MASK_CONTOUR),
                leaf(AugmentationId.MASK_DILATE, radius=1),
                p=0.5,
            ),
            leaf(AugmentationId.MASK_INVERT, p=0.5),
        ),
        one_of(
            leaf(AugmentationId.SOBEL_FILTER),
            leaf(AugmentationId.INTENSITY_MAPPING, n_bins=8),
            leaf(AugmentationId.SYNTHETIC_MODALITY),
            p=0.5,
        ),
        compose(
            leaf(AugmentationId.PERMUTE_CHANNELS, p=0.5),
            leaf(AugmentationId.DUPLICATE_CHANNELS, p=0.5, p_channel=0.5),
        ),
        leaf(AugmentationId.SPATIAL, p=0.5),
    )

