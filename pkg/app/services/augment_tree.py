"""Геометрические аугментации и интерпретатор дерева Compose/OneOf над эпизодами."""
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from app.core.exceptions import AugmentationError
from app.models.episode import Episode, ImagePair
from app.schemas.augment import AugmentationId, AugNode
from app.schemas.sampler import TaskKind
from app.services import augmentations as aug
from app.utils.logging import app_logger as logger
from app.utils.rng import child_seed, make_rng

# Аугментации, исключаемые из дерева для конкретных задач
PRUNED_AUGMENTATIONS: dict[TaskKind, frozenset[AugmentationId]] = {
    TaskKind.INPAINTING: frozenset({AugmentationId.MASK_CONTOUR, AugmentationId.MASK_DILATE}),
    TaskKind.MODALITY_TRANSFER: frozenset({AugmentationId.SOBEL_FILTER, AugmentationId.SYNTHETIC_MODALITY}),
}
NO_FLIP_TASKS = frozenset({TaskKind.SEGMENTATION})


@dataclass(frozen=True)
class SpatialTransform:
    """
    Аффинное преобразование вокруг центра изображения с опциональным упругим полем.

    angle в градусах, shift в пикселях (dy, dx), elastic: смещения [2, H, W] или None.
    """

    angle: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    flip: bool = False
    elastic: np.ndarray | None = None

    @property
    def is_identity(self) -> bool:
        return (
            self.angle == 0.0 and self.shift == (0.0, 0.0) and self.scale == 1.0
            and not self.flip and (self.elastic is None or not np.any(self.elastic))
        )

    def coordinates(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        if self.flip:
            xx = (w - 1) - xx
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = np.deg2rad(self.angle)
        cos, sin = np.cos(theta) / self.scale, np.sin(theta) / self.scale
        dy, dx = yy - cy - self.shift[0], xx - cx - self.shift[1]
        src_y = cos * dy - sin * dx + cy
        src_x = sin * dy + cos * dx + cx
        if self.elastic is not None:
            src_y = src_y + self.elastic[0]
            src_x = src_x + self.elastic[1]
        return np.stack([src_y, src_x])

    def apply(self, img: np.ndarray, order: int) -> np.ndarray:
        """Деформирует [..., H, W]: order=1 для интенсивностей, order=0 для масок и меток."""
        if self.is_identity:
            return img.copy()
        coords = self.coordinates(img.shape[-2:])
        flat = img.reshape(-1, *img.shape[-2:])
        out = np.stack([
            ndimage.map_coordinates(channel, coords, order=order, mode="constant", cval=0)
            for channel in flat
        ])
        return out.reshape(img.shape).astype(img.dtype)


def elastic_field(shape: tuple[int, int], amplitude: float, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Смещения на грубой сетке grid×grid, билинейно растянутые до размера изображения."""
    h, w = shape
    coarse = rng.uniform(-amplitude, amplitude, size=(2, grid, grid))
    return np.stack([
        ndimage.zoom(c, (h / grid, w / grid), order=1, mode="nearest", grid_mode=True)
        for c in coarse
    ])


def random_transform(
        shape: tuple[int, int],
        rng: np.random.Generator,
        max_rotation: float = 10.0,
        max_shift: float = 3.0,
        scale_range: tuple[float, float] = (0.9, 1.1),
        p_elastic: float = 0.5,
        elastic_amplitude: float = 2.0,
        p_flip: float = 0.5,
) -> SpatialTransform:
    angle = rng.uniform(-max_rotation, max_rotation)
    shift = tuple(rng.uniform(-max_shift, max_shift, size=2).tolist())
    scale = rng.uniform(*scale_range)
    elastic = elastic_field(shape, elastic_amplitude, rng) if rng.random() < p_elastic else None
    flip = bool(rng.random() < p_flip)
    return SpatialTransform(angle=angle, shift=shift, scale=scale, flip=flip, elastic=elastic)


def warp_input(x: np.ndarray, transform: SpatialTransform, mask_channel: int | None = None) -> np.ndarray:
    """
    Деформирует вход [C, H, W] билинейно.

    Канал маски дыр остается бинарным: дырой становится каждый пиксель, в интерполяцию
    которого попала дыра, и там же обнуляются остальные каналы. Вне дыр вход совпадает
    с так же деформированным неповрежденным изображением.
    """
    out = transform.apply(x, order=1)
    if mask_channel is None:
        return out
    holes = out[mask_channel] > 0
    others = [c for c in range(out.shape[0]) if c != mask_channel]
    out[others] = np.where(holes, 0, out[others])
    out[mask_channel] = holes
    return out


def warp_pair(
        pair: ImagePair,
        transform: SpatialTransform,
        mask_target: bool,
        mask_channel: int | None = None,
) -> ImagePair:
    """Одно и то же преобразование для входа, цели и анатомии пары."""
    return replace(
        pair,
        input=warp_input(pair.input, transform, mask_channel),
        target=transform.apply(pair.target, order=0 if mask_target else 1),
        seg_map=None if pair.seg_map is None else transform.apply(pair.seg_map, order=0),
        brain_mask=None if pair.brain_mask is None else transform.apply(pair.brain_mask, order=0),
    )


def spatial_augment(ep: Episode, seed: int | np.random.Generator, **params: float) -> Episode:
    """
    Случайная аффинная и упругая деформация, отражение для задач без сегментации.

    Каждая пара получает свое преобразование, вход и цель пары деформируются одинаково.

    Args:
        ep: Эпизод
        seed: Seed или генератор
        **params: Параметры random_transform (max_rotation, max_shift, scale_range, ...)

    Returns:
        Episode: Новый эпизод
    """
    rng = make_rng(seed)
    if ep.task_kind in NO_FLIP_TASKS:
        params["p_flip"] = 0.0
    mask_target = ep.loss_kind == "dice"
    shape = ep.input.shape[-2:]
    mask_channel = ep.meta.get("mask_channel")
    pairs = [warp_pair(p, random_transform(shape, rng, **params), mask_target, mask_channel) for p in ep.pairs]
    return ep.with_pairs(pairs)


def prune_tree(tree: AugNode, kind: TaskKind) -> AugNode | None:
    """
    Убирает из дерева аугментации, запрещенные для задачи.

    Составные узлы без оставшихся детей удаляются целиком.
    """
    excluded = PRUNED_AUGMENTATIONS.get(kind, frozenset())
    if tree.kind == "leaf":
        return None if tree.aug in excluded else tree
    children = [c for c in (prune_tree(child, kind) for child in tree.children) if c is not None]
    if not children:
        return None
    return tree.model_copy(update={"children": children})


def _intensity_channels(ep: Episode, pair: ImagePair) -> list[int]:
    mask_channel = ep.meta.get("mask_channel")
    return [c for c in aug.nonzero_channels(pair.input) if c != mask_channel]


def _map_inputs(ep: Episode, fn) -> Episode:
    pairs = []
    for index, pair in enumerate(ep.pairs):
        x = pair.input.copy()
        for c in _intensity_channels(ep, pair):
            x[c] = fn(x[c], index, pair)
        pairs.append(replace(pair, input=x))
    return ep.with_pairs(pairs)


def _map_targets(ep: Episode, fn) -> Episode:
    return ep.with_pairs([replace(p, target=fn(p.target[0])[None]) for p in ep.pairs])


def apply_leaf(ep: Episode, node: AugNode, seed: int) -> Episode:
    """
    Применяет одну аугментацию ко всему эпизоду согласованно.

    Маски меняют цели (только в задачах с маской), интенсивности меняют входы с общими
    параметрами на весь эпизод, каналы меняют все входы.
    """
    kind = node.aug
    params = node.params
    rng = np.random.default_rng(seed)

    if kind == AugmentationId.MASK_CONTOUR:
        return _map_targets(ep, aug.mask_contour) if ep.loss_kind == "dice" else ep
    if kind == AugmentationId.MASK_DILATE:
        radius = int(params.get("radius", 1))
        return _map_targets(ep, lambda m: aug.mask_dilate(m, radius)) if ep.loss_kind == "dice" else ep
    if kind == AugmentationId.MASK_INVERT:
        return _map_targets(ep, aug.mask_invert) if ep.loss_kind == "dice" else ep

    if kind == AugmentationId.SOBEL_FILTER:
        return _map_inputs(ep, lambda img, i, p: aug.sobel_filter(img))
    if kind == AugmentationId.INTENSITY_MAPPING:
        n_bins = int(params.get("n_bins", 8))
        targets = aug.intensity_targets(n_bins, rng)
        return _map_inputs(ep, lambda img, i, p: aug.intensity_mapping(img, n_bins, targets=targets))
    if kind == AugmentationId.SYNTHETIC_MODALITY:
        channels = _intensity_channels(ep, ep.query)
        if not channels:
            return ep
        channel = channels[int(rng.integers(len(channels)))]
        class_seed = child_seed(rng)
        pairs = []
        for index, pair in enumerate(ep.pairs):
            if pair.seg_map is None or pair.brain_mask is None:
                raise AugmentationError("synthetic_modality requires seg_map and brain_mask on every pair")
            x = pair.input.copy()
            x[channel] = aug.synthetic_modality(
                pair.seg_map, x[channel], pair.brain_mask,
                seed=class_seed, noise_seed=child_seed(rng),
            )
            pairs.append(replace(pair, input=x))
        return ep.with_pairs(pairs)

    if kind == AugmentationId.PERMUTE_CHANNELS:
        perm = rng.permutation(ep.input.shape[0]).tolist()
        meta = {}
        if ep.meta.get("mask_channel") is not None:
            meta["mask_channel"] = perm.index(ep.meta["mask_channel"])
        pairs = [replace(p, input=aug.permute_channels(p.input, perm)) for p in ep.pairs]
        return ep.with_pairs(pairs, **meta)
    if kind == AugmentationId.DUPLICATE_CHANNELS:
        p_channel = float(params.get("p_channel", 0.5))
        exclude = () if ep.meta.get("mask_channel") is None else (ep.meta["mask_channel"],)
        pairs = [
            replace(p, input=aug.duplicate_channels(p.input, p_channel, child_seed(rng), exclude))
            for p in ep.pairs
        ]
        return ep.with_pairs(pairs)

    if kind == AugmentationId.SPATIAL:
        spatial = {k: v for k, v in params.items() if k != "scale_min" and k != "scale_max"}
        if "scale_min" in params or "scale_max" in params:
            spatial["scale_range"] = (params.get("scale_min", 0.9), params.get("scale_max", 1.1))
        return spatial_augment(ep, rng, **spatial)

    raise AugmentationError(f"Unknown augmentation: {kind}")


def _walk(ep: Episode, node: AugNode, rng: np.random.Generator, applied: list[str]) -> Episode:
    if rng.random() >= node.p:
        return ep
    if node.kind == "leaf":
        applied.append(node.aug.value)
        return apply_leaf(ep, node, child_seed(rng))
    if node.kind == "compose":
        for child in node.children:
            ep = _walk(ep, child, rng, applied)
        return ep
    if node.kind == "one_of":
        return _walk(ep, node.children[int(rng.integers(len(node.children)))], rng, applied)
    raise AugmentationError(f"Malformed augmentation tree node: {node.kind}")


def apply_tree(ep: Episode, tree: AugNode, seed: int | np.random.Generator) -> Episode:
    """
    Рекурсивно интерпретирует дерево: compose слева направо, one_of выбирает одного ребенка,
    каждый узел применяется с вероятностью p.

    Дерево сначала обрезается под тип задачи эпизода. Результат детерминирован по seed.

    Args:
        ep: Эпизод
        tree: Дерево аугментаций
        seed: Seed или генератор

    Returns:
        Episode: Эпизод, в meta["augmentations"] перечислены примененные листья
    """
    pruned = prune_tree(tree, ep.task_kind)
    if pruned is None:
        return ep.with_pairs(ep.pairs, augmentations=[])
    rng = make_rng(seed)
    applied: list[str] = []
    out = _walk(ep, pruned, rng, applied)
    logger.debug(f"Augmented {ep.task_kind.value} episode with {applied or 'nothing'}")
    return out.with_pairs(out.pairs, augmentations=applied)
