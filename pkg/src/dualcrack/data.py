"""Dataset discovery, decoding and batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .objective import derive_edge_gt

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# split -> (image dir, mask dir) relative to the dataset root
LAYOUTS: dict[str, dict[str, tuple[str, str]]] = {
    "DeepCrack": {"train": ("train_img", "train_lab"), "test": ("test_img", "test_lab")},
    "CRACK500": {"train": ("train/images", "train/masks"), "val": ("val/images", "val/masks"),
                 "test": ("test/images", "test/masks")},
    "CFD": {"train": ("train/images", "train/masks"), "test": ("test/images", "test/masks")},
    "CT260": {"all": ("images", "masks")},
    "synthetic": {"train": ("train/images", "train/masks"), "val": ("val/images", "val/masks"),
                  "test": ("test/images", "test/masks")},
}

EXPECTED_COUNTS: dict[str, dict[str, int]] = {
    "CFD": {"train": 71, "test": 46},
    "DeepCrack": {"train": 300, "test": 237},
    "CRACK500": {"train": 1500, "val": 200, "test": 1300},
    "CT260": {"all": 260},
}


class DatasetError(RuntimeError):
    pass


class MissingMaskError(DatasetError):
    def __init__(self, stems: Sequence[str]) -> None:
        self.stems = list(stems)
        super().__init__(f"no mask for image stem(s): {', '.join(self.stems)}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: Path
    split: str = "train"
    resize: int = 0  # square resize before padding; 0 keeps native size
    multiple: int = 32

    def __post_init__(self) -> None:
        if self.name not in LAYOUTS:
            raise DatasetError(f"unknown dataset {self.name!r}; choose from {sorted(LAYOUTS)}")
        if self.split not in LAYOUTS[self.name]:
            raise DatasetError(f"{self.name} has no split {self.split!r}; "
                               f"available: {sorted(LAYOUTS[self.name])}")

    @property
    def dirs(self) -> tuple[Path, Path]:
        img, mask = LAYOUTS[self.name][self.split]
        return Path(self.root) / img, Path(self.root) / mask


@dataclass
class Sample:
    stem: str
    image: np.ndarray  # float32 [3,H,W] in [0,1], padded
    mask: np.ndarray  # uint8 [1,H,W] in {0,1}, padded
    orig_hw: tuple[int, int]


@dataclass
class SampleBatch:
    images: np.ndarray  # [B,3,H,W]
    masks: np.ndarray  # [B,1,H,W]
    edges: np.ndarray  # [B,1,H,W]
    stems: list[str]
    orig_hw: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.stems)


def _files_by_stem(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            out.setdefault(p.stem, p)
    return out


def pair_files(spec: DatasetSpec) -> list[tuple[str, Path, Path]]:
    """Sorted (stem, image, mask) triples.  Every image must have a mask."""
    img_dir, mask_dir = spec.dirs
    images = _files_by_stem(img_dir)
    masks = _files_by_stem(mask_dir)
    missing = [s for s in images if s not in masks]
    if missing:
        raise MissingMaskError(missing)
    return [(s, images[s], masks[s]) for s in sorted(images)]


def pad_to_multiple(arr: np.ndarray, multiple: int, mode: str = "reflect") -> np.ndarray:
    """Pad the trailing two axes (bottom/right) up to a multiple of ``multiple``."""
    h, w = arr.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not (ph or pw):
        return arr
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    if mode == "reflect" and (h < 2 or w < 2):
        mode = "edge"
    return np.pad(arr, widths, mode=mode)


def decode_image(path: Path, resize: int = 0) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if resize:
            im = im.resize((resize, resize), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def decode_mask(path: Path, resize: int = 0) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if resize:
            im = im.resize((resize, resize), Image.NEAREST)
        arr = np.asarray(im)
    return (arr >= 128).astype(np.uint8)[None]


@dataclass
class CrackDataset:
    spec: DatasetSpec
    samples: list[Sample] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def stems(self) -> list[str]:
        return [s.stem for s in self.samples]

    def batches(self, batch_size: int, order: Optional[Sequence[int]] = None) -> Iterator[SampleBatch]:
        idx = list(range(len(self.samples))) if order is None else list(order)
        for start in range(0, len(idx), batch_size):
            chunk = [self.samples[i] for i in idx[start:start + batch_size]]
            yield collate(chunk)


def collate(samples: Sequence[Sample]) -> SampleBatch:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DatasetError(f"cannot batch differently sized samples: {sorted(shapes)}")
    masks = np.stack([s.mask for s in samples])
    return SampleBatch(
        images=np.stack([s.image for s in samples]),
        masks=masks,
        edges=derive_edge_gt(masks[:, 0])[:, None],
        stems=[s.stem for s in samples],
        orig_hw=[s.orig_hw for s in samples],
    )


def load_dataset(spec: DatasetSpec) -> CrackDataset:
    """Decode every image/mask pair of a split, in sorted-stem order."""
    ds = CrackDataset(spec)
    triples = pair_files(spec)
    if not triples:
        log.warning("dataset %s/%s at %s is empty", spec.name, spec.split, spec.root)
        return ds
    for stem, ip, mp in triples:
        try:
            img = decode_image(ip, spec.resize)
            mask = decode_mask(mp, spec.resize)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            log.warning("skipping unreadable sample %s: %s", stem, exc)
            ds.skipped.append(stem)
            continue
        if img.shape[1:] != mask.shape[1:]:
            log.warning("skipping %s: image %s and mask %s differ", stem, img.shape, mask.shape)
            ds.skipped.append(stem)
            continue
        hw = img.shape[1:]
        ds.samples.append(Sample(stem, pad_to_multiple(img, spec.multiple),
                                 pad_to_multiple(mask, spec.multiple), (int(hw[0]), int(hw[1]))))
    expected = EXPECTED_COUNTS.get(spec.name, {}).get(spec.split)
    if expected is not None and len(ds) != expected:
        log.info("%s/%s: %d samples (complete dataset has %d)", spec.name, spec.split, len(ds), expected)
    return ds


def split_stems(root: Path, name: str) -> dict[str, list[str]]:
    """Stems per split without decoding (used for split-disjointness checks)."""
    out = {}
    for split in LAYOUTS[name]:
        out[split] = [s for s, _, _ in pair_files(DatasetSpec(name, Path(root), split))]
    return out
