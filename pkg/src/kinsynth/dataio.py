"""Manifest ingestion, image loading and deterministic batching.

Images are handled as ``FaceImage`` arrays: float32, shape ``(S, S, 3)``,
values in ``[-1, 1]``.  Batches stack them along a leading axis.
"""

from __future__ import annotations

import csv
import enum
import functools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageLoadError, ManifestError, SchemaError

log = logging.getLogger(__name__)


class Gender(enum.IntEnum):
    MALE = 0
    FEMALE = 1

    @classmethod
    def parse(cls, value) -> "Gender":
        """Accept ``M``/``F``, ``male``/``female`` and CelebA's ``1``/``-1``."""
        if isinstance(value, Gender):
            return value
        key = str(value).strip().lower()
        if key in ("m", "male", "1", "+1"):
            return cls.MALE
        if key in ("f", "female", "-1"):
            return cls.FEMALE
        raise ValueError(f"unrecognised gender value {value!r}")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(2, dtype=np.float32)
        v[int(self)] = 1.0
        return v

    def flipped(self) -> "Gender":
        return Gender(1 - int(self))


class Relation(enum.Enum):
    FS = "FS"
    FD = "FD"
    MS = "MS"
    MD = "MD"

    @property
    def parent_gender(self) -> Gender:
        return Gender.MALE if self.value[0] == "F" else Gender.FEMALE

    @property
    def child_gender(self) -> Gender:
        return Gender.MALE if self.value[1] == "S" else Gender.FEMALE

    @classmethod
    def from_genders(cls, parent: Gender, child: Gender) -> "Relation":
        return cls(("F" if parent == Gender.MALE else "M") + ("S" if child == Gender.MALE else "D"))


@dataclass(frozen=True)
class KinPair:
    parent_path: Path
    child_path: Path
    relation: Relation
    child_id: str
    parent_id: str

    @property
    def child_gender(self) -> Gender:
        return self.relation.child_gender

    @property
    def parent_gender(self) -> Gender:
        return self.relation.parent_gender


@dataclass(frozen=True)
class RegFace:
    path: Path
    gender: Gender


def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _open_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def load_pair_manifest(path) -> list[KinPair]:
    """Read a ``parent,child,relation`` manifest.

    Optional columns ``child_id``/``parent_id`` name identities (default: the
    image path) and ``parent_gender``/``child_gender`` are cross-checked
    against the relation tag.  Relative image paths resolve against the
    manifest's directory.
    """
    path = _open_manifest(path)
    base = path.parent
    pairs: list[KinPair] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            warnings.warn(f"pair manifest {path} is empty", stacklevel=2)
            return pairs
        cols = [h.strip() for h in header]
        missing = {"parent", "child", "relation"} - set(cols)
        if missing:
            raise SchemaError(f"{path}: header lacks column(s) {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(cols):
                raise ManifestError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(row)}")
            rec = {k: v.strip() for k, v in zip(cols, row)}
            if not rec["parent"] or not rec["child"]:
                raise ManifestError(f"{path}:{lineno}: empty image path")
            try:
                rel = Relation(rec["relation"].upper())
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: unknown relation {rec['relation']!r} (expected FS, FD, MS or MD)"
                ) from None
            for field, expected in (("parent_gender", rel.parent_gender), ("child_gender", rel.child_gender)):
                if rec.get(field):
                    try:
                        given = Gender.parse(rec[field])
                    except ValueError as exc:
                        raise ManifestError(f"{path}:{lineno}: {exc}") from None
                    if given != expected:
                        raise ManifestError(
                            f"{path}:{lineno}: {field}={given.name.lower()} contradicts relation {rel.value}"
                        )
            pairs.append(
                KinPair(
                    parent_path=_resolve(base, rec["parent"]),
                    child_path=_resolve(base, rec["child"]),
                    relation=rel,
                    child_id=rec.get("child_id") or rec["child"],
                    parent_id=rec.get("parent_id") or rec["parent"],
                )
            )
    if not pairs:
        warnings.warn(f"pair manifest {path} has no rows", stacklevel=2)
    return pairs


_GENDER_COLUMNS = ("gender", "Male", "male")


def load_attr_manifest(path) -> list[RegFace]:
    """Read a regularization-face manifest, keeping only the gender attribute.

    The gender column may be called ``gender`` or CelebA's ``Male``; the image
    column ``path`` (or ``image_id``).  Every other attribute is dropped.
    """
    path = _open_manifest(path)
    base = path.parent
    faces: list[RegFace] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            warnings.warn(f"attribute manifest {path} is empty", stacklevel=2)
            return faces
        cols = [h.strip() for h in header]
        gcol = next((c for c in _GENDER_COLUMNS if c in cols), None)
        if gcol is None:
            raise SchemaError(f"{path}: no gender column (looked for {', '.join(_GENDER_COLUMNS)})")
        pcol = next((c for c in ("path", "image_id") if c in cols), None)
        if pcol is None:
            raise SchemaError(f"{path}: no image path column")
        gi, pi = cols.index(gcol), cols.index(pcol)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(cols):
                raise ManifestError(f"{path}:{lineno}: expected {len(cols)} fields, got {len(row)}")
            try:
                gender = Gender.parse(row[gi])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            faces.append(RegFace(path=_resolve(base, row[pi].strip()), gender=gender))
    return faces


def load_image(path, side: int) -> np.ndarray:
    """Decode an image, resize to ``side x side`` and map [0, 255] to [-1, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA"):
                if im.mode in ("L", "LA", "I", "I;16", "F", "1"):
                    warnings.warn(f"{path}: grayscale image replicated to 3 channels", stacklevel=2)
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


@functools.lru_cache(maxsize=16384)
def _cached_image(path: str, side: int) -> np.ndarray:
    arr = load_image(path, side)
    arr.flags.writeable = False
    return arr


def clear_image_cache() -> None:
    _cached_image.cache_clear()


def split_validation(pairs: Sequence, n: int, seed: int) -> tuple[list, list]:
    """Draw ``n`` validation items without replacement; the rest is train.

    Both halves keep the input order.
    """
    if n < 0 or n > len(pairs):
        raise ValueError(f"cannot draw {n} validation items from {len(pairs)}")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(pairs), size=n, replace=False).tolist())
    train = [p for i, p in enumerate(pairs) if i not in chosen]
    val = [p for i, p in enumerate(pairs) if i in chosen]
    return train, val


@dataclass(frozen=True)
class KinBatch:
    parent: np.ndarray  # (N, S, S, 3)
    child: np.ndarray
    child_cond: np.ndarray  # (N, 2) one-hot
    parent_cond: np.ndarray
    child_ids: tuple[str, ...]
    indices: tuple[int, ...]


@dataclass(frozen=True)
class FaceBatch:
    images: np.ndarray
    cond: np.ndarray
    indices: tuple[int, ...]


def batch_indices(n: int, size: int, seed: int, step: int) -> list[int]:
    """Source indices for batch ``step``: a per-epoch seeded permutation, read
    sequentially so that consecutive batches walk through the epoch."""
    if n <= 0:
        raise ValueError("cannot batch an empty source")
    if size < 1:
        raise ValueError(f"batch size must be >= 1, got {size}")
    out = []
    perms: dict[int, np.ndarray] = {}
    for pos in range(step * size, step * size + size):
        epoch, offset = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perms[epoch][offset]))
    return out


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def make_batch(source: Sequence, size: int, seed: int, step: int, side: int,
               hflip: bool = False, workers: int = 0):
    """Assemble batch ``step`` from a list of ``KinPair`` or ``RegFace``.

    The result depends only on ``(source, size, seed, step, side, hflip)``;
    ``workers`` only parallelises decoding.
    """
    if not source:
        raise ValueError("cannot batch an empty source")
    idx = batch_indices(len(source), size, seed, step)
    items = [source[i] for i in idx]
    kin = isinstance(items[0], KinPair)
    paths = [str(p) for it in items for p in ((it.parent_path, it.child_path) if kin else (it.path,))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            imgs = list(pool.map(lambda p: _cached_image(p, side), paths))
    else:
        imgs = [_cached_image(p, side) for p in paths]
    stack = np.stack(imgs).astype(np.float32)
    if hflip:
        flips = np.random.default_rng([seed, step, 1]).random(len(items)) < 0.5
        per = 2 if kin else 1
        for j, f in enumerate(flips):
            if f:
                stack[j * per:(j + 1) * per] = stack[j * per:(j + 1) * per, :, ::-1]
    if kin:
        return KinBatch(
            parent=_freeze(np.ascontiguousarray(stack[0::2])),
            child=_freeze(np.ascontiguousarray(stack[1::2])),
            child_cond=_freeze(np.stack([it.child_gender.one_hot for it in items])),
            parent_cond=_freeze(np.stack([it.parent_gender.one_hot for it in items])),
            child_ids=tuple(it.child_id for it in items),
            indices=tuple(idx),
        )
    return FaceBatch(
        images=_freeze(stack),
        cond=_freeze(np.stack([it.gender.one_hot for it in items])),
        indices=tuple(idx),
    )


def write_png(arr: np.ndarray, path) -> None:
    """Save a FaceImage (values in [-1, 1]) as an 8-bit PNG."""
    img = np.clip(np.rint((np.asarray(arr) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)
