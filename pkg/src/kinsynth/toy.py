"""Synthetic cartoon faces for desk-scale runs.

A person is a small parameter vector (colours, face geometry, a cheek
mark).  Children inherit a blend of a parent's parameters; gender is drawn
as hair shape plus mouth colour so that it is visible to both the encoder
and the gender classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Gender, Relation, write_png

N_PARAMS = 16


@dataclass(frozen=True)
class Person:
    params: np.ndarray  # N_PARAMS values in [0, 1]
    gender: Gender
    child: bool = False


def random_person(rng: np.random.Generator, gender: Gender | None = None) -> Person:
    g = gender if gender is not None else Gender(int(rng.integers(2)))
    return Person(rng.random(N_PARAMS), g)


def inherit(parent: Person, rng: np.random.Generator, gender: Gender | None = None,
            heritability: float = 0.7) -> Person:
    g = gender if gender is not None else Gender(int(rng.integers(2)))
    p = heritability * parent.params + (1 - heritability) * rng.random(N_PARAMS)
    return Person(p, g, child=True)


def render(person: Person, side: int, rng: np.random.Generator | None = None,
           noise: float = 0.0, jitter: int = 0) -> np.ndarray:
    """Draw a FaceImage in [-1, 1]."""
    p = person.params
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32) / side
    if jitter and rng is not None:
        dy, dx = rng.integers(-jitter, jitter + 1, size=2) / side
        yy, xx = yy - dy, xx - dx
    bg = 0.15 + 0.7 * p[0:3]
    skin = 0.45 + 0.5 * p[3:6]
    hair = 0.05 + 0.6 * p[6:9]
    img = np.broadcast_to(bg, (side, side, 3)).copy()

    scale = 0.88 if person.child else 1.0
    cx, cy = 0.5, 0.55
    rx = scale * (0.22 + 0.1 * p[9])
    ry = scale * (0.28 + 0.08 * p[10])
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    top = cy - ry
    if person.gender == Gender.FEMALE:
        long_hair = (((xx - cx) / (rx * 1.35)) ** 2 + ((yy - (cy - 0.05)) / (ry * 1.15)) ** 2 <= 1.0)
        img[long_hair & ~face] = hair
        img[face] = skin
        fringe = face & (yy < top + 0.35 * ry)
        img[fringe] = hair
    else:
        img[face] = skin
        cap = face & (yy < top + 0.22 * ry)
        img[cap] = hair

    eye_dx = 0.07 + 0.06 * p[11]
    eye_y = cy - 0.05 + 0.06 * (p[12] - 0.5)
    eye_r = 0.025 + 0.02 * p[13]
    iris = 0.1 + 0.3 * p[6:9][::-1]
    for sx in (-1, 1):
        eye = (xx - (cx + sx * eye_dx)) ** 2 + (yy - eye_y) ** 2 <= eye_r ** 2
        img[eye] = iris

    mw = 0.06 + 0.07 * p[14]
    mouth = (np.abs(xx - cx) <= mw) & (np.abs(yy - (cy + 0.6 * ry)) <= 0.02)
    img[mouth] = (0.85, 0.1, 0.2) if person.gender == Gender.FEMALE else 0.6 * skin

    ang = 2 * np.pi * p[15]
    mx, my = cx + 0.6 * rx * np.cos(ang), cy + 0.5 * ry * np.sin(ang)
    mark = face & ((xx - mx) ** 2 + (yy - my) ** 2 <= 0.04 ** 2)
    img[mark] = 1.0 - skin

    out = img * 2.0 - 1.0
    if noise and rng is not None:
        out = out + rng.normal(0.0, noise, out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def identity_views(n_ids: int, views: int, side: int, seed: int = 0,
                   noise: float = 0.04, jitter: int = 1):
    """(images, labels) with ``views`` noisy, jittered renders per identity."""
    rng = np.random.default_rng(seed)
    people = [random_person(rng) for _ in range(n_ids)]
    imgs, labels = [], []
    for i, person in enumerate(people):
        for _ in range(views):
            imgs.append(render(person, side, rng, noise, jitter))
            labels.append(i)
    return np.stack(imgs), np.array(labels)


@dataclass(frozen=True)
class ToyPaths:
    root: Path
    train_pairs: Path
    val_pairs: Path
    attributes: Path


def make_toy_dataset(root, n_train: int = 48, n_val: int = 16, n_reg: int = 128,
                     side: int = 32, seed: int = 0, noise: float = 0.02) -> ToyPaths:
    """Write PNGs plus pair and attribute manifests under ``root``.

    Each family contributes one parent/child pair; relations cycle through
    FS, FD, MS, MD so every type is represented.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rels = list(Relation)

    def write_pairs(name, start, count):
        path = root / name
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["parent", "child", "relation", "parent_id", "child_id"])
            for f in range(start, start + count):
                rel = rels[f % 4]
                parent = random_person(rng, rel.parent_gender)
                child = inherit(parent, rng, rel.child_gender)
                pp, cp = f"images/fam{f:04d}_parent.png", f"images/fam{f:04d}_child.png"
                write_png(render(parent, side, rng, noise), root / pp)
                write_png(render(child, side, rng, noise), root / cp)
                w.writerow([pp, cp, rel.value, f"fam{f:04d}/parent", f"fam{f:04d}/child"])
        return path

    train = write_pairs("pairs_train.csv", 0, n_train)
    val = write_pairs("pairs_val.csv", n_train, n_val)

    attr = root / "attributes.csv"
    with attr.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "gender"])
        for i in range(n_reg):
            person = random_person(rng)
            rp = f"images/reg{i:05d}.png"
            write_png(render(person, side, rng, noise), root / rp)
            w.writerow([rp, "M" if person.gender == Gender.MALE else "F"])
    return ToyPaths(root, train, val, attr)


def make_gender_set(n: int, side: int, seed: int = 0, noise: float = 0.02):
    """(images, gender indices) for classifier checks."""
    rng = np.random.default_rng(seed)
    people = [random_person(rng) for _ in range(n)]
    return (np.stack([render(p, side, rng, noise) for p in people]),
            np.array([int(p.gender) for p in people]))
