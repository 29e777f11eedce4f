"""Top-K identity retrieval over face embeddings, and image-grid export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import dataio
from .encoder_zoo import FrozenEncoder, as_nchw, to_images

log = logging.getLogger(__name__)


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vectors differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


@dataclass
class RetrievalReport:
    k: int
    accuracy: float
    query_ids: list[str]
    ranked: list[list[tuple[str, float]]]  # top-k per query, nearest first
    hit_ranks: list[int | None]  # 1-based rank of the first correct gallery entry
    skipped: list[dict] = field(default_factory=list)

    def accuracy_at(self, k: int) -> float:
        if not self.hit_ranks:
            return 0.0
        return sum(r is not None and r <= k for r in self.hit_ranks) / len(self.hit_ranks)

    def to_dict(self, per_query: bool = False) -> dict:
        out = {"k": self.k, "accuracy": self.accuracy, "n_queries": len(self.query_ids),
               "skipped": self.skipped}
        if per_query:
            out["queries"] = [
                {"id": q, "hit_rank": r, "ranked": [[g, d] for g, d in lst]}
                for q, r, lst in zip(self.query_ids, self.hit_ranks, self.ranked)
            ]
        return out

    def write(self, path, per_query: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(per_query), indent=2), encoding="utf-8")
        return path


def _unit_rows(vectors: Sequence, what: str) -> np.ndarray:
    m = np.asarray([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{what} contains a zero vector")
    return m / norms


def topk_retrieval(queries: Sequence[tuple[str, object]], gallery: Sequence[tuple[str, object]],
                   k: int) -> RetrievalReport:
    """Rank the whole gallery for every query by cosine distance.

    Ties go to the lower gallery index.  A query is a hit when any gallery
    entry with its id is within the first ``k``.
    """
    if k < 1 or k > len(gallery):
        raise ValueError(f"k={k} must lie in [1, {len(gallery)}] (gallery size)")
    q = _unit_rows([v for _, v in queries], "queries") if queries else np.zeros((0, 1))
    g = _unit_rows([v for _, v in gallery], "gallery")
    if queries and q.shape[1] != g.shape[1]:
        raise ValueError(f"query dimension {q.shape[1]} differs from gallery dimension {g.shape[1]}")
    gids = [gid for gid, _ in gallery]
    ranked, hits = [], []
    for qi, (qid, _) in enumerate(queries):
        # row-wise reduction rather than a matmul: BLAS blocking can round
        # identical gallery rows differently, which would break tie order
        dist = 1.0 - (g * q[qi]).sum(axis=1)
        row = np.argsort(dist, kind="stable")
        ranked.append([(gids[j], float(dist[j])) for j in row[:k]])
        hit = next((r + 1 for r, j in enumerate(row) if gids[j] == qid), None)
        hits.append(hit)
    n = len(queries)
    acc = sum(h is not None and h <= k for h in hits) / n if n else 0.0
    return RetrievalReport(k, acc, [qid for qid, _ in queries], ranked, hits)


@torch.no_grad()
def _embed_all(enc: FrozenEncoder, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        out.append(enc.extract_embedding(images[s:s + batch]).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, enc.arch.embed_dim))


@torch.no_grad()
def generate_children(generator, parents: np.ndarray, conds: np.ndarray, batch: int = 64) -> np.ndarray:
    generator.eval()
    out = []
    for s in range(0, len(parents), batch):
        y = generator.generate_child(parents[s:s + batch], torch.tensor(conds[s:s + batch]))
        out.append(to_images(y))
    return np.concatenate(out)


def evaluate_model(checkpoint, val_pairs: Sequence[dataio.KinPair], encoder: FrozenEncoder,
                   k: int, gallery_mode: str = "per_image") -> RetrievalReport:
    """Generate a child for every pair and retrieve its identity among the
    real children of ``val_pairs``.

    ``checkpoint`` is a ``Checkpoint`` or a ``GeneratorModel``.  Pairs whose
    images cannot be read are skipped and listed in the report.
    """
    from .train import Checkpoint, generator_from_checkpoint

    generator = generator_from_checkpoint(checkpoint) if isinstance(checkpoint, Checkpoint) else checkpoint
    side = generator.encoder.arch.side
    parents, children, conds, ids, child_paths, skipped = [], [], [], [], [], []
    for i, pair in enumerate(val_pairs):
        try:
            p = dataio.load_image(pair.parent_path, side)
            c = dataio.load_image(pair.child_path, side)
        except (dataio.ImageLoadError, OSError) as exc:
            skipped.append({"index": i, "parent": str(pair.parent_path), "child": str(pair.child_path),
                            "reason": str(exc)})
            continue
        parents.append(p)
        children.append(c)
        conds.append(pair.child_gender.one_hot)
        ids.append(pair.child_id)
        child_paths.append(str(pair.child_path))
    if skipped:
        log.warning("skipped %d of %d pairs", len(skipped), len(val_pairs))
    if not parents:
        raise ValueError("no evaluable pairs")

    fakes = generate_children(generator, np.stack(parents), np.stack(conds))
    q_emb = _embed_all(encoder, fakes)

    # one gallery entry per distinct child image
    seen: dict[str, int] = {}
    g_imgs, g_ids = [], []
    for img, cid, path in zip(children, ids, child_paths):
        if path not in seen:
            seen[path] = len(g_imgs)
            g_imgs.append(img)
            g_ids.append(cid)
    g_emb = _embed_all(encoder, np.stack(g_imgs))
    if gallery_mode == "per_identity":
        uniq = list(dict.fromkeys(g_ids))
        g_emb = np.stack([g_emb[[j for j, x in enumerate(g_ids) if x == u]].mean(axis=0) for u in uniq])
        g_ids = uniq
    elif gallery_mode != "per_image":
        raise ValueError(f"unknown gallery mode {gallery_mode!r}")

    report = topk_retrieval(list(zip(ids, q_emb)), list(zip(g_ids, g_emb)), k)
    report.skipped = skipped
    return report


def export_grid(images: Sequence, cols: int, path) -> Path:
    """Tile FaceImages row-major into one PNG; unused cells stay black."""
    if len(images) == 0:
        raise ValueError("no images to export")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    arrs = [np.asarray(im, dtype=np.float32) for im in images]
    if arrs[0].ndim == 3 and arrs[0].shape[0] == 3 and arrs[0].shape[-1] != 3:
        arrs = [a.transpose(1, 2, 0) for a in arrs]
    h, w = arrs[0].shape[:2]
    cols = min(cols, len(arrs))
    rows = math.ceil(len(arrs) / cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i, a in enumerate(arrs):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(canvas).save(path)
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc}") from exc
    return path


def chance_accuracy(n_identities: int, k: int = 1) -> float:
    return min(1.0, k / n_identities)


def as_face_images(t) -> np.ndarray:
    return to_images(as_nchw(t))
