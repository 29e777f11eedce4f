import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from kinsynth import dataio
from kinsynth.eval import (chance_accuracy, cosine_distance, evaluate_model, export_grid, topk_retrieval)
from kinsynth.train import Trainer


class TestCosine:
    @pytest.mark.parametrize("a,b,want", [
        ([1, 0], [1, 0], 0.0),
        ([1, 0], [0, 1], 1.0),
        ([1, 0], [1, 1], 1 - 1 / math.sqrt(2)),
        ([1, 0], [-1, 0], 2.0),
    ])
    def test_hand_cases(self, a, b, want):
        assert cosine_distance(a, b) == pytest.approx(want, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.floats(0.01, 100))
    def test_scale_invariant_and_symmetric(self, a, b, s):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        d = cosine_distance(a, b)
        assert 0.0 - 1e-12 <= d <= 2.0 + 1e-12
        assert cosine_distance(a * s, b) == pytest.approx(d, abs=1e-9)
        assert cosine_distance(b, a) == pytest.approx(d, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_distance([0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine_distance([1, 0], [1, 0, 0])


def brute_force(queries, gallery, k):
    hits = 0
    for qid, qv in queries:
        d = [(cosine_distance(qv, gv), j) for j, (_, gv) in enumerate(gallery)]
        d.sort()
        hits += any(gallery[j][0] == qid for _, j in d[:k])
    return hits / len(queries)


def random_instance(rng, n_ids=8, dim=4):
    gallery = [(f"id{rng.integers(n_ids)}", rng.normal(size=dim)) for _ in range(rng.integers(5, 20))]
    queries = [(f"id{rng.integers(n_ids)}", rng.normal(size=dim)) for _ in range(rng.integers(1, 10))]
    return queries, gallery


class TestTopK:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(150):
            q, g = random_instance(rng)
            k = int(rng.integers(1, len(g) + 1))
            assert topk_retrieval(q, g, k).accuracy == pytest.approx(brute_force(q, g, k), abs=1e-12)

    def test_duplicate_queries_perfect(self):
        rng = np.random.default_rng(1)
        g = [(f"id{i}", rng.normal(size=6)) for i in range(10)]
        assert topk_retrieval(g, g, 1).accuracy == 1.0

    def test_absent_ids(self):
        rng = np.random.default_rng(2)
        g = [(f"id{i}", rng.normal(size=3)) for i in range(5)]
        q = [("stranger", rng.normal(size=3)) for _ in range(4)]
        r = topk_retrieval(q, g, 5)
        assert r.accuracy == 0.0 and r.hit_ranks == [None] * 4

    def test_ties_prefer_lower_index(self):
        g = [("a", [1.0, 0.0]), ("b", [2.0, 0.0]), ("c", [0.0, 1.0])]
        r = topk_retrieval([("b", [1.0, 0.0])], g, 1)
        assert r.ranked[0][0][0] == "a" and r.accuracy == 0.0
        assert r.hit_ranks == [2]

    def test_duplicate_gallery_rows_tie_by_index(self):
        rng = np.random.default_rng(4)
        # large enough that a blocked matmul would round some duplicates differently
        vecs = rng.normal(size=(421, 4))
        dup = np.arange(0, 421, 7)
        vecs[dup] = vecs[0]
        g = [(f"g{j}", v) for j, v in enumerate(vecs)]
        q = [("x", rng.normal(size=4)) for _ in range(50)]
        r = topk_retrieval(q, g, 421)
        for lst in r.ranked:
            pos = [i for i, (gid, _) in enumerate(lst) if int(gid[1:]) in set(dup.tolist())]
            assert [int(lst[i][0][1:]) for i in pos] == dup.tolist()
            assert pos == list(range(pos[0], pos[0] + len(dup)))

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            q, g = random_instance(rng)
            accs = [topk_retrieval(q, g, k).accuracy for k in range(1, len(g) + 1)]
            assert all(a <= b for a, b in zip(accs, accs[1:]))
            r = topk_retrieval(q, g, len(g))
            assert [r.accuracy_at(k) for k in range(1, len(g) + 1)] == pytest.approx(accs)

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        g = [("a", [1.0]), ("b", [2.0]), ("c", [3.0])]
        with pytest.raises(ValueError, match="gallery"):
            topk_retrieval([("a", [1.0])], g, k)

    def test_chance(self):
        assert chance_accuracy(16) == 1 / 16
        assert chance_accuracy(4, 10) == 1.0


@pytest.fixture(scope="module")
def generator(toy_data, encoder_weights):
    from kinsynth.config import parse_config
    cfg = parse_config({"data": {"pairs": str(toy_data.train_pairs), "attributes": str(toy_data.attributes),
                                 "image_side": 32},
                        "encoder": {"weights": str(encoder_weights)}, "optim": {"batch_size": 4}})
    return Trainer(cfg).models.generator


class TestEvaluateModel:
    def test_full_gallery_is_perfect(self, generator, toy_data, tiny_encoder):
        pairs = dataio.load_pair_manifest(toy_data.val_pairs)
        r = evaluate_model(generator, pairs, tiny_encoder, k=len(pairs))
        assert r.accuracy == 1.0 and len(r.query_ids) == len(pairs)
        assert all(len(x) == len(pairs) for x in r.ranked)

    def test_unreadable_pairs_skipped(self, generator, toy_data, tiny_encoder, tmp_path):
        pairs = dataio.load_pair_manifest(toy_data.val_pairs)[:6]
        broken = dataio.KinPair(tmp_path / "missing.png", pairs[0].child_path, pairs[0].relation,
                                pairs[0].child_id, pairs[0].parent_id)
        r = evaluate_model(generator, pairs + [broken], tiny_encoder, k=2)
        assert len(r.query_ids) == 6
        assert [s["index"] for s in r.skipped] == [6]
        out = r.write(tmp_path / "r.json", per_query=True)
        data = json.loads(out.read_text())
        assert data["n_queries"] == 6 and len(data["queries"]) == 6 and data["skipped"]

    def test_per_identity_gallery(self, generator, toy_data, tiny_encoder):
        pairs = dataio.load_pair_manifest(toy_data.val_pairs)
        r = evaluate_model(generator, pairs, tiny_encoder, k=1, gallery_mode="per_identity")
        assert 0.0 <= r.accuracy <= 1.0


def _read(path):
    return np.asarray(Image.open(path))


class TestGrid:
    def test_layout(self, tmp_path):
        imgs = [np.full((8, 8, 3), -1 + i / 4, np.float32) for i in range(8)]
        a = _read(export_grid(imgs, 4, tmp_path / "g.png"))
        assert a.shape == (16, 32, 3)
        for i in range(8):
            r, c = divmod(i, 4)
            want = np.clip(np.rint((imgs[i][0, 0, 0] + 1) * 127.5), 0, 255)
            assert np.all(a[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] == want)

    def test_single_image(self, tmp_path):
        a = _read(export_grid([np.zeros((8, 8, 3), np.float32)], 4, tmp_path / "g.png"))
        assert a.shape == (8, 8, 3)

    def test_black_tile(self, tmp_path):
        a = _read(export_grid([-np.ones((8, 8, 3), np.float32)], 1, tmp_path / "g.png"))
        assert np.all(a == 0)

    def test_partial_row_padded_black(self, tmp_path):
        a = _read(export_grid([np.ones((4, 4, 3), np.float32)] * 3, 2, tmp_path / "g.png"))
        assert a.shape == (8, 8, 3)
        assert np.all(a[4:, 4:] == 0) and np.all(a[:4, :4] == 255)

    def test_unwritable(self, tmp_path):
        (tmp_path / "f").write_text("x")
        with pytest.raises(OSError):
            export_grid([np.zeros((4, 4, 3))], 1, tmp_path / "f" / "g.png")
