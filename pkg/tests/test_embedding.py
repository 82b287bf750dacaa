import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from domain_embed.embedding import (
    DomainEmbedding,
    DomainPrototype,
    DomainReducer,
    EmbeddingStandardizer,
    domain_distance,
    domain_prototype,
    embed_images,
    embedding_matrix,
    gram_tridiagonal,
    knn_graph,
    read_embeddings,
    write_embeddings,
)
from domain_embed.exceptions import PreconditionError
from domain_embed.model import DisentangleNet

from .oracles import euclid_loop, gram_full, knn_sort_oracle


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12))


def test_gram_matches_full_matrix(rng):
    for _ in range(100):
        c, h, w = rng.integers(2, 9), rng.integers(1, 7), rng.integers(1, 7)
        stack = rng.standard_normal((c, h, w))
        G = gram_full(stack)
        diag = gram_tridiagonal(stack)
        assert _rel(diag.main, np.diag(G)) < 1e-5
        assert _rel(diag.upper, np.diag(G, 1)) < 1e-5
        assert _rel(diag.lower, np.diag(G, -1)) < 1e-5
        assert diag.concat().shape == (3 * c - 2,)


def test_gram_batch_equals_per_example(rng):
    batch = rng.standard_normal((4, 5, 3, 3))
    out = gram_tridiagonal(batch)
    for i in range(4):
        assert np.allclose(out.main[i], gram_tridiagonal(batch[i]).main)


def test_prototype():
    p = domain_prototype(np.array([[1.0, 2.0], [3.0, 6.0]]))
    assert p.vector.tolist() == [2.0, 4.0] and p.sample_count == 2
    with pytest.raises(PreconditionError):
        domain_prototype(np.zeros((0, 3)))


def test_embed_images_averages_examples(tiny_spec):
    torch.manual_seed(0)
    net = DisentangleNet(tiny_spec, seed=0).eval()
    X = torch.randn(10, 3, 8, 8)
    e = embed_images(net, X, domain_id=3, batch_size=4)
    with torch.no_grad():
        f_g, acts = net.G(X)
        proto = net.D_ds(f_g).double().mean(0).numpy()
        last = gram_tridiagonal(acts[-1].double())
    assert np.allclose(e.prototype.vector, proto)
    assert np.allclose(e.gram[-1].main, last.main.mean(0))
    c = tiny_spec.conv_channels
    assert e.raw.shape == (tiny_spec.latent_dim + sum(3 * k - 2 for k in c),)
    assert embed_images(net, X, gram_layers="last").raw.shape == (tiny_spec.latent_dim + 3 * c[-1] - 2,)
    with pytest.raises(PreconditionError):
        embed_images(net, X[:0])


def test_standardizer_properties(rng):
    X = rng.standard_normal((12, 6)) * rng.uniform(0.1, 100, 6) + rng.uniform(-50, 50, 6)
    X[:, 2] = 4.0
    s = EmbeddingStandardizer().fit(X)
    Z = s.transform(X)
    assert s.dropped_.tolist() == [2]
    assert np.all(np.abs(Z.mean(0)) < 1e-6)
    assert np.all(np.abs(Z.std(0) - 1) < 1e-6)


def test_reducer_pca_preserves_subspace_distances(rng):
    basis = np.linalg.qr(rng.standard_normal((40, 3)))[0]
    X = rng.standard_normal((10, 3)) @ basis.T
    red = DomainReducer(pca_dim=3, random_state=0).fit(X)
    Z = red.pca_stage(X)
    d_in = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d_out = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-5


def test_reducer_duplicates_and_determinism(rng):
    X = rng.standard_normal((12, 20)) * 5
    X[7] = X[3]
    a = DomainReducer(random_state=1).fit_transform(X)
    b = DomainReducer(random_state=1).fit_transform(X)
    assert a.shape == (12, 2)
    assert np.array_equal(a, b)
    d = np.linalg.norm(a - a[3], axis=1)
    d[3] = np.inf
    assert np.argmin(d) == 7
    with pytest.raises(PreconditionError):
        DomainReducer().fit_transform(X[:1])


def test_distance_examples(rng):
    a = np.array([1.0, 0.0, 0.0])
    assert domain_distance(a, a) == 0.0
    assert domain_distance(a, np.array([0.0, 2.0, 0.0])) == pytest.approx(1.0)
    for _ in range(20):
        u, v = rng.standard_normal(16), rng.standard_normal(16)
        assert abs(domain_distance(u, v, "euclidean") - euclid_loop(u, v)) < 1e-6
    with pytest.raises(PreconditionError):
        domain_distance(a, a[:2])
    e = DomainEmbedding(0, DomainPrototype(a, 1), [])
    with pytest.raises(PreconditionError):
        domain_distance(e, e)


@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_distance_symmetry_and_range(a, b):
    for metric in ("cosine", "euclidean"):
        assert domain_distance(a, b, metric) == pytest.approx(domain_distance(b, a, metric))
        assert domain_distance(a, a, metric) == 0.0
    assert 0.0 <= domain_distance(a, b, "cosine") <= 2.0


def _sym(rng, n):
    D = rng.random((n, n))
    D = D + D.T
    np.fill_diagonal(D, 0.0)
    return D


def test_knn_matches_sort_oracle(rng):
    D = _sym(rng, 10)
    g = knn_graph(D, k=5)
    oracle = knn_sort_oracle(D, 5)
    for i in range(10):
        assert g.neighbours(i) == oracle[i]


def test_knn_clamped_k_and_ties():
    D = np.ones((3, 3)) - np.eye(3)
    g = knn_graph(D, k=5)
    assert g.neighbours(0) == [1, 2]
    D = np.ones((6, 6)) - np.eye(6)
    assert knn_graph(D, k=2).neighbours(4) == [0, 1]
    with pytest.raises(PreconditionError):
        knn_graph(np.array([[0.0, 1.0], [2.0, 0.0]]))


@given(st.integers(0, 2 ** 31))
def test_knn_invariant_under_monotone_transform(seed):
    D = _sym(np.random.default_rng(seed), 8)
    a = knn_graph(D, 5)
    b = knn_graph(np.exp(3 * D) - 1, 5)
    assert [a.neighbours(i) for i in range(8)] == [b.neighbours(i) for i in range(8)]


def test_graph_exports():
    D = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], float)
    g = knn_graph(D, 1, domain_ids=[10, 11, 12], sample_counts=[5, 6, 7], names=["a", "b", "c"])
    d = g.to_dict()
    assert d["edges"][0] == {"source": 10, "target": 11, "distance": 1.0}
    assert d["nodes"][0]["degree"] == 2
    dot = g.to_dot()
    assert dot.startswith("digraph") and "10 -> 11" in dot


def test_embeddings_csv_roundtrip(tmp_path, rng):
    embs = [DomainEmbedding(i, DomainPrototype(rng.standard_normal(3), 4 + i), []) for i in range(3)]
    vectors = rng.standard_normal((3, 5))
    write_embeddings(tmp_path / "e.csv", embs, vectors, {"tag": "full"})
    ids, back, meta = read_embeddings(tmp_path / "e.csv")
    assert ids == [0, 1, 2]
    assert np.array_equal(back, vectors)
    assert meta["tag"] == "full" and meta["domains"][2]["sample_count"] == 6


def test_embedding_matrix_without_gram(rng):
    from domain_embed.embedding import GramDiagonals

    g = GramDiagonals(np.ones(3), np.ones(2), np.ones(2))
    embs = [DomainEmbedding(i, DomainPrototype(np.full(4, i, float), 1), [g]) for i in range(2)]
    assert embedding_matrix(embs).shape == (2, 11)
    assert embedding_matrix(embs, use_gram=False).shape == (2, 4)
