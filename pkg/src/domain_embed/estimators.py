"""scikit-learn style estimators over the training and adaptation code."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import channel_stats, check_images, check_labels, to_tensor
from .data import CorpusData
from .embedding import (
    EmbeddingStandardizer,
    distance_matrix,
    domain_distance,
    embed_images,
    embedding_matrix,
    knn_graph,
)
from .exceptions import PreconditionError
from .losses import LossWeights
from .msda import VARIANTS, MSDAConfig, TransferTask, adapt, distance_to_weights, predict, uniform_weights
from .training import TrainConfig, predict_classes, train_disentangler


def _check_domains(domains, n):
    domains = check_labels(domains, n, "domains")
    ids, codes = np.unique(domains, return_inverse=True)
    return ids, codes


class Domain2Vec(BaseEstimator, TransformerMixin):
    """Learns disentangled features and one embedding vector per domain.

    ``fit(X, y, domains)`` takes uint8 images (n, 32, 32, 3), class labels
    (-1 where unknown) and a domain id per row. ``transform`` returns the
    domain-specific features of new images; ``domain_embeddings_`` holds the
    standardized vector of every training domain and ``distances_`` their
    pairwise distances.
    """

    def __init__(self, scale="desk", epochs=10, lr=1e-3, batch_size=64, w1=1.0, w2=1.0, w3=0.001, w4=0.1,
                 alpha=0.1, use_gram=True, gram_layers="all", metric="cosine", random_state=0):
        self.scale = scale
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.w4 = w4
        self.alpha = alpha
        self.use_gram = use_gram
        self.gram_layers = gram_layers
        self.metric = metric
        self.random_state = random_state

    def _train_config(self):
        weights = LossWeights(self.w1, self.w2, self.w3, self.w4, self.alpha)
        return TrainConfig(weights=weights, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, scale=self.scale)

    def fit(self, X, y, domains):
        X = check_images(X)
        y = check_labels(y, len(X), allow_unlabeled=True)
        self.domain_ids_, codes = _check_domains(domains, len(X))
        if len(self.domain_ids_) < 2:
            raise PreconditionError("need images from at least two domains")
        if not np.any(y >= 0):
            raise PreconditionError("need at least one labelled image")
        self.classes_ = np.arange(int(y.max()) + 1)
        self.channel_mean_, self.channel_std_ = channel_stats(X)
        trainer = train_disentangler(self._train_config(), X, y, codes, (self.channel_mean_, self.channel_std_),
                                     len(self.classes_), len(self.domain_ids_))
        self.model_ = trainer.model
        self.raw_embeddings_ = [self._embed(X[codes == c], int(i)) for c, i in enumerate(self.domain_ids_)]
        self.standardizer_ = EmbeddingStandardizer()
        self.domain_embeddings_ = self.standardizer_.fit_transform(
            embedding_matrix(self.raw_embeddings_, self.use_gram))
        for e, z in zip(self.raw_embeddings_, self.domain_embeddings_):
            e.standardized = z
        self.distances_ = distance_matrix(self.domain_embeddings_, self.metric)
        return self

    def _embed(self, X, domain_id):
        return embed_images(self.model_, to_tensor(X, self.channel_mean_, self.channel_std_), domain_id,
                            self.gram_layers)

    @torch.no_grad()
    def transform(self, X):
        check_is_fitted(self, "model_")
        x = to_tensor(check_images(X), self.channel_mean_, self.channel_std_)
        self.model_.eval()
        out = [self.model_.D_ds(self.model_.G(x[i:i + 256])[0]) for i in range(0, len(x), 256)]
        return torch.cat(out).numpy()

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict_classes(self.model_, to_tensor(check_images(X), self.channel_mean_, self.channel_std_))

    def embed_domain(self, X, domain_id=-1):
        """Standardized embedding of a new domain on the basis fitted during ``fit``."""
        check_is_fitted(self, "standardizer_")
        e = self._embed(check_images(X), domain_id)
        e.standardized = self.standardizer_.transform(embedding_matrix([e], self.use_gram))[0]
        return e

    def knowledge_graph(self, k=5):
        check_is_fitted(self, "distances_")
        return knn_graph(self.distances_, k, self.domain_ids_, [e.sample_count for e in self.raw_embeddings_])


class DistanceWeightedMSDA(BaseEstimator, ClassifierMixin):
    """Multi-source adaptation whose per-source weights come from domain distances.

    ``fit(X, y, domains, target_domain)`` uses the labels of every domain
    except ``target_domain``; the target's labels are never read. With a
    weighted variant and no ``embedder``, a :class:`Domain2Vec` with default
    settings is fitted to obtain the distances.
    """

    def __init__(self, variant="beta", epochs=5, batch_size=32, lr=1e-3, align_weight=1.0, tau=1.0,
                 scale="desk", embedder=None, random_state=0):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.align_weight = align_weight
        self.tau = tau
        self.scale = scale
        self.embedder = embedder
        self.random_state = random_state

    def fit(self, X, y, domains, target_domain):
        if self.variant not in VARIANTS:
            raise PreconditionError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        X = check_images(X)
        y = check_labels(y, len(X), allow_unlabeled=True)
        ids, codes = _check_domains(domains, len(X))
        if target_domain not in ids:
            raise PreconditionError(f"target domain {target_domain} has no images")
        sources = [int(i) for i in ids if i != target_domain]
        is_target = np.asarray(domains) == target_domain
        if np.any(y[~is_target] < 0):
            raise PreconditionError("every source image needs a class label")
        y_masked = np.where(is_target, -1, y)
        self.task_ = TransferTask(sources, int(target_domain))
        self.classes_ = np.arange(int(y[~is_target].max()) + 1)

        if self.variant in ("alpha", "beta"):
            embedder = self.embedder
            if embedder is None:
                embedder = Domain2Vec(scale=self.scale, random_state=self.random_state).fit(X, y_masked, domains)
            self.embedder_ = embedder
            tgt = embedder.embed_domain(X[is_target])
            d = np.array([embedder.embed_domain(X[np.asarray(domains) == s]).standardized for s in sources])
            self.source_distances_ = np.array([domain_distance(v, tgt.standardized, embedder.metric) for v in d])
            self.weights_ = distance_to_weights(self.source_distances_, self.tau)
        else:
            self.weights_ = uniform_weights(len(sources))

        train = {int(i): (X[codes == c], y_masked[codes == c]) for c, i in enumerate(ids)}
        self.channel_mean_, self.channel_std_ = channel_stats(X)
        self.data_ = CorpusData(train, {}, self.channel_mean_, self.channel_std_)
        mode = {"alpha": "moment", "uniform-alpha": "moment", "beta": "adversarial",
                "uniform-beta": "adversarial", "source-only": None}[self.variant]
        config = MSDAConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                            align_weight=self.align_weight, seed=self.random_state, scale=self.scale, tau=self.tau)
        self.model_, self.log_ = adapt(self.data_, self.task_, self.weights_, mode, config)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, self.data_, check_images(X))
