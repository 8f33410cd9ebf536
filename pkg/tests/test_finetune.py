import numpy as np
import pytest
from sklearn.base import clone

from tsmantis.adapters import ChannelAdapter, LinearCombiner
from tsmantis.autograd import DimensionError
from tsmantis.data_io import TimeSeriesDataset, make_synthetic
from tsmantis.finetune import (FinetuneConfig, LinearProbe, MantisClassifier, MantisEmbedder,
                               extract_embeddings, finetune, linear_probe_fit, predict,
                               predict_logits, train_val_split)
from tsmantis.model import ClassificationHead


def blobs(rng, n=40):
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 2)) + np.where(y[:, None] == 1, 4.0, -4.0)
    return X, y


class TestEmbeddings:
    def test_univariate_width(self, tiny_encoder, two_cluster):
        assert extract_embeddings(tiny_encoder, two_cluster.X).shape == (24, 16)

    def test_channel_slices(self, tiny_encoder, rng):
        X = rng.normal(size=(3, 3, 64))
        Z = extract_embeddings(tiny_encoder, X)
        alone = extract_embeddings(tiny_encoder, X[:, 1:2])
        np.testing.assert_array_equal(Z[:, 16:32], alone)

    def test_adapter_width(self, tiny_encoder, rng):
        X = rng.normal(size=(2, 30, 64))
        adapter = ChannelAdapter("randproj", random_state=0).fit(X)
        assert extract_embeddings(tiny_encoder, X, adapter).shape == (2, 160)

    def test_adapter_channel_mismatch(self, tiny_encoder, rng):
        adapter = ChannelAdapter("pca", d_new=2).fit(rng.normal(size=(2, 4, 64)))
        with pytest.raises(DimensionError):
            extract_embeddings(tiny_encoder, rng.normal(size=(2, 5, 64)), adapter)


class TestLinearProbe:
    def test_separable(self, rng):
        X, y = blobs(rng)
        assert linear_probe_fit(X, y).score(X, y) == 1.0

    def test_duplicates_same_weights(self, rng):
        X, y = blobs(rng)
        a = LinearProbe().fit(X, y)
        b = LinearProbe().fit(np.vstack([X, X]), np.concatenate([y, y]))
        np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-6)

    def test_strong_regularisation(self, rng):
        X, y = blobs(rng)
        probe = LinearProbe(l2=1e6).fit(X, y)
        assert np.abs(probe.coef_).max() < 1e-4
        np.testing.assert_allclose(probe.predict_proba(X), 0.5, atol=1e-3)

    def test_single_class(self, rng):
        with pytest.raises(ValueError):
            LinearProbe().fit(rng.normal(size=(5, 2)), np.zeros(5))

    def test_clone(self):
        assert clone(LinearProbe(l2=0.5)).get_params()["l2"] == 0.5


class TestSplit:
    def test_sizes(self, two_cluster):
        ds = two_cluster.subset(np.arange(10))
        train, val = train_val_split(ds, 0.8, seed=0)
        assert (len(train), len(val)) == (8, 2)

    def test_stratified(self):
        ds = make_synthetic("two_cluster", 20, t=16, seed=0)
        train, val = train_val_split(ds, 0.8, seed=1)
        assert np.bincount(val.y).tolist() == [2, 2]

    def test_deterministic(self, two_cluster):
        a = train_val_split(two_cluster, seed=3)[1]
        b = train_val_split(two_cluster, seed=3)[1]
        assert a.X.tobytes() == b.X.tobytes()

    def test_singleton_class_warns(self, rng):
        ds = TimeSeriesDataset(rng.normal(size=(6, 1, 8)), np.array([0, 0, 0, 0, 0, 1]))
        with pytest.warns(UserWarning):
            train, val = train_val_split(ds, 0.8)
        assert len(train) + len(val) == 6


class TestFinetune:
    def config(self, regime, **kw):
        return FinetuneConfig(regime=regime, epochs=kw.pop("epochs", 3), batch_size=8,
                              lr=kw.pop("lr", 1e-3), warmup_epochs=1, **kw)

    def test_head_freezes_encoder(self, tiny_encoder, two_cluster):
        before = {k: v.tobytes() for k, v in tiny_encoder.state_dict().items()}
        result = finetune(tiny_encoder, two_cluster, self.config("head"))
        for k, v in result.encoder.state_dict().items():
            assert v.tobytes() == before[k]

    def test_full_leaves_input_untouched(self, tiny_encoder, two_cluster):
        before = {k: v.tobytes() for k, v in tiny_encoder.state_dict().items()}
        result = finetune(tiny_encoder, two_cluster, self.config("full"))
        assert result.encoder is not tiny_encoder
        for k, v in tiny_encoder.state_dict().items():
            assert v.tobytes() == before[k]

    def test_scratch_reinitialises(self, tiny_encoder, two_cluster):
        result = finetune(tiny_encoder, two_cluster, self.config("scratch", lr=0.0, seed=7))
        a = result.encoder.state_dict()["tokenizer.series_kernels"]
        assert a.tobytes() != tiny_encoder.state_dict()["tokenizer.series_kernels"].tobytes()

    @pytest.mark.parametrize("regime", ["head", "full"])
    def test_zero_lr_constant_metrics(self, tiny_encoder, two_cluster, regime):
        result = finetune(tiny_encoder, two_cluster,
                          self.config(regime, lr=0.0, weight_decay=0.0))
        rows = result.records("train")
        assert len({(r["loss"], r["accuracy"]) for r in rows}) == 1

    def test_records_and_callback(self, tiny_encoder, two_cluster):
        seen = []
        train, val = train_val_split(two_cluster, seed=0)
        result = finetune(tiny_encoder, train, self.config("head"), val=val, test=val,
                          callback=seen.append)
        assert seen == result.history
        assert {r["split"] for r in seen} == {"train", "val", "test"}
        assert set(seen[0]) == {"epoch", "split", "loss", "accuracy"}
        assert result.best("val")["accuracy"] >= result.last("val")["accuracy"]

    def test_probe_regime(self, tiny_encoder, two_cluster):
        result = finetune(tiny_encoder, two_cluster, self.config("probe"))
        assert result.probe is not None and result.head is None
        assert predict_logits(result, two_cluster.X).shape == (24, 2)

    def test_probe_and_head_share_embeddings(self, tiny_encoder, two_cluster):
        a = extract_embeddings(tiny_encoder, two_cluster.X)
        b = extract_embeddings(tiny_encoder, two_cluster.X)
        assert a.tobytes() == b.tobytes()

    def test_lcomb_trains_jointly(self, tiny_encoder, rng):
        ds = make_synthetic("multichannel_redundant", 12, t=64, d=4, seed=1)
        comb = LinearCombiner(4, 2, seed=0)
        result = finetune(tiny_encoder, ds, self.config("head", epochs=2), adapter=comb)
        assert result.adapter.weight.data.tobytes() != comb.weight.data.tobytes()
        assert predict_logits(result, ds.X).shape == (12, 2)

    def test_lcomb_rejected_for_probe(self, tiny_encoder, two_cluster):
        with pytest.raises(ValueError):
            finetune(tiny_encoder, two_cluster, self.config("probe"),
                     adapter=LinearCombiner(1, 1))

    def test_deterministic(self, tiny_encoder, two_cluster):
        a = finetune(tiny_encoder, two_cluster, self.config("full")).history
        b = finetune(tiny_encoder, two_cluster, self.config("full")).history
        assert a == b

    def test_invalid_regime(self):
        with pytest.raises(ValueError):
            FinetuneConfig(regime="partial")


class TestPredict:
    def test_tie_rule(self, tiny_encoder):
        head = ClassificationHead(16, 3)
        head.linear.weight.data[:] = 0.0
        head.linear.bias.data[:] = 0.0
        pred = predict(tiny_encoder, head, np.sin(np.arange(64.0)))
        np.testing.assert_allclose(pred.probs, 1 / 3, atol=1e-6)
        assert pred.label == 0 and pred.confidence == pytest.approx(1 / 3, abs=1e-6)

    def test_simplex_and_determinism(self, tiny_encoder, rng):
        head = ClassificationHead(16, 4, seed=2)
        x = rng.normal(size=64)
        a, b = predict(tiny_encoder, head, x), predict(tiny_encoder, head, x)
        assert a.probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert a.probs.tobytes() == b.probs.tobytes()
        assert a.confidence == a.probs.max()


class TestEstimators:
    def test_classifier(self, tiny_encoder, two_cluster):
        labels = np.array(["left", "right"])[two_cluster.y]
        clf = MantisClassifier(encoder=tiny_encoder, regime="head", epochs=2, lr=1e-3,
                               batch_size=8, warmup_epochs=1).fit(two_cluster.X, labels)
        assert set(clf.predict(two_cluster.X)) <= {"left", "right"}
        assert clf.predict_proba(two_cluster.X).shape == (24, 2)
        assert clone(clf).get_params()["regime"] == "head"

    def test_embedder_with_adapter(self, tiny_encoder, rng):
        X = rng.normal(size=(3, 5, 64))
        emb = MantisEmbedder(encoder=tiny_encoder, adapter="pca", d_new=2).fit(X)
        assert emb.transform(X).shape == (3, 32)
