from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from tipstate.errors import DataError, EmptyTrainSet, LabelOutOfRange, ModeError
from tipstate.imagecore import (DatasetSplit, LabeledSample, ScanImage, Surface, class_names,
                                class_stats, stats_from_counts)
from tipstate.metrics import balanced_accuracy, confusion_matrix
from tipstate.nn import LossSpec, loss
from tipstate.nn.layers import BatchNorm, Conv2D, Dense, Elu, GlobalAvgPool, MaxPool, Sigmoid
from tipstate.synthgen import SynthParams, gen_image
from tipstate.trainpipe import TrainConfig, evaluate, evaluate_array, train, train_si_scheme
from tipstate.zoo import NetworkGraph

BINARY = class_names("si-tipchange")


def tiny_vgg(seed=0):
    layers = [Conv2D(1, 4), BatchNorm(4), Elu(), MaxPool(2),
              Conv2D(4, 8), BatchNorm(8), Elu(), GlobalAvgPool(), Dense(8, 2), Sigmoid()]
    return NetworkGraph(layers, 2, 8, dtype=np.float64, seed=seed, classes=BINARY)


def blob_samples(n, seed, offset=0):
    """Class 0: bright centre blob; class 1: bright corner blob; plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:8, 0:8]
    out = []
    for i in range(n):
        k = i % 2
        cy, cx = (3.5, 3.5) if k == 0 else (1.0, 1.0)
        v = 0.8 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 3.0) + rng.normal(0, 0.05, (8, 8))
        out.append(LabeledSample(ScanImage(np.clip(v, -1, 1)), Surface.SiH100, BINARY[k],
                                 f"b{offset + i:04d}"))
    return out


def blob_split(seed=0):
    return DatasetSplit(tuple(blob_samples(64, seed)), tuple(blob_samples(32, seed + 1, 1000)),
                        (), seed)


FAST = TrainConfig(batch_size=16, image_side=8, epochs=30, learning_rate=1e-2, seed=3)


@pytest.fixture(scope="module")
def trained():
    split = blob_split()
    net, hist = train(tiny_vgg(), split, class_stats(split.train, BINARY), FAST)
    return split, net, hist


class TestTrain:
    def test_learns_separable_blobs(self, trained):
        _, _, hist = trained
        assert hist.train_balanced_accuracy[-1] >= 0.95
        assert len(hist.train_loss) == len(hist.test_loss) == len(hist.balanced_accuracy) \
            == hist.stopped_epoch

    def test_zero_lr_keeps_parameters(self):
        net = tiny_vgg(1)
        before = {k: v.copy() for k, v in net.params().items()}
        split = blob_split()
        cfg = replace(FAST, epochs=1, learning_rate=0.0)
        net, hist = train(net, split, class_stats(split.train, BINARY), cfg)
        assert hist.stopped_epoch == 1
        for k, v in net.params().items():
            np.testing.assert_array_equal(v, before[k])

    def test_deterministic(self):
        split = blob_split()
        cfg = replace(FAST, epochs=3)
        runs = [train(tiny_vgg(2), split, class_stats(split.train, BINARY), cfg) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for k, v in runs[0][0].state().items():
            np.testing.assert_array_equal(v, runs[1][0].state()[k])

    def test_shuffle_is_permutation(self):
        split = blob_split()
        # tag each training image by a unique constant pixel
        tagged = tuple(LabeledSample(ScanImage(np.full((8, 8), (i + 1) / 100.0)), s.surface,
                                     s.label.name, s.source_id) for i, s in enumerate(split.train))
        split = DatasetSplit(tagged, split.test, (), 0)
        net = tiny_vgg()
        seen: list[list[float]] = [[]]
        forward = net.forward

        def spy(x, training=None):
            out = forward(x, training)
            if training:
                seen[-1].extend(np.asarray(x)[:, 0, 0].tolist())
            return out

        net.forward = spy
        cfg = replace(FAST, epochs=3, learning_rate=0.0)
        train(net, split, class_stats(split.train, BINARY), cfg,
              progress=lambda e, h: seen.append([]))
        expected = Counter(round((i + 1) / 100.0, 12) for i in range(64))
        epochs = [Counter(round(v, 12) for v in ep) for ep in seen if ep]
        assert len(epochs) == 3 and all(ep == expected for ep in epochs)
        assert len({tuple(ep) for ep in seen if ep}) == 3  # reshuffled every epoch

    def test_early_stop_returns_best(self):
        split = blob_split(5)
        cfg = replace(FAST, epochs=12, early_stop_patience=2, learning_rate=0.05)
        stats = class_stats(split.train, BINARY)
        net, hist = train(tiny_vgg(4), split, stats, cfg)
        assert hist.test_loss[hist.best_epoch - 1] == min(hist.test_loss)
        out = evaluate_array(net, list(split.test))
        y = np.eye(2)[[BINARY.index(s.label.name) for s in split.test]]
        restored = float(loss(out, y, cfg.loss_spec(stats, BINARY))[0])
        assert abs(restored - min(hist.test_loss)) < 1e-12
        if hist.stopped_epoch < cfg.epochs:
            assert hist.stopped_epoch - hist.best_epoch == cfg.early_stop_patience

    def test_errors(self):
        empty = DatasetSplit((), (), (), 0)
        with pytest.raises(EmptyTrainSet):
            train(tiny_vgg(), empty, stats_from_counts({c: 1 for c in BINARY}, BINARY), FAST)
        bad = blob_samples(4, 0)
        bad.append(LabeledSample(ScanImage(np.zeros((8, 8))), Surface.SiH100, "Atoms", "x"))
        split = DatasetSplit(tuple(bad), (), (), 0)
        with pytest.raises(LabelOutOfRange):
            train(tiny_vgg(), split, stats_from_counts({c: 1 for c in BINARY}, BINARY), FAST)

    def test_config(self, tmp_path):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(DataError):
            TrainConfig.from_dict({"batch": 4})
        p = tmp_path / "c.json"
        p.write_text('{"epochs": 4, "optimizer": "sgd"}', encoding="utf-8")
        cfg = TrainConfig.from_file(p)
        assert (cfg.epochs, cfg.optimizer, cfg.batch_size) == (4, "sgd", 128)

    def test_history_csv(self, trained, tmp_path):
        _, _, hist = trained
        lines = hist.write_csv(tmp_path / "h.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0].split(",")[:4] == ["epoch", "train_loss", "test_loss", "balanced_accuracy"]
        assert len(lines) == hist.stopped_epoch + 1
        assert float(lines[1].split(",")[1]) == hist.train_loss[0]


class TestEvaluate:
    def test_pure(self, trained):
        split, net, _ = trained
        before = {k: v.copy() for k, v in net.state().items()}
        a = evaluate(net, list(split.test))
        b = evaluate(net, list(split.test))
        assert all(np.array_equal(x.confidences, y.confidences) for x, y in zip(a, b))
        for k, v in net.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_permutation(self, trained):
        split, net, _ = trained
        items = list(split.test)
        perm = np.random.default_rng(0).permutation(len(items))
        ref = evaluate_array(net, items, batch_size=7)
        got = evaluate_array(net, [items[i] for i in perm], batch_size=5)
        np.testing.assert_array_equal(got, ref[perm])

    def test_metric_path_equivalence(self, trained):
        split, net, hist = trained
        preds = evaluate(net, list(split.test))
        cm = confusion_matrix([p.argmax_class for p in preds],
                              [s.label.name for s in split.test], BINARY)
        assert abs(balanced_accuracy(cm) - hist.balanced_accuracy[hist.best_epoch - 1]) <= 1e-12

    def test_mode_error(self, trained):
        split, _, _ = trained
        with pytest.raises(ModeError):
            evaluate(tiny_vgg().train(), list(split.test))


class TestWeighting:
    def test_uniform_predictor_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = int(rng.integers(2, 7))
            counts = rng.integers(1, 500, c)
            names = [str(i) for i in range(c)]
            stats = stats_from_counts(dict(zip(names, counts.tolist())), names)
            y = np.repeat(np.arange(c), counts)
            out = np.full((len(y), c), 1.0 / c)
            for kind in ("BinaryCrossEntropy", "CategoricalCrossEntropy"):
                spec = LossSpec(kind, stats.weight_vector(names))
                v = float(loss(out, np.eye(c)[y], spec)[0])
                # a uniform predictor's unweighted loss, times the class count
                base = float(loss(out, np.eye(c)[y], LossSpec(kind))[0])
                assert abs(v - c * base) < 1e-9
        # for a fixed class count the weighted loss ignores the imbalance
        c = 4
        names = [str(i) for i in range(c)]
        ref = None
        for _ in range(50):
            counts = rng.integers(1, 1000, c)
            stats = stats_from_counts(dict(zip(names, counts.tolist())), names)
            y = np.repeat(np.arange(c), counts)
            out = np.full((len(y), c), 0.25)
            v = float(loss(out, np.eye(c)[y], LossSpec("BinaryCrossEntropy",
                                                      stats.weight_vector(names)))[0])
            ref = v if ref is None else ref
            assert abs(v - ref) < 1e-9


class TestSiScheme:
    def _splits(self):
        p = SynthParams(side=64)
        four = [gen_image("SiH100", c, p, i) for c in class_names("si4") for i in range(4)]
        two = [gen_image("SiH100", c, p, 50 + i) for c in BINARY for i in range(4)]
        return DatasetSplit(tuple(four), tuple(four[:4]), (), 0), \
            DatasetSplit(tuple(two), tuple(two[:2]), (), 0)

    def test_structure_and_audit(self):
        four, two = self._splits()
        cfg = TrainConfig(batch_size=8, image_side=32, epochs=1, augment_repeats=2, seed=1)
        net4, net2 = train_si_scheme(four, two, cfg, arch="rw")
        assert (net4.num_classes, net2.num_classes) == (4, 2)
        assert net2.classes == BINARY
        audit = net2.train_history.augmentation
        assert set(audit) == set(BINARY)
        for ops in audit.values():
            assert set(ops) <= {"copies", "Horizontal", "noise"}
        assert "TipChange" not in net4.train_history.augmentation
        assert set(net4.train_history.augmentation) == set(class_names("si4"))

    def test_rejects_tipchange_in_four_class(self):
        four, two = self._splits()
        leaked = DatasetSplit(four.train + two.train[:1], four.test, (), 0)
        with pytest.raises(DataError):
            train_si_scheme(leaked, two, TrainConfig(batch_size=8, image_side=32, epochs=1),
                            arch="rw")
