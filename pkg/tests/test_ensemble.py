from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tipstate.ensemble import (ABSTAIN, SI_GOOD_BAD, EnsembleModel, GoodBadMap, Prediction,
                               abstention_count, collapse_confusion, collapse_labels,
                               collapse_scores, ensemble_predict, load_ensemble,
                               mean_confidences, vote, vote_batch, write_ensemble_manifest)
from tipstate.errors import ClassSetMismatch, UnmappedClass
from tipstate.imagecore import ScanImage, class_names
from tipstate.metrics import confusion_matrix
from tipstate.zoo import build_rw, save_checkpoint


def conf_for(votes, classes=3, top=0.9):
    out = np.full((len(votes), classes), (1 - top) / (classes - 1))
    out[np.arange(len(votes)), votes] = top
    return out


class TestVote:
    def test_majority(self):
        assert vote(conf_for([0, 0, 1])) == 0

    def test_tie_by_mean_confidence(self):
        conf = np.array([[0.6, 0.3, 0.1], [0.35, 0.4, 0.25], [0.25, 0.3, 0.45]])
        m = conf.mean(axis=0)
        assert m.argmax() == 0  # mean confidences ranked A > B > C
        assert vote(conf) == 0

    def test_all_abstain(self):
        assert vote(conf_for([0, 1, 2], top=0.99), threshold=1.0) == ABSTAIN

    def test_threshold_drops_members(self):
        conf = np.array([[0.55, 0.45], [0.52, 0.48], [0.1, 0.9]])
        assert vote(conf, 0.0) == 0
        assert vote(conf, 0.6) == 1

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_mode_when_strict_majority(self, seed):
        rng = np.random.default_rng(seed)
        m, c = int(rng.integers(1, 8)), int(rng.integers(2, 6))
        conf = rng.random((m, c))
        thr = float(rng.uniform(0, 1))
        active = conf.max(axis=1) >= thr
        votes = conf.argmax(axis=1)[active]
        if len(votes) == 0:
            assert vote(conf, thr) == ABSTAIN
            return
        (top, n), = Counter(votes.tolist()).most_common(1)
        if n > len(votes) / 2:
            assert vote(conf, thr) == top

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_abstentions_monotone(self, seed):
        conf = np.random.default_rng(seed).random((3, 20, 4))
        counts = [abstention_count(conf, t) for t in np.linspace(0, 1, 11)]
        assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_identical_members(self):
        conf = np.random.default_rng(0).random((10, 4))
        stack = np.stack([conf] * 3)
        np.testing.assert_array_equal(vote_batch(stack, 0.0), conf.argmax(axis=1))


class TestMeans:
    def test_identical(self):
        p = Prediction(("a", "b"), [0.3, 0.7])
        np.testing.assert_allclose(mean_confidences([p, p, p]).confidences, p.confidences,
                                   rtol=0, atol=1e-15)

    def test_arithmetic(self):
        m = mean_confidences([Prediction(("a",), [0.2]), Prediction(("a",), [0.8])])
        assert m.confidences[0] == 0.5

    def test_mismatch(self):
        with pytest.raises(ClassSetMismatch):
            mean_confidences([Prediction(("a", "b"), [0, 1]), Prediction(("b", "a"), [0, 1])])

    @given(st.lists(st.lists(st.floats(0, 1), min_size=3, max_size=3), min_size=1, max_size=6))
    def test_convexity(self, rows):
        m = mean_confidences([Prediction(("a", "b", "c"), r) for r in rows]).confidences
        assert ((m >= 0) & (m <= 1)).all()


class TestModel:
    def _members(self, n=3, classes=("x", "y")):
        nets = []
        for i in range(n):
            net = build_rw(len(classes), 32, seed=i).eval()
            net.classes = classes
            nets.append(net)
        return nets

    def test_predict_single_image(self):
        model = EnsembleModel(self._members())
        preds, label = ensemble_predict(model, ScanImage(np.zeros((32, 32))))
        assert len(preds) == 3 and label in ("x", "y")

    def test_class_mismatch(self):
        a = self._members(1)[0]
        b = self._members(1, ("y", "x"))[0]
        with pytest.raises(ClassSetMismatch):
            EnsembleModel([a, b])

    def test_manifest_round_trip(self, tmp_path):
        members = self._members()
        paths = [save_checkpoint(m, tmp_path / f"m{i}.tsck") for i, m in enumerate(members)]
        manifest = write_ensemble_manifest(tmp_path / "ens.json", paths, 0.3)
        model = load_ensemble(manifest)
        assert model.threshold == 0.3 and len(model.members) == 3
        x = np.random.default_rng(0).uniform(-1, 1, size=(5, 32, 32))
        direct = EnsembleModel(members, 0.3).predict_batch(x)
        for a, b in zip(model.predict_batch(x), direct):
            np.testing.assert_array_equal(a, b)


class TestGoodBad:
    def test_si_map(self):
        assert dict(SI_GOOD_BAD.mapping) == {"AsymmetryDimer": "Good", "Atoms": "Good",
                                             "Rows": "Good", "GenericDefect": "Bad"}

    def test_unmapped(self):
        with pytest.raises(UnmappedClass):
            GoodBadMap({"Atoms": "Good"}).check_total(class_names("si4"))

    def test_scores(self):
        classes = class_names("si4")
        conf = np.array([[0.2, 0.2, 0.2, 0.4], [0.0, 0.0, 0.0, 0.0]])
        s = collapse_scores(conf, classes, SI_GOOD_BAD)
        np.testing.assert_allclose(s[0], [0.6, 0.4])
        np.testing.assert_allclose(s[1], [0.5, 0.5])

    def test_all_good_recall(self):
        classes = class_names("si4")
        rng = np.random.default_rng(0)
        good = SI_GOOD_BAD.good_mask(classes)
        for _ in range(50):
            cm = rng.integers(0, 10, size=(4, 5))
            cm[~good] = 0  # all-Good dataset
            binary = collapse_confusion(cm, classes, SI_GOOD_BAD)
            good_recall = binary[0, 0] / binary[0].sum()
            assert good_recall == cm[good][:, :4][:, good].sum() / cm[good].sum()

    def test_commutation(self):
        classes = class_names("metal6")
        from tipstate.ensemble import METAL_GOOD_BAD

        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(10, 80))
            truths = rng.integers(0, 6, n)
            preds = rng.integers(-1, 6, n)
            cm = confusion_matrix(preds.tolist(), truths.tolist(), classes)
            via_cm = collapse_confusion(cm, classes, METAL_GOOD_BAD)
            direct = confusion_matrix(collapse_labels(preds, classes, METAL_GOOD_BAD).tolist(),
                                      collapse_labels(truths, classes, METAL_GOOD_BAD).tolist(),
                                      ("Good", "Bad"))
            np.testing.assert_array_equal(via_cm, direct)
