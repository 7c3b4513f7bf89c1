import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entroad.errors import DataError
from entroad.metrics import aupro, auroc, average_precision, evaluate


def auroc_pair_counting(scores, labels):
    """O(n^2) Mann-Whitney oracle."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ap_threshold_oracle(scores, labels):
    """Step AP by explicit threshold sweep over distinct scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = labels.sum()
    thresholds = sorted(set(scores), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        selected = scores >= t
        tp = labels[selected].sum()
        precision = tp / selected.sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def aupro_exhaustive_oracle(anomaly_map, mask, fpr_limit=0.3):
    """AUPRO over every distinct map value as a threshold, single region."""
    from scipy import ndimage

    structure = [[0, 1, 0], [1, 1, 1], [0, 1, 0]]
    labeled, n_regions = ndimage.label(mask > 0, structure=structure)
    normal = anomaly_map[mask == 0]
    points = [(0.0, 0.0)]
    for thr in sorted(set(anomaly_map.reshape(-1)), reverse=True):
        pred = anomaly_map >= thr
        pros = []
        for rid in range(1, n_regions + 1):
            region = labeled == rid
            pros.append((pred & region).sum() / region.sum())
        fpr = (normal >= thr).mean()
        points.append((fpr, float(np.mean(pros))))
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    cross = int(np.argmax(xs >= fpr_limit))
    if xs[cross] != fpr_limit:
        t = (fpr_limit - xs[cross - 1]) / (xs[cross] - xs[cross - 1])
        y_at = ys[cross - 1] + t * (ys[cross] - ys[cross - 1])
        xs = np.r_[xs[:cross], fpr_limit]
        ys = np.r_[ys[:cross], y_at]
    else:
        xs, ys = xs[: cross + 1], ys[: cross + 1]
    return float(np.trapezoid(ys, xs) / fpr_limit)


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([0.2, 0.8], [0, 1]) == 1.0

    def test_all_ties_give_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(200):
            scores = rng.random(20)
            if rng.random() < 0.3:  # inject ties
                scores = np.round(scores, 1)
            labels = rng.integers(0, 2, size=20)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert auroc(scores, labels) == pytest.approx(
                auroc_pair_counting(scores, labels), abs=1e-12
            )

    def test_negation_symmetry(self, rng):
        scores = rng.random(30)
        labels = rng.integers(0, 2, size=30)
        labels[0], labels[1] = 0, 1
        assert auroc(scores, labels) + auroc(-scores, labels) == pytest.approx(1.0, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            auroc([0.1, 0.2], [1, 1])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=15)
        labels = rng.integers(0, 2, size=15)
        labels[:2] = [0, 1]
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auroc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.1, 0.9, 0.8], [0, 1, 1]) == pytest.approx(1.0, abs=1e-12)

    def test_single_positive_rank_k(self, rng):
        for _ in range(20):
            n = 12
            scores = rng.permutation(n).astype(float)  # distinct scores
            labels = np.zeros(n, dtype=int)
            pos = int(rng.integers(0, n))
            labels[pos] = 1
            k = int((scores > scores[pos]).sum()) + 1
            assert average_precision(scores, labels) == pytest.approx(1.0 / k, abs=1e-12)

    def test_matches_threshold_oracle(self, rng):
        for _ in range(200):
            scores = rng.random(20)
            if rng.random() < 0.3:
                scores = np.round(scores, 1)
            labels = rng.integers(0, 2, size=20)
            if labels.sum() == 0:
                labels[0] = 1
            assert average_precision(scores, labels) == pytest.approx(
                ap_threshold_oracle(scores, labels), abs=1e-12
            )

    def test_no_positives_rejected(self):
        with pytest.raises(DataError):
            average_precision([0.4, 0.6], [0, 0])

    def test_monotone_transform_invariance(self, rng):
        scores = rng.normal(size=25)
        labels = rng.integers(0, 2, size=25)
        labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(np.tanh(scores), labels) == pytest.approx(base, abs=1e-12)


class TestAupro:
    def test_perfect_detector(self, rng):
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[3:6, 4:8] = 1
        assert aupro([mask.astype(float)], [mask]) == pytest.approx(1.0, abs=1e-3)

    def test_inverted_detector(self, rng):
        mask = np.zeros((12, 12), dtype=np.uint8)
        mask[3:6, 4:8] = 1
        assert aupro([1.0 - mask.astype(float)], [mask]) == pytest.approx(0.0, abs=1e-3)

    def test_matches_exhaustive_oracle_single_region(self, rng):
        for _ in range(15):
            mask = np.zeros((8, 8), dtype=np.uint8)
            r0, c0 = rng.integers(0, 5, size=2)
            mask[r0:r0 + 3, c0:c0 + 3] = 1
            anomaly_map = rng.random((8, 8))
            got = aupro([anomaly_map], [mask])
            expected = aupro_exhaustive_oracle(anomaly_map, mask)
            assert got == pytest.approx(expected, abs=1e-3)

    def test_limit_normalization_consistency(self, rng):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[2:5, 2:5] = 1
        anomaly_map = rng.random((10, 10))
        full = aupro([anomaly_map], [mask], fpr_limit=1.0)
        capped = aupro([anomaly_map], [mask], fpr_limit=0.3)
        assert full * 1.0 >= capped * 0.3 - 1e-6

    def test_no_regions_rejected(self, rng):
        with pytest.raises(DataError):
            aupro([rng.random((5, 5))], [np.zeros((5, 5), dtype=np.uint8)])

    def test_four_connectivity_splits_diagonal_regions(self, rng):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[1, 1] = 1
        mask[2, 2] = 1  # diagonal neighbors are distinct regions
        anomaly_map = np.zeros((6, 6))
        anomaly_map[1, 1] = 1.0  # only one region detected
        score = aupro([anomaly_map], [mask], fpr_limit=1.0)
        assert 0.4 < score < 0.8  # one of two regions found


class TestEvaluate:
    class _Result:
        def __init__(self, score, anomaly_map):
            self.score = score
            self.map = anomaly_map

    def _perfect_pair(self, rng, n=6):
        bundles = []
        results = []
        from entroad.bundle import FeatureBundle

        for i in range(n):
            label = i % 2
            mask = np.zeros((14, 14), dtype=np.uint8)
            if label:
                mask[2:6, 3:8] = 1
            att = np.full((2, 2), 0.5, dtype=np.float32)
            bundles.append(
                FeatureBundle(
                    f"e{i}", (1, 1), (14, 14), [6],
                    {6: np.zeros((1, 3), dtype=np.float32)}, {6: att}, label, mask,
                )
            )
            results.append(self._Result(float(label), mask.astype(float)))
        return results, bundles

    def test_perfect_predictions_score_one(self, rng):
        results, bundles = self._perfect_pair(rng)
        report = evaluate(results, bundles)
        assert report.image_auroc == 1.0
        assert report.image_ap == 1.0
        assert report.pixel_auroc == 1.0
        assert report.aupro == pytest.approx(1.0, abs=1e-3)
        assert report.n_images == 6

    def test_composition_matches_direct_calls(self, rng):
        results, bundles = self._perfect_pair(rng)
        for r in results:
            r.map = rng.random(r.map.shape)
            r.score = float(rng.random())
        report = evaluate(results, bundles)
        scores = [r.score for r in results]
        labels = [b.label for b in bundles]
        assert report.image_auroc == auroc(scores, labels)
        assert report.image_ap == average_precision(scores, labels)
        pixels = np.concatenate([r.map.ravel() for r in results])
        truth = np.concatenate([b.mask.ravel() for b in bundles])
        assert report.pixel_auroc == auroc(pixels, truth)
        assert report.aupro == aupro([r.map for r in results], [b.mask for b in bundles])

    def test_percent_block_one_decimal(self, rng):
        results, bundles = self._perfect_pair(rng)
        doc = evaluate(results, bundles).to_dict()
        assert doc["percent"]["image_auroc"] == 100.0
        assert isinstance(doc["percent"]["aupro"], float)
