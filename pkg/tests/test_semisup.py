"""Self-training loop: round accounting, partition safety, learning checks."""

import numpy as np
import pytest

from tristream.errors import ValidationError
from tristream.nn import OptimizerConfig
from tristream.semisup import (
    LabeledImage,
    PseudoLabelPool,
    Segmenter,
    pseudo_label_round,
    run_algorithm1,
    train_segmenter,
)
from tristream.vision import BinaryMask, GrayImage

SIZE = 16
FAST_CFG = OptimizerConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.0)


def blob_image(rng, size=SIZE):
    """Dark background with one bright rectangle; mask marks the rectangle."""
    px = rng.uniform(0.0, 0.15, (size, size)).astype(np.float32)
    bits = np.zeros((size, size), dtype=np.uint8)
    h = rng.integers(3, 6)
    w = rng.integers(3, 6)
    r = rng.integers(1, size - h - 1)
    c = rng.integers(1, size - w - 1)
    px[r : r + h, c : c + w] = rng.uniform(0.75, 1.0, (h, w))
    bits[r : r + h, c : c + w] = 1
    return GrayImage(px), BinaryMask(bits)


def make_pool(n_seed, n_unlabeled, k, seed=0):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for i in range(n_seed):
        img, mask = blob_image(rng)
        train.append(LabeledImage(f"seed{i}", img, mask, "seed"))
    for i in range(n_unlabeled):
        img, _ = blob_image(rng)
        test.append((f"unlab{i}", img))
    return PseudoLabelPool(train_set=train, test_set=test, batch_size=k)


class TestPool:
    def test_partition_enforced_on_construction(self):
        rng = np.random.default_rng(0)
        img, mask = blob_image(rng)
        with pytest.raises(ValidationError):
            PseudoLabelPool(
                train_set=[LabeledImage("a", img, mask, "seed")],
                test_set=[("a", img)],
            )

    def test_provenance_vocabulary(self):
        rng = np.random.default_rng(0)
        img, mask = blob_image(rng)
        with pytest.raises(ValidationError):
            LabeledImage("x", img, mask, "guessed")

    def test_mask_image_shape_agreement(self):
        rng = np.random.default_rng(0)
        img, _ = blob_image(rng)
        with pytest.raises(ValidationError):
            LabeledImage("x", img, BinaryMask(np.zeros((4, 4), dtype=np.uint8)), "seed")

    def test_expected_rounds(self):
        assert make_pool(2, 250, 100).expected_rounds() == 3
        assert make_pool(2, 0, 100).expected_rounds() == 0


class TestSegmenter:
    def test_output_is_probability_map(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        rng = np.random.default_rng(1)
        img, _ = blob_image(rng)
        prob = seg.forward(img)
        assert prob.shape == (1, SIZE, SIZE)
        assert np.all(prob.data > 0) and np.all(prob.data < 1)

    def test_predict_mask_binarizes_at_half(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        rng = np.random.default_rng(2)
        img, _ = blob_image(rng)
        mask = seg.predict_mask(img)
        prob = seg.forward(img).data[0]
        np.testing.assert_array_equal(mask.bits, (prob > 0.5).astype(np.uint8))

    def test_input_size_validated(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        with pytest.raises(ValidationError):
            seg.forward(GrayImage(np.zeros((8, 8), dtype=np.float32)))


class TestTrainSegmenter:
    def test_empty_train_set_rejected(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        with pytest.raises(ValidationError):
            train_segmenter(seg, [], epochs=1)

    def test_zero_epochs_leaves_params_unchanged(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        before = [p.value.data.copy() for p in seg.params]
        pool = make_pool(2, 0, 10)
        train_segmenter(seg, pool.train_set, epochs=0)
        for p, b in zip(seg.params, before):
            assert p.value.data.tobytes() == b.tobytes()

    def test_overfit_one_sample_loss_decreases(self):
        # momentum off: a single easy sample under plain GD must descend
        seg = Segmenter(SIZE, base_channels=4, seed=3)
        rng = np.random.default_rng(3)
        img, mask = blob_image(rng)
        item = LabeledImage("one", img, mask, "seed")
        cfg = OptimizerConfig(learning_rate=0.05, momentum=0.0, weight_decay=0.0)
        losses = train_segmenter(seg, [item], epochs=5, cfg=cfg, seed=0)
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_blob_dataset_pixel_accuracy(self):
        seg = Segmenter(SIZE, base_channels=4, seed=4)
        pool = make_pool(12, 0, 10, seed=9)
        train_segmenter(seg, pool.train_set, epochs=30, cfg=FAST_CFG, seed=1)
        correct = total = 0
        for item in pool.train_set:
            pred = seg.predict_mask(item.image).bits
            correct += int((pred == item.mask.bits).sum())
            total += pred.size
        assert correct / total >= 0.95

    def test_deterministic_given_seed(self):
        results = []
        for _ in range(2):
            seg = Segmenter(SIZE, base_channels=4, seed=5)
            pool = make_pool(4, 0, 10, seed=5)
            train_segmenter(seg, pool.train_set, epochs=3, cfg=FAST_CFG, seed=2)
            results.append(b"".join(p.value.data.tobytes() for p in seg.params))
        assert results[0] == results[1]


class TestPseudoLabelRound:
    def test_round_moves_min_k(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(3, 7, 5)
        rng = np.random.default_rng(0)
        assert pseudo_label_round(seg, pool, rng) == 5
        assert len(pool.test_set) == 2
        assert pseudo_label_round(seg, pool, rng) == 2
        assert len(pool.test_set) == 0
        assert pseudo_label_round(seg, pool, rng) == 0

    def test_adopted_carry_pseudo_provenance(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(2, 4, 10)
        pseudo_label_round(seg, pool, np.random.default_rng(1))
        pseudo = [i for i in pool.train_set if i.provenance == "pseudo"]
        assert len(pseudo) == 4


class TestRunAlgorithm1:
    def test_round_count_250_over_100(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(2, 250, 100)
        report = run_algorithm1(seg, pool, epochs_per_round=0, seed=0)
        assert report.rounds == 3
        assert report.round_sizes == (100, 100, 50)
        assert len(pool.test_set) == 0
        assert report.final_train_size == 252

    def test_round_count_25_over_10(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(10, 25, 10)
        report = run_algorithm1(seg, pool, epochs_per_round=1, cfg=FAST_CFG, seed=0)
        assert report.rounds == 3
        # one training pass per round plus the final full-set pass
        assert len(report.losses_per_round) == 4

    def test_empty_unlabeled_reduces_to_supervised(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(4, 0, 10)
        report = run_algorithm1(seg, pool, epochs_per_round=2, cfg=FAST_CFG, seed=0)
        assert report.rounds == 0
        assert len(report.losses_per_round) == 1

    def test_requires_seed_set(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(0, 5, 10)
        with pytest.raises(ValidationError):
            run_algorithm1(seg, pool, epochs_per_round=1)

    def test_seed_masks_never_overwritten(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(3, 8, 4)
        originals = {i.image_id: i.mask.bits.copy() for i in pool.train_set}
        run_algorithm1(seg, pool, epochs_per_round=1, cfg=FAST_CFG, seed=0)
        for item in pool.train_set:
            if item.image_id in originals:
                assert item.provenance == "seed"
                np.testing.assert_array_equal(item.mask.bits, originals[item.image_id])

    def test_partition_holds_and_each_labeled_once(self):
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        pool = make_pool(2, 9, 4)
        ids_before = pool.all_ids()
        run_algorithm1(seg, pool, epochs_per_round=1, cfg=FAST_CFG, seed=0)
        train_ids = [i.image_id for i in pool.train_set]
        assert len(train_ids) == len(set(train_ids))
        assert set(train_ids) == ids_before

    def test_seeded_determinism_of_final_masks(self):
        outs = []
        for _ in range(2):
            seg = Segmenter(SIZE, base_channels=4, seed=1)
            pool = make_pool(3, 6, 3, seed=7)
            run_algorithm1(seg, pool, epochs_per_round=2, cfg=FAST_CFG, seed=11)
            outs.append(
                {i.image_id: i.mask.bits.tobytes() for i in pool.train_set}
            )
        assert outs[0] == outs[1]
