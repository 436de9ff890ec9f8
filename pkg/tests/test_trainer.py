"""Staged protocol: freeze contracts, early stopping, determinism."""

import numpy as np
import pytest

from tristream.errors import ValidationError
from tristream.model import BackboneConfig, MultiStreamModel
from tristream.nn import OptimizerConfig
from tristream.trainer import (
    EarlyStopPolicy,
    EpochRecord,
    Sample,
    StagePlan,
    TrainData,
    resolve_mask,
    run_protocol,
    run_stage,
    select_best,
    split_validation,
    stage_plan,
)
from tristream.semisup import Segmenter
from tristream.vision import BinaryMask, GrayImage

SIZE = 16
CFG = BackboneConfig(stage_channels=(3, 6), blocks_per_stage=1, final_channels=6, input_size=SIZE)
OPT = OptimizerConfig(learning_rate=0.02, momentum=0.9, weight_decay=1e-4)


def make_samples(n, seed=0, size=SIZE):
    """Even split: positives carry a bright blob plus its mask."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        px = rng.uniform(0.0, 0.2, (size, size)).astype(np.float32)
        bits = np.zeros((size, size), dtype=np.uint8)
        if label == 1:
            h, w = rng.integers(4, 7), rng.integers(4, 7)
            r = rng.integers(1, size - h - 1)
            c = rng.integers(1, size - w - 1)
            px[r : r + h, c : c + w] = rng.uniform(0.8, 1.0, (h, w))
            bits[r : r + h, c : c + w] = 1
        out.append(Sample(f"s{i}", GrayImage(px), label, BinaryMask(bits)))
    return out


def snapshot(params):
    return [p.value.data.tobytes() for p in params]


@pytest.fixture()
def data():
    return TrainData(train=make_samples(8, seed=1), val=make_samples(4, seed=2))


class TestStagePlan:
    def test_factory_assignments(self):
        p = stage_plan("I")
        assert p.trainable == ("global",)
        assert set(p.frozen) == {"heatmap", "infected", "fusion"}
        p = stage_plan("III")
        assert p.trainable == ("fusion",)
        p = stage_plan("all")
        assert p.frozen == ()

    def test_defaults(self):
        p = stage_plan("I")
        assert p.epochs == 50 and p.batch_size == 32

    def test_overlap_rejected(self):
        with pytest.raises(ValidationError):
            StagePlan(stage="I", trainable=("global",), frozen=("global", "heatmap", "infected", "fusion"))

    def test_unknown_stage(self):
        with pytest.raises(ValidationError):
            stage_plan("IV")


class TestSelectBest:
    def _records(self, accs):
        return [EpochRecord(epoch=i + 1, lr=0.01, train_loss=1.0, val_accuracy=a) for i, a in enumerate(accs)]

    def test_argmax(self):
        assert select_best(self._records([0.6, 0.8, 0.7])) == 2

    def test_monotone_takes_last(self):
        assert select_best(self._records([0.1, 0.2, 0.3])) == 3

    def test_tie_takes_earliest(self):
        assert select_best(self._records([0.8, 0.8])) == 1

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            select_best([])


class TestRunStage:
    def test_stage_ii_heatmap_freezes_global_bitwise(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        before = snapshot(m.global_branch.params)
        run_stage(m, stage_plan("II-heatmap", epochs=3), data, opt=OPT, seed=0)
        assert snapshot(m.global_branch.params) == before

    def test_stage_iii_freezes_all_branches_bitwise(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        before = (
            snapshot(m.global_branch.params)
            + snapshot(m.heatmap_branch.params)
            + snapshot(m.infected_branch.params)
        )
        run_stage(m, stage_plan("III", epochs=3), data, opt=OPT, seed=0)
        after = (
            snapshot(m.global_branch.params)
            + snapshot(m.heatmap_branch.params)
            + snapshot(m.infected_branch.params)
        )
        assert after == before

    def test_trainable_params_actually_move(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        before = snapshot([m.fusion_w])
        run_stage(m, stage_plan("III", epochs=3), data, opt=OPT, seed=0)
        assert snapshot([m.fusion_w]) != before

    def test_overfit_small_set(self):
        samples = make_samples(4, seed=3)
        d = TrainData(train=samples, val=samples)
        m = MultiStreamModel(backbone=CFG, seed=1)
        hist = run_stage(
            m, stage_plan("I", epochs=20, batch_size=4), d, opt=OPT,
            policy=EarlyStopPolicy(patience=30), seed=0,
        )
        assert hist.records[-1].train_loss < hist.records[0].train_loss

    def test_lr_schedule_in_history(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        opt = OptimizerConfig(learning_rate=0.01, lr_decay_epoch=2, lr_decay_factor=0.1)
        hist = run_stage(
            m, stage_plan("III", epochs=4), data, opt=opt,
            policy=EarlyStopPolicy(patience=10), seed=0,
        )
        assert [r.lr for r in hist.records] == pytest.approx([0.01, 0.01, 0.001, 0.001])

    def test_early_stop_halts_after_patience(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        # tiny lr: val accuracy will not improve after epoch 1
        opt = OptimizerConfig(learning_rate=1e-9)
        hist = run_stage(
            m, stage_plan("III", epochs=50), data, opt=opt,
            policy=EarlyStopPolicy(patience=3), seed=0,
        )
        assert hist.stopped_early
        assert len(hist.records) == hist.best_epoch + 3

    def test_best_epoch_weights_restored(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        hist = run_stage(
            m, stage_plan("III", epochs=5), data, opt=OPT,
            policy=EarlyStopPolicy(patience=10), seed=0,
        )
        assert hist.best_epoch == select_best(hist.records)


class TestRunProtocol:
    def test_heads_emit_valid_probabilities(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        run_protocol(m, data, opt=OPT, epochs=2, batch_size=4, seed=0)
        held_out = make_samples(4, seed=9)
        for s in held_out:
            out = m.forward_all(s.image, resolve_mask(s, None))
            for logits in out["logits"].values():
                p = m.predict_proba(logits)
                assert p.shape == (2,)
                assert np.all(p > 0) and np.all(p < 1)

    def test_stage_ii_order_independence(self, data):
        finals = []
        for order in (("I", "II-heatmap", "II-infected", "III"), ("I", "II-infected", "II-heatmap", "III")):
            m = MultiStreamModel(backbone=CFG, seed=5)
            run_protocol(m, data, opt=OPT, epochs=2, batch_size=4, seed=7, stages=order)
            finals.append(b"".join(p.value.data.tobytes() for p in m.parameters()))
        assert finals[0] == finals[1]

    def test_protocol_determinism(self, data):
        finals = []
        for _ in range(2):
            m = MultiStreamModel(backbone=CFG, seed=2)
            run_protocol(m, data, opt=OPT, epochs=2, batch_size=4, seed=3)
            finals.append(b"".join(p.value.data.tobytes() for p in m.parameters()))
        assert finals[0] == finals[1]

    def test_all_stage_ablation_runs(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        result = run_protocol(m, data, opt=OPT, epochs=2, batch_size=4, seed=0, stages=("all",))
        assert result.histories[0].stage == "all"
        assert len(result.histories) == 1

    def test_nothing_frozen_after_protocol(self, data):
        m = MultiStreamModel(backbone=CFG, seed=0)
        run_protocol(m, data, opt=OPT, epochs=1, batch_size=4, seed=0)
        assert not any(p.frozen for p in m.parameters())


class TestMaskResolution:
    def test_own_mask_wins(self):
        s = make_samples(2, seed=0)[1]
        assert resolve_mask(s, None) is s.mask

    def test_missing_mask_without_segmenter_is_empty(self):
        s = make_samples(2, seed=0)[0]
        s.mask = None
        assert resolve_mask(s, None).is_empty()

    def test_segmenter_fills_missing_mask(self):
        s = make_samples(2, seed=0)[1]
        s.mask = None
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        mask = resolve_mask(s, seg)
        assert mask.bits.shape == s.image.pixels.shape

    def test_segmenter_size_adapts(self):
        rng = np.random.default_rng(0)
        s = Sample("x", GrayImage(rng.random((32, 32)).astype(np.float32)), 0, None)
        seg = Segmenter(SIZE, base_channels=4, seed=0)
        mask = resolve_mask(s, seg)
        assert mask.bits.shape == (32, 32)


class TestSplitValidation:
    def test_stratified_fractions(self):
        samples = make_samples(20, seed=4)
        d = split_validation(samples, frac=0.2, seed=0)
        assert len(d.val) == 4
        assert sum(1 for s in d.val if s.label == 1) == 2
        assert len(d.train) == 16

    def test_too_small_class_rejected(self):
        samples = make_samples(2, seed=0)
        with pytest.raises(ValidationError):
            split_validation(samples, frac=0.9)

    def test_deterministic(self):
        samples = make_samples(10, seed=4)
        a = split_validation(samples, frac=0.2, seed=1)
        b = split_validation(samples, frac=0.2, seed=1)
        assert [s.sample_id for s in a.val] == [s.sample_id for s in b.val]
