"""Losses, batching, optimizer schedule, checkpoints, the training loop,
and the finite-difference gradient check."""

import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bpr.corpus import CorpusError, FormatError, make_splits
from bpr.ict import IctConfig, build_ict_dataset
from bpr.training import (
    EarlyStopper,
    TrainConfig,
    _dev_mrr,
    batch_mask,
    build_exclusion_index,
    build_model,
    clip_and_step,
    contrastive_loss,
    contrastive_row_losses,
    count_degenerate_rows,
    grad_check,
    iterate_batches,
    load_checkpoint,
    make_optimizer,
    paper_zuco_config,
    parse_config_file,
    sample_batch,
    save_checkpoint,
    schedule_scale,
    total_loss,
    train,
    uniformity_loss,
    write_config_file,
)


def fake_pair(pid: str, sid: str):
    """Minimal stand-in carrying only the fields batching inspects."""
    from bpr.ict import IctPair

    return IctPair(
        query_signal=np.zeros((2, 4), dtype=np.float32),
        query_tokens=("a", "b"),
        document_tokens=("c",),
        positive_passage_id=pid,
        subject_id=sid,
        span_start=0,
        span_len=2,
        masked=True,
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestConfig:
    def test_validation(self):
        with pytest.raises(CorpusError):
            TrainConfig(temperature=0.0)
        with pytest.raises(CorpusError):
            TrainConfig(uniformity_weight=-0.1)
        with pytest.raises(CorpusError):
            TrainConfig(batch_size=1)
        with pytest.raises(CorpusError):
            TrainConfig(query_encoder="audio")

    def test_paper_preset_values(self):
        config = paper_zuco_config()
        assert config.batch_size == 128
        assert config.learning_rate == 1e-6
        assert config.warmup_epochs == 10
        assert config.temperature == 0.07
        assert config.uniformity_weight == 0.1
        assert (config.input_dim, config.model_dim, config.output_dim) == \
            (840, 512, 768)
        assert (config.n_layers, config.n_heads) == (3, 8)
        assert config.clip_norm == 1.0
        assert config.patience == 5

    def test_config_file_round_trip(self, tmp_path):
        config = TrainConfig(batch_size=8, learning_rate=0.01,
                             subject_aware=False, pooling="mean")
        path = tmp_path / "cfg.txt"
        write_config_file(path, config)
        assert parse_config_file(path) == config

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("momentum = 0.9\n")
        with pytest.raises(FormatError, match="unknown key"):
            parse_config_file(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("batch_size 8\n")
        with pytest.raises(FormatError, match="key = value"):
            parse_config_file(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("# a comment\n\nbatch_size = 4  # inline\n")
        assert parse_config_file(path).batch_size == 4


# ---------------------------------------------------------------------------
# Exclusion index and batches
# ---------------------------------------------------------------------------

class TestExclusion:
    def test_shared_passage(self):
        index = build_exclusion_index([("p1", "s1"), ("p1", "s2")])
        assert index.lookup("p1", "s1") == {("p1", "s2")}

    def test_single_reader(self):
        index = build_exclusion_index([("p2", "s1")])
        assert index.lookup("p2", "s1") == frozenset()

    def test_full_grid_sizes(self):
        keys = [(f"p{i}", f"s{s}") for i in range(100) for s in range(3)]
        index = build_exclusion_index(keys)
        assert all(len(index.lookup(p, s)) == 2 for p, s in keys)

    def test_mask_symmetric_for_shared_pair(self):
        pairs = [fake_pair("p1", "s1"), fake_pair("p1", "s2"),
                 fake_pair("p2", "s1")]
        index = build_exclusion_index([p.key for p in pairs])
        mask = batch_mask(pairs, index)
        assert not mask[0, 1] and not mask[1, 0]
        assert mask[0, 2] and mask[2, 0] and mask[1, 2]
        assert mask.diagonal().all()

    def test_distinct_passages_all_true(self):
        pairs = [fake_pair(f"p{i}", "s1") for i in range(4)]
        index = build_exclusion_index([p.key for p in pairs])
        assert batch_mask(pairs, index).all()

    def test_subject_aware_off_disables_masking(self):
        pairs = [fake_pair("p1", "s1"), fake_pair("p1", "s2")]
        index = build_exclusion_index([p.key for p in pairs])
        assert batch_mask(pairs, index, subject_aware=False).all()

    def test_sampler_audit_masked_pairs_share_passage(self):
        pairs = [fake_pair(f"p{i}", f"s{s}")
                 for i in range(20) for s in range(3)]
        index = build_exclusion_index([p.key for p in pairs])
        config = TrainConfig(batch_size=16)
        rng = np.random.default_rng(0)
        masked_seen = 0
        for _ in range(1_000):
            batch = sample_batch(pairs, config, index, rng)
            falses = np.argwhere(~batch.mask)
            for i, j in falses:
                assert i != j
                assert batch.pairs[i].positive_passage_id == \
                    batch.pairs[j].positive_passage_id
                assert batch.pairs[i].subject_id != batch.pairs[j].subject_id
            masked_seen += len(falses)
        assert masked_seen > 0

    def test_sample_batch_too_small(self):
        pairs = [fake_pair("p1", "s1")]
        index = build_exclusion_index([("p1", "s1")])
        with pytest.raises(CorpusError, match="batch size"):
            sample_batch(pairs, TrainConfig(), index,
                         np.random.default_rng(0))

    def test_iterate_batches_drops_tail(self):
        pairs = [fake_pair(f"p{i}", "s1") for i in range(37)]
        index = build_exclusion_index([p.key for p in pairs])
        batches = iterate_batches(pairs, TrainConfig(batch_size=16), index,
                                  np.random.default_rng(0))
        assert len(batches) == 2
        seen = [p.positive_passage_id for b in batches for p in b.pairs]
        assert len(set(seen)) == 32


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

class TestContrastiveLoss:
    def test_uniform_batch_gives_ln_b(self):
        for b in (2, 5, 16):
            sims = torch.full((b, b), 0.3, dtype=torch.float64)
            mask = np.ones((b, b), dtype=bool)
            loss = contrastive_loss(sims, mask, tau=0.07)
            assert abs(loss.item() - math.log(b)) < 1e-9

    def test_single_negative_closed_form(self):
        sims = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        mask = np.ones((2, 2), dtype=bool)
        loss = contrastive_loss(sims, mask, tau=1.0)
        assert abs(loss.item() - math.log(1 + math.exp(-1))) < 1e-9

    def test_masked_item_addition_leaves_rows_unchanged(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            b = 5
            sims = torch.tensor(rng.normal(size=(b, b)))
            mask = rng.random((b, b)) > 0.2
            np.fill_diagonal(mask, True)
            before = contrastive_row_losses(sims, mask, tau=0.07)

            extended = torch.zeros((b + 1, b + 1), dtype=sims.dtype)
            extended[:b, :b] = sims
            extended[b, :] = torch.tensor(rng.normal(size=b + 1))
            extended[:, b] = torch.tensor(rng.normal(size=b + 1))
            big_mask = np.zeros((b + 1, b + 1), dtype=bool)
            big_mask[:b, :b] = mask
            big_mask[b, b] = True  # new item masked in both directions
            after = contrastive_row_losses(extended, big_mask, tau=0.07)
            assert torch.allclose(before, after[:b], atol=1e-12, rtol=0)

    def test_degenerate_row_loss_zero(self):
        sims = torch.tensor([[0.9, 0.4], [0.4, 0.9]], dtype=torch.float64)
        mask = np.eye(2, dtype=bool)
        rows = contrastive_row_losses(sims, mask, tau=0.07)
        assert torch.equal(rows, torch.zeros(2, dtype=torch.float64))
        assert count_degenerate_rows(mask) == 2

    def test_bad_temperature(self):
        with pytest.raises(CorpusError):
            contrastive_loss(torch.zeros(2, 2), np.ones((2, 2), bool), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_bounds_and_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(2, 8))
        sims = torch.tensor(rng.normal(size=(b, b)))
        mask = rng.random((b, b)) > 0.3
        np.fill_diagonal(mask, True)
        rows = contrastive_row_losses(sims, mask, tau=0.5)
        off = mask & ~np.eye(b, dtype=bool)
        for i in range(b):
            n_neg = int(off[i].sum())
            assert -1e-9 <= rows[i].item()
            if n_neg == 0:
                assert rows[i].item() == 0.0

        perm = rng.permutation(b)
        permuted = contrastive_loss(
            sims[perm][:, perm], mask[perm][:, perm], tau=0.5
        )
        assert abs(permuted.item() - rows.mean().item()) < 1e-9


class TestUniformityLoss:
    def test_identical_rows_zero(self):
        e = torch.tensor([[1.0, 0.0]] * 4, dtype=torch.float64)
        assert abs(uniformity_loss(e).item()) < 1e-9

    def test_antipodal_pair_minus_eight(self):
        e = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        assert abs(uniformity_loss(e).item() + 8.0) < 1e-9

    def test_orthonormal_pair_minus_four(self):
        e = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert abs(uniformity_loss(e).item() + 4.0) < 1e-9

    def test_needs_two_rows(self):
        with pytest.raises(CorpusError):
            uniformity_loss(torch.ones(1, 4))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_bounded_for_unit_rows(self, seed):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(2, 12))
        rows = rng.normal(size=(b, 6))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        value = uniformity_loss(torch.tensor(rows)).item()
        assert -8.0 - 1e-9 <= value <= 1e-9


class TestTotalLoss:
    def test_zero_weight_is_bit_identical(self):
        lc = torch.tensor(0.7318, dtype=torch.float64)
        lu = torch.tensor(-3.21, dtype=torch.float64)
        assert total_loss(lc, lu, 0.0) is lc

    def test_arithmetic(self):
        lc = torch.tensor(0.5)
        lu = torch.tensor(-4.0)
        assert total_loss(lc, lu, 0.1).item() == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

class TestOptimizer:
    def test_zero_grad_zero_decay_fixed_point(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        config = TrainConfig(learning_rate=0.1, weight_decay=0.0)
        opt = make_optimizer([p], config)
        p.grad = torch.zeros_like(p)
        opt.step()
        assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))

    def test_first_step_magnitude_near_lr(self):
        p = torch.nn.Parameter(torch.tensor([0.0]))
        config = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
        opt = make_optimizer([p], config)
        p.grad = torch.tensor([0.4])
        opt.step()
        assert abs(p.item()) == pytest.approx(1e-3, rel=1e-3)

    def test_lr_zero_is_identity(self):
        p = torch.nn.Parameter(torch.tensor([3.0]))
        config = TrainConfig(learning_rate=0.0, weight_decay=0.0)
        opt = make_optimizer([p], config)
        p.grad = torch.tensor([5.0])
        opt.step()
        assert p.item() == 3.0

    def test_clip_and_step_skips_non_finite(self):
        p = torch.nn.Parameter(torch.tensor([1.0]))
        opt = make_optimizer([p], TrainConfig(weight_decay=0.0))
        p.grad = torch.tensor([float("nan")])
        assert not clip_and_step(opt, [p], clip_norm=1.0)
        assert p.item() == 1.0

    def test_warmup_half_way(self):
        config = TrainConfig(warmup_epochs=10, max_epochs=60)
        assert schedule_scale(5, config) == pytest.approx(0.5)

    def test_full_rate_after_warmup(self):
        config = TrainConfig(warmup_epochs=3, max_epochs=60)
        assert schedule_scale(3, config) == pytest.approx(1.0)

    def test_decay_reaches_zero_at_max(self):
        config = TrainConfig(warmup_epochs=3, max_epochs=60)
        assert schedule_scale(60, config) == 0.0
        mid = schedule_scale(31, config)
        assert 0.0 < mid < 1.0


class TestEarlyStopper:
    def test_stops_patience_after_peak(self):
        metrics = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
                   0.65, 0.64, 0.63, 0.62, 0.61, 0.60]
        stopper = EarlyStopper(patience=5)
        stopped_at = None
        for epoch, metric in enumerate(metrics, start=1):
            stopper.update(metric, epoch)
            if stopper.should_stop:
                stopped_at = epoch
                break
        assert stopped_at == 12
        assert stopper.best_epoch == 7

    def test_improvement_resets_counter(self):
        stopper = EarlyStopper(patience=2)
        for epoch, metric in enumerate([0.5, 0.4, 0.6, 0.3], start=1):
            stopper.update(metric, epoch)
        assert not stopper.should_stop
        assert stopper.best_epoch == 3


# ---------------------------------------------------------------------------
# Checkpoints and the training loop
# ---------------------------------------------------------------------------

TRAIN_CONFIG = TrainConfig(max_epochs=6, patience=6, seed=0)


@pytest.fixture(scope="module")
def trained(small_dataset):
    corpus, recordings = small_dataset
    plan = make_splits([r.key for r in recordings], seed=0)[0]
    result = train(corpus, recordings, plan, TRAIN_CONFIG)
    return corpus, recordings, plan, result


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path, trained):
        _, _, _, result = trained
        path = tmp_path / "model.bprc"
        save_checkpoint(path, result.model)
        loaded = load_checkpoint(path)
        assert loaded.config == result.model.config
        from bpr.training import _named_tensors

        original = _named_tensors(result.model)
        restored = _named_tensors(loaded)
        assert set(original) == set(restored)
        for name in original:
            assert torch.equal(original[name], restored[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bprc"
        path.write_bytes(b"JUNK" + bytes(32))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path, trained):
        _, _, _, result = trained
        path = tmp_path / "model.bprc"
        save_checkpoint(path, result.model)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)


@pytest.mark.slow
class TestTrainLoop:
    def test_trained_beats_untrained_dev_mrr(self, trained):
        corpus, recordings, plan, result = trained
        recs = {r.key: r for r in recordings}
        ict = IctConfig(seed=TRAIN_CONFIG.seed)
        dev_pairs = build_ict_dataset(corpus, recs, plan.dev, ict, epoch=0)
        untrained = build_model(TRAIN_CONFIG)
        untrained.eval_mode()
        with torch.no_grad():
            baseline = _dev_mrr(untrained, corpus, dev_pairs)
        assert result.best_dev_mrr > baseline
        assert not result.aborted

    def test_history_records_complete(self, trained):
        _, _, _, result = trained
        keys = {"epoch", "contrastive_loss", "uniformity_loss", "total_loss",
                "dev_mrr", "lr", "degenerate_rows", "skipped_steps",
                "wall_time_s"}
        assert all(set(rec) == keys for rec in result.history)
        assert [rec["epoch"] for rec in result.history] == \
            list(range(1, len(result.history) + 1))
        assert 1 <= result.best_epoch <= len(result.history)

    def test_frozen_provider_untouched(self, small_dataset):
        corpus, recordings = small_dataset
        plan = make_splits([r.key for r in recordings], seed=0)[0]
        config = dataclasses.replace(TRAIN_CONFIG, max_epochs=2)
        from bpr.encoder import HashedTextProvider

        provider = HashedTextProvider(config.output_dim, seed=config.seed)
        before = [p.detach().clone() for p in provider._mixer.parameters()]
        train(corpus, recordings, plan, config, provider=provider)
        after = list(provider._mixer.parameters())
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_two_runs_identical_histories(self, small_dataset):
        corpus, recordings = small_dataset
        plan = make_splits([r.key for r in recordings], seed=0)[0]
        config = dataclasses.replace(TRAIN_CONFIG, max_epochs=3)
        a = train(corpus, recordings, plan, config)
        b = train(corpus, recordings, plan, config)
        assert len(a.history) == len(b.history)
        for ra, rb in zip(a.history, b.history):
            for key in ("contrastive_loss", "uniformity_loss", "total_loss",
                        "dev_mrr", "lr"):
                assert abs(ra[key] - rb[key]) <= 1e-12

    def test_text_query_variant_trains(self, small_dataset):
        corpus, recordings = small_dataset
        plan = make_splits([r.key for r in recordings], seed=0)[0]
        config = dataclasses.replace(TRAIN_CONFIG, max_epochs=2,
                                     query_encoder="text")
        result = train(corpus, recordings, plan, config)
        assert len(result.history) == 2

    def test_empty_dev_rejected(self, small_dataset):
        corpus, recordings = small_dataset
        plan = make_splits([r.key for r in recordings], seed=0)[0]
        bare = dataclasses.replace(plan, dev=frozenset())
        with pytest.raises(CorpusError, match="non-empty"):
            train(corpus, recordings, bare, TRAIN_CONFIG)


@pytest.mark.slow
class TestGradCheck:
    def test_adapter_small_config(self):
        config = TrainConfig(batch_size=4, input_dim=6, model_dim=8,
                             output_dim=8, n_layers=1, n_heads=2)
        result = grad_check("adapter", config=config)
        assert result.max_rel_error < 1e-4
        assert all(name.startswith("adapter.") for name in result.per_tensor)

    def test_temperature_not_in_check_list(self):
        config = TrainConfig(batch_size=4, input_dim=6, model_dim=8,
                             output_dim=8, n_layers=1, n_heads=2)
        result = grad_check("adapter", config=config)
        assert not any("temperature" in name for name in result.per_tensor)

    def test_unknown_component(self):
        with pytest.raises(CorpusError, match="component"):
            grad_check("decoder")
