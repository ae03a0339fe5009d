"""Epoch orchestration: planning, transfer pricing, serial and threaded runs."""

import dataclasses

import numpy as np
import pytest

from mqpipe import (
    DurationModel,
    PipelineConfig,
    SamplerParams,
    TransferModel,
    batch_rng,
    build_minibatch,
    cache_probs_degree,
    init_model,
    parse_stage_durations,
    plan_epoch,
    refresh_cache,
    run_epoch,
    transfer_stage,
)


def _config(**kw):
    sampler = kw.pop("sampler", SamplerParams(method="gcn", fanout=3,
                                              num_layers=2))
    base = dict(num_devices=1, queue_capacity=2, sampler_workers=1,
                batch_size=10, sampler=sampler, optimizer="adam",
                sync_period=1, deterministic=True, seed=7)
    base.update(kw)
    return PipelineConfig(**base)


def _replicas(g, config, lr=0.01):
    return [init_model(g.feature_dim, 8, g.num_classes, seed=0,
                       learning_rate=lr)
            for _ in range(config.num_devices)]


def _max_pairwise_diff(replicas):
    worst = 0.0
    for other in replicas[1:]:
        for a, b in zip(replicas[0].weights, other.weights):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


# -- planning ----------------------------------------------------------------


def test_plan_covers_every_training_target_once(g_sbm):
    cfg = _config(num_devices=3, batch_size=7)
    per_device, expected = plan_epoch(g_sbm, cfg, epoch=0)
    seen = np.concatenate([t for lst in per_device for _, _, t in lst])
    assert np.array_equal(np.sort(seen), np.flatnonzero(g_sbm.train_mask))
    for lst in per_device:
        assert all(t.size <= 7 for _, _, t in lst)
        assert [w for w, _, _ in lst] == list(range(len(lst)))
    for d, lst in enumerate(per_device):
        assert all(bid % 3 == d for _, bid, _ in lst)
    assert sum(expected) == sum(len(lst) for lst in per_device)


def test_plan_expected_counts_for_ragged_tail(g_sbm):
    # 40 training nodes, batch 9 -> 5 batches; round-robin over 2 devices
    cfg = _config(num_devices=2, batch_size=9)
    per_device, expected = plan_epoch(g_sbm, cfg, epoch=0)
    assert [len(lst) for lst in per_device] == [3, 2]
    assert expected == [2, 2, 1]


def test_plan_deterministic_per_seed_and_epoch(g_sbm):
    cfg = _config(batch_size=9)
    a, _ = plan_epoch(g_sbm, cfg, epoch=0)
    b, _ = plan_epoch(g_sbm, cfg, epoch=0)
    c, _ = plan_epoch(g_sbm, cfg, epoch=1)
    flat = lambda plan: np.concatenate([t for _, _, t in plan[0]])
    assert np.array_equal(flat(a), flat(b))
    assert not np.array_equal(flat(a), flat(c))


def test_plan_requires_training_nodes(g8):
    g = dataclasses.replace(g8, train_mask=np.zeros(8, dtype=bool))
    with pytest.raises(ValueError, match="training"):
        plan_epoch(g, _config(), epoch=0)


def test_batch_rng_keyed_by_batch_id():
    cfg = _config()
    a = batch_rng(cfg, epoch=0, batch_id=3).integers(0, 1000, 8)
    b = batch_rng(cfg, epoch=0, batch_id=3).integers(0, 1000, 8)
    c = batch_rng(cfg, epoch=0, batch_id=4).integers(0, 1000, 8)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


# -- transfer stage ----------------------------------------------------------


def _batch(g, rng):
    params = SamplerParams(method="gcn", fanout=2, num_layers=2)
    return build_minibatch(g, np.array([0, 1]), params, rng)


def test_transfer_without_cache_prices_whole_batch(g8, rng):
    batch = _batch(g8, rng)
    tm = TransferModel(base=DurationModel("fixed", 2.0), per_byte_ms=0.5)
    batch, delay = transfer_stage(batch, None, g8, tm, rng)
    bytes_moved = batch.input_ids.size * g8.feature_dim * 4  # float32 rows
    assert delay == pytest.approx(2.0 + 0.5 * bytes_moved)
    assert np.array_equal(batch.features, g8.features[batch.input_ids])


def test_transfer_full_cache_charges_base_only(g8, rng):
    cache = refresh_cache(g8, cache_probs_degree(g8), 1.0, rng)
    batch = _batch(g8, rng)
    tm = TransferModel(base=DurationModel("fixed", 2.0), per_byte_ms=0.5)
    batch, delay = transfer_stage(batch, cache, g8, tm, rng)
    assert delay == pytest.approx(2.0)
    assert batch.cache_hits == batch.input_ids.size
    assert batch.cache_misses == 0


def test_transfer_partial_cache_charges_misses(g8, rng):
    cache = refresh_cache(g8, cache_probs_degree(g8), 0.5, rng)
    batch = _batch(g8, rng)
    tm = TransferModel(per_byte_ms=0.25)
    batch, delay = transfer_stage(batch, cache, g8, tm, rng)
    assert batch.cache_hits + batch.cache_misses == batch.input_ids.size
    assert delay == pytest.approx(0.25 * batch.cache_misses
                                  * g8.feature_dim * 4)
    assert np.array_equal(batch.features, g8.features[batch.input_ids])


# -- epoch runs --------------------------------------------------------------


def test_serial_single_device_epoch(g_sbm):
    cfg = _config()
    replicas = _replicas(g_sbm, cfg)
    stats, trace = run_epoch(g_sbm, None, replicas, cfg)
    assert stats.batches == 4
    assert sorted(stats.losses) == [0, 1, 2, 3]
    assert np.isfinite(stats.mean_loss)
    assert stats.applied_windows == {0: 4}
    assert stats.sync_count == 4          # one rendezvous per window at P=1
    assert stats.epoch_sync == 0
    assert len(trace.events(stage="compute_bwd")) == 4
    assert len(trace.events(stage="grad_apply")) == 4


@pytest.mark.parametrize("deterministic", [True, False])
def test_multi_device_losses_cover_all_batches(g_sbm, deterministic):
    cfg = _config(num_devices=2, deterministic=deterministic)
    stats, _ = run_epoch(g_sbm, None, _replicas(g_sbm, cfg), cfg)
    assert stats.batches == 4
    assert sorted(stats.losses) == [0, 1, 2, 3]
    assert stats.applied_windows == {0: 2, 1: 2}
    assert stats.epoch_sync == 1


def test_threaded_matches_serial_on_one_device(g_sbm):
    serial_cfg = _config(deterministic=True)
    threaded_cfg = _config(deterministic=False)
    serial_stats, _ = run_epoch(g_sbm, None, _replicas(g_sbm, serial_cfg),
                                serial_cfg)
    threaded_stats, _ = run_epoch(g_sbm, None, _replicas(g_sbm, threaded_cfg),
                                  threaded_cfg)
    # one device, one sampler worker: same batches, same apply order, so the
    # numerics agree exactly
    assert serial_stats.losses == threaded_stats.losses


@pytest.mark.parametrize("deterministic", [True, False])
@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_replicas_identical_after_epoch(g_sbm, deterministic, optimizer):
    cfg = _config(num_devices=2, deterministic=deterministic,
                  optimizer=optimizer,
                  delay_model=DurationModel("uniform", 1.0, 8.0))
    replicas = _replicas(g_sbm, cfg)
    run_epoch(g_sbm, None, replicas, cfg)
    assert _max_pairwise_diff(replicas) == 0.0


@pytest.mark.parametrize("deterministic", [True, False])
@pytest.mark.parametrize("period,want_syncs", [(1, 2), (2, 1), (5, 0)])
def test_sync_count_follows_period(g_sbm, deterministic, period, want_syncs):
    cfg = _config(num_devices=2, sync_period=period,
                  deterministic=deterministic)
    stats, trace = run_epoch(g_sbm, None, _replicas(g_sbm, cfg), cfg)
    assert stats.sync_count == want_syncs
    assert stats.epoch_sync == 1
    # each rendezvous plus the epoch barrier emits one event per device
    assert len(trace.events(stage="sync")) == 2 * (want_syncs + 1)


def test_threaded_queue_keys_conserved_and_fifo(g_sbm):
    cfg = _config(num_devices=2, deterministic=False, sampler_workers=2,
                  batch_size=5)  # 8 batches, 4 per device
    stats, _ = run_epoch(g_sbm, None, _replicas(g_sbm, cfg), cfg)
    plan, _ = plan_epoch(g_sbm, cfg, epoch=0)
    for d, keys in stats.queue_keys.items():
        planned = sorted(bid for _, bid, _ in plan[d])
        assert sorted(keys["cpu_put"]) == planned
        assert keys["cpu_get"] == keys["cpu_put"]
        assert keys["dev_get"] == keys["dev_put"]
    hw = stats.queue_high_water
    assert all(hw[d]["cpu"] <= 2 and hw[d]["dev"] <= 2 for d in hw)


def test_capture_weights_records_apply_order(g_sbm):
    cfg = _config(num_devices=2, optimizer="sgd", capture_weights=True)
    stats, _ = run_epoch(g_sbm, None, _replicas(g_sbm, cfg), cfg)
    for d in (0, 1):
        windows = [w for w, _ in stats.weight_traces[d]]
        assert windows == [0, 1]
        first, second = stats.weight_traces[d]
        assert any(not np.array_equal(a, b)
                   for a, b in zip(first[1], second[1]))


def test_run_epoch_rejects_replica_mismatch(g_sbm):
    cfg = _config(num_devices=2)
    with pytest.raises(ValueError, match="replica"):
        run_epoch(g_sbm, None, _replicas(g_sbm, _config()), cfg)


def test_cache_counters_aggregate_across_batches(g_sbm, rng):
    cfg = _config()
    cache = refresh_cache(g_sbm, cache_probs_degree(g_sbm), 0.5, rng)
    stats, _ = run_epoch(g_sbm, cache, _replicas(g_sbm, cfg), cfg)
    assert stats.cache_hits > 0
    assert stats.cache_hits + stats.cache_misses > 0
    assert cache.hits == stats.cache_hits


def test_simulated_durations_shape_the_trace(g_sbm):
    cfg = _config(timing_mode="simulated", stage_durations=parse_stage_durations(
        "sample=fixed:10,transfer=fixed:5,compute=fixed:15"))
    stats, trace = run_epoch(g_sbm, None, _replicas(g_sbm, cfg), cfg)
    ns = 1_000_000
    for ev in trace.events(stage="sample"):
        assert ev.t_end_ns - ev.t_start_ns == 10 * ns
    for ev in trace.events(stage="compute_fwd"):
        assert ev.t_end_ns - ev.t_start_ns == 7.5 * ns
    assert stats.wall_ms == pytest.approx(4 * 30.0)
