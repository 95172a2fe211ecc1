import numpy as np
import pytest

from modules import seeding
from modules.errors import ConfigError, StateError
from modules.evaluation import accuracy, infer_edge
from modules.losses import cross_entropy
from modules.nn_core import apply_update, backward, build_dense_net, forward, params_checksum
from modules.orchestrator import (
    apply_async_mode,
    build_environment,
    federated_average,
    global_model_copies,
    load_model_vector,
    model_vector,
    run_ecct,
    run_training,
    select_devices,
    verify_freeze,
)
from modules.participants import build_cloud, build_participant, cloud_train_round, edge_train_round, iterate_minibatches
from modules.run_config import apply_overrides, build_config
from modules.run_store import METRICS_FILE, read_events
from modules.transfer import Direction, KnowledgePacket, store_apply


@pytest.mark.parametrize("k,ratio,expected", [(50, 0.6, 30), (50, 0.3, 15), (50, 0.1, 5), (10, 0.5, 5), (7, 1.0, 7)])
def test_select_devices_count(k, ratio, expected):
    chosen = select_devices(k, ratio, np.random.default_rng(0))
    assert len(chosen) == expected
    assert len(np.unique(chosen)) == expected
    assert np.all(np.diff(chosen) > 0)


def test_federated_average_is_weighted_and_exact_for_one():
    a, b = np.array([1.0, 2.0]), np.array([3.0, 6.0])
    np.testing.assert_allclose(federated_average([a, b], [1, 3]), [2.5, 5.0])
    single = federated_average([a], [10])
    np.testing.assert_array_equal(single, a)
    assert single is not a


def test_verify_freeze_detects_changes():
    verify_freeze(["x", "y"], ["x", "y"], "phase")
    with pytest.raises(StateError):
        verify_freeze(["x", "y"], ["x", "z"], "phase")


def test_asyn_epoch_draws_between_one_and_twice_the_epochs(tiny_cfg, tiny_env):
    cfg = apply_overrides(tiny_cfg, {"async_mode": "asyn_epoch", "device_epochs": 3})
    p = build_participant(cfg, tiny_env.view, tiny_env.partition, 0)
    draws = [apply_async_mode(cfg, r, p) for r in range(2000)]
    epochs = np.array([e for e, _ in draws])
    assert set(epochs.tolist()) == {1, 2, 3, 4, 5}
    assert all(comm for _, comm in draws)
    assert abs(epochs.mean() - 3.0) < 0.1


def test_asyn_version_communicates_on_period_multiples(tiny_cfg, tiny_env):
    cfg = apply_overrides(tiny_cfg, {"async_mode": "asyn_version", "comm_periods": [3]})
    p = build_participant(cfg, tiny_env.view, tiny_env.partition, 0)
    assert p.comm_period == 3
    pattern = []
    for version in range(7):
        p.model_version = version
        epochs, comm = apply_async_mode(cfg, version, p)
        assert epochs == cfg.device_epochs
        pattern.append(comm)
    assert pattern == [True, False, False, True, False, False, True]


def test_method_mismatch_is_a_config_error(tiny_cfg):
    with pytest.raises(ConfigError):
        run_ecct(apply_overrides(tiny_cfg, {"method": "local"}))


def test_fedavg_with_one_device_equals_local_training(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"method": "fedavg", "feature_setting": "F", "num_devices": 1, "rounds": 3})
    result = run_training(cfg)

    env = build_environment(cfg)
    p = build_participant(cfg, env.view, env.partition, 0)
    for r in range(cfg.rounds):
        edge_train_round(p, cfg, r)
    np.testing.assert_array_equal(result.global_params, model_vector(p))


def test_fedavg_reports_score_the_global_model_on_every_device(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"method": "fedavg", "feature_setting": "F", "select_ratio": 0.25, "rounds": 6})
    result = run_training(cfg)
    final = result.reports[-1]
    assert sum(d.selected for d in final.devices) == 1

    env = build_environment(cfg)
    for k, metrics in enumerate(final.devices):
        fresh = build_participant(cfg, env.view, env.partition, k)
        load_model_vector(fresh, result.global_params)
        probs, _ = infer_edge(fresh, fresh.test_ids)
        assert metrics.edge_accuracy == accuracy(probs, env.view.labels[fresh.test_ids])

    copies = global_model_copies(result.participants, result.global_params)
    for original, copy in zip(result.participants, copies):
        np.testing.assert_array_equal(model_vector(copy), result.global_params)
        assert copy.classifier is not original.classifier
        assert copy.classifier_opt is original.classifier_opt


def test_ecct_without_cloud_features_or_distillation_equals_local(tiny_cfg):
    base = apply_overrides(tiny_cfg, {"data.cen_dim": 0, "loss.alpha_s": 0.0, "loss.alpha_d": 0.0})
    ecct = run_training(base)
    local = run_training(apply_overrides(base, {"method": "local"}))
    for a, b in zip(ecct.reports, local.reports):
        assert [d.edge_accuracy for d in a.devices] == [d.edge_accuracy for d in b.devices]
        assert [d.train_loss for d in a.devices] == [d.train_loss for d in b.devices]
    for p, q in zip(ecct.participants, local.participants):
        assert [params_checksum(n) for n in p.nets()] == [params_checksum(n) for n in q.nets()]


def test_cloud_without_distillation_on_zero_device_embeddings_is_centralized_training(tiny_cfg, tiny_env):
    cfg = apply_overrides(tiny_cfg, {"loss.alpha_s": 0.0, "loss.two_stage_switch_round": 0, "cloud_epochs": 2})
    d_e = cfg.architecture.embedding_dim
    view = tiny_env.view
    cloud = build_cloud(cfg, view, tiny_env.partition)
    for k, store in cloud.stores.items():
        ids = tiny_env.partition.train[k]
        store_apply(store, KnowledgePacket(
            producer_id=k, direction=Direction.EDGE_TO_CLOUD, sample_ids=ids, versions=np.ones(len(ids), dtype=np.int64),
            created_round=0, embeddings=np.zeros((len(ids), d_e)), labels=view.labels[ids]
        ))
    cloud_train_round(cloud, cfg, round_idx=0, targets=[])

    init = seeding.rng_for(cfg.seed, seeding.INIT, seeding.CLOUD_INDEX)
    encoder = build_dense_net(view.cloud_dim, cfg.architecture.cloud_encoder_widths, d_e, init)
    classifier = build_dense_net(2 * d_e, cfg.architecture.cloud_classifier_widths, view.num_classes, init)
    enc_opt, cls_opt = cfg.optimizer.build(), cfg.optimizer.build()
    rng = seeding.rng_for(cfg.seed, seeding.TRAIN, seeding.CLOUD_INDEX)
    all_ids = np.concatenate([tiny_env.partition.train[k] for k in sorted(cloud.stores)])
    owners = np.concatenate([np.full(len(tiny_env.partition.train[k]), k) for k in sorted(cloud.stores)])
    for _ in range(cfg.cloud_epochs):
        for rows in iterate_minibatches(np.arange(len(all_ids)), cfg.batch_size, rng):
            rows = rows[np.argsort(owners[rows], kind="stable")]
            ids = all_ids[rows]
            h_s = forward(encoder, view.cloud_features(ids))
            logits = forward(classifier, np.hstack([np.zeros_like(h_s), h_s]))
            _, grad = cross_entropy(logits, view.labels[ids])
            grads, input_grad = backward(classifier, grad)
            apply_update(classifier, grads, cls_opt)
            enc_grads, _ = backward(encoder, input_grad[:, d_e:])
            apply_update(encoder, enc_grads, enc_opt)

    assert params_checksum(cloud.classifier) == params_checksum(classifier)
    assert params_checksum(cloud.encoder) == params_checksum(encoder)


def test_runs_are_deterministic(tmp_path, tiny_cfg):
    run_training(tiny_cfg, tmp_path / "a")
    run_training(tiny_cfg, tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()


def test_twenty_device_runs_are_deterministic(tmp_path):
    cfg = build_config({
        "num_devices": 20,
        "rounds": 20,
        "progress": False,
        "save_checkpoints": False,
        "data": {"num_samples": 4000},
        "loss": {"two_stage_switch_round": 10},
    })
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    first = (tmp_path / "a" / METRICS_FILE).read_bytes()
    assert first == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert len(first.splitlines()) == 21


def test_threaded_edge_rounds_match_sequential(tmp_path, tiny_cfg):
    run_training(tiny_cfg, tmp_path / "seq")
    run_training(apply_overrides(tiny_cfg, {"workers": 3}), tmp_path / "par")
    assert (tmp_path / "seq" / METRICS_FILE).read_bytes() == (tmp_path / "par" / METRICS_FILE).read_bytes()


def test_stage_one_matches_a_cross_entropy_only_run(tiny_cfg):
    switch = tiny_cfg.loss.two_stage_switch_round
    with_kd = run_training(apply_overrides(tiny_cfg, {"loss.alpha_s": 2.0, "loss.alpha_d": 2.0}))
    ce_only = run_training(apply_overrides(tiny_cfg, {"loss.alpha_s": 0.0, "loss.alpha_d": 0.0}))
    for a, b in zip(with_kd.reports[:switch + 1], ce_only.reports[:switch + 1]):
        assert a.round < switch
        assert a.train_loss_mean == b.train_loss_mean
        assert a.cloud_loss == b.cloud_loss
        assert a.edge_accuracy_mean == b.edge_accuracy_mean


def test_no_logits_cross_the_wire_before_the_switch_round(tmp_path, tiny_cfg):
    run_training(tiny_cfg, tmp_path / "run")
    packets = [e for e in read_events(tmp_path / "run") if "direction" in e]
    assert packets
    switch = tiny_cfg.loss.two_stage_switch_round
    early = [e for e in packets if e["created_round"] < switch]
    late = [e for e in packets if e["created_round"] >= switch]
    assert early and late
    assert all(e["logits_shape"] is None for e in early)
    assert any(e["logits_shape"] is not None for e in late)


def test_fedgkt_sends_nothing_down_before_the_switch(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"method": "fedgkt", "feature_setting": "F"})
    result = run_training(cfg)
    switch = cfg.loss.two_stage_switch_round
    by_round = {r.round: r for r in result.reports}
    assert all(by_round[r].packets_down == 0 for r in range(switch))
    assert by_round[switch].packets_down > 0
    assert by_round[0].cloud_skipped


def test_local_runs_have_no_cloud_or_traffic(tiny_cfg):
    result = run_training(apply_overrides(tiny_cfg, {"method": "local"}))
    assert result.cloud is None
    assert all(r.packets_up == 0 and r.cloud_accuracy_mean is None for r in result.reports)
    assert len(result.reports) == tiny_cfg.rounds + 1


def test_hetero_ecct_run_and_checkpoints(tmp_path, tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"architecture.hetero": True, "save_checkpoints": True})
    result = run_training(cfg, tmp_path / "run")
    assert result.reports[0].round == -1
    assert (tmp_path / "run" / "checkpoints" / "cloud_classifier.dnet").exists()
    assert (tmp_path / "run" / "checkpoints" / "device_0_encoder.dnet").exists()
    assert (tmp_path / "run" / "config.resolved").exists()


def test_partial_selection_with_asynchrony_keeps_unselected_devices_idle(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, {"select_ratio": 0.5, "async_mode": "asyn_both"})
    result = run_training(cfg)
    for report in result.reports[1:]:
        selected = [d for d in report.devices if d.selected]
        assert len(selected) == 2
        assert all(d.epochs == 0 for d in report.devices if not d.selected)
        assert all(not d.communicated for d in report.devices if not d.selected)
