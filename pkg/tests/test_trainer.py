import dataclasses

import numpy as np
import pytest
import torch

from skyreid.evaluation import PROTOCOLS, embed_records
from skyreid.checkpoint import CheckpointError, save_named_tensors, load_named_tensors
from skyreid.trainer import (
    ABLATION_LADDER,
    AblationRun,
    LogRow,
    TrainConfig,
    TrainingDivergedError,
    _check_finite,
    config_field_names,
    epoch_batches,
    ladder_config,
    learning_rate,
    load_model_for_eval,
    parse_log_line,
    pk_sample,
    run_ablation,
    sample_frame_indices,
    split_by_identity,
    train,
)
from conftest import TINY_TRAIN


def test_learning_rate_schedule_probes():
    config = TrainConfig()
    # warmup start: one tenth of the head plateau
    assert learning_rate(config, 0, 0, "heads") == pytest.approx(3.5e-5, rel=1e-12)
    # post-warmup plateau before any decay
    assert learning_rate(config, 500, 5, "heads") == pytest.approx(3.5e-4, rel=1e-12)
    # one decay step per boundary crossed
    assert learning_rate(config, 5000, 15, "heads") == pytest.approx(3.5e-5, rel=1e-12)
    assert learning_rate(config, 5000, 25, "heads") == pytest.approx(3.5e-6, rel=1e-12)
    assert learning_rate(config, 5000, 35, "heads") == pytest.approx(3.5e-7, rel=1e-12)


def test_learning_rate_warmup_is_linear():
    config = TrainConfig()
    plateau = config.base_lr
    start = plateau * config.warmup_start_factor
    for it in range(config.warmup_iters):
        want = start + (plateau - start) * it / config.warmup_iters
        assert learning_rate(config, it, 0, "heads") == pytest.approx(want, rel=1e-12)
    assert learning_rate(config, config.warmup_iters, 0, "heads") == pytest.approx(plateau)


def test_backbone_head_ratio_constant_after_warmup():
    config = TrainConfig()
    for epoch in (2, 5, 15, 25, 35):
        heads = learning_rate(config, 100, epoch, "heads")
        backbone = learning_rate(config, 100, epoch, "backbone")
        assert backbone / heads == pytest.approx(5e-6 / 3.5e-4, rel=1e-9)


def test_single_rate_policy_unifies_groups():
    config = TrainConfig(use_mdlr=False)
    for it, epoch in ((0, 0), (3, 0), (50, 5), (50, 15)):
        assert learning_rate(config, it, epoch, "backbone") == learning_rate(
            config, it, epoch, "heads"
        )


def test_learning_rate_unknown_group():
    with pytest.raises(ValueError):
        learning_rate(TrainConfig(), 0, 0, "adapters")


def test_config_validation():
    TrainConfig().validate()
    bad = [
        dict(ids_per_batch=1),
        dict(tracklets_per_id=1),
        dict(frames_per_tracklet=0),
        dict(epochs=0),
        dict(base_lr=0.0),
        dict(backbone_lr=-1.0),
        dict(warmup_iters=-1),
        dict(warmup_start_factor=0.0),
        dict(decay_epochs=(20, 10)),
        dict(decay_epochs=(10, 10)),
        dict(decay_factor=0.0),
        dict(margin=-0.1),
    ]
    for kwargs in bad:
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()


def test_pk_sample_composition(tiny_dataset):
    _, records = tiny_dataset
    gen = np.random.default_rng(0)
    batch = pk_sample(records, gen, ids_per_batch=3, tracklets_per_id=2)
    assert len(batch) == 6
    ids = [rec.identity for rec in batch]
    assert len(set(ids)) == 3
    for identity in set(ids):
        assert ids.count(identity) == 2
    # distinct tracklets when the pool is large enough
    assert len({rec.tracklet_id for rec in batch}) == 6


def test_pk_Sample_resamples_short_pools(tiny_dataset):
    _, records = tiny_dataset
    # keep one tracklet per identity: K=2 must resample with replacement
    thin = {rec.identity: rec for rec in records}
    gen = np.random.default_rng(1)
    batch = pk_sample(list(thin.values()), gen, ids_per_batch=2, tracklets_per_id=2)
    assert len(batch) == 4
    for identity in {rec.identity for rec in batch}:
        assert sum(rec.identity == identity for rec in batch) == 2


def test_pk_sample_needs_enough_identities(tiny_dataset):
    _, records = tiny_dataset
    with pytest.raises(ValueError):
        pk_sample(records, np.random.default_rng(0), ids_per_batch=5, tracklets_per_id=2)


def test_epoch_batches_cover_every_tracklet(tiny_dataset):
    _, records = tiny_dataset
    gen = np.random.default_rng(2)
    batches = epoch_batches(records, gen, ids_per_batch=2, tracklets_per_id=2)
    seen = {rec.tracklet_id for batch in batches for rec in batch}
    assert seen == {rec.tracklet_id for rec in records}
    for batch in batches:
        assert len(batch) == 4


def test_epoch_batches_never_yield_single_identity_batches(tiny_dataset):
    # small cells invite collisions: two cells of one identity in a batch of
    # two would starve the triplet term of negatives
    _, records = tiny_dataset
    for seed in range(30):
        gen = np.random.default_rng(seed)
        for batch in epoch_batches(records, gen, ids_per_batch=2, tracklets_per_id=2):
            assert len({rec.identity for rec in batch}) >= 2


def test_epoch_batches_deterministic_under_seed(tiny_dataset):
    _, records = tiny_dataset
    a = epoch_batches(records, np.random.default_rng(3), 2, 2)
    b = epoch_batches(records, np.random.default_rng(3), 2, 2)
    assert [[r.tracklet_id for r in batch] for batch in a] == [
        [r.tracklet_id for r in batch] for batch in b
    ]


def test_sample_frame_indices_strided_window():
    gen = np.random.default_rng(4)
    for n, t in ((8, 4), (9, 4), (16, 8), (5, 5)):
        idx = sample_frame_indices(n, t, gen)
        assert idx.shape == (t,)
        assert idx.min() >= 0 and idx.max() < n
        steps = np.diff(idx)
        assert (steps == n // t).all()


def test_sample_frame_indices_short_tracklets_repeat_in_order():
    gen = np.random.default_rng(5)
    idx = sample_frame_indices(3, 7, gen)
    want = np.sort(np.resize(np.arange(3), 7))
    assert np.array_equal(idx, want)


def test_sample_frame_indices_validation():
    with pytest.raises(ValueError):
        sample_frame_indices(0, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_frame_indices(4, 0, np.random.default_rng(0))


def test_log_row_round_trip():
    row = LogRow(
        epoch=3,
        iteration=17,
        total=1.25,
        triplet=0.5,
        identity=2.0 / 3.0,
        memory=1e-9,
        alpha=123456.789,
        lr_heads=3.5e-4,
        lr_backbone=5e-6,
    )
    back = parse_log_line(row.format())
    assert back.epoch == row.epoch and back.iteration == row.iteration
    for field in ("total", "triplet", "identity", "memory", "alpha", "lr_heads", "lr_backbone"):
        assert getattr(back, field) == pytest.approx(getattr(row, field), rel=1e-9)


def test_parse_log_line_rejects_bad_fields():
    with pytest.raises(ValueError):
        parse_log_line("1 2 3")
    with pytest.raises(ValueError):
        parse_log_line("a b c d e f g h i")


def test_check_finite_raises_on_nan():
    _check_finite("total loss", torch.tensor(1.0), 0, 0)
    with pytest.raises(TrainingDivergedError):
        _check_finite("total loss", torch.tensor(float("nan")), 0, 0)
    with pytest.raises(TrainingDivergedError):
        _check_finite("total loss", torch.tensor(float("inf")), 0, 0)


def test_split_by_identity(tiny_dataset):
    _, records = tiny_dataset
    train_recs, held_recs = split_by_identity(records, 2)
    assert {rec.identity for rec in train_recs} == {1, 2}
    assert {rec.identity for rec in held_recs} == {3, 4}
    assert len(train_recs) + len(held_recs) == len(records)
    with pytest.raises(ValueError):
        split_by_identity(records, 0)
    with pytest.raises(ValueError):
        split_by_identity(records, 4)


def test_ladder_configs_toggle_components():
    base = TrainConfig(epochs=7)
    expected = {
        "baseline": (False, False, False, False),
        "+dual-lr": (True, False, False, False),
        "+color-jitter": (True, True, False, False),
        "+temporal": (True, True, True, False),
        "+shape": (True, True, True, True),
    }
    assert tuple(name for name, _ in ABLATION_LADDER) == tuple(expected)
    for rung, (mdlr, jitter, temporal, shape) in expected.items():
        config = ladder_config(base, rung)
        assert config.use_mdlr is mdlr
        assert config.use_jitter is jitter
        assert config.use_temporal is temporal
        assert config.use_shape is shape
        assert config.epochs == 7
    with pytest.raises(ValueError):
        ladder_config(base, "+everything")


def test_config_field_names_match_dataclass():
    names = config_field_names()
    assert names == tuple(f.name for f in dataclasses.fields(TrainConfig))
    assert "base_lr" in names and "use_shape" in names


def test_train_validation(tiny_dataset):
    _, records = tiny_dataset
    with pytest.raises(ValueError):
        train(TINY_TRAIN, [])
    single = [rec for rec in records if rec.identity == 1]
    with pytest.raises(ValueError):
        train(TINY_TRAIN, single)
    with pytest.raises(ValueError):
        train(dataclasses.replace(TINY_TRAIN, ids_per_batch=5), records)


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    _, records = tiny_dataset
    out = tmp_path_factory.mktemp("tiny_run")
    result = train(TINY_TRAIN, records, out_dir=out)
    return records, out, result


def test_train_produces_logs_and_checkpoints(tiny_run):
    records, out, result = tiny_run
    batches_per_epoch = 4  # 4 ids x 4 tracklets, cells of 2, 2 cells per batch
    assert len(result.log_rows) == TINY_TRAIN.epochs * batches_per_epoch
    assert result.metrics_path is not None and result.metrics_path.is_file()
    lines = result.metrics_path.read_text().splitlines()
    assert lines == [row.format() for row in result.log_rows]
    for line in lines:
        parse_log_line(line)
    names = [p.name for p in result.checkpoint_paths]
    assert names == ["checkpoint_ep001.bin", "checkpoint_ep002.bin"]
    for path in result.checkpoint_paths:
        assert path.is_file()
    assert result.label_map == {1: 0, 2: 1, 3: 2, 4: 3}
    for row in result.log_rows:
        assert np.isfinite([row.total, row.triplet, row.identity, row.memory, row.alpha]).all()


def test_training_is_deterministic(tiny_run):
    records, _, result = tiny_run
    again = train(TINY_TRAIN, records)
    assert [row.format() for row in again.log_rows] == [row.format() for row in result.log_rows]
    for (name, a), (_, b) in zip(
        result.model.state_dict().items(), again.model.state_dict().items()
    ):
        assert torch.equal(a, b), name


def test_resume_replays_remaining_epochs_exactly(tiny_run, tmp_path):
    records, out, result = tiny_run
    resumed = train(
        TINY_TRAIN, records, out_dir=tmp_path, resume_from=out / "checkpoint_ep001.bin"
    )
    tail = [row.format() for row in result.log_rows if row.epoch == 1]
    assert [row.format() for row in resumed.log_rows] == tail
    for (name, a), (_, b) in zip(
        result.model.state_dict().items(), resumed.model.state_dict().items()
    ):
        assert torch.equal(a, b), name
    assert torch.equal(result.bank.proxies, resumed.bank.proxies)


def test_restore_rejects_tampered_checkpoints(tiny_run, tmp_path):
    records, out, _ = tiny_run
    ckpt = out / "checkpoint_ep001.bin"

    tensors = load_named_tensors(ckpt)
    tensors["model.ghost_weight"] = np.zeros(3, dtype=np.float32)
    extra = tmp_path / "extra.bin"
    save_named_tensors(extra, tensors)
    with pytest.raises(CheckpointError):
        train(TINY_TRAIN, records, resume_from=extra)

    tensors = load_named_tensors(ckpt)
    tensors["model.head_temporal.weight"] = np.zeros((2, 2), dtype=np.float32)
    bad_shape = tmp_path / "bad_shape.bin"
    save_named_tensors(bad_shape, tensors)
    with pytest.raises(CheckpointError):
        train(TINY_TRAIN, records, resume_from=bad_shape)

    missing = load_named_tensors(ckpt)
    missing.pop("bank.proxies")
    gone = tmp_path / "gone.bin"
    save_named_tensors(gone, missing)
    with pytest.raises(CheckpointError):
        train(TINY_TRAIN, records, resume_from=gone)


def test_load_model_for_eval_reproduces_embeddings(tiny_run):
    records, out, result = tiny_run
    reloaded = load_model_for_eval(out / "checkpoint_ep002.bin", TINY_TRAIN)
    want = embed_records(result.model, records[:4])
    got = embed_records(reloaded, records[:4])
    assert got == want


def test_load_model_for_eval_errors(tiny_run, tmp_path):
    records, out, _ = tiny_run
    with pytest.raises(CheckpointError):
        load_model_for_eval(tmp_path / "missing.bin", TINY_TRAIN)
    headless = load_named_tensors(out / "checkpoint_ep001.bin")
    headless.pop("model.head_temporal.weight")
    path = tmp_path / "headless.bin"
    save_named_tensors(path, headless)
    with pytest.raises(CheckpointError):
        load_model_for_eval(path, TINY_TRAIN)
    with pytest.raises(CheckpointError):
        load_model_for_eval(
            out / "checkpoint_ep002.bin", dataclasses.replace(TINY_TRAIN, dim=32)
        )


def test_run_ablation_structure(tiny_dataset):
    _, records = tiny_dataset
    config = dataclasses.replace(TINY_TRAIN, epochs=1, decay_epochs=())
    runs = run_ablation(config, records, 2, seeds=(0,), rungs=("baseline", "+shape"))
    assert [run.rung for run in runs] == ["baseline", "+shape"]
    for run in runs:
        assert isinstance(run, AblationRun)
        assert run.seed == 0
        assert 0.0 <= run.map3 <= 1.0
        assert set(run.protocol_map) == set(PROTOCOLS)
