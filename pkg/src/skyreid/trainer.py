"""Training loop: PK-batched epochs, dual learning rates, memory updates.

The head parameter group warms up linearly for a few iterations and then
steps down at fixed epoch boundaries; the backbone group follows the same
profile scaled to a much smaller plateau, so the two rates keep a constant
ratio. One epoch enumerates every tracklet once through PK batches.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .augment import flip_and_erase, jitter_tracklet, sample_jitter
from .checkpoint import CheckpointError, load_named_tensors, save_named_tensors
from .losses import LossWeights, id_loss, total_loss, triplet_loss
from .memory import MemoryBank
from .model import ModelConfig, ModelOutput, ReIDModel
from .shape import shape_prior_loss
from .synth import TrackletRecord, load_frames


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    # batch geometry
    ids_per_batch: int = 4
    tracklets_per_id: int = 4
    frames_per_tracklet: int = 8
    # model
    image_height: int = 56
    image_width: int = 28
    patch_size: int = 14
    dim: int = 64
    depth: int = 2
    heads: int = 2
    strides: tuple[int, ...] = (2, 4, 8)
    max_frames: int = 64
    # memory
    proxies_per_identity: int = 2
    memory_momentum: float = 0.2
    memory_temperature: float = 1.0
    # augmentation
    jitter_prob: float = 0.5
    jitter_max_shift: float = 0.3
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    # optimization
    epochs: int = 40
    base_lr: float = 3.5e-4
    backbone_lr: float = 5e-6
    warmup_iters: int = 10
    warmup_start_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (10, 20, 30)
    decay_factor: float = 0.1
    margin: float = 0.3
    smoothing: float = 0.1
    lambda_id: float = 0.25
    lambda_memory: float = 1.0
    lambda_alpha: float = 1.0
    # component toggles
    use_mdlr: bool = True  # off: backbone group trains at the head schedule
    use_jitter: bool = True
    use_temporal: bool = True
    use_shape: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.ids_per_batch < 2:
            raise ValueError("ids_per_batch must be >= 2 for the triplet term")
        if self.tracklets_per_id < 2:
            raise ValueError("tracklets_per_id must be >= 2 for hard positives")
        if self.frames_per_tracklet < 1:
            raise ValueError("frames_per_tracklet must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0 or self.backbone_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if not 0.0 < self.warmup_start_factor <= 1.0:
            raise ValueError("warmup_start_factor must lie in (0, 1]")
        if any(e < 0 for e in self.decay_epochs) or list(self.decay_epochs) != sorted(
            set(self.decay_epochs)
        ):
            raise ValueError("decay_epochs must be sorted, unique and non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    def model_config(self, num_identities: int) -> ModelConfig:
        return ModelConfig(
            num_identities=num_identities,
            image_height=self.image_height,
            image_width=self.image_width,
            patch_size=self.patch_size,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            strides=self.strides,
            use_temporal=self.use_temporal,
            use_shape=self.use_shape,
            max_frames=self.max_frames,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_id=self.lambda_id,
            lambda_memory=self.lambda_memory,
            lambda_alpha=self.lambda_alpha,
        )


def learning_rate(config: TrainConfig, global_iter: int, epoch: int, group: str) -> float:
    """Learning rate for one parameter group at one step.

    Both groups share the profile: linear warmup from start_factor * plateau
    over warmup_iters iterations, then the plateau, scaled by decay_factor at
    each decay epoch. Group plateaus differ unless the dual-rate policy is
    disabled, in which case the backbone follows the head plateau.
    """
    if group == "heads":
        plateau = config.base_lr
    elif group == "backbone":
        plateau = config.backbone_lr if config.use_mdlr else config.base_lr
    else:
        raise ValueError(f"unknown parameter group {group!r}")
    start = plateau * config.warmup_start_factor
    if config.warmup_iters > 0 and global_iter < config.warmup_iters:
        lr = start + (plateau - start) * (global_iter / config.warmup_iters)
    else:
        lr = plateau
    decay = config.decay_factor ** sum(1 for d in config.decay_epochs if epoch >= d)
    return lr * decay


def pk_sample(
    records: list[TrackletRecord],
    rng: np.random.Generator,
    ids_per_batch: int,
    tracklets_per_id: int,
) -> list[TrackletRecord]:
    """One PK batch: P distinct identities, K tracklets each (with
    replacement only when an identity has fewer than K)."""
    by_id: dict[int, list[TrackletRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.identity, []).append(rec)
    identities = sorted(by_id)
    if len(identities) < ids_per_batch:
        raise ValueError(
            f"need at least {ids_per_batch} identities, found {len(identities)}"
        )
    chosen = rng.choice(identities, size=ids_per_batch, replace=False)
    batch: list[TrackletRecord] = []
    for identity in chosen:
        pool = by_id[int(identity)]
        if len(pool) >= tracklets_per_id:
            idx = rng.choice(len(pool), size=tracklets_per_id, replace=False)
        else:
            idx = rng.integers(0, len(pool), size=tracklets_per_id)
        batch.extend(pool[int(i)] for i in idx)
    return batch


def epoch_batches(
    records: list[TrackletRecord],
    rng: np.random.Generator,
    ids_per_batch: int,
    tracklets_per_id: int,
) -> list[list[TrackletRecord]]:
    """Partition one epoch into PK batches covering every tracklet at least
    once. Identity cells are shuffled; short cells and a ragged final batch
    are padded by resampling."""
    by_id: dict[int, list[TrackletRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.identity, []).append(rec)
    if len(by_id) < ids_per_batch:
        raise ValueError(
            f"need at least {ids_per_batch} identities, found {len(by_id)}"
        )
    cells: list[list[TrackletRecord]] = []
    for identity in sorted(by_id):
        pool = by_id[identity]
        perm = rng.permutation(len(pool))
        shuffled = [pool[int(i)] for i in perm]
        for i in range(0, len(shuffled), tracklets_per_id):
            cell = shuffled[i : i + tracklets_per_id]
            while len(cell) < tracklets_per_id:
                cell.append(pool[int(rng.integers(0, len(pool)))])
            cells.append(cell)
    order = rng.permutation(len(cells))
    cells = [cells[int(i)] for i in order]
    while len(cells) % ids_per_batch:
        cells.append(cells[int(rng.integers(0, len(cells)))])
    groups = [cells[i : i + ids_per_batch] for i in range(0, len(cells), ids_per_batch)]
    _separate_identities(groups)
    return [[rec for cell in group for rec in cell] for group in groups]


def _separate_identities(groups: list[list[list[TrackletRecord]]]) -> None:
    """Swap cells between batches so no batch holds a single identity, which
    would leave the triplet term without negatives. Batches that already mix
    identities are left untouched."""

    def ids_of(group: list[list[TrackletRecord]]) -> set[int]:
        return {cell[0].identity for cell in group}

    for gi, group in enumerate(groups):
        if len(ids_of(group)) > 1:
            continue
        lone = group[0][0].identity
        done = False
        for gj, other in enumerate(groups):
            if done or gj == gi:
                continue
            for cj, cell in enumerate(other):
                if cell[0].identity == lone:
                    continue
                candidate = other[:cj] + other[cj + 1 :] + [group[-1]]
                if len(ids_of(candidate)) > 1:
                    group[-1], other[cj] = cell, group[-1]
                    done = True
                    break


def sample_frame_indices(n_frames: int, t_len: int, rng: np.random.Generator) -> np.ndarray:
    """Evenly strided window with a random start; shorter tracklets repeat
    frames cyclically (temporal order kept)."""
    if n_frames < 1 or t_len < 1:
        raise ValueError("n_frames and t_len must be positive")
    if n_frames >= t_len:
        stride = n_frames // t_len
        start = int(rng.integers(0, n_frames - stride * (t_len - 1)))
        return start + stride * np.arange(t_len)
    return np.sort(np.resize(np.arange(n_frames), t_len))


@dataclass(frozen=True)
class LogRow:
    epoch: int
    iteration: int
    total: float
    triplet: float
    identity: float
    memory: float
    alpha: float
    lr_heads: float
    lr_backbone: float

    def format(self) -> str:
        return (
            f"{self.epoch} {self.iteration} "
            f"{self.total:.10g} {self.triplet:.10g} {self.identity:.10g} "
            f"{self.memory:.10g} {self.alpha:.10g} "
            f"{self.lr_heads:.10g} {self.lr_backbone:.10g}"
        )


def parse_log_line(line: str) -> LogRow:
    parts = line.split()
    if len(parts) != 9:
        raise ValueError(f"expected 9 fields in metrics line, got {len(parts)}")
    return LogRow(
        epoch=int(parts[0]),
        iteration=int(parts[1]),
        total=float(parts[2]),
        triplet=float(parts[3]),
        identity=float(parts[4]),
        memory=float(parts[5]),
        alpha=float(parts[6]),
        lr_heads=float(parts[7]),
        lr_backbone=float(parts[8]),
    )


@dataclass
class TrainResult:
    model: ReIDModel
    bank: MemoryBank
    config: TrainConfig
    label_map: dict[int, int]
    log_rows: list[LogRow]
    metrics_path: Path | None
    checkpoint_paths: list[Path]


def _frame_cache(records: list[TrackletRecord]) -> dict[str, np.ndarray]:
    return {rec.tracklet_id: load_frames(rec) for rec in records}


def _prepare_tracklet(
    frames: np.ndarray,
    rng: np.random.Generator,
    config: TrainConfig,
    fill: np.ndarray,
) -> np.ndarray:
    idx = sample_frame_indices(frames.shape[0], config.frames_per_tracklet, rng)
    clip = frames[idx]
    if config.use_jitter:
        clip = jitter_tracklet(clip, sample_jitter(rng, config.jitter_max_shift, config.jitter_prob))
    clip = flip_and_erase(
        clip, rng, flip_prob=config.flip_prob, erase_prob=config.erase_prob, fill=fill
    )
    return np.ascontiguousarray(clip, dtype=np.float32)


def _checkpoint_tensors(
    model: ReIDModel,
    bank: MemoryBank,
    optimizer: torch.optim.Adam,
    param_names: dict[int, str],
    epoch: int,
    global_iter: int,
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        out[f"model.{name}"] = param.detach().numpy()
    for name, buf in model.named_buffers():
        out[f"model.{name}"] = buf.detach().to(torch.float32).numpy()
    out["bank.proxies"] = bank.proxies.numpy()
    out["bank.seeded"] = bank.seeded.to(torch.float32).numpy()
    for group in optimizer.param_groups:
        for param in group["params"]:
            state = optimizer.state.get(param)
            if not state:
                continue
            pname = param_names[id(param)]
            out[f"opt.exp_avg.{pname}"] = state["exp_avg"].numpy()
            out[f"opt.exp_avg_sq.{pname}"] = state["exp_avg_sq"].numpy()
            out[f"opt.step.{pname}"] = np.asarray(float(state["step"]), dtype=np.float32)
    out["meta.epoch"] = np.asarray(float(epoch), dtype=np.float32)
    out["meta.global_iter"] = np.asarray(float(global_iter), dtype=np.float32)
    return out


def _restore_checkpoint(
    path: str | Path,
    model: ReIDModel,
    bank: MemoryBank,
    optimizer: torch.optim.Adam,
    param_names: dict[int, str],
) -> tuple[int, int]:
    tensors = load_named_tensors(path)

    def take(name: str) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        return tensors.pop(name)

    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = take(f"model.{name}")
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for model.{name}: "
                    f"{tuple(arr.shape)} vs {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr))
        for name, buf in model.named_buffers():
            buf.copy_(torch.from_numpy(take(f"model.{name}")).to(buf.dtype))
        bank.proxies.copy_(torch.from_numpy(take("bank.proxies")))
        bank.seeded.copy_(torch.from_numpy(take("bank.seeded")).to(torch.bool))
    for group in optimizer.param_groups:
        for param in group["params"]:
            pname = param_names[id(param)]
            state = optimizer.state.setdefault(param, {})
            state["exp_avg"] = torch.from_numpy(take(f"opt.exp_avg.{pname}")).reshape(param.shape)
            state["exp_avg_sq"] = torch.from_numpy(take(f"opt.exp_avg_sq.{pname}")).reshape(
                param.shape
            )
            state["step"] = torch.tensor(float(take(f"opt.step.{pname}")))
    epoch = int(take("meta.epoch"))
    global_iter = int(take("meta.global_iter"))
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(tensors)[:3]}")
    return epoch, global_iter


def _check_finite(name: str, value: torch.Tensor, epoch: int, iteration: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(
            f"{name} is non-finite at epoch {epoch} iteration {iteration}"
        )


def train(
    config: TrainConfig,
    records: list[TrackletRecord],
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train on the given tracklets; returns the model, memory and metrics.

    When out_dir is set, writes metrics.log plus checkpoints at each decay
    boundary and at the end. Resuming restarts from a stored epoch boundary
    and replays the remaining epochs exactly.
    """
    config.validate()
    if not records:
        raise ValueError("no training records")
    identities = sorted({rec.identity for rec in records})
    if len(identities) < 2:
        raise ValueError("training needs at least two identities")
    if config.ids_per_batch > len(identities):
        raise ValueError(
            f"ids_per_batch {config.ids_per_batch} exceeds identity count {len(identities)}"
        )
    label_map = {identity: idx for idx, identity in enumerate(identities)}

    torch.manual_seed(config.seed)
    model = ReIDModel(config.model_config(len(identities)))
    bank = MemoryBank(
        len(identities),
        config.dim,
        proxies_per_identity=config.proxies_per_identity,
        momentum=config.memory_momentum,
        temperature=config.memory_temperature,
        seed=config.seed,
    )
    groups = model.parameter_groups()
    optimizer = torch.optim.Adam(
        [
            {"params": groups["backbone"], "lr": learning_rate(config, 0, 0, "backbone")},
            {"params": groups["heads"], "lr": learning_rate(config, 0, 0, "heads")},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    group_names = ("backbone", "heads")
    param_names = {id(p): f"model.{n}" for n, p in model.named_parameters()}

    start_epoch = 0
    global_iter = 0
    if resume_from is not None:
        epoch_done, global_iter = _restore_checkpoint(
            resume_from, model, bank, optimizer, param_names
        )
        start_epoch = epoch_done + 1

    cache = _frame_cache(records)
    fill = np.mean([f.mean(axis=(0, 1, 2)) for f in cache.values()], axis=0).astype(np.float32)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log_rows: list[LogRow] = []
    checkpoint_paths: list[Path] = []
    checkpoint_after = {e - 1 for e in config.decay_epochs if 0 < e <= config.epochs}
    checkpoint_after.add(config.epochs - 1)
    weights = config.loss_weights()

    model.train()
    for epoch in range(start_epoch, config.epochs):
        order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 11, epoch]))
        aug_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 13, epoch]))
        batches = epoch_batches(records, order_rng, config.ids_per_batch, config.tracklets_per_id)
        for iteration, batch in enumerate(batches):
            clips = np.stack(
                [_prepare_tracklet(cache[rec.tracklet_id], aug_rng, config, fill) for rec in batch]
            )
            labels = torch.tensor([label_map[rec.identity] for rec in batch], dtype=torch.long)
            out: ModelOutput = model(torch.from_numpy(clips))

            l_me = bank.contrastive_loss(out.v, labels)
            l_id = id_loss(out.logits_temporal, labels, config.smoothing)
            l_tri = triplet_loss(out.h_m, labels, config.margin)
            if out.logits_shape is not None:
                l_id = l_id + id_loss(out.logits_shape, labels, config.smoothing)
                l_tri = l_tri + triplet_loss(out.f_s, labels, config.margin)
                l_alpha = shape_prior_loss(out.alpha_refined)
            else:
                l_alpha = out.v.new_zeros(())
            loss = total_loss(l_tri, l_id, l_me, l_alpha, weights)
            for name, value in (
                ("memory loss", l_me),
                ("identity loss", l_id),
                ("triplet loss", l_tri),
                ("shape prior loss", l_alpha),
                ("total loss", loss),
            ):
                _check_finite(name, value, epoch, iteration)

            lr_by_group = {
                name: learning_rate(config, global_iter, epoch, name) for name in group_names
            }
            for group, name in zip(optimizer.param_groups, group_names):
                group["lr"] = lr_by_group[name]
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            bank.batch_update(out.v.detach(), labels)

            log_rows.append(
                LogRow(
                    epoch=epoch,
                    iteration=iteration,
                    total=float(loss.detach()),
                    triplet=float(l_tri.detach()),
                    identity=float(l_id.detach()),
                    memory=float(l_me.detach()),
                    alpha=float(l_alpha.detach()),
                    lr_heads=lr_by_group["heads"],
                    lr_backbone=lr_by_group["backbone"],
                )
            )
            global_iter += 1
        if out_path is not None and epoch in checkpoint_after:
            ckpt = out_path / f"checkpoint_ep{epoch + 1:03d}.bin"
            save_named_tensors(
                ckpt,
                _checkpoint_tensors(model, bank, optimizer, param_names, epoch, global_iter),
            )
            checkpoint_paths.append(ckpt)

    metrics_path = None
    if out_path is not None:
        metrics_path = out_path / "metrics.log"
        metrics_path.write_text("".join(row.format() + "\n" for row in log_rows))
    return TrainResult(
        model=model,
        bank=bank,
        config=config,
        label_map=label_map,
        log_rows=log_rows,
        metrics_path=metrics_path,
        checkpoint_paths=checkpoint_paths,
    )


def split_by_identity(
    records: list[TrackletRecord], num_train_identities: int
) -> tuple[list[TrackletRecord], list[TrackletRecord]]:
    """First N identities (sorted) train; the rest are held out for retrieval."""
    identities = sorted({rec.identity for rec in records})
    if not 0 < num_train_identities < len(identities):
        raise ValueError(
            f"num_train_identities must lie in 1..{len(identities) - 1}, "
            f"got {num_train_identities}"
        )
    train_ids = set(identities[:num_train_identities])
    train = [rec for rec in records if rec.identity in train_ids]
    held = [rec for rec in records if rec.identity not in train_ids]
    return train, held


ABLATION_LADDER: tuple[tuple[str, dict[str, bool]], ...] = (
    ("baseline", dict(use_mdlr=False, use_jitter=False, use_temporal=False, use_shape=False)),
    ("+dual-lr", dict(use_mdlr=True, use_jitter=False, use_temporal=False, use_shape=False)),
    ("+color-jitter", dict(use_mdlr=True, use_jitter=True, use_temporal=False, use_shape=False)),
    ("+temporal", dict(use_mdlr=True, use_jitter=True, use_temporal=True, use_shape=False)),
    ("+shape", dict(use_mdlr=True, use_jitter=True, use_temporal=True, use_shape=True)),
)


def ladder_config(base: TrainConfig, rung: str) -> TrainConfig:
    for name, toggles in ABLATION_LADDER:
        if name == rung:
            return replace(base, **toggles)
    raise ValueError(f"unknown ablation rung {rung!r}")


def config_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(TrainConfig))


def load_model_for_eval(checkpoint_path: str | Path, config: TrainConfig) -> ReIDModel:
    """Rebuild a model from a checkpoint for embedding/retrieval.

    The classifier width is recovered from the stored head, so the manifest
    used at embed time does not have to match the training identity set.
    """
    tensors = load_named_tensors(checkpoint_path)
    head = tensors.get("model.head_temporal.weight")
    if head is None:
        raise CheckpointError(f"{checkpoint_path}: missing tensor 'model.head_temporal.weight'")
    model = ReIDModel(config.model_config(int(head.shape[0])))
    with torch.no_grad():
        targets = list(model.named_parameters()) + list(model.named_buffers())
        for name, param in targets:
            key = f"model.{name}"
            if key not in tensors:
                raise CheckpointError(f"{checkpoint_path}: missing tensor {key!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{checkpoint_path}: shape mismatch for {key}: "
                    f"{tuple(arr.shape)} vs {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr).to(param.dtype))
    model.eval()
    return model


@dataclass
class AblationRun:
    rung: str
    seed: int
    map3: float
    protocol_map: dict[str, float]


def run_ablation(
    base_config: TrainConfig,
    records: list[TrackletRecord],
    num_train_identities: int,
    seeds: tuple[int, ...] = (0, 1, 2),
    rungs: tuple[str, ...] | None = None,
) -> list[AblationRun]:
    """Train each ladder rung at each seed; score retrieval on the identities
    held out of training.

    The ladder trains on the first session only, so each training identity is
    seen in a single outfit. Queries come from the held-out identities; the
    training identities' unseen second-session tracklets join the gallery as
    distractors."""
    from .evaluation import embed_records, evaluate_all, map3 as _map3

    train_records, held_records = split_by_identity(records, num_train_identities)
    sessions = sorted({rec.session for rec in train_records})
    first_session = [rec for rec in train_records if rec.session == sessions[0]]
    distractors = [rec for rec in train_records if rec.session != sessions[0]]
    names = tuple(name for name, _ in ABLATION_LADDER) if rungs is None else rungs
    runs: list[AblationRun] = []
    for rung in names:
        for seed in seeds:
            config = ladder_config(replace(base_config, seed=seed), rung)
            result = train(config, first_session)
            embeddings = embed_records(result.model, held_records)
            distractor_embeddings = embed_records(result.model, distractors)
            results = evaluate_all(embeddings, distractor_embeddings)
            runs.append(
                AblationRun(
                    rung=rung,
                    seed=seed,
                    map3=_map3(results),
                    protocol_map={name: r.mean_ap for name, r in results.items()},
                )
            )
    return runs
