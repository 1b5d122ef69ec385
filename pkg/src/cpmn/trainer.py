"""Parallel training of the CTPA and NCT pathway networks.

Per step: forward both pathways, compute every loss, run one backward per
pathway with all cross-pathway terms detached, step the optimizers, then apply
the moving-average center update. The CTPA pathway is driven by its own
classification/segmentation/center losses only; the NCT pathway additionally
receives the KL output-alignment and affinity-graph alignment terms, whose
gradients never reach CTPA parameters.

Data order and augmentation draws are derived statelessly from
(seed, epoch, position), so runs are reproducible and resumable from any
epoch-boundary checkpoint, and the presence or absence of the teacher pathway
never shifts the student's data stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .affinity import alignment_loss, build_graph
from .core_types import CPMNConfig, PairedCase, Phase, Volume3D
from .inference import binarize_probmap, classify_center_patch, sliding_window_segment
from .losses import (
    ClassCenters,
    LossBreakdown,
    bce_class_loss,
    dense_center_loss,
    focal_loss,
    kl_mutual_loss,
    total_loss,
    update_centers,
    zero_centers,
)
from .metrics_report import SingleClassError, dice, roc_auc
from .nets import PathwayNetwork, build_pathway

ABLATIONS = ("single_nct", "single_ctpa", "mls", "mls_ifa", "mls_ifa_ifd")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes NaN; the message names the last good checkpoint."""


@dataclass(frozen=True)
class TrainPlan:
    """Which pathways train and which one is evaluated for model selection."""

    name: str
    train_ctpa: bool
    train_nct: bool
    eval_phase: Phase


@dataclass
class Batch:
    nct: torch.Tensor  # (B, 1, D, H, W)
    ctpa: torch.Tensor  # (B, 1, D, H, W)
    mask: torch.Tensor  # (B, D, H, W)
    labels: torch.Tensor  # (B,)


@dataclass
class TrainState:
    config: CPMNConfig
    width_scale: float
    plan: TrainPlan
    nets: dict[Phase, PathwayNetwork]
    optimizers: dict[Phase, torch.optim.Adam]
    centers: dict[Phase, ClassCenters]
    epoch: int = 0
    step: int = 0
    best_metric: float = -math.inf
    best_epoch: int = -1


def resolve_ablation(name: str, config: CPMNConfig) -> tuple[CPMNConfig, TrainPlan]:
    """Map an ablation name to its effective loss weights and pathway plan."""
    if name == "single_nct":
        return config.with_lambdas(0.0, 0.0, 0.0), TrainPlan(name, False, True, Phase.NCT)
    if name == "single_ctpa":
        return config.with_lambdas(0.0, 0.0, 0.0), TrainPlan(name, True, False, Phase.CTPA)
    if name == "mls":
        return config.with_lambdas(config.lambda1, 0.0, 0.0), TrainPlan(name, True, True, Phase.NCT)
    if name == "mls_ifa":
        return (
            config.with_lambdas(config.lambda1, config.lambda2, 0.0),
            TrainPlan(name, True, True, Phase.NCT),
        )
    if name == "mls_ifa_ifd":
        return config, TrainPlan(name, True, True, Phase.NCT)
    raise ValueError(f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")


def _seed_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([p & 0xFFFFFFFF for p in parts])


def _pathway_seed(seed: int, phase: Phase) -> int:
    offset = 1 if phase is Phase.CTPA else 2
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, offset]).generate_state(1)[0])


def cosine_lr(epoch: int, epochs: int, lr: float, lr_min: float) -> float:
    """Cosine annealing from lr at epoch 0 to lr_min at the final epoch."""
    span = max(epochs - 1, 1)
    t = min(epoch, span) / span
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))


def augment(
    nct: np.ndarray,
    ctpa: np.ndarray,
    mask: np.ndarray,
    patch_size: tuple[int, int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random flips/rotations (p = 0.1 each), pad, then a shared random crop.

    The identical geometric transform and crop offsets are applied to all
    three grids; volumes pad with edge values, the mask pads with background.
    """
    arrays = [nct, ctpa, mask]
    for axis in range(3):
        if rng.random() < 0.1:
            arrays = [np.flip(a, axis=axis) for a in arrays]
    if rng.random() < 0.1:
        k = int(rng.integers(1, 4))
        arrays = [np.rot90(a, k=k, axes=(1, 2)) for a in arrays]
    pads = []
    for size, target in zip(arrays[0].shape, patch_size):
        deficit = max(target - size, 0)
        before = deficit // 2
        pads.append((before, deficit - before))
    if any(b or a for b, a in pads):
        arrays = [
            np.pad(arrays[0], pads, mode="edge"),
            np.pad(arrays[1], pads, mode="edge"),
            np.pad(arrays[2], pads, mode="constant", constant_values=0),
        ]
    offsets = [int(rng.integers(0, s - p + 1)) for s, p in zip(arrays[0].shape, patch_size)]
    window = tuple(slice(o, o + p) for o, p in zip(offsets, patch_size))
    return tuple(np.ascontiguousarray(a[window]) for a in arrays)


def make_batch(
    cases: Sequence[PairedCase],
    positions: Sequence[int],
    config: CPMNConfig,
    epoch: int,
) -> Batch:
    ncts, ctpas, masks, labels = [], [], [], []
    for position in positions:
        case = cases[position]
        rng = _seed_rng(config.seed, 11, epoch, position)
        nct, ctpa, mask = augment(
            case.nct.data, case.ctpa.data, case.mask.labels, config.patch_size, rng
        )
        ncts.append(nct)
        ctpas.append(ctpa)
        masks.append(mask)
        labels.append(case.label)
    to_vol = lambda arrs: torch.from_numpy(np.stack(arrs).astype(np.float32)).unsqueeze(1)
    return Batch(
        nct=to_vol(ncts),
        ctpa=to_vol(ctpas),
        mask=torch.from_numpy(np.stack(masks).astype(np.int64)),
        labels=torch.tensor(labels, dtype=torch.int64),
    )


def _batch_alignment_loss(
    teacher_feature: torch.Tensor,
    student_feature: torch.Tensor,
    config: CPMNConfig,
    normalization: str,
) -> torch.Tensor:
    losses = []
    for i in range(student_feature.shape[0]):
        g1 = build_graph(teacher_feature[i].detach(), config.alpha, config.beta)
        g2 = build_graph(student_feature[i], config.alpha, config.beta)
        losses.append(alignment_loss(g1, g2, normalization=normalization))
    return torch.stack(losses).mean()


def train_step(
    state: TrainState,
    batch: Batch,
    config: CPMNConfig,
    ifa_normalization: str = "mean",
    last_checkpoint: str = "<none>",
) -> tuple[TrainState, dict[Phase, LossBreakdown]]:
    """One optimization step for both pathways; returns per-pathway breakdowns."""
    plan = state.plan
    need_teacher = plan.train_ctpa or config.lambda1 > 0 or config.lambda2 > 0
    out_ctpa = out_nct = None
    if need_teacher:
        state.nets[Phase.CTPA].train()
        out_ctpa = state.nets[Phase.CTPA](batch.ctpa)
        _check_finite_outputs(out_ctpa, Phase.CTPA, last_checkpoint)
    if plan.train_nct:
        state.nets[Phase.NCT].train()
        out_nct = state.nets[Phase.NCT](batch.nct)
        _check_finite_outputs(out_nct, Phase.NCT, last_checkpoint)

    objectives: dict[Phase, torch.Tensor] = {}
    breakdowns: dict[Phase, LossBreakdown] = {}
    zero = torch.zeros(())

    if plan.train_ctpa:
        probs = torch.softmax(out_ctpa.class_logits, dim=1)
        clas = bce_class_loss(probs, batch.labels)
        seg = focal_loss(out_ctpa.seg_logits, batch.mask, config.focal_gamma, config.focal_alpha)
        disc = (
            dense_center_loss(out_ctpa.seg_feature, batch.mask, state.centers[Phase.CTPA])
            if config.lambda3 > 0
            else zero
        )
        objectives[Phase.CTPA] = clas + seg + config.lambda3 * disc
        breakdowns[Phase.CTPA] = _breakdown(clas, seg, zero, zero, disc, config, last_checkpoint)

    if plan.train_nct:
        probs = torch.softmax(out_nct.class_logits, dim=1)
        clas = bce_class_loss(probs, batch.labels)
        seg = focal_loss(out_nct.seg_logits, batch.mask, config.focal_gamma, config.focal_alpha)
        disc = (
            dense_center_loss(out_nct.seg_feature, batch.mask, state.centers[Phase.NCT])
            if config.lambda3 > 0
            else zero
        )
        kl = zero
        if config.lambda1 > 0:
            teacher_probs = torch.softmax(out_ctpa.class_logits, dim=1)
            kl = kl_mutual_loss(probs, teacher_probs)
        alig = zero
        if config.lambda2 > 0:
            alig = _batch_alignment_loss(
                out_ctpa.encoder_feature, out_nct.encoder_feature, config, ifa_normalization
            )
        objectives[Phase.NCT] = (
            clas + seg + config.lambda1 * kl + config.lambda2 * alig + config.lambda3 * disc
        )
        breakdowns[Phase.NCT] = _breakdown(clas, seg, kl, alig, disc, config, last_checkpoint)

    for phase, objective in objectives.items():
        state.optimizers[phase].zero_grad(set_to_none=True)
        objective.backward()
    for phase in objectives:
        state.optimizers[phase].step()

    with torch.no_grad():
        if out_ctpa is not None:
            state.centers[Phase.CTPA] = update_centers(
                state.centers[Phase.CTPA], out_ctpa.seg_feature, batch.mask
            )
        if out_nct is not None:
            state.centers[Phase.NCT] = update_centers(
                state.centers[Phase.NCT], out_nct.seg_feature, batch.mask
            )
    state.step += 1
    return state, breakdowns


def _check_finite_outputs(outputs, phase: Phase, last_checkpoint: str) -> None:
    for name in ("class_logits", "seg_logits"):
        if not torch.isfinite(getattr(outputs, name)).all():
            raise TrainingDivergedError(
                f"non-finite {name} on the {phase.value} pathway; "
                f"restore from last good checkpoint: {last_checkpoint}"
            )


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _breakdown(clas, seg, kl, alig, disc, config, last_checkpoint) -> LossBreakdown:
    try:
        return total_loss(
            _scalar(clas), _scalar(seg), _scalar(kl), _scalar(alig), _scalar(disc), config
        )
    except ValueError as err:
        raise TrainingDivergedError(
            f"{err}; restore from last good checkpoint: {last_checkpoint}"
        ) from err


def audit_gradient_isolation(state: TrainState, batch: Batch, config: CPMNConfig) -> dict:
    """Numerically verify the stop-gradient contract on a live pair of pathways.

    Returns the maximum absolute parameter gradient that the transfer terms
    (KL + alignment) induce on the CTPA pathway, and that the CTPA pathway's
    own losses induce on the NCT pathway. Both must be exactly zero.
    """
    net_t = state.nets[Phase.CTPA]
    net_s = state.nets[Phase.NCT]
    for net in (net_t, net_s):
        net.train()
        net.zero_grad(set_to_none=True)
    out_t = net_t(batch.ctpa)
    out_s = net_s(batch.nct)
    p_t = torch.softmax(out_t.class_logits, dim=1)
    p_s = torch.softmax(out_s.class_logits, dim=1)
    lambda1 = config.lambda1 if config.lambda1 > 0 else 0.25
    lambda2 = config.lambda2 if config.lambda2 > 0 else 10.0
    transfer = lambda1 * kl_mutual_loss(p_s, p_t) + lambda2 * _batch_alignment_loss(
        out_t.encoder_feature, out_s.encoder_feature, config, "mean"
    )
    transfer.backward()
    transfer_to_teacher = max(
        (float(p.grad.abs().max()) for p in net_t.parameters() if p.grad is not None),
        default=0.0,
    )

    for net in (net_t, net_s):
        net.zero_grad(set_to_none=True)
    out_t = net_t(batch.ctpa)
    own = (
        bce_class_loss(torch.softmax(out_t.class_logits, dim=1), batch.labels)
        + focal_loss(out_t.seg_logits, batch.mask, config.focal_gamma, config.focal_alpha)
        + config.lambda3
        * dense_center_loss(out_t.seg_feature, batch.mask, state.centers[Phase.CTPA])
    )
    own.backward()
    teacher_own_to_student = max(
        (float(p.grad.abs().max()) for p in net_s.parameters() if p.grad is not None),
        default=0.0,
    )
    for net in (net_t, net_s):
        net.zero_grad(set_to_none=True)
    return {
        "transfer_to_ctpa_max_grad": transfer_to_teacher,
        "ctpa_own_to_nct_max_grad": teacher_own_to_student,
    }


def init_state(
    config: CPMNConfig, width_scale: float, plan: TrainPlan
) -> TrainState:
    nets = {
        phase: build_pathway(config, width_scale, seed=_pathway_seed(config.seed, phase))
        for phase in (Phase.CTPA, Phase.NCT)
    }
    optimizers = {
        phase: torch.optim.Adam(nets[phase].parameters(), lr=config.lr)
        for phase in (Phase.CTPA, Phase.NCT)
    }
    centers = {
        phase: zero_centers(nets[phase].seg_channels, phase, config.center_lr)
        for phase in (Phase.CTPA, Phase.NCT)
    }
    return TrainState(
        config=config,
        width_scale=width_scale,
        plan=plan,
        nets=nets,
        optimizers=optimizers,
        centers=centers,
    )


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Single archive: parameter arrays keyed by canonical layer path + config."""
    payload = {
        "format_version": 1,
        "config": asdict(state.config),
        "width_scale": state.width_scale,
        "ablation": state.plan.name,
        "epoch": state.epoch,
        "step": state.step,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "nets": {phase.value: state.nets[phase].state_dict() for phase in state.nets},
        "optimizers": {
            phase.value: state.optimizers[phase].state_dict() for phase in state.optimizers
        },
        "centers": {
            phase.value: {
                "centers": state.centers[phase].centers,
                "center_lr": state.centers[phase].center_lr,
            }
            for phase in state.centers
        },
        "torch_rng": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    config = CPMNConfig(**payload["config"])
    _, plan = resolve_ablation(payload["ablation"], config)
    state = init_state(config, payload["width_scale"], plan)
    for phase in (Phase.CTPA, Phase.NCT):
        state.nets[phase].load_state_dict(payload["nets"][phase.value])
        state.optimizers[phase].load_state_dict(payload["optimizers"][phase.value])
        saved = payload["centers"][phase.value]
        state.centers[phase] = ClassCenters(
            centers=saved["centers"], center_lr=saved["center_lr"], pathway=phase
        )
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.best_metric = payload["best_metric"]
    state.best_epoch = payload["best_epoch"]
    torch.set_rng_state(payload["torch_rng"])
    return state


def _split_ids(
    cases: Sequence[PairedCase], split: Mapping[str, str], name: str
) -> list[int]:
    return [i for i, case in enumerate(cases) if split.get(case.case_id) == name]


def validate_epoch(
    state: TrainState, cases: Sequence[PairedCase], val_positions: Sequence[int]
) -> dict:
    """Validation dice (PE cases) + AUC for the plan's evaluation pathway."""
    config = state.config
    net = state.nets[state.plan.eval_phase]
    scores, labels, dices = [], [], []
    for position in val_positions:
        case = cases[position]
        volume = case.nct if state.plan.eval_phase is Phase.NCT else case.ctpa
        scores.append(classify_center_patch(net, volume, config))
        labels.append(case.label)
        if case.label == 1:
            prob = sliding_window_segment(net, volume, config)
            dices.append(dice(binarize_probmap(prob, config.threshold), case.mask.labels))
    metric = 0.0
    auc = None
    if len(set(labels)) > 1:
        auc, _ = roc_auc(scores, labels)
        metric += auc
    mean_dice = float(np.mean(dices)) if dices else None
    if mean_dice is not None:
        metric += mean_dice
    return {"auc": auc, "dice": mean_dice, "metric": metric}


def fit(
    cases: Sequence[PairedCase],
    split: Mapping[str, str],
    config: CPMNConfig,
    out_dir: str | Path,
    width_scale: float = 1.0,
    ablation: str = "mls_ifa_ifd",
    ifa_normalization: str = "mean",
    audit_every: int = 0,
) -> TrainState:
    """Train per the ablation plan; logs JSON-lines and checkpoints per epoch.

    Model selection keeps the epoch with the best validation dice + AUC sum
    (checkpoints/best.pt); checkpoints/last.pt always holds the newest epoch.
    With ``audit_every`` > 0 the cross-pathway gradient-isolation audit runs
    every N steps and its (expected-zero) maxima are logged.
    """
    config, plan = resolve_ablation(ablation, config)
    train_positions = _split_ids(cases, split, "train")
    val_positions = _split_ids(cases, split, "val")
    if not train_positions or not val_positions:
        raise ValueError("dataset must provide nonempty train and val splits")

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "log.jsonl"
    state = init_state(config, width_scale, plan)
    last_ckpt = "<none>"

    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            state.epoch = epoch
            lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_min)
            for optimizer in state.optimizers.values():
                for group in optimizer.param_groups:
                    group["lr"] = lr
            order = _seed_rng(config.seed, 7, epoch).permutation(len(train_positions))
            for start in range(0, len(order), config.batch_size):
                chunk = [train_positions[i] for i in order[start : start + config.batch_size]]
                batch = make_batch(cases, chunk, config, epoch)
                if audit_every and plan.train_ctpa and plan.train_nct and (
                    state.step % audit_every == 0
                ):
                    audit = audit_gradient_isolation(state, batch, config)
                    log.write(json.dumps({"event": "audit", "step": state.step, **audit}) + "\n")
                state, breakdowns = train_step(
                    state, batch, config, ifa_normalization, last_checkpoint=last_ckpt
                )
                record = {
                    "event": "step",
                    "step": state.step,
                    "epoch": epoch,
                    "lr": lr,
                    "losses": {
                        phase.value: item.as_dict() for phase, item in breakdowns.items()
                    },
                    "center_norms": {
                        phase.value: [
                            float(state.centers[phase].centers[k].norm()) for k in (0, 1)
                        ]
                        for phase in state.centers
                    },
                }
                log.write(json.dumps(record) + "\n")
            val = validate_epoch(state, cases, val_positions)
            is_best = val["metric"] > state.best_metric
            if is_best:
                state.best_metric = val["metric"]
                state.best_epoch = epoch
                save_checkpoint(state, ckpt_dir / "best.pt")
            save_checkpoint(state, ckpt_dir / "last.pt")
            last_ckpt = str(ckpt_dir / "last.pt")
            log.write(
                json.dumps({"event": "val", "epoch": epoch, "best": is_best, **val}) + "\n"
            )
    return state
