"""Adversarial multi-task training loop, evaluation, checkpoints and ablations.

All randomness is drawn from streams keyed by ``(seed, step, substep)`` instead
of a running generator, so a run resumed from a checkpoint replays exactly the
same batches, augmentations and interpolation draws as an uninterrupted run.

Run directory layout::

    config.snapshot            every config key, reloadable with --config
    log.records                one JSON record per generator step
    checkpoints/step_%06d.pt
    eval/step_%06d.report      flat JSON record of evaluation metrics
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from depthseg.augment import augment_batch
from depthseg.config import ConfigError, RunConfig
from depthseg.data import DatasetManifest, Sample, TensorSample, center_crop, collate, sample_to_tensors
from depthseg.depth_space import DepthMap, DepthRange, LogDepthMap, from_log_depth, metric_to_unit, unit_to_metric
from depthseg.losses import (
    LossReport,
    LossWeights,
    critic_terms,
    depth_scale_invariant_loss,
    generator_adversarial_loss,
    segmentation_ce_loss,
    total_loss,
)
from depthseg.metrics import REPORT_KEYS, DepthMetrics, SegAccumulator, depth_metrics, miou, update_confusion
from depthseg.model import Critic, MultiTaskNet, NetConfig, build_critic, build_network, make_joint_map

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    """A loss became non-finite; training stops without writing a checkpoint."""


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0 or step >= total:
        return 0.0
    return base * (1.0 - max(step, 0) / total) ** power


def stream_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_stream(*keys: int) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(*keys))


# ---------------------------------------------------------------------------
# state


def net_config_for(cfg: RunConfig) -> NetConfig:
    return replace(cfg.model, heads=cfg.train.tasks)


def critic_kinds(cfg: RunConfig) -> list[str]:
    mode, tasks = cfg.train.critic, cfg.train.tasks
    if mode == "none":
        return []
    if tasks != "both":
        return [tasks]
    return ["joint"] if mode == "one" else ["depth", "seg"]


@dataclass
class TrainState:
    net: MultiTaskNet
    critics: dict[str, Critic]
    gen_opt: torch.optim.Optimizer
    critic_opt: Optional[torch.optim.Optimizer]
    step: int = 0

    def critic_params(self) -> list[torch.nn.Parameter]:
        return [p for c in self.critics.values() for p in c.parameters()]


def init_state(cfg: RunConfig) -> TrainState:
    seed = cfg.train.seed
    net = build_network(net_config_for(cfg), seed=stream_seed(seed, 0xA11))
    critics = {
        kind: build_critic(cfg.model, seed=stream_seed(seed, 0xC217, i), kind=kind)
        for i, kind in enumerate(critic_kinds(cfg))
    }
    gen_opt = torch.optim.AdamW(net.parameters(), lr=cfg.train.base_lr, weight_decay=cfg.train.weight_decay)
    critic_opt = None
    if critics:
        critic_opt = torch.optim.AdamW(
            [p for c in critics.values() for p in c.parameters()],
            lr=cfg.train.critic_lr,
            betas=(0.5, 0.9),
            weight_decay=cfg.train.critic_weight_decay,
        )
    return TrainState(net, critics, gen_opt, critic_opt)


def param_checksum(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# batches


def make_batch(
    samples: Sequence[Sample],
    manifest: DatasetManifest,
    cfg: RunConfig,
    step: int,
    substep: int,
    batch_size: int,
) -> TensorSample:
    rng = np.random.default_rng([cfg.train.seed, step, substep])
    idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
    chosen = [samples[i] for i in idx]
    if cfg.train.augment:
        chosen = augment_batch(chosen, rng, cfg.aug)
    return collate([sample_to_tensors(s, manifest) for s in chosen])


def gt_unit_depth(batch: TensorSample, drange: DepthRange, space: str) -> torch.Tensor:
    if space == "log":
        return batch.log_depth
    return metric_to_unit(batch.depth, drange, space).unsqueeze(1) * batch.valid.unsqueeze(1)


def critic_inputs(
    kinds: Sequence[str],
    unit_depth: Optional[torch.Tensor],
    seg: Optional[torch.Tensor],
    batch: TensorSample,
    num_classes: int,
    ignore_id: int,
) -> dict[str, torch.Tensor]:
    """Per-critic input maps. ``seg`` is logits (generated) or labels (real).

    Generated maps are masked with the ground-truth validity pattern so that
    masking alone does not give real samples away.
    """
    seg_mask = batch.labels != ignore_id
    out = {}
    for kind in kinds:
        if kind == "joint":
            jm = make_joint_map(
                unit_depth, seg, num_classes, ignore_id, seg_mask=seg_mask, depth_valid=batch.valid
            )
            out[kind] = jm.data
            continue
        if kind == "depth":
            task = unit_depth * batch.valid.unsqueeze(1).to(unit_depth.dtype)
        else:
            dummy = torch.zeros(batch.labels.shape[0], 1, *batch.labels.shape[1:], dtype=batch.image.dtype)
            task = make_joint_map(dummy, seg, num_classes, ignore_id, seg_mask=seg_mask).data[:, 1:]
        out[kind] = torch.cat([task, batch.image.to(task.dtype)], dim=1)
    return out


def _real_fake(state: TrainState, cfg: RunConfig, manifest: DatasetManifest, batch: TensorSample, pred):
    kinds = list(state.critics)
    drange = manifest.depth_range
    real = critic_inputs(
        kinds, gt_unit_depth(batch, drange, cfg.train.depth_space), batch.labels, batch,
        cfg.model.num_classes, manifest.ignore_id,
    )
    fake = critic_inputs(kinds, pred.log_depth, pred.seg_logits, batch, cfg.model.num_classes, manifest.ignore_id)
    return real, fake


# ---------------------------------------------------------------------------
# steps


def train_critic_step(
    state: TrainState,
    batch: TensorSample,
    cfg: RunConfig,
    manifest: DatasetManifest,
    generator: Optional[torch.Generator] = None,
) -> dict[str, float]:
    """One optimizer step on the summed critic losses; the generator is frozen."""
    with torch.no_grad():
        pred = state.net(batch.image)
    real, fake = _real_fake(state, cfg, manifest, batch, pred)
    loss = 0.0
    w_gap = gp = norm = 0.0
    for kind, critic in state.critics.items():
        terms = critic_terms(critic, real[kind], fake[kind], cfg.loss.lambda_gp, generator)
        loss = loss + terms.loss
        w_gap += float(terms.w_gap)
        gp += float(terms.gp.detach())
        norm += float(terms.grad_norm)
    if not torch.isfinite(loss):
        raise DivergenceError(f"critic loss is {float(loss)} at step {state.step}")
    state.critic_opt.zero_grad(set_to_none=True)
    loss.backward(inputs=state.critic_params())
    state.critic_opt.step()
    n = len(state.critics)
    return {"l_critic": float(loss.detach()), "w_gap": w_gap, "gp": gp / n, "grad_norm": norm / n}


def generator_losses(
    state: TrainState, batch: TensorSample, cfg: RunConfig, manifest: DatasetManifest
) -> tuple[torch.Tensor, LossReport]:
    weights = cfg.effective_weights()
    drange = manifest.depth_range
    pred = state.net(batch.image)
    zero = torch.zeros((), dtype=batch.image.dtype)
    l_depth = l_seg = l_adv = zero
    if pred.log_depth is not None:
        metric = unit_to_metric(pred.log_depth[:, 0], drange, cfg.train.depth_space)
        l_depth = depth_scale_invariant_loss(metric, batch.depth, batch.valid, weights.alpha_si)
    if pred.seg_logits is not None:
        l_seg = segmentation_ce_loss(pred.seg_logits, batch.labels, manifest.ignore_id)
    if state.critics:
        _, fake = _real_fake(state, cfg, manifest, batch, pred)
        l_adv = sum(generator_adversarial_loss(c, fake[k]) for k, c in state.critics.items())
    for name, v in (("l_depth", l_depth), ("l_seg", l_seg), ("l_gen_adv", l_adv)):
        if not torch.isfinite(v):
            raise DivergenceError(f"{name} is {float(v)} at step {state.step}")
    loss = total_loss(l_depth, l_seg, l_adv, weights)
    report = LossReport(*(float(v.detach()) for v in (l_depth, l_seg, l_adv)), 0.0, 0.0, float(loss.detach()))
    return loss, report


def train_generator_step(
    state: TrainState, batch: TensorSample, cfg: RunConfig, manifest: DatasetManifest, lr: Optional[float] = None
) -> LossReport:
    """One generator update on the weighted total; critic parameters are frozen."""
    loss, report = generator_losses(state, batch, cfg, manifest)
    if lr is None:
        lr = poly_lr(cfg.train.base_lr, state.step, cfg.train.total_steps, cfg.train.poly_power)
    for g in state.gen_opt.param_groups:
        g["lr"] = lr
    state.gen_opt.zero_grad(set_to_none=True)
    loss.backward(inputs=list(state.net.parameters()))
    state.gen_opt.step()
    return report


# ---------------------------------------------------------------------------
# evaluation


def predict_metric(net: MultiTaskNet, images: torch.Tensor, drange: DepthRange, space: str):
    """(metric depth B x H x W numpy or None, labels B x H x W numpy or None)."""
    with torch.no_grad():
        pred = net(images)
    depth = labels = None
    if pred.log_depth is not None:
        u = pred.log_depth[:, 0].double().numpy()
        if space == "log":
            depth = from_log_depth(LogDepthMap(u, np.ones_like(u, dtype=bool)), drange).values
        else:
            depth = unit_to_metric(torch.from_numpy(u), drange, space).numpy()
    if pred.seg_logits is not None:
        labels = pred.seg_logits.argmax(dim=1).numpy()
    return depth, labels


def evaluate_predictions(
    pairs: Sequence[tuple[Optional[np.ndarray], Optional[np.ndarray], Sample]], manifest: DatasetManifest
) -> dict[str, Optional[float]]:
    """Per-image depth metrics averaged over the split plus pooled mIoU."""
    drange = manifest.depth_range
    per_image: list[DepthMetrics] = []
    acc = SegAccumulator(manifest.num_classes, manifest.ignore_id)
    for depth, labels, sample in pairs:
        if depth is not None:
            pred = DepthMap(depth, np.ones_like(depth, dtype=bool))
            per_image.append(depth_metrics(pred, sample.depth, drange))
        if labels is not None:
            acc = update_confusion(acc, labels, sample.labels)
    report: dict[str, Optional[float]] = {k: None for k in REPORT_KEYS}
    if per_image:
        report.update(DepthMetrics.mean(per_image).to_dict())
    if acc.total:
        m, _, pa = miou(acc)
        report["miou"], report["pixel_acc"] = m, pa
    return report


def evaluate(
    net: MultiTaskNet,
    samples: Sequence[Sample],
    manifest: DatasetManifest,
    depth_space: str = "log",
    batch_size: int = 20,
) -> dict[str, Optional[float]]:
    if not samples:
        raise ValueError("evaluate: empty split")
    was_training = net.training
    net.eval()
    pairs = []
    try:
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            images = torch.stack([sample_to_tensors(s, manifest).image for s in chunk])
            depth, labels = predict_metric(net, images, manifest.depth_range, depth_space)
            for j, s in enumerate(chunk):
                pairs.append((None if depth is None else depth[j], None if labels is None else labels[j], s))
    finally:
        net.train(was_training)
    return evaluate_predictions(pairs, manifest)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, state: TrainState, cfg: RunConfig, metrics: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "manifest": {
            "format_version": CHECKPOINT_VERSION,
            "config": cfg.to_flat(),
            "seed": cfg.train.seed,
            "step": state.step,
            "metrics": metrics or {},
        },
        "params": {"net": state.net.state_dict(), **{f"critic.{k}": c.state_dict() for k, c in state.critics.items()}},
        "optim": {
            "gen": state.gen_opt.state_dict(),
            "critic": state.critic_opt.state_dict() if state.critic_opt else None,
        },
    }
    tmp = path.with_suffix(".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("manifest", {}).get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    return blob


def config_from_checkpoint(blob: dict) -> RunConfig:
    return RunConfig.from_flat(blob["manifest"]["config"])


def load_checkpoint(path, cfg: Optional[RunConfig] = None) -> tuple[TrainState, RunConfig, dict]:
    """Restore a full training state. ``cfg``, when given, must agree with the
    checkpoint on every model key."""
    blob = read_checkpoint(path)
    saved = config_from_checkpoint(blob)
    if cfg is not None:
        mismatch = [k for k, v in saved.to_flat().items() if k.startswith("model.") and cfg.to_flat()[k] != v]
        if mismatch:
            raise ConfigError(f"{path}: model config differs from checkpoint in {', '.join(mismatch)}")
    else:
        cfg = saved
    state = init_state(cfg)
    state.net.load_state_dict(blob["params"]["net"])
    for k, c in state.critics.items():
        c.load_state_dict(blob["params"][f"critic.{k}"])
    state.gen_opt.load_state_dict(blob["optim"]["gen"])
    if state.critic_opt is not None:
        state.critic_opt.load_state_dict(blob["optim"]["critic"])
    state.step = int(blob["manifest"]["step"])
    return state, cfg, blob["manifest"]


def load_network(path) -> tuple[MultiTaskNet, RunConfig]:
    blob = read_checkpoint(path)
    cfg = config_from_checkpoint(blob)
    net = build_network(net_config_for(cfg))
    net.load_state_dict(blob["params"]["net"])
    net.eval()
    return net, cfg


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    evals: dict[int, dict] = field(default_factory=dict)
    final_checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    seed: int = 0
    state: Optional[TrainState] = None

    def final_eval(self) -> dict:
        return self.evals[max(self.evals)]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def fit(
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    manifest: DatasetManifest,
    out_dir=None,
    resume_from=None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
) -> TrainReport:
    """Alternate ``critic_steps`` critic updates with one generator update.

    ``stop_at`` ends the loop early (the schedule still uses ``total_steps``),
    which together with ``resume_from`` splits one run across invocations.
    """
    if not train_samples:
        raise ValueError("fit: training set is empty")
    if cfg.train.deterministic:
        torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if resume_from is not None:
        state, cfg, _ = load_checkpoint(resume_from, cfg)
    else:
        state = init_state(cfg)
    if cfg.train.center_crop:
        train_samples = [center_crop(s, cfg.train.center_crop) for s in train_samples]
        val_samples = [center_crop(s, cfg.train.center_crop) for s in val_samples]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.snapshot")
    report = TrainReport(seed=cfg.train.seed, state=state)
    tc = cfg.train
    end = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    log_file = open(out / "log.records", "a") if out is not None else None

    def run_eval(step: int) -> dict:
        ev = evaluate(state.net, val_samples, manifest, tc.depth_space, tc.eval_batch_size) if val_samples else {}
        report.evals[step] = ev
        if out is not None:
            _write_json(out / "eval" / f"step_{step:06d}.report", ev)
        return ev

    def checkpoint(step: int, metrics: Optional[dict]) -> None:
        if out is not None:
            path = save_checkpoint(out / "checkpoints" / f"step_{step:06d}.pt", state, cfg, metrics)
            report.final_checkpoint = str(path)

    try:
        if state.step == 0:
            ev = run_eval(0)
            if tc.total_steps == 0:
                checkpoint(0, ev)
        for t in range(state.step, end):
            critic_stats = []
            for c in range(tc.critic_steps if state.critics else 0):
                batch = make_batch(train_samples, manifest, cfg, t, 1 + c, tc.critic_batch_size)
                critic_stats.append(train_critic_step(state, batch, cfg, manifest, torch_stream(tc.seed, t, 1 + c)))
            batch = make_batch(train_samples, manifest, cfg, t, 0, tc.batch_size)
            lr = poly_lr(tc.base_lr, t, tc.total_steps, tc.poly_power)
            rep = train_generator_step(state, batch, cfg, manifest, lr)
            if critic_stats:
                rep.l_critic = float(np.mean([s["l_critic"] for s in critic_stats]))
                rep.gp = float(np.mean([s["gp"] for s in critic_stats]))
            record = {"step": t, "lr": lr, **rep.to_record()}
            if critic_stats:
                record["w_gap"] = float(np.mean([s["w_gap"] for s in critic_stats]))
                record["grad_norm"] = float(np.mean([s["grad_norm"] for s in critic_stats]))
            state.step = t + 1
            report.records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_step is not None:
                on_step(t, record)
            ev = None
            if (tc.eval_interval and state.step % tc.eval_interval == 0) or state.step == tc.total_steps:
                ev = run_eval(state.step)
            if (tc.checkpoint_interval and state.step % tc.checkpoint_interval == 0) or state.step == end:
                checkpoint(state.step, ev)
    finally:
        if log_file is not None:
            log_file.close()
    report.wall_clock = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# ablations

# The loss weights a variant switches off are written out as well, so a
# run's config snapshot states them explicitly.
ABLATIONS: dict[str, dict[str, str]] = {
    "only Depth": {"train.tasks": "depth", "loss.alpha_mix": "1.0"},
    "only Seg": {"train.tasks": "seg", "loss.alpha_mix": "0.0"},
    "w/o Critic": {"train.critic": "none", "loss.beta_adv": "0.0"},
    "w one Critic": {"train.critic": "one"},
    "w two Critics": {"train.critic": "two"},
    "Linear Space": {"train.depth_space": "linear"},
    "Log Space": {"train.depth_space": "log"},
}

ABLATION_GROUPS = (
    ("Single-Task vs. Multi-Task", ("only Depth", "only Seg")),
    ("Impact of Critic Integration", ("w/o Critic", "w one Critic", "w two Critics")),
    ("Linear vs. Logarithmic", ("Linear Space", "Log Space")),
)


def ablation_configs(base: RunConfig) -> dict[str, RunConfig]:
    return {name: base.with_overrides(ov) for name, ov in ABLATIONS.items()}


def run_ablations(
    base: RunConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    manifest: DatasetManifest,
    out_dir=None,
) -> dict[str, dict]:
    """Train every variant once; variants with identical configs share a run."""
    cache: dict[str, dict] = {}
    results = {}
    for name, cfg in ablation_configs(base).items():
        key = cfg.dumps()
        if key not in cache:
            sub = None
            if out_dir is not None:
                sub = Path(out_dir) / name.lower().replace("/", "").replace(" ", "_")
            logger.info("ablation %s", name)
            rep = fit(cfg, train_samples, val_samples, manifest, out_dir=sub)
            cache[key] = {**rep.final_eval(), "params": sum(p.numel() for p in rep.state.net.parameters())}
        results[name] = dict(cache[key])
    return results


def format_ablation_table(results: dict[str, dict]) -> str:
    def fmt(v, scale=1.0, nd=3):
        return "-" if v is None else f"{v * scale:.{nd}f}"

    lines = [f"| {'Ablation':<28} | {'Model':<14} | {'AbsRel':>7} | {'mIoU':>6} | {'Params':>9} |"]
    lines.append("|" + "-" * 30 + "|" + "-" * 16 + "|" + "-" * 9 + "|" + "-" * 8 + "|" + "-" * 11 + "|")
    for group, names in ABLATION_GROUPS:
        for i, name in enumerate(names):
            r = results[name]
            lines.append(
                f"| {group if i == 0 else '':<28} | {name:<14} | {fmt(r.get('abs_rel')):>7} | "
                f"{fmt(r.get('miou'), 100, 2):>6} | {r.get('params', 0):>9} |"
            )
    return "\n".join(lines) + "\n"
