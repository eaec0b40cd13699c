"""Downstream training and evaluation, ablations, closed-loop BC rollouts, reports.

Metrics are computed on standardised targets (train-split mean and std per
output dimension), so numbers are comparable across tasks but only
directionally comparable with anything measured in other units. PR reports
PSNR on the [-1, 1] patch scale.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, module_checksum, read_header
from .codec import PatchCodec, encode_all, load_codec, mean_psnr
from .dataset import WINDOW, Dataset, WindowSet, build_windows, dataset_fingerprint, load_dataset, relative_poses
from .encoder import (ContextEncoder, EncoderConfig, PretrainConfig, WindowTensors, load_encoder, pretext_terms,
                      pretrain, random_mask)
from .errors import ConfigError, IntegrityError, OutOfBoundsError, TrainingError
from .heads import E2E_AUX, MODES, TASKS, E2EModel, TaskHead, check_task
from .terrain import (OK, Action, HeightMap, Pose, TerrainConfig, VehicleConfig, extract_patch,
                      generate_terrain, settle, step_vehicle)

TARGET_STD_FLOOR = 1e-3
MAX_FAIR_BATCH = 32
EVAL_BATCH = 256
SUCCESS_RADIUS = 0.2
ROLLOUT_TIMEOUT = 60.0
FAILURE_CAUSES = ("stuck", "rollover", "timeout", "out_of_bounds")


class MeanCollapseWarning(UserWarning):
    """Large downstream batches tend to regress towards the data mean."""


def check_batch_size(batch_size: int) -> None:
    if batch_size > MAX_FAIR_BATCH:
        warnings.warn(f"downstream batch size {batch_size} > {MAX_FAIR_BATCH}: large batches made task heads "
                      "converge to the mean of the data; results may collapse to the target mean",
                      MeanCollapseWarning, stacklevel=3)


@dataclass
class ExperimentConfig:
    dataset: str = ""
    codec: str = ""
    encoder: str = ""
    task: str = "fkd"
    mode: str = "frozen"
    epochs: int = 50
    batch_size: int = MAX_FAIR_BATCH
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    weight_decay: float = 0.01
    mask_ratio: float = 0.75
    ordering: str = "sequential"
    use_goal: bool = True
    max_windows: int = 0  # 0 = all training windows
    seed: int = 0

    def validate(self) -> None:
        check_task(self.task, self.mode)
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0 or self.backbone_lr <= 0:
            raise ConfigError("learning rates must be positive")
        check_batch_size(self.batch_size)


@dataclass
class MetricsReport:
    task: str
    mode: str
    train_mse: float | None = None
    test_mse: float | None = None
    train_psnr: float | None = None
    test_psnr: float | None = None
    learnable_params: int = 0
    total_params: int = 0
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def headline(self, split: str = "test"):
        """PSNR for patch reconstruction, MSE otherwise."""
        return getattr(self, f"{split}_psnr" if self.task == "pr" else f"{split}_mse")

    @property
    def gap(self):
        if self.task == "pr" or self.train_mse is None or self.test_mse is None:
            return None
        return self.test_mse - self.train_mse

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data


class TaskData:
    """One split: windows, cached codec embeddings and the per-task arrays."""

    def __init__(self, windows: WindowSet, embeddings: np.ndarray):
        self.windows = windows
        self.tensors = WindowTensors(windows, embeddings)
        cur, nxt = windows.current, windows.following
        self.current_patch = torch.as_tensor(windows.patches[cur], dtype=torch.float32)
        self.next_patch = torch.as_tensor(windows.patches[nxt], dtype=torch.float32)
        self.action = torch.as_tensor(windows.actions[cur], dtype=torch.float32)
        self.pose = torch.as_tensor(windows.poses[cur], dtype=torch.float32)
        self.next_delta = torch.as_tensor(windows.next_delta, dtype=torch.float32)
        self.goal = torch.as_tensor(windows.goal, dtype=torch.float32)

    @classmethod
    def from_episodes(cls, episodes, codec: PatchCodec) -> "TaskData":
        windows = build_windows(episodes)
        return cls(windows, encode_all(codec, windows.patches))

    def __len__(self) -> int:
        return len(self.windows)

    def target(self, task: str) -> torch.Tensor:
        return {"fkd": self.next_delta, "ikd": self.action, "bc": self.action, "pr": self.next_patch}[task]

    def head_aux(self, task: str, use_goal: bool = True):
        if task == "ikd":
            return self.next_delta
        if task == "bc" and use_goal:
            return self.goal
        return None

    def e2e_aux(self, task: str) -> torch.Tensor:
        parts = {"action": self.action, "pose": self.pose, "next_pose": self.next_delta, "goal": self.goal}
        return torch.cat([parts[k] for k in E2E_AUX[task]], dim=-1)


def prepare_data(dataset: Dataset, codec: PatchCodec) -> dict:
    """-> {"train": TaskData, "test": TaskData}; train and test never share terrain seeds."""
    seeds = {s: {e.seed for e in dataset.split(s)} for s in ("train", "test")}
    if seeds["train"] & seeds["test"]:
        raise IntegrityError(f"train/test splits share terrain seeds {sorted(seeds['train'] & seeds['test'])}")
    return {s: TaskData.from_episodes(dataset.split(s), codec) for s in ("train", "test")}


def standardisation(x: torch.Tensor):
    x = x.double()
    return x.mean(0).float(), x.std(0, unbiased=False).clamp_min(TARGET_STD_FLOOR).float()


def target_variance(data: TaskData, task: str, std: torch.Tensor) -> float:
    """Predict-the-mean MSE: mean over output dims of the split's variance in standardised units."""
    y = data.target(task).double() / std.double()
    return float(((y - y.mean(0)) ** 2).mean())


# ---------------------------------------------------------------------------
# models


@dataclass
class Backbone:
    codec: PatchCodec
    codec_checksum: str
    encoder: ContextEncoder | None = None
    encoder_checksum: str | None = None


def load_backbone(codec_path, encoder_path=None) -> Backbone:
    codec, cs = load_codec(codec_path)
    if encoder_path is None:
        return Backbone(codec, cs)
    enc, ckpt = load_encoder(encoder_path, codec_checksum=cs)
    return Backbone(codec, cs, enc, ckpt.checksum)


class DownstreamModel:
    """A task model in one of the three training modes.

    frozen: trainable head on a fixed encoder; finetune: head plus a private
    copy of the encoder; e2e: residual patch encoder with explicit aux inputs.
    PR in frozen/finetune mode has no head: the frozen codec decodes ctx.
    """

    def __init__(self, task: str, mode: str, backbone: Backbone, use_goal: bool = True):
        check_task(task, mode)
        self.task, self.mode, self.use_goal = task, mode, use_goal
        self.codec = backbone.codec
        self.encoder = None
        if mode != "e2e":
            if backbone.encoder is None:
                raise ConfigError(f"{mode} mode needs a pretrained encoder")
            self.encoder = copy.deepcopy(backbone.encoder) if mode == "finetune" else backbone.encoder
            if mode == "finetune":
                for p in self.encoder.parameters():
                    p.requires_grad_(True)
            else:
                for p in self.encoder.parameters():
                    p.requires_grad_(False)
        if mode == "e2e":
            self.head = E2EModel(task)
        elif task == "pr":
            self.head = None
        else:
            self.head = TaskHead(task, use_goal=use_goal)

    @property
    def hide_action(self) -> bool:
        return self.task in ("ikd", "bc")

    def modules(self):
        return [m for m in (self.encoder if self.mode == "finetune" else None, self.head) if m is not None]

    def train(self, flag: bool = True):
        for m in self.modules():
            m.train(flag)

    def param_groups(self, config: ExperimentConfig):
        groups = []
        if self.mode == "finetune":
            groups.append({"params": list(self.encoder.parameters()), "lr": config.backbone_lr})
        if self.head is not None:
            groups.append({"params": list(self.head.parameters()), "lr": config.lr})
        return groups

    def learnable_count(self) -> int:
        return sum(p.numel() for m in self.modules() for p in m.parameters())

    def total_count(self) -> int:
        if self.mode == "e2e":
            return self.head.param_count()
        # the always-frozen codec encoder counts towards the total; its decoder does not
        head = 0 if self.head is None else sum(p.numel() for p in self.head.parameters())
        return head + self.encoder.param_count() + self.codec.encoder_param_count()

    def set_stats(self, train: TaskData) -> None:
        if self.head is None or self.task == "pr":
            return
        mean, std = standardisation(train.target(self.task))
        aux = train.e2e_aux(self.task) if self.mode == "e2e" else train.head_aux(self.task, self.use_goal)
        kw = {}
        if aux is not None:
            kw["aux_mean"], kw["aux_std"] = standardisation(aux)
        self.head.set_stats(out_mean=mean, out_std=std, **kw)

    def ctx(self, data: TaskData, idx) -> torch.Tensor:
        e, a, p, _ = data.tensors.batch(idx)
        return self.encoder.context(e, a, p, hide_current_action=self.hide_action)

    def forward(self, data: TaskData, idx, ctx=None) -> torch.Tensor:
        """Prediction for windows ``idx``: standardised for vector tasks, a patch for PR."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        if self.mode == "e2e":
            return self.head(data.current_patch[idx], data.e2e_aux(self.task)[idx])
        if ctx is None:
            ctx = self.ctx(data, idx)
        if self.task == "pr":
            return self.codec.decode(ctx)
        aux = data.head_aux(self.task, self.use_goal)
        return self.head(ctx, None if aux is None else aux[idx])

    def target(self, data: TaskData, idx) -> torch.Tensor:
        y = data.target(self.task)[torch.as_tensor(idx, dtype=torch.long)]
        return y if self.task == "pr" else self.head.normalise_target(y)

    # checkpoint round trip
    def tensors(self) -> dict:
        out = {}
        if self.head is not None:
            out.update({f"head.{k}": v.detach().numpy().copy() for k, v in self.head.state_dict().items()})
        if self.mode == "finetune":
            out.update({f"encoder.{k}": v.detach().numpy().copy() for k, v in self.encoder.state_dict().items()})
        return out

    def load_tensors(self, tensors: dict) -> None:
        def part(prefix):
            return {k[len(prefix):]: torch.from_numpy(np.array(v, dtype=np.float32))
                    for k, v in tensors.items() if k.startswith(prefix)}
        if self.head is not None:
            self.head.load_state_dict(part("head."))
        if self.mode == "finetune":
            self.encoder.load_state_dict(part("encoder."))


@torch.no_grad()
def precompute_ctx(model: DownstreamModel, data: TaskData) -> torch.Tensor:
    return torch.cat([model.ctx(data, np.arange(i, min(i + EVAL_BATCH, len(data))))
                      for i in range(0, len(data), EVAL_BATCH)])


@torch.no_grad()
def evaluate_model(model: DownstreamModel, data: TaskData, ctx_cache: torch.Tensor | None = None) -> dict:
    """Deterministic full-split pass: {"mse": ..., "psnr": ...(pr only)}."""
    model.train(False)
    sq, n, preds = 0.0, 0, []
    for i in range(0, len(data), EVAL_BATCH):
        idx = np.arange(i, min(i + EVAL_BATCH, len(data)))
        ctx = None if ctx_cache is None else ctx_cache[idx]
        pred = model.forward(data, idx, ctx)
        tgt = model.target(data, idx)
        sq += float(((pred.double() - tgt.double()) ** 2).sum())
        n += tgt.numel()
        if model.task == "pr":
            preds.append(pred)
    out = {"mse": sq / max(1, n)}
    if model.task == "pr":
        out["psnr"] = mean_psnr(torch.cat(preds), data.next_patch)
    return out


# ---------------------------------------------------------------------------
# training


def write_metrics(path, rows, with_psnr: bool) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss"] + (["psnr"] if with_psnr else []))
        for r in rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"]))] +
                       ([repr(float(r["psnr"]))] if with_psnr else []))


@torch.enable_grad()
def train_downstream(config: ExperimentConfig, data: dict | None = None, backbone: Backbone | None = None,
                     out=None, log=None) -> tuple[Checkpoint, MetricsReport]:
    """Train one task in one mode; returns the downstream checkpoint and its final metrics.

    In frozen mode the encoder and codec checksums are verified unchanged
    after training (IntegrityError otherwise).
    """
    config.validate()
    t0 = time.time()
    if backbone is None:
        if not config.codec:
            raise IntegrityError("missing codec checkpoint: no path configured")
        if config.mode != "e2e" and not config.encoder:
            raise IntegrityError("missing pretrained encoder checkpoint: no path configured")
        backbone = load_backbone(config.codec, config.encoder or None)
    if data is None:
        data = prepare_data(load_dataset(config.dataset), backbone.codec)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    codec_before = module_checksum(backbone.codec)
    enc_before = module_checksum(backbone.encoder) if backbone.encoder is not None else None
    if backbone.encoder is not None and backbone.encoder_checksum and enc_before != backbone.encoder_checksum:
        raise IntegrityError("supplied encoder does not match its recorded checksum")

    model = DownstreamModel(config.task, config.mode, backbone, config.use_goal)
    model.set_stats(data["train"])
    groups = model.param_groups(config)
    trainable = bool(groups) and not (config.mode == "frozen" and config.task == "pr")
    cache = {}
    if config.mode == "frozen":
        cache = {s: precompute_ctx(model, d) for s, d in data.items()}

    pool = np.arange(len(data["train"]))
    if config.max_windows and len(pool) > config.max_windows:
        pool = np.sort(rng.choice(pool, config.max_windows, replace=False))
    rows = []

    def record(epoch):
        res = {}
        for split in ("train", "test"):
            m = evaluate_model(model, data[split], cache.get(split))
            rows.append({"epoch": epoch, "split": split, "loss": m["mse"], "psnr": m.get("psnr")})
            res[split] = m
        if log:
            log(f"{config.task}/{config.mode} epoch {epoch}: train {res['train']['mse']:.5f} test {res['test']['mse']:.5f}")
        return res

    step = 0
    if trainable:
        opt = torch.optim.AdamW(groups, lr=config.lr, weight_decay=config.weight_decay)
        for epoch in range(config.epochs):
            model.train(True)
            order = rng.permutation(pool)
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                ctx = cache["train"][idx] if cache else None
                loss = F.mse_loss(model.forward(data["train"], idx, ctx), model.target(data["train"], idx))
                if not torch.isfinite(loss):
                    raise TrainingError(f"{config.task} loss is not finite", step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
            final = record(epoch)
        if not config.epochs:
            final = record(0)
    else:
        final = record(0)

    if config.mode == "frozen":
        if module_checksum(backbone.encoder) != enc_before:
            raise IntegrityError("frozen-mode training changed the encoder")
    if module_checksum(backbone.codec) != codec_before:
        raise IntegrityError("downstream training changed the frozen codec")

    report = MetricsReport(
        config.task, config.mode,
        train_mse=final["train"]["mse"], test_mse=final["test"]["mse"],
        train_psnr=final["train"].get("psnr"), test_psnr=final["test"].get("psnr"),
        learnable_params=model.learnable_count() if trainable else 0,
        total_params=model.total_count(), wall_clock=time.time() - t0, config=asdict(config))
    meta = {
        "task": config.task,
        "mode": config.mode,
        "use_goal": config.use_goal,
        "aux_spec": _aux_spec(model),
        "backbone_checksum": backbone.encoder_checksum if config.mode != "e2e" else None,
        "codec_checksum": backbone.codec_checksum,
        "encoder": asdict(backbone.encoder.config) if backbone.encoder is not None else None,
        "config": asdict(config),
        "steps": step,
        "metrics": [{k: v for k, v in r.items() if v is not None} for r in rows],
        "report": {k: v for k, v in report.to_dict().items() if k not in ("config", "wall_clock")},
    }
    if config.dataset:
        try:
            meta["dataset_fingerprint"] = dataset_fingerprint(config.dataset)
        except Exception:  # in-memory datasets have no manifest on disk
            pass
    ckpt = Checkpoint("downstream", model.tensors(), meta)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / f"metrics_{config.task}_{config.mode}.csv", rows, config.task == "pr")
        ckpt.save(out / f"{config.task}_{config.mode}.vckpt")
        (out / f"report_{config.task}_{config.mode}.json").write_text(
            json.dumps({k: v for k, v in report.to_dict().items() if k != "wall_clock"}, indent=2, sort_keys=True)
            + "\n", encoding="utf-8")
    return ckpt, report


def _aux_spec(model: DownstreamModel) -> dict:
    if model.mode == "e2e":
        return dict(model.head.aux_spec)
    return {"fkd": {}, "pr": {}, "ikd": {"next_pose": 6}, "bc": {"goal": 3} if model.use_goal else {}}[model.task]


def load_downstream(path_or_ckpt, backbone: Backbone | None = None) -> DownstreamModel:
    """Rebuild a downstream model; frozen checkpoints require the exact encoder they were trained on."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    if ckpt.kind != "downstream":
        raise ConfigError(f"expected a downstream checkpoint, got {ckpt.kind!r}")
    meta = ckpt.meta
    task, mode = meta["task"], meta["mode"]
    if backbone is None:
        if mode != "e2e" or task == "pr":
            raise ConfigError(f"{task}/{mode} checkpoint needs the codec (and encoder) it was trained with")
        backbone = Backbone(PatchCodec(), "")
    if mode != "e2e" and backbone.codec_checksum != meta["codec_checksum"]:
        raise IntegrityError("codec checksum differs from the one recorded at training")
    if mode == "frozen" and backbone.encoder_checksum != meta["backbone_checksum"]:
        raise IntegrityError("encoder checksum differs from the backbone recorded at training")
    if mode == "finetune" and backbone.encoder is None:
        backbone = replace(backbone, encoder=ContextEncoder(EncoderConfig(**meta["encoder"])))
    model = DownstreamModel(task, mode, backbone, meta.get("use_goal", True))
    model.load_tensors(ckpt.tensors)
    model.train(False)
    return model


def evaluate(checkpoint, dataset, split: str, backbone: Backbone | None = None, data: dict | None = None,
             task: str | None = None) -> MetricsReport:
    """Deterministic metrics of a downstream checkpoint on one split (no masking, eval mode)."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if ckpt.kind != "downstream":
        raise ConfigError(f"expected a downstream checkpoint, got {ckpt.kind!r}")
    if task is not None and ckpt.meta["task"] != task:
        raise ConfigError(f"checkpoint holds a {ckpt.meta['task']!r} model, not {task!r}")
    model = load_downstream(ckpt, backbone)
    if data is None:
        ds = dataset if isinstance(dataset, Dataset) else load_dataset(dataset)
        data = {split: TaskData.from_episodes(ds.split(split), model.codec)}
    m = evaluate_model(model, data[split])
    rep = MetricsReport(model.task, model.mode, learnable_params=ckpt.meta["report"]["learnable_params"],
                        total_params=ckpt.meta["report"]["total_params"])
    setattr(rep, f"{split}_mse", m["mse"])
    setattr(rep, f"{split}_psnr", m.get("psnr"))
    return rep


def mean_baseline_checkpoint(task: str, fit: TaskData, standardise: TaskData, backbone: Backbone) -> Checkpoint:
    """Frozen-mode dummy predicting the mean target of ``fit`` (stds taken from ``standardise``)."""
    if task == "pr":
        raise ConfigError("the mean baseline is defined for vector-valued tasks")
    model = DownstreamModel(task, "frozen", backbone)
    model.set_stats(standardise)
    model.head.zero_output_layer()
    model.head.set_stats(out_mean=fit.target(task).double().mean(0).float())
    meta = {"task": task, "mode": "frozen", "use_goal": True, "aux_spec": _aux_spec(model),
            "backbone_checksum": backbone.encoder_checksum, "codec_checksum": backbone.codec_checksum,
            "encoder": asdict(backbone.encoder.config), "baseline": "mean",
            "report": {"learnable_params": 0, "total_params": model.total_count()}}
    return Checkpoint("downstream", model.tensors(), meta)


@torch.no_grad()
def zero_ctx_psnr(codec: PatchCodec, data: TaskData) -> float:
    """PSNR of decoding an all-zero latent against every next patch: the PR floor."""
    return mean_psnr(codec.decode(torch.zeros(len(data), codec.latent_dim)), data.next_patch)


# ---------------------------------------------------------------------------
# overfit sanity runs


@torch.enable_grad()
def overfit_trace(loss_fn, params, steps: int = 1000, lr: float = 1e-3, stop_ratio: float = 0.01) -> list:
    """Minimise ``loss_fn()`` with AdamW (no weight decay) on a fixed batch.

    Returns the loss before each step; stops once a loss falls below
    ``stop_ratio`` times the first one (that loss is the last entry).
    """
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    trace = []
    for step in range(steps + 1):
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise TrainingError("overfit loss is not finite", step)
        trace.append(loss.item())
        if trace[-1] < stop_ratio * trace[0] or step == steps:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    return trace


def overfit_pretext(data: TaskData, idx, seed: int = 0, steps: int = 1000, mask_ratio: float = 0.75) -> list:
    """Pretext overfit on windows ``idx`` with one fixed random mask."""
    torch.manual_seed(seed)
    enc = ContextEncoder()
    e, a, p, n = data.tensors.batch(idx)
    mask = random_mask(len(idx), mask_ratio, torch.Generator().manual_seed(seed))
    return overfit_trace(lambda: pretext_terms(enc, e, a, p, n, mask)[0], enc.parameters(), steps)


def overfit_e2e(task: str, data: TaskData, idx, codec: PatchCodec, seed: int = 0, steps: int = 1000) -> list:
    """End-to-end model overfit on windows ``idx``, standardised with ``data`` statistics."""
    torch.manual_seed(seed)
    model = DownstreamModel(task, "e2e", Backbone(codec, ""))
    model.set_stats(data)
    model.train(True)
    return overfit_trace(lambda: F.mse_loss(model.forward(data, idx), model.target(data, idx)),
                         model.head.parameters(), steps)


# ---------------------------------------------------------------------------
# ablations

ABLATION_ARMS = {
    "masking": (("75%", {"mask_ratio": 0.75}), ("90%", {"mask_ratio": 0.90})),
    "ordering": (("sequential", {"ordering": "sequential"}), ("interleaved", {"ordering": "interleaved"})),
}
ABLATION_FIELDS = ("fkd_train", "fkd_test", "fkd_baseline", "pr_test", "pr_zero")


@dataclass
class AblationReport:
    which: str
    runs: list  # dicts: arm, seed, *ABLATION_FIELDS

    def arms(self) -> list:
        return [a for a, _ in ABLATION_ARMS[self.which]]

    def summary(self) -> list:
        out = []
        for arm in self.arms():
            rs = [r for r in self.runs if r["arm"] == arm]
            row = {"arm": arm, "seeds": len(rs)}
            for f in ABLATION_FIELDS:
                vals = np.array([r[f] for r in rs], dtype=np.float64)
                row[f] = float(vals.mean()) if len(vals) else float("nan")
                row[f + "_std"] = float(vals.std()) if len(vals) else float("nan")
            out.append(row)
        return out

    def text(self) -> str:
        head = f"{'arm':<12} {'FKD train':>16} {'FKD test':>16} {'PR test (dB)':>16}"
        lines = [f"ablation: {self.which}", head, "-" * len(head)]
        for r in self.summary():
            cells = [f"{r[f]:.4f}±{r[f + '_std']:.4f}" for f in ("fkd_train", "fkd_test")]
            cells.append(f"{r['pr_test']:.3f}±{r['pr_test_std']:.3f}")
            lines.append(f"{r['arm']:<12} " + " ".join(f"{c:>16}" for c in cells))
        return "\n".join(lines) + "\n"

    def write(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["arm", "fkd_train", "fkd_test", "pr_test", "seeds"] + \
               [f + "_std" for f in ("fkd_train", "fkd_test", "pr_test")] + ["fkd_baseline", "pr_zero"]
        with open(out / f"ablation_{self.which}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.summary():
                w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(r[c]) for c in cols])
        with open(out / f"ablation_{self.which}_runs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "seed", *ABLATION_FIELDS])
            for r in self.runs:
                w.writerow([r["arm"], r["seed"], *(repr(float(r[f])) for f in ABLATION_FIELDS)])
        (out / f"ablation_{self.which}.txt").write_text(self.text(), encoding="utf-8")


def run_ablation(which: str, data: dict, backbone: Backbone, pretrain_config: PretrainConfig,
                 downstream: ExperimentConfig, seeds=(0, 1, 2), out=None, log=None,
                 keep_encoders: bool = False) -> AblationReport:
    """Pretrain one encoder per (arm, seed) on identical data, then score frozen FKD and PR on each."""
    if which not in ABLATION_ARMS:
        raise ConfigError(f"ablation must be one of {tuple(ABLATION_ARMS)}, got {which!r}")
    train_t, test_t = data["train"].tensors, data["test"].tensors
    pr_zero = zero_ctx_psnr(backbone.codec, data["test"])
    runs = []
    for arm, change in ABLATION_ARMS[which]:
        for seed in seeds:
            pcfg = replace(pretrain_config, seed=seed, **change)
            ckpt = pretrain(train_t, pcfg, backbone.codec_checksum, log=log)
            enc, _ = load_encoder(ckpt, backbone.codec_checksum)
            if out is not None and keep_encoders:
                ckpt.save(Path(out) / f"encoder_{which}_{arm.rstrip('%')}_seed{seed}.vckpt")
            bb = Backbone(backbone.codec, backbone.codec_checksum, enc, ckpt.checksum)
            dcfg = replace(downstream, task="fkd", mode="frozen", seed=seed, mask_ratio=pcfg.mask_ratio,
                           ordering=pcfg.ordering)
            _, fkd = train_downstream(dcfg, data, bb)
            std = standardisation(data["train"].target("fkd"))[1]
            _, prr = train_downstream(replace(dcfg, task="pr"), data, bb)
            runs.append({"arm": arm, "seed": seed, "fkd_train": fkd.train_mse, "fkd_test": fkd.test_mse,
                         "fkd_baseline": target_variance(data["test"], "fkd", std),
                         "pr_test": prr.test_psnr, "pr_zero": pr_zero})
            if log:
                log(f"ablation {which} {arm} seed {seed}: " + ", ".join(f"{k} {runs[-1][k]:.4f}" for k in ABLATION_FIELDS))
    report = AblationReport(which, runs)
    if out is not None:
        report.write(out)
    return report


def run_ablation_masking(data, backbone, pretrain_config, downstream, seeds=(0, 1, 2), out=None, log=None):
    return run_ablation("masking", data, backbone, pretrain_config, downstream, seeds, out, log)


def run_ablation_ordering(data, backbone, pretrain_config, downstream, seeds=(0, 1, 2), out=None, log=None):
    return run_ablation("ordering", data, backbone, pretrain_config, downstream, seeds, out, log)


# ---------------------------------------------------------------------------
# closed-loop rollouts


@dataclass
class RolloutResult:
    success: bool
    elapsed: float
    cause: str | None
    trajectory: list  # world poses, one per executed frame
    actions: list = field(default_factory=list)
    seed: int | None = None
    start: list | None = None
    goal: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class BCPolicy:
    """Wraps a BC model as ``policy(patches, actions, rel_poses, goal_rel) -> (v, w)``."""

    def __init__(self, model: DownstreamModel):
        if model.task != "bc":
            raise ConfigError(f"rollouts need a bc model, got {model.task!r}")
        self.model = model
        model.train(False)

    @torch.no_grad()
    def __call__(self, patches, actions, rel_poses, goal_rel):
        m = self.model
        goal = torch.as_tensor(np.asarray(goal_rel, dtype=np.float32))[None]
        if m.mode == "e2e":
            y = m.head.predict(torch.as_tensor(np.asarray(patches[-1], dtype=np.float32))[None], {"goal": goal})
        else:
            emb = m.codec.encode(torch.as_tensor(np.asarray(patches, dtype=np.float32)))
            act = torch.as_tensor(np.asarray(actions, dtype=np.float32))
            pose = torch.as_tensor(np.asarray(rel_poses, dtype=np.float32))
            ctx = m.encoder.context(emb[None], act[None], pose[None], hide_current_action=True)
            y = m.head.predict(ctx, goal if m.head.aux_dim else None)
        return float(y[0, 0]), float(y[0, 1])


def zero_policy(patches, actions, rel_poses, goal_rel):
    return 0.0, 0.0


def rollout_bc(policy, hmap: HeightMap, start, goal, timeout: float = ROLLOUT_TIMEOUT, dt: float = 0.1,
               vehicle: VehicleConfig | None = None, radius: float = SUCCESS_RADIUS, goal_clip: float | None = 1.5,
               seed: int | None = None) -> RolloutResult:
    """Drive ``policy`` closed loop from ``start`` = (x, y, yaw) towards ``goal`` = (x, y).

    At each step the policy sees only the last 20 frames (left-padded with
    the first frame), with the not-yet-chosen current action set to zero.
    The relative goal is clipped to ``goal_clip`` metres, the reach of the
    hindsight goals seen in training.
    """
    vehicle = vehicle or VehicleConfig()
    pose = settle(hmap, float(start[0]), float(start[1]), float(start[2]) if len(start) > 2 else 0.0,
                  vehicle).rounded32()
    gz = settle(hmap, float(goal[0]), float(goal[1]), 0.0, vehicle).z
    goal_world = np.array([goal[0], goal[1], gz, 0.0, 0.0, 0.0])
    patches, actions, poses = [], [], []
    traj, acts = [pose.as_array().tolist()], []
    max_steps = int(round(timeout / dt))
    cause = "timeout"
    success = False
    steps = 0
    while steps < max_steps:
        if math.hypot(pose.x - goal[0], pose.y - goal[1]) <= radius:
            success, cause = True, None
            break
        try:
            patches.append(extract_patch(hmap, pose, vehicle).astype(np.float32))
        except OutOfBoundsError:
            cause = "out_of_bounds"
            break
        poses.append(pose.as_array())
        actions.append(np.zeros(2, dtype=np.float32))
        pad = WINDOW - len(patches)
        sel = slice(max(0, len(patches) - WINDOW), len(patches))
        w_p = [patches[0]] * max(0, pad) + patches[sel]
        w_a = [actions[0]] * max(0, pad) + actions[sel]
        w_x = [poses[0]] * max(0, pad) + poses[sel]
        ref = poses[-1]
        goal_rel = relative_poses(goal_world, ref)[:3]
        d = math.hypot(goal_rel[0], goal_rel[1])
        if goal_clip is not None and d > goal_clip:
            goal_rel[:2] *= goal_clip / d
        v, w = policy(np.stack(w_p), np.stack(w_a), relative_poses(np.stack(w_x), ref), goal_rel)
        if not (math.isfinite(v) and math.isfinite(w)):
            raise ValueError("policy produced a non-finite action")
        a32 = np.array(Action(v, w).clipped(vehicle).as_array(), dtype=np.float32)
        act = Action(float(a32[0]), float(a32[1]))
        actions[-1] = a32
        try:
            pose, status = step_vehicle(hmap, pose, act, dt, vehicle)
            pose = pose.rounded32()
        except OutOfBoundsError:
            cause = "out_of_bounds"
            break
        steps += 1
        traj.append(pose.as_array().tolist())
        acts.append([act.linear, act.angular])
        if status != OK:
            cause = status
            break
    else:
        if math.hypot(pose.x - goal[0], pose.y - goal[1]) <= radius:
            success, cause = True, None
    return RolloutResult(success, round(steps * dt, 10), cause, traj, acts, seed,
                         [float(s) for s in start], [float(g) for g in goal])


def rollout_setup(seed: int, hmap: HeightMap, distance: float, apron: float = 0.8, jitter: float = 0.3,
                  vehicle: VehicleConfig | None = None):
    """Seeded start/goal pair: start on the flat apron near the -x edge, goal ``distance`` ahead along +x."""
    vehicle = vehicle or VehicleConfig()
    rng = np.random.default_rng([seed, 0xB0C])
    x0, x1, y0, y1 = hmap.extent
    margin = 0.5 * math.sqrt(2.0) * vehicle.patch_side + hmap.resolution
    sx = x0 + max(margin, 0.8 * apron)
    sy = 0.5 * (y0 + y1) + rng.uniform(-jitter, jitter)
    gx = min(sx + distance, x1 - margin)
    return (sx, sy, 0.0), (gx, sy)


def run_rollouts(policy, seeds, terrain: TerrainConfig | None = None, flat: bool = False, distance: float = 2.0,
                 timeout: float = ROLLOUT_TIMEOUT, dt: float = 0.1, vehicle: VehicleConfig | None = None,
                 out=None, goal_clip: float | None = 1.5) -> list:
    terrain = terrain or TerrainConfig()
    if flat:
        terrain = replace(terrain, roughness=0.0)
    results = []
    for seed in seeds:
        hmap = generate_terrain(seed, terrain)
        start, goal = rollout_setup(seed, hmap, distance, terrain.apron, vehicle=vehicle)
        res = rollout_bc(policy, hmap, start, goal, timeout, dt, vehicle, goal_clip=goal_clip, seed=seed)
        results.append(res)
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / f"rollout_{seed}.json").write_text(json.dumps(res.to_dict(), sort_keys=True) + "\n",
                                                             encoding="utf-8")
    return results


def rollout_summary(results) -> dict:
    times = np.array([r.elapsed for r in results if r.success], dtype=np.float64)
    causes = {c: sum(1 for r in results if r.cause == c) for c in FAILURE_CAUSES}
    return {"runs": len(results), "successes": int(sum(r.success for r in results)),
            "success_rate": float(np.mean([r.success for r in results])) if results else float("nan"),
            "mean_time": float(times.mean()) if len(times) else float("nan"),
            "std_time": float(times.std()) if len(times) else float("nan"),
            **{f"fail_{c}": n for c, n in causes.items()}}


def write_rollout_report(out, results_by_method: dict) -> list:
    """Rollout summary as CSV and text: success rate, mean ± std time, failure causes per method."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"method": k, **rollout_summary(v)} for k, v in results_by_method.items()]
    cols = ["method", "runs", "successes", "success_rate", "mean_time", "std_time"] + [f"fail_{c}" for c in FAILURE_CAUSES]
    with open(out / "rollout_report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    lines = [f"{'method':<20} {'success':>9} {'time (s)':>16}  failures"]
    for r in rows:
        fails = ", ".join(f"{c} {r['fail_' + c]}" for c in FAILURE_CAUSES if r["fail_" + c])
        lines.append(f"{r['method']:<20} {r['successes']:>4}/{r['runs']:<4} "
                     f"{r['mean_time']:>8.2f}±{r['std_time']:<6.2f}  {fails or '-'}")
    (out / "rollout_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# consolidated table


def report_table1(checkpoints, out=None) -> list:
    """One row per mode: parameter counts and train/test/gap per task, PR test PSNR.

    ``checkpoints`` is a directory (searched for ``<task>_<mode>.vckpt``) or a
    mapping ``(task, mode) -> path``. Missing entries are reported as absent.
    """
    if not isinstance(checkpoints, dict):
        root = Path(checkpoints)
        checkpoints = {(t, m): root / f"{t}_{m}.vckpt" for t in TASKS for m in MODES}
    rows = []
    for mode in MODES:
        row = {"mode": mode}
        for task in TASKS:
            path = checkpoints.get((task, mode))
            rep = None
            if path is not None and Path(path).exists():
                rep = read_header(path)["meta"]["report"]
            if task == "pr":
                row["pr_test"] = rep["test_psnr"] if rep else None
            else:
                row[f"{task}_train"] = rep["train_mse"] if rep else None
                row[f"{task}_test"] = rep["test_mse"] if rep else None
                row[f"{task}_gap"] = rep["test_mse"] - rep["train_mse"] if rep else None
            if task == "fkd":
                row["learnable"] = rep["learnable_params"] if rep else None
                row["total"] = rep["total_params"] if rep else None
        rows.append(row)
    if out is not None:
        _write_table1(Path(out), rows)
    return rows


TABLE1_COLUMNS = ["mode", "learnable", "total", "fkd_train", "fkd_test", "fkd_gap", "ikd_train", "ikd_test", "ikd_gap",
                  "bc_train", "bc_test", "bc_gap", "pr_test"]


def _fmt(v, digits=4):
    if v is None:
        return "absent"
    if isinstance(v, int):
        return f"{v / 1e6:.3f}M"
    return f"{v:.{digits}f}"


def _write_table1(out: Path, rows) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table1.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE1_COLUMNS)
        for r in rows:
            w.writerow(["absent" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in TABLE1_COLUMNS])
    widths = [10] + [11] * (len(TABLE1_COLUMNS) - 1)
    lines = [" ".join(f"{c:>{w}}" for c, w in zip(TABLE1_COLUMNS, widths))]
    for r in rows:
        lines.append(" ".join(f"{(r[c] if c == 'mode' else _fmt(r[c], 3 if c == 'pr_test' else 4)):>{w}}"
                              for c, w in zip(TABLE1_COLUMNS, widths)))
    (out / "table1.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
