"""Downstream task heads on the context vector, and the end-to-end baseline.

Layer-width lists follow the ``[in, ..., n]`` convention: the first entry is
the input width (ctx, plus any concatenated auxiliary input) and the last
is the task output. Heads regress standardised targets; ``out_mean`` and
``out_std`` map predictions back to physical units.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torchvision

from .codec import LATENT_DIM, PatchCodec
from .errors import ConfigError, ShapeError
from .terrain import PATCH_SIZE

HEAD_WIDTHS = (LATENT_DIM, 64, 32, 16)
E2E_WIDTHS = (512, 256, 512, 64)
TASKS = ("fkd", "ikd", "bc", "pr")
MODES = ("frozen", "finetune", "e2e")

# auxiliary input width and output width of each ctx head
HEAD_SPEC = {"fkd": (0, 6), "ikd": (6, 2), "bc": (3, 2)}
# auxiliary inputs of the end-to-end models: name -> width
E2E_AUX = {"fkd": {"action": 2, "pose": 6}, "pr": {"action": 2, "pose": 6},
           "ikd": {"next_pose": 6}, "bc": {"goal": 3}}
E2E_OUT = {"fkd": 6, "ikd": 2, "bc": 2, "pr": PATCH_SIZE * PATCH_SIZE}


def check_task(task: str, mode: str | None = None) -> None:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if mode is not None and mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")


def mlp(widths) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class _Standardised(nn.Module):
    def _init_stats(self, aux_dim, out_dim):
        self.register_buffer("aux_mean", torch.zeros(aux_dim))
        self.register_buffer("aux_std", torch.ones(aux_dim))
        self.register_buffer("out_mean", torch.zeros(out_dim))
        self.register_buffer("out_std", torch.ones(out_dim))

    def set_stats(self, aux_mean=None, aux_std=None, out_mean=None, out_std=None):
        for name, val in (("aux_mean", aux_mean), ("aux_std", aux_std), ("out_mean", out_mean), ("out_std", out_std)):
            if val is not None:
                getattr(self, name).copy_(torch.as_tensor(val, dtype=getattr(self, name).dtype))

    def denormalise(self, y):
        return y * self.out_std + self.out_mean

    def normalise_target(self, y):
        return (y - self.out_mean) / self.out_std

    def learnable_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


class TaskHead(_Standardised):
    """MLP [128 + aux, 64, 32, 16, n] on the context vector."""

    def __init__(self, task: str, use_goal: bool = True):
        super().__init__()
        if task not in HEAD_SPEC:
            raise ConfigError(f"no trainable ctx head for task {task!r}")
        self.task = task
        self.aux_dim, self.out_dim = HEAD_SPEC[task]
        self.use_goal = bool(use_goal)
        if task == "bc" and not use_goal:
            self.aux_dim = 0  # goal-free policy: explores rather than seeks
        self.widths = [HEAD_WIDTHS[0] + self.aux_dim, *HEAD_WIDTHS[1:], self.out_dim]
        self.net = mlp(self.widths)
        self._init_stats(self.aux_dim, self.out_dim)

    @property
    def hidden_widths(self) -> list:
        return self.widths[1:-1]

    def zero_output_layer(self) -> None:
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, ctx, aux=None):
        """Standardised prediction from ``[ctx | standardised aux]``."""
        if ctx.shape[-1] != LATENT_DIM:
            raise ShapeError(f"ctx must have width {LATENT_DIM}, got {ctx.shape[-1]}")
        if self.aux_dim:
            if aux is None or aux.shape[-1] != self.aux_dim:
                got = None if aux is None else aux.shape[-1]
                raise ShapeError(f"{self.task} head needs an auxiliary input of width {self.aux_dim}, got {got}")
            ctx = torch.cat([ctx, (aux - self.aux_mean) / self.aux_std], dim=-1)
        elif aux is not None:
            raise ShapeError(f"{self.task} head takes no auxiliary input")
        return self.net(ctx)

    def predict(self, ctx, aux=None):
        return self.denormalise(self(ctx, aux))


def fkd(ctx, params: TaskHead):
    """Pose delta t -> t+1 (dx, dy, dz, droll, dpitch, dyaw) in the frame of pose t."""
    _expect(params, "fkd")
    return params.predict(ctx)


def ikd(ctx, desired_next_pose, params: TaskHead):
    """Action (v, w) that reaches ``desired_next_pose`` (a delta in the frame of pose t)."""
    _expect(params, "ikd")
    return params.predict(ctx, desired_next_pose)


def bc(ctx, goal, params: TaskHead):
    """Teleoperation action towards ``goal`` (relative position in the frame of pose t).

    A head built with ``use_goal=False`` takes ``goal=None``.
    """
    _expect(params, "bc")
    return params.predict(ctx, goal if params.aux_dim else None)


def pr(ctx, codec: PatchCodec):
    """Next patch decoded straight from ctx by the frozen codec decoder."""
    if ctx.shape[-1] != codec.latent_dim:
        raise ShapeError(f"ctx width {ctx.shape[-1]} does not match codec latent width {codec.latent_dim}")
    return codec.decode(ctx)


def _expect(head, task):
    if not isinstance(head, TaskHead) or head.task != task:
        raise ConfigError(f"expected a {task} head, got {getattr(head, 'task', type(head).__name__)}")


def patch_resnet18() -> nn.Module:
    """ResNet-18 trunk taking 1-channel elevation patches, emitting 512 features."""
    net = torchvision.models.resnet18(weights=None)
    net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
    net.fc = nn.Identity()
    return net


class E2EModel(_Standardised):
    """Residual patch encoder + explicit auxiliary inputs -> task MLP [512 + aux, 256, 512, 64, n]."""

    def __init__(self, task: str):
        super().__init__()
        check_task(task)
        self.task = task
        self.aux_spec = dict(E2E_AUX[task])
        self.aux_dim = sum(self.aux_spec.values())
        self.out_dim = E2E_OUT[task]
        self.encoder = patch_resnet18()
        self.widths = [E2E_WIDTHS[0] + self.aux_dim, *E2E_WIDTHS[1:], self.out_dim]
        self.head = mlp(self.widths)
        self._init_stats(self.aux_dim, self.out_dim if task != "pr" else 1)

    def zero_output_layer(self) -> None:
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def pack_aux(self, aux: dict):
        missing = [k for k in self.aux_spec if k not in (aux or {})]
        if missing:
            raise ConfigError(f"e2e {self.task} model needs auxiliary inputs {missing}")
        return torch.cat([torch.as_tensor(aux[k]) for k in self.aux_spec], dim=-1)

    def forward(self, patch, aux):
        """Standardised output; ``aux`` is a dict keyed like ``aux_spec`` or an already packed tensor."""
        if patch.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {tuple(patch.shape)}")
        if isinstance(aux, dict) or aux is None:
            aux = self.pack_aux(aux)
        feat = self.encoder(patch.reshape(-1, 1, PATCH_SIZE, PATCH_SIZE))
        y = self.head(torch.cat([feat, (aux - self.aux_mean) / self.aux_std], dim=-1))
        if self.task == "pr":
            return torch.tanh(y).reshape(-1, PATCH_SIZE, PATCH_SIZE)
        return y

    def predict(self, patch, aux):
        y = self(patch, aux)
        return y if self.task == "pr" else self.denormalise(y)


def e2e_forward(task: str, patch, aux: dict, params: E2EModel):
    if params.task != task:
        raise ConfigError(f"e2e model was built for {params.task!r}, not {task!r}")
    return params.predict(patch, aux)
