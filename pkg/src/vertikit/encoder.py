"""Masked transformer context encoder over 20-step (patch, action, pose) windows.

A learned context token is prepended to 60 observation tokens; the
transformer output at position 0, passed through the next-patch head, is
the context vector ``ctx`` consumed by every downstream task. Pretraining
predicts the codec embedding of the next patch from ``ctx`` and
reconstructs the randomly masked observation tokens.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint
from .codec import LATENT_DIM, PatchCodec
from .dataset import WINDOW, WindowSet, relative_poses
from .errors import ConfigError, DataError, IntegrityError, ShapeError, TrainingError

D_MODEL = LATENT_DIM
N_TOKENS = 3 * WINDOW + 1  # 61
N_OBS = 3 * WINDOW
ORDERINGS = ("sequential", "interleaved")
PATCH, ACTION, POSE = 0, 1, 2
MODALITY_NAMES = {-1: "ctx", PATCH: "patch", ACTION: "action", POSE: "pose"}


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    ff_width: int = 512
    ordering: str = "sequential"

    def validate(self) -> None:
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if D_MODEL % self.heads:
            raise ConfigError("model width must be divisible by the head count")


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    mask_ratio: float = 0.75
    ordering: str = "sequential"
    lambda_next: float = 1.0
    lambda_mask: float = 1.0
    max_windows: int = 0  # 0 = all training windows
    seed: int = 0

    def validate(self) -> None:
        check_ratio(self.mask_ratio)
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask_ratio must lie in [0, 1], got {ratio}")


def mask_count(ratio: float) -> int:
    """round(ratio * 60), halves rounded up."""
    check_ratio(ratio)
    return int(math.floor(ratio * N_OBS + 0.5))


def token_layout(ordering: str) -> np.ndarray:
    """(60, 2) array of (modality, timestep) for observation positions 1..60."""
    if ordering == "sequential":
        return np.array([(m, t) for m in (PATCH, ACTION, POSE) for t in range(WINDOW)])
    if ordering == "interleaved":
        return np.array([(m, t) for t in range(WINDOW) for m in (PATCH, ACTION, POSE)])
    raise ConfigError(f"unknown ordering {ordering!r}")


class Block(nn.Module):
    """Pre-norm transformer block with full (non-causal) self-attention."""

    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, n, d))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class ContextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        config = config or EncoderConfig()
        config.validate()
        self.config = config
        self.action_tokenizer = nn.Linear(2, D_MODEL)
        self.pose_tokenizer = nn.Linear(6, D_MODEL)
        self.ctx_seed = nn.Parameter(torch.randn(D_MODEL) * 0.02)
        self.mask_vector = nn.Parameter(torch.randn(D_MODEL) * 0.02)
        self.positional = nn.Parameter(torch.randn(N_TOKENS, D_MODEL) * 0.02)
        self.modality = nn.Parameter(torch.randn(3, D_MODEL) * 0.02)
        self.blocks = nn.ModuleList(Block(D_MODEL, config.heads, config.ff_width) for _ in range(config.layers))
        self.next_patch_head = nn.Linear(D_MODEL, D_MODEL)
        layout = token_layout(config.ordering)
        self.register_buffer("layout_modality", torch.as_tensor(layout[:, 0]), persistent=False)
        self.register_buffer("layout_step", torch.as_tensor(layout[:, 1]), persistent=False)

    @property
    def ordering(self) -> str:
        return self.config.ordering

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def raw_tokens(self, patch_emb, actions, rel_poses):
        """Observation tokens (B, 60, 128) in layout order, before any embedding is added."""
        if patch_emb.shape[-2:] != (WINDOW, D_MODEL):
            raise ShapeError(f"patch embeddings must be (B, {WINDOW}, {D_MODEL}), got {tuple(patch_emb.shape)}")
        if actions.shape[-2:] != (WINDOW, 2) or rel_poses.shape[-2:] != (WINDOW, 6):
            raise ShapeError("actions must be (B, 20, 2) and poses (B, 20, 6)")
        by_modality = torch.stack([patch_emb, self.action_tokenizer(actions), self.pose_tokenizer(rel_poses)], dim=1)
        return by_modality[:, self.layout_modality, self.layout_step]

    def embed(self, raw, mask=None):
        """Replace masked tokens, add modality/positional embeddings, prepend ctx -> (B, 61, 128)."""
        x = raw
        if mask is not None:
            x = torch.where(mask.unsqueeze(-1), self.mask_vector.expand_as(raw), raw)
        x = x + self.modality[self.layout_modality] + self.positional[1:]
        ctx = (self.ctx_seed + self.positional[0]).expand(x.shape[0], 1, D_MODEL)
        return torch.cat([ctx, x], dim=1)

    def run(self, tokens):
        """Transformer over an embedded sequence -> (ctx (B,128), per-position outputs (B,61,128))."""
        if tokens.shape[-1] != D_MODEL or tokens.shape[-2] != N_TOKENS:
            raise ShapeError(f"token sequence must be (B, {N_TOKENS}, {D_MODEL}), got {tuple(tokens.shape)}")
        h = tokens
        for blk in self.blocks:
            h = blk(h)
        return self.next_patch_head(h[:, 0]), h

    def forward(self, patch_emb, actions, rel_poses, mask=None):
        raw = self.raw_tokens(patch_emb, actions, rel_poses)
        ctx, out = self.run(self.embed(raw, mask))
        return ctx, out, raw

    def current_action_position(self) -> int:
        """Observation index (0-based, excluding ctx) of the action token at the latest step."""
        hit = ((self.layout_modality == ACTION) & (self.layout_step == WINDOW - 1)).nonzero()
        return int(hit[0, 0])

    def context(self, patch_emb, actions, rel_poses, hide_current_action: bool = False):
        """Evaluation-path ctx: no random masking.

        ``hide_current_action`` replaces the latest action token with the
        mask vector, for tasks that must predict that action.
        """
        mask = None
        if hide_current_action:
            mask = torch.zeros(patch_emb.shape[0], N_OBS, dtype=torch.bool, device=patch_emb.device)
            mask[:, self.current_action_position()] = True
        return self(patch_emb, actions, rel_poses, mask)[0]


def random_mask(batch: int, ratio: float, generator: torch.Generator) -> torch.Tensor:
    """(batch, 60) bool, each row with exactly round(ratio*60) True entries."""
    k = mask_count(ratio)
    keys = torch.rand(batch, N_OBS, generator=generator)
    idx = keys.argsort(dim=1)[:, :k]
    mask = torch.zeros(batch, N_OBS, dtype=torch.bool)
    mask.scatter_(1, idx, True)
    return mask


# ---------------------------------------------------------------------------
# single-window API


@dataclass
class ObservationWindow:
    """20 frames of (patch, action, world pose), optionally with the next patch."""

    patches: np.ndarray  # (20, 40, 40)
    actions: np.ndarray  # (20, 2)
    poses: np.ndarray  # (20, 6) world frame
    next_patch: np.ndarray | None = None

    def __post_init__(self):
        if len(self.patches) != WINDOW or len(self.actions) != WINDOW or len(self.poses) != WINDOW:
            raise ShapeError(f"window must hold exactly {WINDOW} frames, got "
                             f"{len(self.patches)}/{len(self.actions)}/{len(self.poses)}")

    @classmethod
    def from_episode(cls, episode, t: int) -> "ObservationWindow":
        if t < WINDOW - 1 or t >= len(episode.poses):
            raise DataError(f"window ending at {t} does not fit episode of {len(episode.poses)} frames")
        s = slice(t - WINDOW + 1, t + 1)
        nxt = episode.patches[t + 1] if t + 1 < len(episode.poses) else None
        return cls(episode.patches[s], episode.actions[s], episode.poses[s], nxt)

    def relative_poses(self) -> np.ndarray:
        return relative_poses(self.poses, self.poses[-1])


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (61, 128), embeddings added
    raw: torch.Tensor  # (60, 128), observation tokens before embeddings
    modalities: list  # 61 tags
    ordering: str
    mask: frozenset = frozenset()  # masked positions, 1-based (ctx is 0)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def tokenize_window(window: ObservationWindow, codec: PatchCodec, params: ContextEncoder,
                    ordering: str | None = None) -> TokenSequence:
    ordering = ordering or params.ordering
    if ordering != params.ordering:
        raise ConfigError(f"encoder was built for {params.ordering!r} ordering, not {ordering!r}")
    dtype = params.positional.dtype
    emb = codec.encode(torch.as_tensor(np.asarray(window.patches), dtype=next(codec.parameters()).dtype)).to(dtype)
    act = torch.as_tensor(np.asarray(window.actions, dtype=np.float64), dtype=dtype)
    pose = torch.as_tensor(window.relative_poses(), dtype=dtype)
    raw = params.raw_tokens(emb[None], act[None], pose[None])
    tags = ["ctx"] + [MODALITY_NAMES[int(m)] for m in params.layout_modality]
    return TokenSequence(params.embed(raw)[0], raw[0], tags, ordering)


def mask_tokens(seq: TokenSequence, ratio: float, seed: int, params: ContextEncoder):
    """Mask exactly round(ratio*60) observation positions chosen uniformly by ``seed``.

    Returns the re-embedded sequence and the set of masked positions (1..60).
    """
    k = mask_count(ratio)
    chosen = np.random.default_rng(seed).choice(N_OBS, size=k, replace=False)
    mask = torch.zeros(1, N_OBS, dtype=torch.bool)
    mask[0, torch.as_tensor(chosen, dtype=torch.long)] = True
    tokens = params.embed(seq.raw[None], mask)[0]
    positions = frozenset(int(i) + 1 for i in chosen)
    return TokenSequence(tokens, seq.raw, seq.modalities, seq.ordering, positions), positions


def encode_sequence(seq: TokenSequence, params: ContextEncoder):
    """-> (ctx (128,), per-position outputs (61, 128))."""
    ctx, out = params.run(seq.tokens[None])
    return ctx[0], out[0]


# ---------------------------------------------------------------------------
# pretext objective


def pretext_terms(encoder: ContextEncoder, patch_emb, actions, rel_poses, next_emb, mask,
                  lambda_next: float = 1.0, lambda_mask: float = 1.0, targets=None):
    """-> (total, next_patch_term, masked_term) for a batch.

    The masked term compares per-position outputs at masked positions with
    the pre-masking observation tokens (targets carry no gradient).
    ``targets`` substitutes fixed (B, 60, 128) target tokens.
    """
    ctx, out, raw = encoder(patch_emb, actions, rel_poses, mask)
    next_term = F.mse_loss(ctx, next_emb)
    if mask is not None and bool(mask.any()):
        pred = out[:, 1:][mask]
        target = (raw if targets is None else targets).detach()[mask]
        masked_term = ((pred - target) ** 2).mean()
    else:
        masked_term = next_term.new_zeros(())
    return lambda_next * next_term + lambda_mask * masked_term, next_term, masked_term


def pretext_loss(window: ObservationWindow, codec: PatchCodec, params: ContextEncoder, mask_seed: int,
                 mask_ratio: float = 0.75, lambda_next: float = 1.0, lambda_mask: float = 1.0):
    """Pretext loss for one window whose next patch is known."""
    if window.next_patch is None:
        raise DataError("pretext loss needs the frame t+1 target patch")
    dtype = params.positional.dtype
    cdtype = next(codec.parameters()).dtype
    emb = codec.encode(torch.as_tensor(np.asarray(window.patches), dtype=cdtype)).to(dtype)
    nxt = codec.encode(torch.as_tensor(np.asarray(window.next_patch), dtype=cdtype)).to(dtype)
    act = torch.as_tensor(np.asarray(window.actions, dtype=np.float64), dtype=dtype)
    pose = torch.as_tensor(window.relative_poses(), dtype=dtype)
    k = mask_count(mask_ratio)
    mask = torch.zeros(1, N_OBS, dtype=torch.bool)
    if k:
        chosen = np.random.default_rng(mask_seed).choice(N_OBS, size=k, replace=False)
        mask[0, torch.as_tensor(chosen, dtype=torch.long)] = True
    return pretext_terms(params, emb[None], act[None], pose[None], nxt, mask, lambda_next, lambda_mask)


# ---------------------------------------------------------------------------
# batched training


class WindowTensors:
    """Gathers batch tensors for a WindowSet from cached frame embeddings."""

    def __init__(self, windows: WindowSet, embeddings: np.ndarray, dtype=torch.float32):
        self.windows = windows
        self.emb = torch.as_tensor(embeddings, dtype=dtype)
        self.act = torch.as_tensor(windows.actions, dtype=dtype)
        self.frame_idx = torch.as_tensor(windows.frame_idx, dtype=torch.long)
        self.rel = torch.as_tensor(windows.rel_poses, dtype=dtype)

    def __len__(self):
        return len(self.windows)

    def batch(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        fi = self.frame_idx[idx]
        return self.emb[fi[:, :WINDOW]], self.act[fi[:, :WINDOW]], self.rel[idx], self.emb[fi[:, WINDOW]]


def _mean_terms(encoder, data: WindowTensors, ratio, seed, batch_size, lambda_next, lambda_mask):
    gen = torch.Generator().manual_seed(seed)
    sums = np.zeros(3)
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            idx = np.arange(i, min(i + batch_size, len(data)))
            e, a, p, n = data.batch(idx)
            mask = random_mask(len(idx), ratio, gen)
            terms = pretext_terms(encoder, e, a, p, n, mask, lambda_next, lambda_mask)
            sums += np.array([t.item() for t in terms]) * len(idx)
    return sums / max(1, len(data))


@torch.enable_grad()
def pretrain(train: WindowTensors, config: PretrainConfig, codec_checksum: str, test: WindowTensors | None = None,
             log_path=None, log=None, encoder: ContextEncoder | None = None) -> Checkpoint:
    """Optimise encoder parameters on the pretext objective; the codec stays frozen.

    Writes one ``pretext_log.csv`` row per epoch per split when ``log_path`` is given.
    """
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    enc = encoder or ContextEncoder(EncoderConfig(ordering=config.ordering))
    opt = torch.optim.AdamW(enc.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed + 17)
    pool = np.arange(len(train))
    if config.max_windows and len(pool) > config.max_windows:
        pool = np.sort(rng.choice(pool, config.max_windows, replace=False))
    rows = []
    step = 0
    for epoch in range(config.epochs):
        enc.train()
        order = rng.permutation(pool)
        sums, count = np.zeros(3), 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            e, a, p, n = train.batch(idx)
            mask = random_mask(len(idx), config.mask_ratio, gen)
            total, nt, mt = pretext_terms(enc, e, a, p, n, mask, config.lambda_next, config.lambda_mask)
            if not torch.isfinite(total):
                raise TrainingError("pretext loss is not finite", step)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            sums += np.array([total.item(), nt.item(), mt.item()]) * len(idx)
            count += len(idx)
        enc.eval()
        rows.append((epoch, "train", *(sums / count)))
        if test is not None and len(test):
            rows.append((epoch, "test", *_mean_terms(enc, test, config.mask_ratio, 12345, 256,
                                                      config.lambda_next, config.lambda_mask)))
        if log:
            log("pretrain epoch {}: ".format(epoch) + "; ".join(f"{r[1]} {r[2]:.5f}" for r in rows if r[0] == epoch))
    if log_path is not None:
        write_pretext_log(log_path, rows)
    meta = {
        "config": asdict(config),
        "encoder": asdict(enc.config),
        "codec_checksum": codec_checksum,
        "losses": [{"epoch": r[0], "split": r[1], "total": r[2], "next_patch_term": r[3], "masked_term": r[4]}
                   for r in rows],
        "trainable_param_count": enc.param_count(),
        "steps": step,
    }
    return encoder_checkpoint(enc, meta)


def write_pretext_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "total", "next_patch_term", "masked_term"])
        for epoch, split, total, nt, mt in rows:
            w.writerow([epoch, split, repr(float(total)), repr(float(nt)), repr(float(mt))])


def encoder_checkpoint(enc: ContextEncoder, meta: dict) -> Checkpoint:
    meta = dict(meta)
    meta.setdefault("encoder", asdict(enc.config))
    return Checkpoint("encoder", {k: v.detach().numpy().copy() for k, v in enc.state_dict().items()}, meta)


def load_encoder(path_or_ckpt, codec_checksum: str | None = None) -> tuple[ContextEncoder, Checkpoint]:
    """Load an encoder; if ``codec_checksum`` is given it must match the one recorded at pretraining."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt, kind="encoder")
    if codec_checksum is not None and ckpt.meta.get("codec_checksum") != codec_checksum:
        raise IntegrityError(f"encoder was pretrained against codec {str(ckpt.meta.get('codec_checksum'))[:12]}, "
                             f"but codec {codec_checksum[:12]} was supplied")
    enc = ContextEncoder(EncoderConfig(**ckpt.meta.get("encoder", {})))
    enc.load_state_dict(ckpt.state_dict())
    enc.eval()
    return enc, ckpt
