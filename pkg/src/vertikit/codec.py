"""Sliced-Wasserstein autoencoder for 40x40 terrain patches.

The encoder output doubles as the patch token of the context encoder, so
its latent width is fixed at the transformer width (128).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint
from .errors import ShapeError, SizeError, TrainingError
from .terrain import PATCH_SIZE

LATENT_DIM = 128
ENCODER_CHANNELS = (32, 64, 144, 288)
DECODER_CHANNELS = (288, 224, 128, 64, 32)
PSNR_RANGE = 2.0
PSNR_CAP = 100.0


@dataclass
class CodecConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    sw_weight: float = 1.0
    num_projections: int = 50
    prior: str = "normal"
    max_patches: int = 0  # 0 = use every training frame
    seed: int = 0


def _down(cin, cout):
    return [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU()]


def _up(cin, cout, output_padding):
    return [nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=output_padding), nn.SiLU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU()]


class PatchCodec(nn.Module):
    """Conv encoder 40->20->10->5->3 to a 128-d latent; mirrored transposed-conv decoder."""

    def __init__(self, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.latent_dim = latent_dim
        layers, cin = [], 1
        for c in ENCODER_CHANNELS:
            layers += _down(cin, c)
            cin = c
        self.encoder = nn.Sequential(*layers, nn.Flatten(), nn.Linear(cin * 9, latent_dim))

        d = DECODER_CHANNELS
        self.expand = nn.Linear(latent_dim, d[0] * 9)
        # spatial 3 -> 5 -> 10 -> 20 -> 40
        ups = []
        for i, (a, b) in enumerate(zip(d[:-1], d[1:])):
            ups += _up(a, b, output_padding=0 if i == 0 else 1)
        self.decoder = nn.Sequential(*ups, nn.Conv2d(d[-1], 1, 3, padding=1), nn.Tanh())

    def encode(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.dim() == 2:
            patches = patches.unsqueeze(0)
        if patches.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ShapeError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {tuple(patches.shape)}")
        return self.encoder(patches.reshape(-1, 1, PATCH_SIZE, PATCH_SIZE))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent must have width {self.latent_dim}, got {z.shape[-1]}")
        h = F.silu(self.expand(z)).reshape(-1, DECODER_CHANNELS[0], 3, 3)
        return self.decoder(h).reshape(-1, PATCH_SIZE, PATCH_SIZE)

    def forward(self, patches):
        z = self.encode(patches)
        return self.decode(z), z

    def encoder_param_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters())

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def random_projections(dim: int, num_projections: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """``dim x num_projections`` matrix of unit directions, seeded."""
    if num_projections < 1:
        raise SizeError("num_projections must be >= 1")
    g = torch.Generator().manual_seed(int(seed))
    p = torch.randn(dim, num_projections, generator=g, dtype=torch.float64)
    return (p / p.norm(dim=0, keepdim=True)).to(dtype)


def sliced_wasserstein_distance(latents, prior, num_projections: int = 50, seed: int = 0,
                                projections: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over projections of the squared 1D Wasserstein-2 distance.

    Both point sets are projected on each direction, sorted, and matched by
    order statistic.
    """
    latents = torch.as_tensor(latents)
    prior = torch.as_tensor(prior, dtype=latents.dtype)
    if latents.dim() != 2 or prior.dim() != 2:
        raise ShapeError("sliced_wasserstein_distance expects 2D batches")
    if latents.shape[0] != prior.shape[0] or latents.shape[0] < 1:
        raise SizeError(f"batch sizes must match and be >= 1, got {latents.shape[0]} and {prior.shape[0]}")
    if latents.shape[1] != prior.shape[1]:
        raise ShapeError("batches must share the latent width")
    if projections is None:
        projections = random_projections(latents.shape[1], num_projections, seed, latents.dtype)
    projections = projections.to(latents.dtype)
    a = torch.sort(latents @ projections, dim=0).values
    b = torch.sort(prior @ projections, dim=0).values
    return ((a - b) ** 2).mean()


def sample_prior(n: int, dim: int, generator: torch.Generator, kind: str = "normal", dtype=torch.float32):
    if kind == "normal":
        return torch.randn(n, dim, generator=generator, dtype=dtype)
    if kind == "uniform":
        return (torch.rand(n, dim, generator=generator, dtype=dtype) * 2.0 - 1.0) * math.sqrt(3.0)
    raise ValueError(f"unknown prior {kind!r}")


def codec_loss(codec: PatchCodec, patches, prior, projections, sw_weight: float = 1.0):
    """-> (total, reconstruction MSE, sliced-Wasserstein term)."""
    recon, z = codec(patches)
    rec = F.mse_loss(recon, patches.reshape(recon.shape))
    sw = sliced_wasserstein_distance(z, prior, projections=projections)
    return rec + sw_weight * sw, rec, sw


def psnr(a, b, data_range: float = PSNR_RANGE, cap: float = PSNR_CAP) -> float:
    """10 log10(range^2 / MSE), capped at ``cap`` dB for near-zero MSE."""
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < data_range ** 2 * 1e-10:
        return cap
    return 10.0 * math.log10(data_range ** 2 / mse)


def mean_psnr(pred, target) -> float:
    """Average of per-patch PSNR over a batch of patches."""
    pred = pred.detach().cpu().numpy() if isinstance(pred, torch.Tensor) else np.asarray(pred)
    target = target.detach().cpu().numpy() if isinstance(target, torch.Tensor) else np.asarray(target)
    return float(np.mean([psnr(p, t) for p, t in zip(pred, target)]))


@torch.enable_grad()
def train_codec(patches: np.ndarray, config: CodecConfig, log=None) -> Checkpoint:
    """Fit the codec on a patch array and return its checkpoint.

    Minimises MSE reconstruction + ``sw_weight`` * SW(latents, prior batch).
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    patches = np.asarray(patches, dtype=np.float32)
    if config.max_patches and len(patches) > config.max_patches:
        patches = patches[np.sort(rng.choice(len(patches), config.max_patches, replace=False))]
    data = torch.from_numpy(patches)
    codec = PatchCodec()
    opt = torch.optim.AdamW(codec.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed + 1)
    losses = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        tot = rec_sum = sw_sum = 0.0
        nb = 0
        for i in range(0, len(order), config.batch_size):
            batch = data[order[i:i + config.batch_size]]
            prior = sample_prior(len(batch), LATENT_DIM, gen, config.prior)
            proj = random_projections(LATENT_DIM, config.num_projections, seed=config.seed * 100003 + step)
            total, rec, sw = codec_loss(codec, batch, prior, proj, config.sw_weight)
            if not torch.isfinite(total):
                raise TrainingError("codec loss is not finite", step)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            tot += total.item()
            rec_sum += rec.item()
            sw_sum += sw.item()
            nb += 1
        losses.append({"epoch": epoch, "total": tot / nb, "reconstruction": rec_sum / nb,
                       "sliced_wasserstein": sw_sum / nb})
        if log:
            log(f"codec epoch {epoch}: total {tot / nb:.5f} recon {rec_sum / nb:.5f} sw {sw_sum / nb:.5f}")
    meta = {
        "config": asdict(config),
        "losses": losses,
        "encoder_param_count": codec.encoder_param_count(),
        "train_patches": int(len(data)),
    }
    return codec_checkpoint(codec, meta)


def codec_checkpoint(codec: PatchCodec, meta: dict | None = None) -> Checkpoint:
    return Checkpoint("codec", {k: v.detach().numpy().copy() for k, v in codec.state_dict().items()}, meta or {})


def load_codec(path_or_ckpt, expect_checksum: str | None = None) -> tuple[PatchCodec, str]:
    """-> (frozen codec in eval mode, its checksum)."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else \
        load_checkpoint(path_or_ckpt, kind="codec", expect_checksum=expect_checksum)
    codec = PatchCodec()
    codec.load_state_dict(ckpt.state_dict())
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, ckpt.checksum


@torch.no_grad()
def encode_all(codec: PatchCodec, patches: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Embed every patch once; the frozen codec makes this cacheable."""
    out = []
    for i in range(0, len(patches), batch_size):
        out.append(codec.encode(torch.from_numpy(np.asarray(patches[i:i + batch_size], dtype=np.float32))))
    return torch.cat(out).numpy()
