"""Toy pixel-space diffusion: linear noise schedule, DDPM training loss and a guided DDIM sampler.

Samples live in [-1, 1] during diffusion; ``sample`` hands guidance the
clean estimate mapped to [0, 1] and returns images in [0, 1].
"""
import logging
import math
import time
from abc import abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from layout_guidance.checkpoints import load_checkpoint, save_checkpoint
from layout_guidance.errors import (CheckpointMissingError, DatasetEmptyError, NonFiniteLossError,
                                    ShapeError, StepUnderflowError)

logger = logging.getLogger(__name__)

# guidance_fn(x0_image, step_index, t) -> gradient of the guidance score w.r.t. x0_image
GuidanceFn = Callable[[torch.Tensor, int, int], torch.Tensor]


class ScheduleConfig(BaseModel):
    num_timesteps: int = Field(default=1000, ge=1, description="Diffusion steps T")
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=2e-2, gt=0, lt=1)


class NoiseSchedule:
    """Linear beta schedule in float64; alpha_bars[0] is 1 and alpha_bars[t] covers steps 1..t"""

    def __init__(self, betas: torch.Tensor):
        betas = betas.to(torch.float64)
        if betas.dim() != 1 or not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must be a vector with entries in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(self.alphas, dim=0)])

    @classmethod
    def linear(cls, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls(torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64))

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        return cls.linear(config.num_timesteps, config.beta_start, config.beta_end)

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[t]

    def stride(self, steps: int) -> int:
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}], got {steps}")
        return self.T // steps

    def timesteps(self, steps: int) -> List[int]:
        """Descending sampler timesteps; the last step lands on t = 0"""
        delta = self.stride(steps)
        return [delta * k for k in range(steps, 0, -1)]

    def posterior_variance(self, t: int, t_prev: int) -> float:
        """Variance of q(x_{t_prev} | x_t, x_0) over a stride"""
        ab_t, ab_prev = self.alpha_bars[t], self.alpha_bars[t_prev]
        return float((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))


@dataclass(frozen=True)
class DiffusionState:
    sample: torch.Tensor
    t: int
    rng_seed: int = 0

    def __post_init__(self):
        if not torch.isfinite(self.sample).all():
            raise ValueError("DiffusionState sample has non-finite entries")
        if self.t < 0:
            raise ValueError(f"t must be >= 0, got {self.t}")


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise; ``t`` is an int or a per-batch LongTensor"""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} differs from x0 {tuple(x0.shape)}",
                         module="diffusion")
    t_tensor = torch.as_tensor(t, dtype=torch.long)
    if (t_tensor < 0).any() or (t_tensor > schedule.T).any():
        raise ValueError(f"t must lie in [0, {schedule.T}]")
    ab = schedule.alpha_bars[t_tensor].to(x0.dtype)
    if ab.dim() == 1:
        ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


class SinusoidalTimeEmbedding(nn.Module):

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.to(torch.float32)[:, None] * freqs[None, :]
        return torch.cat([args.sin(), args.cos()], dim=-1)


class ResBlock(nn.Module):

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetConfig(BaseModel):
    channels: int = Field(default=3, description="Image channels")
    base_channels: int = Field(default=32, description="Width at the top resolution")
    time_dim: int = Field(default=128)
    cond_dim: Optional[int] = Field(default=None, description="Width of an optional conditioning vector")


class TinyUNet(nn.Module):
    """Three-resolution noise predictor eps(x_t, t[, cond]) with skip connections"""

    def __init__(self, config: Optional[UNetConfig] = None):
        super().__init__()
        self.config = config or UNetConfig()
        c, base, tdim = self.config.channels, self.config.base_channels, self.config.time_dim
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(base), nn.Linear(base, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.cond_proj = nn.Linear(self.config.cond_dim, tdim) if self.config.cond_dim else None
        self.inc = nn.Conv2d(c, base, 3, padding=1)
        self.down1 = ResBlock(base, base, tdim)
        self.down2 = ResBlock(base, 2 * base, tdim)
        self.mid = ResBlock(2 * base, 4 * base, tdim)
        self.up2 = ResBlock(4 * base + 2 * base, 2 * base, tdim)
        self.up1 = ResBlock(2 * base + base, base, tdim)
        self.out_norm = nn.GroupNorm(8, base)
        self.out = nn.Conv2d(base, c, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"TinyUNet needs sides divisible by 4, got {tuple(x.shape[-2:])}", module="diffusion")
        temb = self.time_embed(t)
        if self.cond_proj is not None and cond is not None:
            temb = temb + self.cond_proj(cond.to(temb.dtype))
        h1 = self.down1(self.inc(x), temb)
        h2 = self.down2(F.avg_pool2d(h1, 2), temb)
        h = self.mid(F.avg_pool2d(h2, 2), temb)
        h = self.up2(torch.cat([F.interpolate(h, scale_factor=2, mode='nearest'), h2], dim=1), temb)
        h = self.up1(torch.cat([F.interpolate(h, scale_factor=2, mode='nearest'), h1], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


def build_unet(config: Optional[UNetConfig] = None, seed: int = 0) -> TinyUNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return TinyUNet(config)


def _model_dtype(model: nn.Module):
    params = list(model.parameters())
    return params[0].dtype if params else torch.float64


def predict_eps(model: nn.Module, x: torch.Tensor, t, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """eps for a batch (B, C, H, W) or a single C x H x W sample, returned in x's dtype"""
    single = x.dim() == 3
    batch = x.unsqueeze(0) if single else x
    t_tensor = torch.full((batch.size(0),), int(t), dtype=torch.long) if not torch.is_tensor(t) else t
    if cond is not None and cond.dim() == 1:
        cond = cond.unsqueeze(0).expand(batch.size(0), -1)
    eps = model(batch.to(_model_dtype(model)), t_tensor, cond) if cond is not None \
        else model(batch.to(_model_dtype(model)), t_tensor)
    if eps.shape != batch.shape:
        raise ShapeError(f"Noise model returned {tuple(eps.shape)} for input {tuple(batch.shape)}",
                         module="diffusion")
    eps = eps.to(x.dtype)
    return eps[0] if single else eps


def ddpm_loss(model: nn.Module, schedule: NoiseSchedule, x0_batch: torch.Tensor,
              generator: torch.Generator, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Noise-prediction MSE at uniformly drawn timesteps in [1, T]"""
    if not torch.isfinite(x0_batch).all():
        raise ValueError("ddpm_loss batch has non-finite entries")
    b = x0_batch.size(0)
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    noise = torch.randn(x0_batch.shape, generator=generator, dtype=x0_batch.dtype)
    x_t = q_sample(schedule, x0_batch, t, noise)
    pred = model(x_t, t, cond) if cond is not None else model(x_t, t)
    return F.mse_loss(pred, noise.to(pred.dtype))


def ddim_step(model: nn.Module, schedule: NoiseSchedule, state: DiffusionState,
              guidance_grad: Optional[torch.Tensor] = None, alpha_scale: float = 1.0,
              steps: int = 100, cond: Optional[torch.Tensor] = None) -> DiffusionState:
    """One deterministic (eta = 0) DDIM update over the sampler stride.

    A guidance gradient shifts the update by alpha_scale * posterior variance * grad.
    """
    t = state.t
    if t <= 0:
        raise StepUnderflowError(f"Cannot step below t = 0 (state at t = {t})")
    if t > schedule.T:
        raise ValueError(f"t = {t} is past the end of a {schedule.T}-step schedule")
    if guidance_grad is not None and guidance_grad.shape != state.sample.shape:
        raise ShapeError(f"guidance_grad shape {tuple(guidance_grad.shape)} differs from sample "
                         f"{tuple(state.sample.shape)}", module="diffusion")
    t_prev = max(t - schedule.stride(steps), 0)
    x = state.sample
    with torch.no_grad():
        eps = predict_eps(model, x, t, cond)
    ab_t = schedule.alpha_bars[t].to(x.dtype)
    ab_prev = schedule.alpha_bars[t_prev].to(x.dtype)
    x0_hat = (x - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
    x_prev = ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps
    if guidance_grad is not None:
        x_prev = x_prev + alpha_scale * schedule.posterior_variance(t, t_prev) * guidance_grad.to(x.dtype)
    return DiffusionState(x_prev, t_prev, state.rng_seed)


def predict_x0(model: nn.Module, schedule: NoiseSchedule, state: DiffusionState,
               cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    if state.t > schedule.T:
        raise ValueError(f"t = {state.t} is past the end of a {schedule.T}-step schedule")
    with torch.no_grad():
        eps = predict_eps(model, state.sample, state.t, cond)
    ab_t = schedule.alpha_bars[state.t].to(state.sample.dtype)
    return (state.sample - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()


def image_grad_to_latent(schedule: NoiseSchedule, t: int, image_grad: torch.Tensor) -> torch.Tensor:
    """Chain a gradient on the [0, 1] image estimate back to x_t with eps held fixed.

    image = (x0_hat + 1) / 2 and x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t), so the
    Jacobian is the scalar 0.5 / sqrt(ab_t).
    """
    return image_grad * (0.5 / schedule.alpha_bars[t].sqrt()).to(image_grad.dtype)


def initial_noise(shape: Sequence[int], seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=generator, dtype=torch.float64)


def sample(model: nn.Module, schedule: NoiseSchedule, shape: Sequence[int],
           guidance_fn: Optional[GuidanceFn] = None, seed: int = 0, steps: int = 100,
           alpha_scale: float = 1.0, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Run the guided DDIM chain from seeded noise; returns a C x H x W image in [0, 1]"""
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"sample shape must be (C, H, W), got {tuple(shape)}", module="diffusion")
    model.eval()
    state = DiffusionState(initial_noise(shape, seed), schedule.timesteps(steps)[0], seed)
    for step_index in range(steps):
        grad = None
        if guidance_fn is not None:
            x0_hat = predict_x0(model, schedule, state, cond)
            image = ((x0_hat.clamp(-1, 1) + 1) / 2).detach()
            image_grad = guidance_fn(image, step_index, state.t)
            grad = image_grad_to_latent(schedule, state.t, image_grad.to(state.sample.dtype))
        state = ddim_step(model, schedule, state, grad, alpha_scale, steps, cond)
    return ((state.sample + 1) / 2).clamp(0, 1)


# first-stage autoencoders

class AutoencoderProfile(BaseModel):
    """Descriptor of a first-stage autoencoder T(.)"""

    model_config = ConfigDict(frozen=True)

    name: str = Field(default="identity")
    kind: Literal["identity", "tiny", "ldm-kl-8"] = Field(default="identity")
    latent_channels: int = Field(default=4)
    weights_path: Optional[str] = Field(default=None, description="Trained weights; required for ldm-kl-8")
    reconstruction_tolerance: float = Field(default=0.0, ge=0, description="Bound on mean squared reconstruction error")
    z_shape: Optional[Tuple[int, int, int]] = None
    channels: Optional[int] = None
    channel_mult: Optional[Tuple[int, ...]] = None
    num_heads: Optional[int] = None
    attention_resolutions: Optional[Tuple[int, ...]] = None
    context_dim: Optional[int] = None

    @classmethod
    def ldm_kl_8(cls, weights_path: Optional[str] = None) -> "AutoencoderProfile":
        """The large latent setup: documented here, weights never bundled"""
        return cls(name="ldm-kl-8", kind="ldm-kl-8", latent_channels=4, weights_path=weights_path,
                   reconstruction_tolerance=0.01, z_shape=(32, 32, 4), channels=320,
                   channel_mult=(1, 2, 4, 4), num_heads=8, attention_resolutions=(32, 16, 8),
                   context_dim=1280)


class FirstStageAE(nn.Module):

    profile: AutoencoderProfile

    @abstractmethod
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def decode(self, z: torch.Tensor) -> torch.Tensor:
        ...


class IdentityAutoencoder(FirstStageAE):
    """Pixel space: T(x) = x"""

    def __init__(self, profile: Optional[AutoencoderProfile] = None):
        super().__init__()
        self.profile = profile or AutoencoderProfile()

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class TinyAutoencoder(FirstStageAE):
    """Two stride-2 convolutions down to ``latent_channels`` at 1/4 resolution and back"""

    def __init__(self, profile: Optional[AutoencoderProfile] = None):
        super().__init__()
        self.profile = profile or AutoencoderProfile(name="tiny", kind="tiny", reconstruction_tolerance=0.02)
        z = self.profile.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, z, 4, stride=2, padding=1))
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(z, 32, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(32, 3, 4, stride=2, padding=1), nn.Sigmoid())

    def encode(self, x):
        return self.encoder(x.to(_model_dtype(self)))

    def decode(self, z):
        return self.decoder(z.to(_model_dtype(self)))


class ScriptedAutoencoder(FirstStageAE):
    """TorchScript module exposing ``encode`` and ``decode``"""

    def __init__(self, profile: AutoencoderProfile):
        super().__init__()
        self.profile = profile
        self.module = torch.jit.load(str(profile.weights_path), map_location='cpu')

    def encode(self, x):
        return self.module.encode(x)

    def decode(self, z):
        return self.module.decode(z)


def make_autoencoder(profile: Optional[AutoencoderProfile] = None) -> FirstStageAE:
    profile = profile or AutoencoderProfile()
    if profile.kind == "identity":
        return IdentityAutoencoder(profile)
    if profile.weights_path and not Path(profile.weights_path).exists():
        raise CheckpointMissingError(f"Autoencoder weights not found: {profile.weights_path}", module="diffusion")
    if profile.kind == "tiny":
        ae = TinyAutoencoder(profile)
        if profile.weights_path:
            _, state = load_checkpoint(profile.weights_path, expected_kind='autoencoder')
            ae.load_state_dict(state)
        return ae.eval()
    if not profile.weights_path:
        raise CheckpointMissingError(f"Profile '{profile.name}' needs external weights; none are bundled",
                                     module="diffusion")
    return ScriptedAutoencoder(profile).eval()


def ae_code(ae: FirstStageAE, x: torch.Tensor) -> torch.Tensor:
    """Flattened unit-norm code of a 3 x H x W input (or a batch of them); differentiable in x"""
    single = x.dim() == 3
    batch = x.unsqueeze(0) if single else x
    if batch.dim() != 4 or batch.size(1) != 3:
        raise ShapeError(f"ae_code expects (…, 3, H, W), got {tuple(x.shape)}", module="diffusion")
    code = F.normalize(ae.encode(batch).flatten(1).to(x.dtype), dim=-1)
    return code[0] if single else code


# training

class DiffusionTrainConfig(BaseModel):
    seed: int = Field(default=0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=2e-4, gt=0)
    max_steps: Optional[int] = Field(default=None)
    checkpoint_path: Optional[str] = Field(default=None)


@dataclass
class DiffusionTrainResult:
    checkpoint_path: Optional[Path]
    loss_log: pd.DataFrame


def _check_images(images: torch.Tensor):
    if images.numel() == 0 or images.size(0) == 0:
        raise DatasetEmptyError("Training needs at least one image", module="diffusion")
    if images.dim() != 4 or images.size(1) != 3:
        raise ShapeError(f"Training images must be N x 3 x H x W, got {tuple(images.shape)}", module="diffusion")


def train_diffusion(model: TinyUNet, images: torch.Tensor, schedule: NoiseSchedule,
                    config: DiffusionTrainConfig) -> DiffusionTrainResult:
    """Fit eps(x_t, t) on images in [0, 1]; one loss row per epoch"""
    _check_images(images)
    data = images.to(torch.float32) * 2 - 1
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    logger.info(f"Training diffusion model on {data.size(0)} images for {config.epochs} epochs")
    rows = []
    step = 0
    model.train()
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = torch.randperm(data.size(0), generator=generator)
        losses = []
        for start in range(0, data.size(0), config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            loss = ddpm_loss(model, schedule, batch, generator)
            if not torch.isfinite(loss):
                raise NonFiniteLossError("Diffusion loss is not finite",
                                         diagnostics={'epoch': epoch, 'step': step}, module="diffusion")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                break
        rows.append({'epoch': epoch, 'steps': step, 'loss': sum(losses) / len(losses),
                     'seconds': time.perf_counter() - started})
        logger.info(f"Epoch {epoch}: diffusion loss {rows[-1]['loss']:.4f}")
        if config.max_steps is not None and step >= config.max_steps:
            break
    model.eval()

    checkpoint = None
    if config.checkpoint_path:
        checkpoint = save_diffusion(config.checkpoint_path, model, schedule, config)
    return DiffusionTrainResult(checkpoint, pd.DataFrame(rows))


def train_autoencoder(ae: TinyAutoencoder, images: torch.Tensor, config: DiffusionTrainConfig) -> pd.DataFrame:
    """Reconstruction MSE training; writes an 'autoencoder' checkpoint when configured"""
    _check_images(images)
    data = images.to(torch.float32)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(ae.parameters(), lr=config.learning_rate)
    rows = []
    ae.train()
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(data.size(0), generator=generator)
        losses = []
        for start in range(0, data.size(0), config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            loss = F.mse_loss(ae.decode(ae.encode(batch)), batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        rows.append({'epoch': epoch, 'loss': sum(losses) / len(losses)})
        logger.info(f"Epoch {epoch}: autoencoder reconstruction {rows[-1]['loss']:.5f}")
    ae.eval()
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, 'autoencoder', ae.profile.model_dump(), ae.state_dict())
    return pd.DataFrame(rows)


def save_diffusion(path, model: TinyUNet, schedule: NoiseSchedule,
                   train_config: Optional[DiffusionTrainConfig] = None) -> Path:
    config = {
        'unet': model.config.model_dump(),
        'schedule': {'num_timesteps': schedule.T,
                     'beta_start': float(schedule.betas[0]),
                     'beta_end': float(schedule.betas[-1])},
        'train': train_config.model_dump() if train_config else None,
    }
    return save_checkpoint(path, 'diffusion', config, model.state_dict())


def load_diffusion(path) -> Tuple[TinyUNet, NoiseSchedule]:
    header, state = load_checkpoint(path, expected_kind='diffusion')
    config = header['config']
    model = TinyUNet(UNetConfig(**config['unet']))
    model.load_state_dict(state)
    model.eval()
    return model, NoiseSchedule.from_config(ScheduleConfig(**config['schedule']))
