"""Log-SNR noise schedule and the scalar/tensor math of the diffusion process.

Images are parameterized by the log signal-to-noise ratio lambda: the forward
process mixes ``sqrt(sigmoid(lambda))`` signal with ``sqrt(sigmoid(-lambda))``
noise, the network predicts the noise, and the reverse process walks an
increasing lambda grid with ancestral posterior steps.
"""

from __future__ import annotations

import dataclasses
import math

import torch

__all__ = [
    "NoiseSchedule",
    "logsnr_cosine",
    "q_sample",
    "predict_x",
    "posterior_step",
    "guide",
    "eps_loss",
]


def logsnr_cosine(t, logsnr_min: float = -20.0, logsnr_max: float = 20.0):
    """Cosine-shaped log-SNR, monotonically decreasing from max to min on [0, 1].

    Accepts a python float or a tensor and returns the same kind.
    """
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.float64)
    if tt.min() < 0.0 or tt.max() > 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    b = math.atan(math.exp(-0.5 * logsnr_max))
    a = math.atan(math.exp(-0.5 * logsnr_min)) - b
    out = -2.0 * torch.log(torch.tan(a * tt + b))
    if scalar:
        return float(out)
    return out.to(t.dtype if t.dtype.is_floating_point else torch.float64)


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Monotone map t -> lambda with its endpoints."""

    logsnr_min: float = -20.0
    logsnr_max: float = 20.0

    def logsnr(self, t):
        return logsnr_cosine(t, self.logsnr_min, self.logsnr_max)

    def grid(self, num_steps: int) -> torch.Tensor:
        """lambda values on the uniform t grid k/num_steps, k = 0..num_steps.

        Index 0 is lambda_max (clean end), index num_steps is lambda_min.
        """
        if num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        t = torch.linspace(0.0, 1.0, num_steps + 1, dtype=torch.float64)
        return self.logsnr(t)


def _expand(logsnr, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or batch-shaped lambda over image dimensions."""
    lam = torch.as_tensor(logsnr, dtype=like.dtype, device=like.device)
    while lam.dim() < like.dim():
        lam = lam[..., None]
    return lam


def q_sample(x: torch.Tensor, logsnr, eps: torch.Tensor) -> torch.Tensor:
    """Corrupt a clean image to the noise level lambda: alpha*x + sigma*eps."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    lam = _expand(logsnr, x)
    return torch.sqrt(torch.sigmoid(lam)) * x + torch.sqrt(torch.sigmoid(-lam)) * eps


def predict_x(z: torch.Tensor, logsnr, eps_hat: torch.Tensor, clip: bool = True) -> torch.Tensor:
    """Recover the clean image implied by a noise prediction; clipped to [-1, 1]."""
    if z.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    lam = _expand(logsnr, z)
    x = (z - torch.sqrt(torch.sigmoid(-lam)) * eps_hat) / torch.sqrt(torch.sigmoid(lam))
    return x.clamp(-1.0, 1.0) if clip else x


def posterior_step(
    z_t: torch.Tensor,
    x_hat: torch.Tensor,
    logsnr_t,
    logsnr_s,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One ancestral step q(z_s | z_t, x_hat) from lambda_t up to lambda_s.

    Variances are the forward-posterior ones. `noise` is a unit Gaussian
    tensor; pass None on the final step to return the mean.
    """
    lam_t = _expand(logsnr_t, z_t)
    lam_s = _expand(logsnr_s, z_t)
    if (lam_s < lam_t).any():
        raise ValueError("posterior step must not decrease the log-SNR")
    e = torch.exp(lam_t - lam_s)
    alpha_t = torch.sqrt(torch.sigmoid(lam_t))
    alpha_s = torch.sqrt(torch.sigmoid(lam_s))
    mean = (alpha_s / alpha_t) * e * z_t + alpha_s * (1.0 - e) * x_hat
    if noise is None:
        return mean
    var = torch.sigmoid(-lam_s) * (1.0 - e)
    return mean + torch.sqrt(var) * noise


def guide(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond); w=1 is conditional."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("guidance inputs must share a shape")
    return eps_uncond + w * (eps_cond - eps_uncond)


def eps_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError("loss inputs must share a shape")
    return ((eps_hat - eps) ** 2).mean()
