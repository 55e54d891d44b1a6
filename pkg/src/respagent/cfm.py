"""Conditional flow matching on straight noise-to-data paths.

Training regresses ``v(x_t, c, t)`` onto ``x1 - x0`` at ``x_t = (1-t) x0 + t x1``;
sampling integrates ``dx/dt = v`` from ``x0 ~ N(0, sigma^2 I)`` with forward Euler.
The velocity net also receives ``t`` explicitly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgument, NumericInputError
from .gradcheck import finite_difference_check
from .unit_generator import UnitSequence

DEFAULT_STEPS = 32
DEFAULT_SIGMA = 1.0
DEFAULT_PREFIX_FRAC = 0.1

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """``(1-t) x0 + t x1``; ``t`` is a scalar or a per-sample ``(B,)`` vector."""
    _same_shape(x0, x1)
    t = torch.as_tensor(t, dtype=x0.dtype)
    if t.dim() == 1:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    if ((t < 0) | (t > 1)).any():
        raise InvalidArgument("t must lie in [0, 1]")
    return (1 - t) * x0 + t * x1


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    _same_shape(x0, x1)
    return x1 - x0


@dataclass(frozen=True)
class Condition:
    content: torch.Tensor  # (F, E)
    timbre: torch.Tensor  # (E_t,), broadcast over frames
    ref_prefix: torch.Tensor  # (F, bins), zero past r
    r: int

    @property
    def frames(self) -> int:
        return self.content.shape[0]

    def as_tensor(self) -> torch.Tensor:
        """Per-frame conditioning features ``[content | timbre | prefix]``."""
        F_ = self.frames
        return torch.cat([self.content, self.timbre.expand(F_, -1), self.ref_prefix], dim=-1)

    def digest(self) -> str:
        return hashlib.sha256(self.as_tensor().detach().to(torch.float64).numpy().tobytes()).hexdigest()[:16]


def nearest_index_map(L: int, F_: int) -> torch.Tensor:
    return torch.div(torch.arange(F_) * L, F_, rounding_mode="floor")


def build_condition(units: UnitSequence, unit_embed, timbre_frames: torch.Tensor, ref: torch.Tensor,
                    r: int | None, mel_frames: int, mode: str = "nearest") -> Condition:
    """Dual-path condition: content stream, broadcast timbre and reference prefix.

    ``r=None`` exposes the default 10% prefix.
    """
    if mel_frames < 1:
        raise InvalidArgument("mel_frames must be >= 1")
    if len(units.units) == 0:
        raise InvalidArgument("empty unit sequence")
    if r is None:
        r = int(round(DEFAULT_PREFIX_FRAC * mel_frames))
    if not 0 <= r <= mel_frames:
        raise InvalidArgument(f"prefix length r={r} outside [0, {mel_frames}]")
    table = unit_embed.weight if isinstance(unit_embed, nn.Embedding) else torch.as_tensor(unit_embed)
    emb = table[torch.tensor(units.units, dtype=torch.long)]
    L = emb.shape[0]
    if mode == "nearest":
        content = emb[nearest_index_map(L, mel_frames)]
    elif mode == "linear":
        content = torch.nn.functional.interpolate(
            emb.T.unsqueeze(0), size=mel_frames, mode="linear", align_corners=True
        ).squeeze(0).T
    else:
        raise InvalidArgument(f"unknown interpolation mode {mode!r}")
    timbre = torch.as_tensor(timbre_frames).to(content.dtype).mean(dim=0)
    ref = torch.as_tensor(ref).to(content.dtype)
    if ref.shape[0] < r:
        raise InvalidArgument("reference shorter than the prefix")
    prefix = torch.zeros(mel_frames, ref.shape[1], dtype=content.dtype)
    prefix[:r] = ref[:r]
    return Condition(content, timbre, prefix, r)


class SinusoidalTime(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
        ang = t.unsqueeze(-1) * freqs * 2 * math.pi
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class VelocityNet(nn.Module):
    """Residual perceptron; condition and time enter additively.

    ``x``: ``(B, ..., x_dim)``; ``cond``: broadcastable ``(..., c_dim)``;
    ``t``: ``(B,)``.
    """

    def __init__(self, x_dim: int, c_dim: int, hidden: int = 128, depth: int = 3, t_dim: int = 32):
        super().__init__()
        self.t_embed = SinusoidalTime(t_dim)
        self.x_in = nn.Linear(x_dim, hidden)
        self.c_in = nn.Linear(c_dim, hidden)
        self.t_in = nn.Linear(t_dim, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            for _ in range(depth)
        )
        self.out = nn.Sequential(nn.SiLU(), nn.Linear(hidden, x_dim))

    def forward(self, x: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        te = self.t_in(self.t_embed(t.to(x.dtype)))
        te = te.reshape(te.shape[0], *([1] * (x.dim() - 2)), te.shape[-1])
        h = self.x_in(x) + self.c_in(cond.to(x.dtype)) + te
        for blk in self.blocks:
            h = h + blk(h)
        return self.out(h)


class LinearVelocity(nn.Module):
    """``v = A x + B c + t u + b``; the exact-gradient reference case."""

    def __init__(self, x_dim: int, c_dim: int):
        super().__init__()
        self.A = nn.Linear(x_dim, x_dim)
        self.B = nn.Linear(c_dim, x_dim, bias=False)
        self.u = nn.Parameter(torch.zeros(x_dim))

    def forward(self, x, cond, t):
        tt = t.to(x.dtype).reshape(t.shape[0], *([1] * (x.dim() - 1)))
        return self.A(x) + self.B(cond.to(x.dtype)) + tt * self.u


def cfm_loss(vnet: VelocityFn, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor,
             cond: torch.Tensor) -> torch.Tensor:
    """Mean over batch and elements of ``(v(x_t, c, t) - (x1 - x0))^2``."""
    xt = interpolate(x0, x1, t)
    v = vnet(xt, cond, t)
    err = (v - velocity_target(x0, x1)) ** 2
    if torch.isnan(err).any():
        bad = torch.isnan(err.reshape(err.shape[0], -1)).any(dim=1).nonzero().flatten().tolist()
        raise NumericInputError(f"NaN in flow-matching loss at batch index {bad[0]}")
    return err.mean()


def sample_batch(x1: torch.Tensor, sigma: float, gen: torch.Generator):
    """(x0, t) for a data batch: Gaussian noise and uniform times."""
    x0 = sigma * torch.randn(x1.shape, generator=gen, dtype=x1.dtype)
    t = torch.rand(x1.shape[0], generator=gen, dtype=x1.dtype)
    return x0, t


def euler_sample(vnet: VelocityFn, cond: torch.Tensor, shape, steps: int = DEFAULT_STEPS,
                 sigma: float = DEFAULT_SIGMA, seed: int = 0, dtype=torch.float32,
                 x0: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate from noise with ``steps`` uniform Euler steps of size 1/steps."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    if x0 is None:
        gen = torch.Generator().manual_seed(seed)
        x0 = sigma * torch.randn(tuple(shape), generator=gen, dtype=dtype)
    x = x0
    B = x.shape[0]
    with torch.no_grad():
        for k in range(steps):
            t = torch.full((B,), k / steps, dtype=x.dtype)
            x = x + (1.0 / steps) * vnet(x, cond, t)
    return x


def gradcheck(vnet: nn.Module, x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
              n_coords: int = 64, h: float = 1e-6, seed: int = 0) -> float:
    """Max relative error of autograd vs central differences for :func:`cfm_loss`."""
    vnet = vnet.double()
    x0, x1, t, cond = (a.double() for a in (x0, x1, t, cond))
    return finite_difference_check(lambda: cfm_loss(vnet, x0, x1, t, cond), list(vnet.parameters()),
                                   n_coords=n_coords, h=h, seed=seed)


@dataclass
class CFMTrainConfig:
    hidden: int = 128
    depth: int = 3
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 2e-3
    sigma: float = DEFAULT_SIGMA
    seed: int = 0


def train_cfm(sample_data: Callable[[int, torch.Generator], tuple[torch.Tensor, torch.Tensor]],
              x_dim: int, c_dim: int, cfg: CFMTrainConfig) -> tuple[VelocityNet, list[float]]:
    """Fit a :class:`VelocityNet`; ``sample_data(batch, gen) -> (x1, cond)``."""
    torch.manual_seed(cfg.seed)
    net = VelocityNet(x_dim, c_dim, cfg.hidden, cfg.depth)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = []
    for _ in range(cfg.steps):
        x1, cond = sample_data(cfg.batch_size, gen)
        x0, t = sample_batch(x1, cfg.sigma, gen)
        loss = cfm_loss(net, x0, x1, t, cond)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    net.eval()
    return net, losses


# ---------------------------------------------------------- toy problems

def gmm_sampler(means: torch.Tensor, std: float):
    """Conditional 2-component mixture: a one-hot condition picks the component."""
    means = torch.as_tensor(means, dtype=torch.float32)
    k = means.shape[0]

    def sample(batch: int, gen: torch.Generator):
        comp = torch.randint(0, k, (batch,), generator=gen)
        x1 = means[comp] + std * torch.randn(batch, means.shape[1], generator=gen)
        return x1, torch.nn.functional.one_hot(comp, k).float()

    return sample


def component_report(samples: torch.Tensor, means: torch.Tensor, component: int) -> dict:
    """Purity (nearest true mean is ``component``) and mean error for one condition."""
    means = torch.as_tensor(means, dtype=samples.dtype)
    nearest = torch.cdist(samples, means).argmin(dim=1)
    purity = float((nearest == component).double().mean())
    mean_err = float(torch.linalg.norm(samples.mean(0) - means[component]))
    return {"purity": purity, "mean_error": mean_err}


def toy_mel(units: UnitSequence, bins: int, frames: int, seed: int = 0) -> torch.Tensor:
    """A deterministic mel-like grid whose frame energy follows the unit ids."""
    rng = np.random.default_rng(seed)
    idx = nearest_index_map(len(units.units), frames).numpy()
    levels = np.asarray(units.units, dtype=np.float64)[idx] / max(units.V - 1, 1)
    freq = np.linspace(0, 1, bins)
    mel = levels[:, None] * np.exp(-((freq[None, :] - 0.3) ** 2) / 0.05) + 0.05 * rng.normal(size=(frames, bins))
    return torch.tensor(mel, dtype=torch.float32)


def save_mel(path, mel: torch.Tensor) -> None:
    """Flat float32 binary plus a ``.json`` shape sidecar."""
    import json
    from pathlib import Path

    p = Path(path)
    arr = mel.detach().to(torch.float32).numpy()
    p.write_bytes(arr.astype("<f4").tobytes())
    p.with_suffix(".json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "float32"}))


def load_mel(path) -> torch.Tensor:
    import json
    from pathlib import Path

    p = Path(path)
    meta = json.loads(p.with_suffix(".json").read_text())
    return torch.from_numpy(np.frombuffer(p.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy())


def sampler_log(cond: Condition | torch.Tensor, steps: int, sigma: float, seed: int) -> dict:
    """JSON-ready record of one sampler run."""
    if isinstance(cond, Condition):
        digest = cond.digest()
    else:
        digest = hashlib.sha256(torch.as_tensor(cond).detach().to(torch.float64).numpy().tobytes()).hexdigest()[:16]
    return {"seed": seed, "steps": steps, "sigma": sigma, "condition_digest": digest}
