"""Visuomotor diffusion policy at desk scale.

A small conv stack embeds each rendered frame, a two-layer perceptron embeds
the proprioceptive pose, and the two most recent timesteps are concatenated
into one conditioning vector. Action chunks are generated by a DDPM trained
with the standard noise-prediction regression: sample a diffusion step k and
noise eps, form sqrt(abar_k) * chunk + sqrt(1 - abar_k) * eps, and regress
the denoiser output onto eps. Execution is receding-horizon: sample T_p
actions, run the first T_a, replan.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .env import EnvAction, EnvObservation
from .errors import DimensionalityError, EmptyDatasetError, NumericError, ParseError
from .takeover import Demonstration, StepSource

__all__ = [
    "PolicySpec",
    "TrainConfig",
    "NoiseSchedule",
    "PolicyParams",
    "ObsWindow",
    "init_params",
    "encode_observation",
    "encode_windows",
    "train",
    "sample_action_chunk",
    "RecedingController",
    "save_policy",
    "load_policy",
    "noise_prediction_loss",
    "training_pairs",
]

ACTION_DIM = 3
OBS_HORIZON = 2  # two consecutive observations condition each action chunk

ObsWindow = tuple[EnvObservation, EnvObservation]


@dataclass(frozen=True)
class PolicySpec:
    """Network and horizon shape of one policy."""

    image_size: tuple[int, int] = (48, 48)
    d_img: int = 32
    d_pose: int = 8
    pred_horizon: int = 8    # T_p
    act_horizon: int = 4     # T_a, executed per replan
    diffusion_steps: int = 16
    hidden: int = 256
    temb_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if not 0 < self.act_horizon <= self.pred_horizon:
            raise NumericError("need 0 < act_horizon <= pred_horizon")

    @property
    def d_e(self) -> int:
        return OBS_HORIZON * (self.d_img + self.d_pose)

    @property
    def chunk_dim(self) -> int:
        return self.pred_horizon * ACTION_DIM


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


class NoiseSchedule:
    """Beta coefficients with derived alphas and cumulative products."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise NumericError("betas must be a non-empty vector")
        if not ((betas > 0.0).all() and (betas < 1.0).all()):
            raise NumericError("betas must lie in (0, 1)")
        if (np.diff(betas) < -1e-12).any():
            raise NumericError("betas must be non-decreasing")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    def __len__(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, steps: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(np.linspace(beta_start, beta_end, steps))

    @classmethod
    def respaced_linear(cls, steps: int = 16, base_steps: int = 1000,
                        beta_start: float = 1e-4, beta_end: float = 0.02):
        """The canonical 1000-step linear schedule compressed to few steps.

        Betas are chosen so the cumulative signal decay at each of the
        `steps` waypoints matches the base schedule, keeping terminal noise
        close to a unit Gaussian even with very few steps.
        """
        base = np.linspace(beta_start, beta_end, base_steps)
        abar = np.cumprod(1.0 - base)
        idx = np.round(np.linspace(0, base_steps - 1, steps + 1)).astype(int)[1:]
        abar_k = abar[idx]
        prev = np.concatenate([[1.0], abar_k[:-1]])
        return cls(1.0 - abar_k / prev)


class ImageEncoder(nn.Module):
    """Conv stack over the grayscale frame plus fixed coordinate channels."""

    def __init__(self, image_size, d_img):
        super().__init__()
        h, w = image_size
        ys, xs = torch.meshgrid(
            torch.linspace(-1.0, 1.0, h), torch.linspace(-1.0, 1.0, w), indexing="ij")
        self.register_buffer("coords", torch.stack([xs, ys])[None])
        self.conv = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.conv(torch.zeros(1, 3, h, w)).shape[1]
        self.head = nn.Linear(flat, d_img)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, H, W) in [0, 1]
        b = images.shape[0]
        x = torch.cat([images[:, None], self.coords.expand(b, -1, -1, -1)], dim=1)
        return self.head(self.conv(x))


class PoseEncoder(nn.Module):
    def __init__(self, d_pose):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(4, 32), nn.ReLU(), nn.Linear(32, d_pose))

    def forward(self, pose: torch.Tensor) -> torch.Tensor:
        return self.net(pose)


class ObsEncoder(nn.Module):
    """Per-timestep [image, pose] features concatenated oldest-first."""

    def __init__(self, spec: PolicySpec):
        super().__init__()
        self.image_encoder = ImageEncoder(spec.image_size, spec.d_img)
        self.pose_encoder = PoseEncoder(spec.d_pose)

    def forward(self, images: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
        # images: (B, T_o, H, W); poses: (B, T_o, 4)
        b, t = images.shape[:2]
        img_feat = self.image_encoder(images.reshape(b * t, *images.shape[2:]))
        pose_feat = self.pose_encoder(poses.reshape(b * t, 4))
        per_step = torch.cat([img_feat, pose_feat], dim=1)  # (B*T_o, d_img+d_pose)
        return per_step.reshape(b, -1)


def _sinusoidal_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    ang = k.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class NoisePredictor(nn.Module):
    """MLP mapping [noised chunk, step embedding, obs embedding] to noise."""

    def __init__(self, spec: PolicySpec):
        super().__init__()
        self.temb_dim = spec.temb_dim
        self.temb_proj = nn.Linear(spec.temb_dim, spec.temb_dim)
        in_dim = spec.chunk_dim + spec.temb_dim + spec.d_e
        self.net = nn.Sequential(
            nn.Linear(in_dim, spec.hidden), nn.ReLU(),
            nn.Linear(spec.hidden, spec.hidden), nn.ReLU(),
            nn.Linear(spec.hidden, spec.chunk_dim),
        )

    def forward(self, noised: torch.Tensor, k: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        temb = self.temb_proj(_sinusoidal_embedding(k, self.temb_dim).to(noised.dtype))
        return self.net(torch.cat([noised, temb, emb], dim=1))


@dataclass
class PolicyParams:
    """Trained weights plus everything needed to run and audit the policy."""

    spec: PolicySpec
    encoder: ObsEncoder
    denoiser: NoisePredictor
    schedule: NoiseSchedule
    action_center: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))
    action_scale: np.ndarray = field(default_factory=lambda: np.ones(ACTION_DIM))
    meta: dict = field(default_factory=dict)

    def modules(self) -> list[nn.Module]:
        return [self.encoder, self.denoiser]


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    for p in module.parameters():
        with torch.no_grad():
            if p.ndim >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.ndim > 2 else 1)
                p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=gen)
            else:
                p.zero_()


def init_params(spec: Optional[PolicySpec] = None, seed: int = 0) -> PolicyParams:
    spec = spec or PolicySpec()
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    encoder = ObsEncoder(spec)
    denoiser = NoisePredictor(spec)
    _init_weights(encoder, gen)
    _init_weights(denoiser, gen)
    encoder.eval()
    denoiser.eval()
    return PolicyParams(
        spec=spec,
        encoder=encoder,
        denoiser=denoiser,
        schedule=NoiseSchedule.respaced_linear(spec.diffusion_steps),
        meta={"seed": int(seed)},
    )


# -- encoding -------------------------------------------------------------------

def _window_arrays(window: Sequence[EnvObservation]):
    if len(window) != OBS_HORIZON:
        raise DimensionalityError(
            f"observation window must hold {OBS_HORIZON} entries, got {len(window)}")
    images = np.stack([np.asarray(o.image, dtype=np.float32) for o in window])
    poses = np.stack([np.asarray(o.pose, dtype=np.float32) for o in window])
    return images, poses


def encode_windows(params: PolicyParams, images: np.ndarray, poses: np.ndarray) -> np.ndarray:
    """Batched conditioning embeddings for (N, T_o, H, W) / (N, T_o, 4) arrays."""
    if images.shape[2:] != params.spec.image_size:
        raise DimensionalityError(
            f"image shape {images.shape[2:]} != policy input {params.spec.image_size}")
    with torch.no_grad():
        emb = params.encoder(torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)),
                             torch.from_numpy(np.ascontiguousarray(poses, dtype=np.float32)))
    return emb.numpy()


def encode_observation(params: PolicyParams, window: Sequence[EnvObservation]) -> np.ndarray:
    """Deterministic conditioning vector [img0, pose0, img1, pose1] features."""
    images, poses = _window_arrays(window)
    return encode_windows(params, images[None], poses[None])[0]


# -- training ---------------------------------------------------------------------

def training_pairs(demos: Sequence[Demonstration], spec: PolicySpec):
    """Windows and action-chunk targets from expert/operator steps only.

    Prefix steps contribute observation context (they can appear as the
    older half of a window) but never action targets, since they replay the
    failing policy's own commands.
    """
    images, poses, chunks = [], [], []
    for demo in demos:
        steps = demo.steps
        actions = [s.action.as_array() for s in steps]
        for i, step in enumerate(steps):
            if step.source is StepSource.PREFIX:
                continue
            prev = steps[i - 1].observation if i > 0 else step.observation
            win_img, win_pose = _window_arrays((prev, step.observation))
            chunk = [
                actions[min(j, len(actions) - 1)]
                for j in range(i, i + spec.pred_horizon)
            ]
            images.append(win_img)
            poses.append(win_pose)
            chunks.append(np.stack(chunk))
    if not chunks:
        raise EmptyDatasetError("dataset has no expert/operator action targets")
    return (np.stack(images), np.stack(poses),
            np.stack(chunks).astype(np.float64))


def _fit_normalizer(chunks: np.ndarray):
    lo = chunks.reshape(-1, ACTION_DIM).min(axis=0)
    hi = chunks.reshape(-1, ACTION_DIM).max(axis=0)
    center = 0.5 * (hi + lo)
    # a zero scale is kept: de-normalization then pins the component to its
    # recorded constant no matter what the sampler emits
    scale = 0.5 * (hi - lo)
    return center, scale


def noise_prediction_loss(
    denoiser: nn.Module,
    schedule: NoiseSchedule,
    chunks: torch.Tensor,   # (B, chunk_dim), already normalized
    embs: torch.Tensor,     # (B, d_e)
    k: torch.Tensor,        # (B,) in 1..K
    eps: torch.Tensor,      # (B, chunk_dim)
) -> torch.Tensor:
    """Mean squared error between true and predicted noise at step k."""
    abar = torch.from_numpy(schedule.alpha_bars).to(chunks.dtype)[k - 1]
    noised = torch.sqrt(abar)[:, None] * chunks + torch.sqrt(1.0 - abar)[:, None] * eps
    pred = denoiser(noised, k, embs)
    return ((pred - eps) ** 2).mean()


def train(
    dataset,
    hyper: Optional[TrainConfig] = None,
    spec: Optional[PolicySpec] = None,
    dataset_id: str = "",
) -> tuple[PolicyParams, list[float]]:
    """Supervised DDPM training; pure function of (dataset, hyper)."""
    hyper = hyper or TrainConfig()
    spec = spec or PolicySpec()
    demos = list(dataset)
    images, poses, chunks = training_pairs(demos, spec)
    center, scale = _fit_normalizer(chunks)

    params = init_params(spec, seed=hyper.seed)
    params.action_center = center
    params.action_scale = scale
    params.meta.update({
        "dataset_id": dataset_id or getattr(dataset, "label", ""),
        "seed": hyper.seed,
        "epochs": hyper.epochs,
        "batch": hyper.batch,
        "learning_rate": hyper.learning_rate,
        "n_pairs": len(chunks),
    })
    if hyper.epochs == 0:
        return params, []

    norm = (chunks - center) / np.where(scale == 0.0, 1.0, scale)
    t_img = torch.from_numpy(images.astype(np.float32))
    t_pose = torch.from_numpy(poses.astype(np.float32))
    t_chunk = torch.from_numpy(norm.reshape(len(norm), -1).astype(np.float32))

    for m in params.modules():
        m.train()
    gen = torch.Generator().manual_seed(int(hyper.seed) % (2**63))
    opt = torch.optim.Adam(
        [p for m in params.modules() for p in m.parameters()], lr=hyper.learning_rate)
    K = len(params.schedule)
    n = len(t_chunk)
    curve = []
    for _ in range(hyper.epochs):
        perm = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for lo in range(0, n, hyper.batch):
            idx = perm[lo:lo + hyper.batch]
            emb = params.encoder(t_img[idx], t_pose[idx])
            k = torch.randint(1, K + 1, (len(idx),), generator=gen)
            eps = torch.randn(len(idx), spec.chunk_dim, generator=gen)
            loss = noise_prediction_loss(
                params.denoiser, params.schedule, t_chunk[idx], emb, k, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        curve.append(total / batches)
    for m in params.modules():
        m.eval()
    params.meta["final_loss"] = curve[-1]
    return params, curve


# -- sampling ---------------------------------------------------------------------

def sample_action_chunk(params: PolicyParams, emb: np.ndarray, seed: int) -> np.ndarray:
    """Reverse diffusion from unit Gaussian noise; returns a (T_p, 3) chunk.

    The chunk is clamped to [-1, 1] in normalized space and de-normalized
    with the training-set statistics, so entries stay inside the recorded
    action range.
    """
    spec = params.spec
    emb = np.asarray(emb, dtype=np.float32)
    if emb.shape != (spec.d_e,):
        raise DimensionalityError(f"embedding shape {emb.shape} != ({spec.d_e},)")
    gen = torch.Generator().manual_seed(int(seed) % (2**63))
    sched = params.schedule
    t_emb = torch.from_numpy(emb)[None]
    x = torch.randn(1, spec.chunk_dim, generator=gen)
    with torch.no_grad():
        for k in range(len(sched), 0, -1):
            beta = sched.betas[k - 1]
            alpha = sched.alphas[k - 1]
            abar = sched.alpha_bars[k - 1]
            pred = params.denoiser(x, torch.tensor([k]), t_emb)
            mean = (x - (beta / math.sqrt(1.0 - abar)) * pred) / math.sqrt(alpha)
            if k > 1:
                abar_prev = sched.alpha_bars[k - 2]
                sigma = math.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
                x = mean + sigma * torch.randn(1, spec.chunk_dim, generator=gen)
            else:
                x = mean
    out = x.numpy().reshape(spec.pred_horizon, ACTION_DIM).astype(np.float64)
    out = np.clip(out, -1.0, 1.0)
    return out * params.action_scale + params.action_center


def _replan_seed(base_seed: int, replan_index: int) -> int:
    ss = np.random.SeedSequence((int(base_seed) & 0xFFFFFFFF, replan_index))
    return int(ss.generate_state(1, np.uint64)[0])


class RecedingController:
    """Executes T_a actions of each sampled T_p chunk, then replans."""

    def __init__(self, params: PolicyParams, seed: int = 0):
        self.params = params
        self.seed = int(seed)
        self._queue: list[np.ndarray] = []
        self._prev_obs: Optional[EnvObservation] = None
        self._replans = 0

    @property
    def replan_count(self) -> int:
        return self._replans

    def reset(self) -> None:
        """Drops buffered actions and context, e.g. after a takeover ends."""
        self._queue = []
        self._prev_obs = None

    def act(self, obs: EnvObservation) -> EnvAction:
        window = (self._prev_obs if self._prev_obs is not None else obs, obs)
        self._prev_obs = obs
        if not self._queue:
            emb = encode_observation(self.params, window)
            chunk = sample_action_chunk(
                self.params, emb, _replan_seed(self.seed, self._replans))
            self._replans += 1
            self._queue = [chunk[i] for i in range(self.params.spec.act_horizon)]
        return EnvAction.from_array(self._queue.pop(0)).clamped()

    def observe_only(self, obs: EnvObservation) -> None:
        """Keeps the context window warm while the operator is driving."""
        self._prev_obs = obs


# -- persistence -------------------------------------------------------------------

POLICY_FORMAT_VERSION = 1


def save_policy(params: PolicyParams, path) -> Path:
    """Versioned binary weights next to a text manifest."""
    path = Path(path)
    if path.suffix != ".pt":
        path = path.with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": POLICY_FORMAT_VERSION,
        "spec": asdict(params.spec),
        "encoder": params.encoder.state_dict(),
        "denoiser": params.denoiser.state_dict(),
        "betas": params.schedule.betas,
        "action_center": params.action_center,
        "action_scale": params.action_scale,
        "meta": params.meta,
    }, path)
    spec = params.spec
    manifest = {
        "dataset_id": params.meta.get("dataset_id", ""),
        "seed": params.meta.get("seed"),
        "hyperparameters": {
            k: params.meta.get(k) for k in ("epochs", "batch", "learning_rate")},
        "d_e": spec.d_e,
        "T_o": OBS_HORIZON,
        "T_p": spec.pred_horizon,
        "T_a": spec.act_horizon,
        "K": spec.diffusion_steps,
        "final_loss": params.meta.get("final_loss"),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_policy(path) -> PolicyParams:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ParseError(f"cannot load policy: {exc}", path=str(path)) from exc
    if blob.get("version") != POLICY_FORMAT_VERSION:
        raise ParseError(f"unsupported policy version {blob.get('version')}",
                         path=str(path))
    spec_dict = dict(blob["spec"])
    spec_dict["image_size"] = tuple(spec_dict["image_size"])
    spec = PolicySpec(**spec_dict)
    params = PolicyParams(
        spec=spec,
        encoder=ObsEncoder(spec),
        denoiser=NoisePredictor(spec),
        schedule=NoiseSchedule(blob["betas"]),
        action_center=np.asarray(blob["action_center"], dtype=np.float64),
        action_scale=np.asarray(blob["action_scale"], dtype=np.float64),
        meta=dict(blob["meta"]),
    )
    params.encoder.load_state_dict(blob["encoder"])
    params.denoiser.load_state_dict(blob["denoiser"])
    params.encoder.eval()
    params.denoiser.eval()
    return params
