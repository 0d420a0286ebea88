"""Projected-gradient attack driver with composable transfer methods.

The base loop is PGD on the targeted language loss. Method components
compose by name, e.g. ``"dynvla+di"``: per-iteration Gaussian-kernel
attention perturbation (dynvla), input diversity (di), block transforms
(sit), gradient smoothing (ti), and momentum (mi). Evaluation-time forwards
never apply kernels or transforms.
"""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalFailureError, ValidationError
from .kernels import build_kernel, sample_kernel_spec
from .models import ModelBundle, lm_loss_batch
from .tokenizer import EOS_ID, TokenSequence

KNOWN_COMPONENTS = ("pgd", "dynvla", "mi", "di", "ti", "sit")


def parse_method(method: str) -> frozenset:
    """Split a composed method name into its components."""
    parts = [p.strip().lower() for p in method.split("+") if p.strip()]
    if not parts:
        raise ValidationError("empty method name")
    for p in parts:
        if p not in KNOWN_COMPONENTS:
            raise ValidationError(f"unknown attack method component {p!r}")
    return frozenset(parts)


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters. Paper-scale defaults are eps 16/255 and
    alpha 1/255 with 2000 steps; the desk-scale default step budget is 300."""

    epsilon: float = 16 / 255
    alpha: float = 1 / 255
    steps: int = 300
    method: str = "pgd"
    kernel_size_range: tuple[int, int] = (3, 5)
    kernel_sigma_range: tuple[float, float] = (3.0, 5.0)
    kernel_amplitude: float = 1.0
    strength_mode: str = "sigma"  # which knob "strength" randomizes: sigma | amplitude
    momentum_mu: float = 1.0
    di_prob: float = 0.7
    di_resize_ratio: float = 1.1
    ti_kernel_side: int = 5
    sit_blocks: int = 4
    seed: int = 0
    gradient_ascent: bool = False  # printed-formula variant; descent is the default
    quantize_eval: bool = False  # evaluate on the 8-bit image instead of the float one
    debug_invariants: bool = False
    trace_every: int = 0  # progress callback cadence, 0 disables

    def __post_init__(self):
        if not (0 < self.alpha <= self.epsilon <= 1):
            raise ValidationError(
                f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha} epsilon={self.epsilon}"
            )
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.strength_mode not in ("sigma", "amplitude"):
            raise ValidationError(f"unknown strength_mode {self.strength_mode!r}")
        parse_method(self.method)

    @property
    def components(self) -> frozenset:
        return parse_method(self.method)


@dataclass
class AdvExample:
    """One adversarial artifact with enough provenance to replay it."""

    delta: np.ndarray  # (H, W, C) float32, |delta| <= epsilon
    adversarial_image: np.ndarray  # clip(image + delta, 0, 1)
    image_id: str
    surrogate_id: str
    prompt: str
    target_text: str
    method: str
    seed: int
    loss_trace: np.ndarray  # (steps,) float32

    def validate(self, epsilon: float) -> None:
        if np.abs(self.delta).max() > epsilon + 1e-9:
            raise ValidationError(
                f"delta leaves the epsilon ball: {np.abs(self.delta).max():.6g} > {epsilon:.6g}"
            )
        if self.adversarial_image.min() < 0 or self.adversarial_image.max() > 1:
            raise ValidationError("adversarial image leaves [0, 1]")


def derive_seed(global_seed: int, image_id: str, stream: str) -> int:
    """Stable per-image, per-stream seed (independent of batch layout)."""
    digest = hashlib.sha256(f"{global_seed}:{image_id}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_attack_target(tokenizer, target_text: str) -> TokenSequence:
    """Target token sequence for the loss: the text plus end-of-sequence,
    so a successful attack also makes generation stop after the target."""
    return TokenSequence(ids=tuple(tokenizer.encode(target_text)) + (EOS_ID,), text=target_text)


def eps32_floor(epsilon: float) -> float:
    """Largest float32 not exceeding epsilon, so float32 deltas never leave
    the ball as measured in float64 (float32(16/255) alone overshoots)."""
    e32 = np.float32(epsilon)
    if float(e32) > epsilon:
        e32 = np.nextafter(e32, np.float32(0.0))
    return float(e32)


def pgd_init(rng: np.random.Generator, epsilon: float, shape) -> np.ndarray:
    """Uniform(-epsilon, epsilon) initialization."""
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    bound = eps32_floor(epsilon)
    draw = rng.uniform(-epsilon, epsilon, size=shape).astype(np.float32)
    return np.clip(draw, -bound, bound)


def pgd_step(delta, grad, alpha, epsilon, image):
    """One sign-gradient descent step projected to the epsilon ball and to
    valid pixels. sign(0) = 0.

    The epsilon clamp runs last: the float32 round trip of the pixel
    projection can overshoot the ball by one ulp, while shrinking delta
    toward zero never leaves [0, 1]."""
    bound = eps32_floor(epsilon)
    new = delta - alpha * torch.sign(grad)
    new = (image + new).clamp(0.0, 1.0) - image
    return new.clamp(-bound, bound)


def di_transform(x: torch.Tensor, rngs, prob: float, ratio: float) -> torch.Tensor:
    """Input diversity: random resize then random zero-pad back, per image.

    ``x`` is (B, C, H, W); ``rngs`` is one numpy generator per image so the
    decision stream is independent of batch layout. Differentiable.
    """
    if not (0 <= prob <= 1):
        raise ValidationError(f"di prob must be in [0,1], got {prob}")
    if ratio < 1:
        raise ValidationError(f"di ratio must be >= 1, got {ratio}")
    B, C, H, W = x.shape
    big = int(round(W * ratio))
    if big == W:
        return x
    out = []
    for i in range(B):
        rng = rngs[i]
        if rng.random() >= prob:
            out.append(x[i])
            continue
        side = int(rng.integers(W, big))  # uniform over [W, W*ratio)
        pad_top = int(rng.integers(0, big - side + 1))
        pad_left = int(rng.integers(0, big - side + 1))
        resized = F.interpolate(
            x[i : i + 1], size=(side, side), mode="bilinear", align_corners=False
        )
        padded = F.pad(
            resized, (pad_left, big - side - pad_left, pad_top, big - side - pad_top)
        )
        back = F.interpolate(padded, size=(H, W), mode="bilinear", align_corners=False)
        out.append(back[0])
    return torch.stack(out)


def ti_kernel(side: int) -> torch.Tensor:
    """Normalized 2D Gaussian with sigma = side / 3."""
    if side % 2 == 0:
        raise ValidationError(f"ti kernel side must be odd, got {side}")
    sigma = side / 3.0
    ax = torch.arange(side, dtype=torch.float64) - (side - 1) / 2.0
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    k2 = g[:, None] * g[None, :]
    return (k2 / k2.sum()).to(torch.float32)


def ti_smooth(grad: torch.Tensor, kernel_side: int) -> torch.Tensor:
    """Depthwise convolution of the pixel gradient with a Gaussian kernel."""
    if kernel_side == 1:
        return grad
    k = ti_kernel(kernel_side).to(grad.dtype)
    C = grad.shape[1]
    weight = k.expand(C, 1, -1, -1)
    return F.conv2d(grad, weight, padding=kernel_side // 2, groups=C)


def mi_update(momentum: torch.Tensor, grad: torch.Tensor, mu: float):
    """Momentum accumulation over L1-normalized gradients (per sample)."""
    if mu < 0:
        raise ValidationError(f"momentum mu must be >= 0, got {mu}")
    flat = grad.reshape(grad.shape[0], -1)
    l1 = flat.abs().sum(dim=1).clamp_min(1e-30)
    normalized = grad / l1.view(-1, *([1] * (grad.dim() - 1)))
    zero_rows = flat.abs().sum(dim=1) == 0
    if bool(zero_rows.any()):
        normalized = torch.where(
            zero_rows.view(-1, *([1] * (grad.dim() - 1))), torch.zeros_like(grad), normalized
        )
    new_momentum = mu * momentum + normalized
    return new_momentum, torch.sign(new_momentum)


def sit_transform(x: torch.Tensor, rngs, blocks: int) -> torch.Tensor:
    """Structure-preserving per-tile transforms, chosen independently per tile.

    Tiles are (H/blocks) square; each gets one of identity, horizontal flip,
    vertical flip, 90-degree rotation, scaling by u ~ U[0.5, 1.5], additive
    uniform noise of +/- 8/255, or zero-out. Differentiable through every
    branch; the result is clipped to [0, 1].
    """
    B, C, H, W = x.shape
    if H % blocks != 0 or W % blocks != 0:
        raise ValidationError(f"blocks={blocks} does not divide image side {H}")
    th, tw = H // blocks, W // blocks
    out = x.clone()
    for i in range(B):
        rng = rngs[i]
        for by in range(blocks):
            for bx in range(blocks):
                sl = (i, slice(None), slice(by * th, (by + 1) * th), slice(bx * tw, (bx + 1) * tw))
                tile = out[sl]
                choice = int(rng.integers(0, 7))
                if choice == 0:
                    continue
                if choice == 1:
                    out[sl] = tile.flip(-1)
                elif choice == 2:
                    out[sl] = tile.flip(-2)
                elif choice == 3:
                    out[sl] = tile.rot90(1, dims=(-2, -1))
                elif choice == 4:
                    out[sl] = tile * float(rng.uniform(0.5, 1.5))
                elif choice == 5:
                    noise = torch.from_numpy(
                        rng.uniform(-8 / 255, 8 / 255, size=tuple(tile.shape)).astype(np.float32)
                    )
                    out[sl] = tile + noise.to(tile.dtype)
                else:
                    out[sl] = tile * 0.0
    return out.clamp(0.0, 1.0)


@dataclass
class _PerImageStreams:
    init: np.random.Generator
    kernel: np.random.Generator
    transform: np.random.Generator


def _streams(cfg: AttackConfig, image_id: str) -> _PerImageStreams:
    return _PerImageStreams(
        init=np.random.default_rng(derive_seed(cfg.seed, image_id, "init")),
        kernel=np.random.default_rng(derive_seed(cfg.seed, image_id, "kernel")),
        transform=np.random.default_rng(derive_seed(cfg.seed, image_id, "transform")),
    )


def _sample_iteration_kernel(cfg: AttackConfig, rng: np.random.Generator, n: int):
    """One fresh kernel per attack iteration per image."""
    if cfg.strength_mode == "sigma":
        spec = sample_kernel_spec(
            rng, n, cfg.kernel_size_range, cfg.kernel_sigma_range, amplitude=cfg.kernel_amplitude
        )
    else:
        # "strength" read as an amplitude multiplier: sigma pinned to the
        # range midpoint, amplitude drawn from the range instead
        mid = (cfg.kernel_sigma_range[0] + cfg.kernel_sigma_range[1]) / 2.0
        spec = sample_kernel_spec(
            rng, n, cfg.kernel_size_range, (mid, mid), amplitude=cfg.kernel_amplitude
        )
        amp = float(rng.uniform(cfg.kernel_sigma_range[0], cfg.kernel_sigma_range[1]))
        spec = replace(spec, amplitude=amp * cfg.kernel_amplitude)
    return build_kernel(spec, n)


def attack_batch(
    bundle: ModelBundle,
    images: np.ndarray,
    image_ids,
    prompts,
    target_text: str,
    cfg: AttackConfig,
    progress=None,
    checkpoint_every: int = 0,
):
    """Run one attack job over a batch of images.

    Per-image randomness (delta init, kernel sequence, transform draws) is
    seeded from (cfg.seed, image_id), so an image's streams do not depend on
    its batch neighbors. Returns a list of AdvExample; with
    ``checkpoint_every`` > 0 also returns {step: stacked deltas} snapshots.
    """
    if not bundle.frozen:
        raise ValidationError("attack requires a frozen model bundle")
    components = cfg.components
    tokenizer = bundle.tokenizer
    target = make_attack_target(tokenizer, target_text)
    prompt_ids = [tokenizer.encode(p) for p in prompts]

    B = images.shape[0]
    streams = [_streams(cfg, image_id) for image_id in image_ids]
    base = torch.from_numpy(np.ascontiguousarray(images.astype(np.float32)))
    delta = torch.from_numpy(
        np.stack([pgd_init(s.init, cfg.epsilon, images.shape[1:]) for s in streams])
    )
    # valid pixels from the start; epsilon clamp last (float32 round-off)
    bound = eps32_floor(cfg.epsilon)
    delta = ((base + delta).clamp(0.0, 1.0) - base).clamp(-bound, bound)

    n = bundle.spec.grid_side
    momentum = torch.zeros_like(base)
    losses = np.zeros((cfg.steps, B), dtype=np.float32)
    checkpoints = {}
    targets = [list(target.ids)] * B

    for step in range(1, cfg.steps + 1):
        delta_var = delta.clone().requires_grad_(True)
        x = base + delta_var

        if "di" in components or "sit" in components:
            x_chw = x.permute(0, 3, 1, 2)
            if "di" in components:
                x_chw = di_transform(
                    x_chw, [s.transform for s in streams], cfg.di_prob, cfg.di_resize_ratio
                )
            if "sit" in components:
                x_chw = sit_transform(x_chw, [s.transform for s in streams], cfg.sit_blocks)
            x = x_chw.permute(0, 2, 3, 1)

        kernel_flat = None
        if "dynvla" in components:
            grids = [_sample_iteration_kernel(cfg, s.kernel, n) for s in streams]
            kernel_flat = torch.from_numpy(
                np.stack([g.values.reshape(-1) for g in grids]).astype(np.float32)
            )

        per_sample = lm_loss_batch(bundle, x, prompt_ids, targets, kernel=kernel_flat)
        losses[step - 1] = per_sample.detach().numpy()
        total = per_sample.sum()
        (grad,) = torch.autograd.grad(total, delta_var)
        if not bool(torch.isfinite(grad).all()) or not np.all(np.isfinite(losses[step - 1])):
            raise NumericalFailureError("non-finite loss or gradient", iteration=step)

        grad_chw = grad.permute(0, 3, 1, 2)
        if "ti" in components:
            grad_chw = ti_smooth(grad_chw, cfg.ti_kernel_side)
        if "mi" in components:
            momentum_chw = momentum.permute(0, 3, 1, 2)
            momentum_chw, direction = mi_update(momentum_chw, grad_chw, cfg.momentum_mu)
            momentum = momentum_chw.permute(0, 2, 3, 1)
            step_grad = direction.permute(0, 2, 3, 1)
        else:
            step_grad = torch.sign(grad_chw).permute(0, 2, 3, 1)

        with torch.no_grad():
            if cfg.gradient_ascent:
                delta = pgd_step(delta, -step_grad, cfg.alpha, cfg.epsilon, base)
            else:
                delta = pgd_step(delta, step_grad, cfg.alpha, cfg.epsilon, base)

        if cfg.debug_invariants:
            assert float(delta.abs().max()) <= cfg.epsilon + 1e-9, "epsilon ball violated"
            adv = base + delta
            assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0, "pixel range violated"

        if checkpoint_every and step % checkpoint_every == 0:
            checkpoints[step] = delta.numpy().copy()
        if progress is not None and cfg.trace_every and step % cfg.trace_every == 0:
            progress(step, float(per_sample.mean()))

    delta_np = delta.numpy()
    adv_np = np.clip(images.astype(np.float32) + delta_np, 0.0, 1.0)
    examples = []
    for i, image_id in enumerate(image_ids):
        ex = AdvExample(
            delta=delta_np[i],
            adversarial_image=adv_np[i],
            image_id=image_id,
            surrogate_id=bundle.model_id,
            prompt=prompts[i],
            target_text=target_text,
            method=cfg.method,
            seed=derive_seed(cfg.seed, image_id, "init"),
            loss_trace=losses[:, i].copy(),
        )
        ex.validate(cfg.epsilon)
        examples.append(ex)
    if checkpoint_every:
        return examples, checkpoints
    return examples


def attack(
    bundle: ModelBundle, image, image_id: str, prompt: str, target_text: str, cfg: AttackConfig
) -> AdvExample:
    """Single-image convenience wrapper around :func:`attack_batch`."""
    images = np.asarray(image, dtype=np.float32)[None]
    return attack_batch(bundle, images, [image_id], [prompt], target_text, cfg)[0]
