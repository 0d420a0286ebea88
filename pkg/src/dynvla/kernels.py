"""Clipped 2D Gaussian kernels and their injection into attention maps.

A kernel is sampled fresh each attack iteration: a center drawn uniformly
from the n x n visual-token grid, an odd support side m, and a variance
parameter sigma. The kernel is added to the attention probabilities over
the visual keys and each row is renormalized so it still sums to one.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of one clipped Gaussian bump on the visual-token grid."""

    mu1: int
    mu2: int
    sigma: float
    support: int
    amplitude: float = 1.0

    def validate(self, n: int) -> None:
        if not (0 <= self.mu1 < n and 0 <= self.mu2 < n):
            raise ValidationError(
                f"kernel center ({self.mu1},{self.mu2}) outside {n}x{n} grid"
            )
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.support % 2 == 0 or not (1 <= self.support <= n):
            raise ValidationError(
                f"support must be odd and in [1,{n}], got {self.support}"
            )
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")


@dataclass(frozen=True)
class KernelGrid:
    """An n x n grid of kernel values, zero outside the clipped support box."""

    values: np.ndarray  # (n, n) float64, non-negative
    support_box: tuple[int, int, int, int]  # (row_lo, row_hi, col_lo, col_hi) half-open

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class AttentionMap:
    """Post-softmax attention rows plus the key range holding visual tokens.

    ``rows`` is (Q, K) with queries*heads flattened into Q. ``key_mask``,
    when given, marks which keys each row may attend to (causal masking);
    kernel mass is never added to an invisible key.
    """

    rows: np.ndarray | torch.Tensor
    visual_key_span: tuple[int, int]  # half-open [start, stop)
    key_mask: np.ndarray | torch.Tensor | None = None


def sample_kernel_spec(
    rng: np.random.Generator,
    n: int,
    size_range: tuple[int, int],
    sigma_range: tuple[float, float],
    amplitude: float = 1.0,
) -> KernelSpec:
    """Draw one kernel spec: uniform center, odd support from size_range,
    sigma uniform over sigma_range.

    Draw order is fixed (center row, center col, support, sigma) so a seeded
    generator yields a reproducible spec sequence.
    """
    lo, hi = int(size_range[0]), int(size_range[1])
    if lo > hi or lo < 1 or hi > n:
        raise ValidationError(f"size_range {size_range} empty or outside [1,{n}]")
    sides = [m for m in range(lo, hi + 1) if m % 2 == 1]
    if not sides:
        raise ValidationError(f"size_range {size_range} contains no odd side")
    s_lo, s_hi = float(sigma_range[0]), float(sigma_range[1])
    if s_lo <= 0 or s_hi < s_lo:
        raise ValidationError(f"sigma_range {sigma_range} empty or non-positive")

    mu1 = int(rng.integers(0, n))
    mu2 = int(rng.integers(0, n))
    support = int(sides[rng.integers(0, len(sides))])
    sigma = s_lo if s_hi == s_lo else float(rng.uniform(s_lo, s_hi))
    return KernelSpec(mu1=mu1, mu2=mu2, sigma=sigma, support=support, amplitude=amplitude)


def build_kernel(spec: KernelSpec, n: int) -> KernelGrid:
    """Evaluate the Gaussian bump on the grid, clipped to its m x m window.

    values[x, y] = amplitude / (2*pi*sigma^2) * exp(-((x-mu1)^2 + (y-mu2)^2)
    / (2*sigma^2)) inside the window centered at (mu1, mu2) intersected with
    the grid; zero elsewhere. The window is truncated at grid edges, never
    shifted.
    """
    spec.validate(n)
    half = (spec.support - 1) // 2
    r_lo, r_hi = max(0, spec.mu1 - half), min(n, spec.mu1 + half + 1)
    c_lo, c_hi = max(0, spec.mu2 - half), min(n, spec.mu2 + half + 1)

    values = np.zeros((n, n), dtype=np.float64)
    xs = np.arange(r_lo, r_hi, dtype=np.float64)[:, None]
    ys = np.arange(c_lo, c_hi, dtype=np.float64)[None, :]
    sq = (xs - spec.mu1) ** 2 + (ys - spec.mu2) ** 2
    coeff = spec.amplitude / (2.0 * np.pi * spec.sigma**2)
    values[r_lo:r_hi, c_lo:c_hi] = coeff * np.exp(-sq / (2.0 * spec.sigma**2))
    return KernelGrid(values=values, support_box=(r_lo, r_hi, c_lo, c_hi))


def row_major_layout(n: int) -> np.ndarray:
    """Sequence position of grid cell (i, j) relative to the span start."""
    return np.arange(n * n, dtype=np.int64)


def flatten_kernel(kernel: KernelGrid, layout: np.ndarray | None = None) -> np.ndarray:
    """Map the grid onto span-relative key positions via the layout."""
    flat_grid = kernel.values.reshape(-1)
    if layout is None:
        return flat_grid
    out = np.zeros_like(flat_grid)
    out[layout] = flat_grid
    return out


def inject(
    attn: AttentionMap,
    kernel: KernelGrid,
    layout: np.ndarray | None = None,
) -> AttentionMap:
    """Add the kernel over the visual keys of every row, then renormalize.

    Non-visual keys are untouched by the addition; the whole row is divided
    by its new total so it sums to one again. An all-zero kernel returns the
    input rows unchanged bit-exactly. Differentiable when ``attn.rows`` is a
    torch tensor.
    """
    start, stop = attn.visual_key_span
    n = kernel.n
    if stop - start != n * n:
        raise ShapeError("visual key span", n * n, stop - start)

    rows = attn.rows
    if not np.any(kernel.values):
        return AttentionMap(rows=rows, visual_key_span=attn.visual_key_span, key_mask=attn.key_mask)

    flat = flatten_kernel(kernel, layout)
    if isinstance(rows, torch.Tensor):
        add = torch.zeros_like(rows)
        add[..., start:stop] = torch.as_tensor(flat, dtype=rows.dtype, device=rows.device)
        if attn.key_mask is not None:
            add = add * torch.as_tensor(attn.key_mask, dtype=rows.dtype, device=rows.device)
        new = rows + add
        new = new / new.sum(dim=-1, keepdim=True)
    else:
        add = np.zeros_like(rows)
        add[..., start:stop] = flat.astype(rows.dtype)
        if attn.key_mask is not None:
            add = add * np.asarray(attn.key_mask, dtype=rows.dtype)
        new = rows + add
        new = new / new.sum(axis=-1, keepdims=True)
    return AttentionMap(rows=new, visual_key_span=attn.visual_key_span, key_mask=attn.key_mask)


def inject_probs(
    probs: torch.Tensor,
    kernel_flat: torch.Tensor,
    span: tuple[int, int],
    key_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Batched in-model variant of :func:`inject`.

    ``probs`` is (..., Q, K) post-softmax; ``kernel_flat`` is (B, n*n) and
    broadcasts over heads and query rows. ``key_mask`` (broadcastable to
    probs) zeroes additions on keys a row cannot see. Skips work when every
    kernel is zero so a zero-amplitude run matches the unperturbed forward
    bit-exactly.
    """
    if not bool((kernel_flat != 0).any()):
        return probs
    start, stop = span
    add = torch.zeros_like(probs)
    width = kernel_flat.shape[-1]
    if stop - start != width:
        raise ShapeError("visual key span", width, stop - start)
    # (B, n*n) -> (B, 1, 1, n*n) against (B, H, Q, K) slices
    expand = kernel_flat.view(kernel_flat.shape[0], *([1] * (probs.dim() - 2)), width)
    add[..., start:stop] = expand.to(probs.dtype)
    if key_mask is not None:
        add = add * key_mask.to(probs.dtype)
    new = probs + add
    return new / new.sum(dim=-1, keepdim=True)
