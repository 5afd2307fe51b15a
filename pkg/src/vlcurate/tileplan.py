"""Tile planning and visual-token budgeting for high-resolution images.

Each image dimension is resized to the nearest multiple of a token cell
(patch size x pixel-shuffle ratio, 32 px by default), laid out on a grid of
encoder-input tiles (384 px), zero-padded right/bottom, and masked so padded
tokens are dropped.  ``compare_schemes`` prices the same image under two
fixed-grid resize schemes for comparison.

The arithmetic core works on numpy integer arrays so one code path serves
single images and exhaustive sweeps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

SCHEMES = ("nearest_cell", "fixed_multiple_grid", "fixed_width_grid")


@dataclass(frozen=True)
class ResolutionConfig:
    patch_size: int = 16
    pixel_shuffle_ratio: int = 2
    encoder_input: int = 384
    max_tiles: int = 24
    # Ceil to the next token-cell multiple instead of rounding to nearest.
    pad_up_only: bool = False
    # Add a global thumbnail tile to the fixed_multiple_grid comparator.
    thumbnail: bool = False

    def __post_init__(self):
        if self.patch_size < 1 or self.pixel_shuffle_ratio < 1:
            raise ConfigError("patch_size and pixel_shuffle_ratio must be >= 1")
        if self.max_tiles < 1:
            raise ConfigError("max_tiles must be >= 1")
        if self.encoder_input < 1 or self.encoder_input % self.token_cell:
            raise ConfigError(
                f"encoder_input {self.encoder_input} must be a positive multiple of the token cell {self.token_cell}"
            )

    @property
    def token_cell(self) -> int:
        return self.patch_size * self.pixel_shuffle_ratio

    @property
    def cells_per_tile_side(self) -> int:
        return self.encoder_input // self.token_cell

    @property
    def tokens_per_tile(self) -> int:
        return self.cells_per_tile_side**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TilePlan:
    original: tuple[int, int]
    resized: tuple[int, int]  # pre-snap size; differs from original only when downscaled
    snapped: tuple[int, int]
    token_grid: tuple[int, int]  # (cols, rows)
    tile_grid: tuple[int, int]  # (tiles_w, tiles_h)
    canvas: tuple[int, int]
    retained_tokens: int
    padded_tokens: int
    downscaled: bool
    mask: np.ndarray  # bool, shape (tiles_h * cells, tiles_w * cells)

    @property
    def tiles(self) -> int:
        return self.tile_grid[0] * self.tile_grid[1]

    @property
    def capacity(self) -> int:
        return self.retained_tokens + self.padded_tokens

    def to_dict(self, include_mask: bool = False) -> dict:
        d = {
            "original": list(self.original),
            "resized": list(self.resized),
            "snapped": list(self.snapped),
            "token_grid": list(self.token_grid),
            "tile_grid": list(self.tile_grid),
            "canvas": list(self.canvas),
            "tiles": self.tiles,
            "retained_tokens": self.retained_tokens,
            "padded_tokens": self.padded_tokens,
            "downscaled": self.downscaled,
        }
        if include_mask:
            d["mask"] = ["".join("1" if v else "0" for v in row) for row in self.mask]
        return d


@dataclass(frozen=True)
class TokenBudget:
    scheme: str
    resized: tuple[int, int]
    tiles: int
    tokens: int

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "resized": list(self.resized), "tiles": self.tiles, "tokens": self.tokens}


def _snap(dim, cell: int, pad_up_only: bool):
    dim = np.asarray(dim, dtype=np.int64)
    if pad_up_only:
        k = -(-dim // cell)
    else:
        # floor(dim / cell + 0.5) in exact integer arithmetic
        k = (2 * dim + cell) // (2 * cell)
    return np.maximum(k, 1) * cell


def _tiles(snapped_w, snapped_h, tile: int):
    return (-(-snapped_w // tile)) * (-(-snapped_h // tile))


def plan_arrays(W, H, cfg: ResolutionConfig | None = None) -> dict[str, np.ndarray]:
    """Vectorized planning core.

    Images whose snapped tile grid exceeds ``max_tiles`` are shrunk with
    aspect ratio preserved: the longer side is set to the largest integer
    for which the re-snapped grid still fits (found by bisection; the tile
    count is monotone in that side).
    """
    cfg = cfg or ResolutionConfig()
    W = np.asarray(W, dtype=np.int64)
    H = np.asarray(H, dtype=np.int64)
    if np.any(W < 1) or np.any(H < 1):
        raise ValueError("image dimensions must be >= 1")
    cell, tile = cfg.token_cell, cfg.encoder_input
    wide = W >= H
    long_side = np.where(wide, W, H)
    short_side = np.where(wide, H, W)

    def dims_for(m):
        s = np.maximum((2 * short_side * m + long_side) // (2 * long_side), 1)
        return np.where(wide, m, s), np.where(wide, s, m)

    def fits(m):
        w, h = dims_for(m)
        return _tiles(_snap(w, cell, cfg.pad_up_only), _snap(h, cell, cfg.pad_up_only), tile) <= cfg.max_tiles

    lo = np.ones_like(long_side)
    hi = long_side.copy()
    ok = fits(hi)
    lo = np.where(ok, hi, lo)
    # Invariant: fits(lo) holds and fits(hi) fails wherever lo < hi.
    while True:
        active = lo < hi - 1
        if not np.any(active):
            break
        mid = (lo + hi) // 2
        good = fits(mid)
        lo = np.where(active & good, mid, lo)
        hi = np.where(active & ~good, mid, hi)

    rw, rh = dims_for(lo)
    sw = _snap(rw, cell, cfg.pad_up_only)
    sh = _snap(rh, cell, cfg.pad_up_only)
    tw = -(-sw // tile)
    th = -(-sh // tile)
    cols, rows = sw // cell, sh // cell
    retained = cols * rows
    capacity = tw * th * cfg.tokens_per_tile
    return {
        "resized_w": rw,
        "resized_h": rh,
        "snapped_w": sw,
        "snapped_h": sh,
        "cols": cols,
        "rows": rows,
        "tiles_w": tw,
        "tiles_h": th,
        "retained": retained,
        "padded": capacity - retained,
        "downscaled": ~ok,
    }


def snap_dims(W: int, H: int, cfg: ResolutionConfig | None = None) -> tuple[int, int]:
    """Round each side to the nearest token-cell multiple, at least one cell."""
    cfg = cfg or ResolutionConfig()
    if W < 1 or H < 1:
        raise ValueError(f"image dimensions must be >= 1, got {W}x{H}")
    return int(_snap(W, cfg.token_cell, cfg.pad_up_only)), int(_snap(H, cfg.token_cell, cfg.pad_up_only))


def plan(W: int, H: int, cfg: ResolutionConfig | None = None) -> TilePlan:
    cfg = cfg or ResolutionConfig()
    if W < 1 or H < 1:
        raise ValueError(f"image dimensions must be >= 1, got {W}x{H}")
    r = {k: v.item() for k, v in plan_arrays(W, H, cfg).items()}
    side = cfg.cells_per_tile_side
    mask = np.zeros((r["tiles_h"] * side, r["tiles_w"] * side), dtype=bool)
    mask[: r["rows"], : r["cols"]] = True
    return TilePlan(
        original=(W, H),
        resized=(r["resized_w"], r["resized_h"]),
        snapped=(r["snapped_w"], r["snapped_h"]),
        token_grid=(r["cols"], r["rows"]),
        tile_grid=(r["tiles_w"], r["tiles_h"]),
        canvas=(r["tiles_w"] * cfg.encoder_input, r["tiles_h"] * cfg.encoder_input),
        retained_tokens=r["retained"],
        padded_tokens=r["padded"],
        downscaled=bool(r["downscaled"]),
        mask=mask,
    )


def _fixed_multiple_grid(W: int, H: int, cfg: ResolutionConfig) -> tuple[int, int]:
    """Grid whose aspect ratio is closest to the image's.

    Among equally close grids, the smallest one whose canvas covers the image
    in both dimensions is used, or the largest when none does.
    """
    aspect = W / H
    grids = [(gw, gh) for gh in range(1, cfg.max_tiles + 1) for gw in range(1, cfg.max_tiles // gh + 1)]
    best_diff = min(abs(gw / gh - aspect) for gw, gh in grids)
    tied = sorted(
        ((gw, gh) for gw, gh in grids if abs(gw / gh - aspect) - best_diff <= 1e-12),
        key=lambda g: (g[0] * g[1], g[0]),
    )
    tile = cfg.encoder_input
    for gw, gh in tied:
        if gw * tile >= W and gh * tile >= H:
            return gw, gh
    return tied[-1]


def compare_schemes(W: int, H: int, cfg: ResolutionConfig | None = None, scheme: str = "nearest_cell") -> TokenBudget:
    """Visual-token cost of one image under a resize scheme."""
    cfg = cfg or ResolutionConfig()
    if W < 1 or H < 1:
        raise ValueError(f"image dimensions must be >= 1, got {W}x{H}")
    per_tile = cfg.tokens_per_tile
    tile = cfg.encoder_input
    if scheme == "nearest_cell":
        p = plan(W, H, cfg)
        return TokenBudget(scheme, p.snapped, p.tiles, p.retained_tokens)
    if scheme == "fixed_multiple_grid":
        gw, gh = _fixed_multiple_grid(W, H, cfg)
        tiles = gw * gh + (1 if cfg.thumbnail else 0)
        return TokenBudget(scheme, (gw * tile, gh * tile), tiles, tiles * per_tile)
    if scheme == "fixed_width_grid":
        # one row of tiles wide enough to cover the original width
        gw = min(max(-(-W // tile), 1), cfg.max_tiles)
        return TokenBudget(scheme, (gw * tile, tile), gw, gw * per_tile)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def distortion(W: int, H: int, W2: int, H2: int) -> float:
    """Product of per-axis scale deviations, max(W2/W, W/W2) * max(H2/H, H/H2)."""
    return max(W2 / W, W / W2) * max(H2 / H, H / H2)
