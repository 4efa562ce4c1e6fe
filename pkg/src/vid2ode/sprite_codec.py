"""Learned scene assets and the differentiable sprite compositor.

A frame is reconstructed by alpha-compositing one small sprite per object onto
a shared background, with the sprite window written at continuous pixel
coordinates through bilinear weights. The compositor supplies analytic
gradients of the reconstruction error with respect to the coordinates and all
assets; a normalized-cross-correlation encoder provides the inverse map from a
frame back to coordinates for initialization.

Geometry convention: coordinates are (x, y) = (column, row) of the sprite
center; a w-wide sprite at integer coordinates covers pixels
[y - (w-1)/2, x - (w-1)/2] onward, which makes integer placements exact
pastes. Bilinear writing spreads each sprite over a (w+1) x (w+1) footprint.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .arrayio import load_array, save_array
from .errors import InitializationFailedError, LowConfidenceError


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class SceneAssets:
    """Trainable background plus per-object sprite intensities and alpha logits."""

    background: np.ndarray          # [H, W] in [0, 1]
    sprites: np.ndarray             # [n, w, w] in [0, 1]
    alpha_logits: np.ndarray        # [n, w, w] real

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float)
        self.sprites = np.asarray(self.sprites, dtype=float)
        self.alpha_logits = np.asarray(self.alpha_logits, dtype=float)

    @property
    def n_objects(self) -> int:
        return self.sprites.shape[0]

    @property
    def window(self) -> int:
        return self.sprites.shape[1]

    def alphas(self) -> np.ndarray:
        return _sigmoid(self.alpha_logits)

    def copy(self) -> "SceneAssets":
        return SceneAssets(self.background.copy(), self.sprites.copy(), self.alpha_logits.copy())

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_array(directory / "background", self.background, role="background")
        for k in range(self.n_objects):
            save_array(directory / f"sprite{k}", self.sprites[k], role="sprite", object=k)
            save_array(directory / f"alpha_logits{k}", self.alpha_logits[k], role="alpha_logits", object=k)

    @classmethod
    def load(cls, directory) -> "SceneAssets":
        directory = Path(directory)
        bg, _ = load_array(directory / "background")
        sprites, logits = [], []
        k = 0
        while (directory / f"sprite{k}.f32").exists():
            sprites.append(load_array(directory / f"sprite{k}")[0])
            logits.append(load_array(directory / f"alpha_logits{k}")[0])
            k += 1
        return cls(bg, np.stack(sprites), np.stack(logits))


# ---------------------------------------------------------------------------
# bilinear footprint machinery


def _pad1(a):
    return np.pad(a, 1)


def _geometry(coords_k, w, H, W):
    """Footprint bases, fractional offsets, flat pixel indices and validity.

    coords_k: [N, 2] sprite-center (x, y). The footprint is the (w+1)^2 pixel
    block whose top-left corner is floor(center - (w-1)/2).
    """
    c = np.asarray(coords_k, dtype=float)
    corner = c - (w - 1) / 2.0
    base = np.floor(corner).astype(int)          # [N, 2] (bx, by)
    frac = corner - base                          # fx, fy in [0, 1)
    W1 = w + 1
    ii = np.arange(W1)
    rows = base[:, 1, None, None] + ii[None, :, None]
    cols = base[:, 0, None, None] + ii[None, None, :]
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    flat = np.clip(rows, 0, H - 1) * W + np.clip(cols, 0, W - 1)
    return base, frac[:, 0], frac[:, 1], flat, valid


def _splat(padded, fx, fy):
    """Sample a zero-padded (w+2)^2 sprite on the (w+1)^2 footprint grid."""
    W1 = padded.shape[0] - 1
    a00 = padded[0:W1, 0:W1]
    a01 = padded[0:W1, 1:W1 + 1]
    a10 = padded[1:W1 + 1, 0:W1]
    a11 = padded[1:W1 + 1, 1:W1 + 1]
    w00 = (fy * fx)[:, None, None]
    w01 = (fy * (1 - fx))[:, None, None]
    w10 = ((1 - fy) * fx)[:, None, None]
    w11 = ((1 - fy) * (1 - fx))[:, None, None]
    return w00 * a00 + w01 * a01 + w10 * a10 + w11 * a11


def _splat_dx(padded, fx, fy):
    """d/d(center x) of _splat (fx enters the weights linearly)."""
    W1 = padded.shape[0] - 1
    a00 = padded[0:W1, 0:W1]
    a01 = padded[0:W1, 1:W1 + 1]
    a10 = padded[1:W1 + 1, 0:W1]
    a11 = padded[1:W1 + 1, 1:W1 + 1]
    return fy[:, None, None] * (a00 - a01) + (1 - fy)[:, None, None] * (a10 - a11)


def _splat_dy(padded, fx, fy):
    W1 = padded.shape[0] - 1
    a00 = padded[0:W1, 0:W1]
    a01 = padded[0:W1, 1:W1 + 1]
    a10 = padded[1:W1 + 1, 0:W1]
    a11 = padded[1:W1 + 1, 1:W1 + 1]
    return fx[:, None, None] * (a00 - a10) + (1 - fx)[:, None, None] * (a01 - a11)


def _splat_vjp(cot, fx, fy, w):
    """Accumulate footprint cotangents back onto the padded sprite grid."""
    W1 = w + 1
    c_pad = np.zeros((w + 2, w + 2))
    w00 = fy * fx
    w01 = fy * (1 - fx)
    w10 = (1 - fy) * fx
    w11 = (1 - fy) * (1 - fx)
    c_pad[0:W1, 0:W1] += np.einsum("n,nij->ij", w00, cot)
    c_pad[0:W1, 1:W1 + 1] += np.einsum("n,nij->ij", w01, cot)
    c_pad[1:W1 + 1, 0:W1] += np.einsum("n,nij->ij", w10, cot)
    c_pad[1:W1 + 1, 1:W1 + 1] += np.einsum("n,nij->ij", w11, cot)
    return c_pad[1:w + 1, 1:w + 1]


def _footprints_overlap(bases, w):
    """Per-frame flag: any two object footprints share a pixel."""
    N, n = bases.shape[0], bases.shape[1]
    flag = np.zeros(N, dtype=bool)
    for a in range(n):
        for b in range(a + 1, n):
            d = np.abs(bases[:, a] - bases[:, b])
            flag |= (d[:, 0] <= w) & (d[:, 1] <= w)
    return flag


class CompositeObjective:
    """Mean-squared reconstruction error of a fixed frame set, slab-sparse.

    Frames whose object footprints are pairwise disjoint go through a fully
    vectorized path that only ever touches the (w+1)^2 pixels under each
    sprite; the rest (overlapping sprites, a transient state during
    optimization) fall back to an exact dense per-frame composite. Set
    force_dense=True to route everything through the dense path (used to
    cross-check the sparse one).
    """

    def __init__(self, frames: np.ndarray, force_dense: bool = False):
        frames = np.asarray(frames, dtype=float)
        if frames.ndim == 2:
            frames = frames[None]
        self.M, self.H, self.W = frames.shape
        self.frames_flat = frames.reshape(self.M, -1)
        self.sum1 = frames.sum(axis=0)
        self.sum2 = (frames ** 2).sum(axis=0)
        self.force_dense = force_dense

    @property
    def n_pixels(self):
        return self.M * self.H * self.W

    def loss_and_grads(self, coords: np.ndarray, assets: SceneAssets):
        """Returns (loss, grads) with grads for coords and every asset group.

        coords: [M, n, 2] sprite centers per frame per object.
        """
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 2:
            coords = coords[None]
        if coords.shape[0] != self.M:
            raise ValueError(f"expected coords for {self.M} frames, got {coords.shape[0]}")
        n = assets.n_objects
        w = assets.window
        H, W = self.H, self.W
        bg = assets.background
        alphas = assets.alphas()
        prem = assets.sprites * alphas
        pads_a = [_pad1(alphas[k]) for k in range(n)]
        pads_p = [_pad1(prem[k]) for k in range(n)]

        geom = [_geometry(coords[:, k], w, H, W) for k in range(n)]
        bases = np.stack([g[0] for g in geom], axis=1)  # [M, n, 2]
        dense = np.zeros(self.M, dtype=bool) if self.force_dense is False else np.ones(self.M, dtype=bool)
        if n > 1 and not self.force_dense:
            dense = _footprints_overlap(bases, w)

        loss_sum = float(np.sum(self.M * bg ** 2 - 2.0 * bg * self.sum1 + self.sum2))
        g_coords = np.zeros_like(coords)
        g_bg_flat = 2.0 * (self.M * bg - self.sum1).ravel()
        g_sprites = np.zeros_like(assets.sprites)
        g_logits = np.zeros_like(assets.alpha_logits)

        sparse_idx = np.flatnonzero(~dense)
        if sparse_idx.size:
            sel = sparse_idx[:, None, None]
            for k in range(n):
                base, fx, fy, flat, valid = geom[k]
                fx_s, fy_s = fx[sparse_idx], fy[sparse_idx]
                flat_s, valid_s = flat[sparse_idx], valid[sparse_idx]
                A = _splat(pads_a[k], fx_s, fy_s) * valid_s
                P = _splat(pads_p[k], fx_s, fy_s) * valid_s
                U = bg.ravel()[flat_s]
                I = self.frames_flat[sel, flat_s]
                E = U * (1.0 - A) + P
                loss_sum += float(np.sum((E - I) ** 2 - (U - I) ** 2))
                # backward
                cE = 2.0 * (E - I)
                cU = cE * (1.0 - A) - 2.0 * (U - I)
                cA = cE * (-U) * valid_s
                cP = cE * valid_s
                g_bg_flat += np.bincount(flat_s.ravel(), weights=(cU * valid_s).ravel(),
                                         minlength=H * W)
                dAx = _splat_dx(pads_a[k], fx_s, fy_s)
                dAy = _splat_dy(pads_a[k], fx_s, fy_s)
                dPx = _splat_dx(pads_p[k], fx_s, fy_s)
                dPy = _splat_dy(pads_p[k], fx_s, fy_s)
                g_coords[sparse_idx, k, 0] = np.sum(cA * dAx + cP * dPx, axis=(1, 2))
                g_coords[sparse_idx, k, 1] = np.sum(cA * dAy + cP * dPy, axis=(1, 2))
                cAk = _splat_vjp(cA, fx_s, fy_s, w)
                cPk = _splat_vjp(cP, fx_s, fy_s, w)
                g_sprites[k] += cPk * alphas[k]
                cAlpha = cAk + cPk * assets.sprites[k]
                g_logits[k] += cAlpha * alphas[k] * (1.0 - alphas[k])

        for m in np.flatnonzero(dense):
            canvas = bg.ravel().copy()
            caches = []
            for k in range(n):
                base, fx, fy, flat, valid = geom[k]
                A = _splat(pads_a[k], fx[m:m + 1], fy[m:m + 1])[0] * valid[m]
                P = _splat(pads_p[k], fx[m:m + 1], fy[m:m + 1])[0] * valid[m]
                U = canvas[flat[m]]
                E = U * (1.0 - A) + P
                canvas[flat[m][valid[m]]] = E[valid[m]]
                caches.append((A, P, U))
            I = self.frames_flat[m]
            loss_sum += float(np.sum((canvas - I) ** 2) - np.sum((bg.ravel() - I) ** 2))
            c_canvas = 2.0 * (canvas - I)
            for k in reversed(range(n)):
                base, fx, fy, flat, valid = geom[k]
                A, P, U = caches[k]
                cE = c_canvas[flat[m]] * valid[m]
                cU = cE * (1.0 - A)
                c_canvas[flat[m][valid[m]]] = cU[valid[m]]
                cA = cE * (-U)
                cP = cE
                f1, v1 = fx[m:m + 1], fy[m:m + 1]
                g_coords[m, k, 0] += np.sum(cA * _splat_dx(pads_a[k], f1, v1)[0]
                                            + cP * _splat_dx(pads_p[k], f1, v1)[0])
                g_coords[m, k, 1] += np.sum(cA * _splat_dy(pads_a[k], f1, v1)[0]
                                            + cP * _splat_dy(pads_p[k], f1, v1)[0])
                cAk = _splat_vjp(cA[None], f1, v1, w)
                cPk = _splat_vjp(cP[None], f1, v1, w)
                g_sprites[k] += cPk * alphas[k]
                cAlpha = cAk + cPk * assets.sprites[k]
                g_logits[k] += cAlpha * alphas[k] * (1.0 - alphas[k])
            g_bg_flat += c_canvas - 2.0 * (bg.ravel() - I)

        inv = 1.0 / self.n_pixels
        grads = {
            "coords": g_coords * inv,
            "background": g_bg_flat.reshape(H, W) * inv,
            "sprites": g_sprites * inv,
            "alpha_logits": g_logits * inv,
        }
        return loss_sum * inv, grads


def decode(coords: np.ndarray, assets: SceneAssets, frame_shape=None) -> np.ndarray:
    """Composite every sprite onto the background at the given coordinates.

    coords [n, 2] yields one frame; [M, n, 2] yields a stack. Sprite windows
    reaching past the frame border are cropped silently.
    """
    coords = np.asarray(coords, dtype=float)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
    H, W = frame_shape if frame_shape is not None else assets.background.shape
    M = coords.shape[0]
    n, w = assets.n_objects, assets.window
    alphas = assets.alphas()
    prem = assets.sprites * alphas
    out = np.broadcast_to(assets.background, (M, H, W)).copy().reshape(M, -1)
    for k in range(n):
        base, fx, fy, flat, valid = _geometry(coords[:, k], w, H, W)
        A = _splat(_pad1(alphas[k]), fx, fy) * valid
        P = _splat(_pad1(prem[k]), fx, fy) * valid
        for m in range(M):
            U = out[m, flat[m]]
            E = U * (1.0 - A[m]) + P[m]
            out[m, flat[m][valid[m]]] = E[valid[m]]
    frames = np.clip(out.reshape(M, H, W), 0.0, 1.0)
    return frames[0] if single else frames


def recon_loss_grad(frames: np.ndarray, coords: np.ndarray, assets: SceneAssets):
    """Mean squared pixel error between frames and decode(coords), with grads."""
    return CompositeObjective(frames).loss_and_grads(coords, assets)


def estimate_background(frames: np.ndarray) -> np.ndarray:
    """Per-pixel temporal median over at least 3 frames."""
    frames = np.asarray(frames, dtype=float)
    if frames.shape[0] < 3:
        raise ValueError(f"need at least 3 frames to estimate a background, got {frames.shape[0]}")
    return np.median(frames, axis=0)


def init_objects(frames: np.ndarray, background: np.ndarray, n: int, window: int = 16,
                 rel_threshold: float = 0.3):
    """Coarse localization by background subtraction and component tracking.

    Thresholds |frame - background|, keeps the n strongest connected
    components per frame, fixes object identity by nearest-neighbour matching
    to the previous frame, and crops initial sprite/alpha-logit guesses around
    the first-frame centroids. Returns (sprites0, logits0, coords [m, n, 2]).
    """
    frames = np.asarray(frames, dtype=float)
    m, H, W = frames.shape
    diff = np.abs(frames - background)
    thr = max(0.05, rel_threshold * float(diff.max()))
    coords = np.zeros((m, n, 2))
    first_masks = None
    prev = None
    for j in range(m):
        labels, count = ndimage.label(diff[j] > thr)
        if count < n:
            raise InitializationFailedError(j, f"found {count} components, need {n}")
        masses = ndimage.sum_labels(diff[j], labels, index=np.arange(1, count + 1))
        keep = np.argsort(masses)[::-1][:n] + 1
        cents = ndimage.center_of_mass(diff[j], labels, index=list(keep))
        pts = np.array([(cx, cy) for cy, cx in cents])  # to (x, y)
        if prev is None:
            order = np.lexsort((pts[:, 0], pts[:, 1]))  # by row, then column
            pts = pts[order]
            keep = keep[order]
            first_masks = [labels == lab for lab in keep]
        elif n > 1:
            # small n: pick the assignment closest to the previous frame
            perms = _permutations(n)
            costs = [np.sum((pts[p] - prev) ** 2) for p in perms]
            pts = pts[perms[int(np.argmin(costs))]]
        coords[j] = pts
        prev = pts

    sprites0 = np.zeros((n, window, window))
    logits0 = np.full((n, window, window), -2.0)
    for k in range(n):
        cx, cy = coords[0, k]
        r0 = int(round(cy)) - (window - 1) // 2
        c0 = int(round(cx)) - (window - 1) // 2
        for a in range(window):
            for b in range(window):
                rr, cc = r0 + a, c0 + b
                if 0 <= rr < H and 0 <= cc < W:
                    sprites0[k, a, b] = frames[0, rr, cc]
                    if first_masks[k][rr, cc]:
                        logits0[k, a, b] = 2.0
    return sprites0, logits0, coords


def _permutations(n):
    import itertools

    return [np.array(p) for p in itertools.permutations(range(n))]


def _ncc_surface(img: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of a template over all valid placements."""
    w = template.shape[0]
    tz = template - template.mean()
    nt = float(np.sqrt(np.sum(tz ** 2)))
    if nt < 1e-9:
        raise ValueError("degenerate template (no contrast)")
    windows = np.lib.stride_tricks.sliding_window_view(img, (w, w))
    s1 = windows.sum(axis=(2, 3))
    s2 = np.einsum("abij,abij->ab", windows, windows)
    num = np.einsum("abij,ij->ab", windows, tz)
    var = np.maximum(s2 - s1 ** 2 / (w * w), 0.0)
    den = np.sqrt(var) * nt
    return np.where(den > 1e-9, num / np.where(den > 1e-9, den, 1.0), 0.0)


def _soft_argmax_peak(ncc: np.ndarray, w: int, temperature: float):
    """Integer peak refined by a soft-argmax over the surrounding 5x5 window.

    The temperature acts on the window normalized to its own range, so 0.5
    means weights spanning roughly exp(-2)..1 regardless of surface contrast.
    """
    peak = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    cmax = float(ncc[peak])
    r0, r1 = max(peak[0] - 2, 0), min(peak[0] + 3, ncc.shape[0])
    c0, c1 = max(peak[1] - 2, 0), min(peak[1] + 3, ncc.shape[1])
    win = ncc[r0:r1, c0:c1]
    span = max(cmax - float(win.min()), 1e-9)
    wgt = np.exp((win - cmax) / (temperature * span))
    rows = np.arange(r0, r1)[:, None]
    cols = np.arange(c0, c1)[None, :]
    total = float(wgt.sum())
    py = float(np.sum(wgt * rows)) / total
    px = float(np.sum(wgt * cols)) / total
    return np.array([px + (w - 1) / 2.0, py + (w - 1) / 2.0]), cmax


def encode_ncc(frame: np.ndarray, assets: SceneAssets, k: int, temperature: float = 0.5,
               conf_ratio: float = 3.0, refine_iters: int = 2):
    """Locate object k in a frame by normalized cross-correlation.

    The alpha-weighted sprite is slid over the frame and the integer peak is
    refined by a soft-argmax over a 5x5 window. The soft-argmax carries a
    placement-phase-dependent bias of up to ~0.4 px, so the same estimator is
    re-run on synthetic renders at the current estimate and the measured bias
    subtracted (refine_iters rounds). Returns (x, y) clamped to [0, H].
    Raises LowConfidenceError when the correlation surface is flat.
    """
    frame = np.asarray(frame, dtype=float)
    H, W = frame.shape
    w = assets.window
    template = assets.sprites[k] * assets.alphas()[k]
    try:
        ncc = _ncc_surface(frame, template)
    except ValueError:
        raise ValueError(f"degenerate template for object {k} (no alpha mass)")

    cmax = float(ncc.max())
    flat_mean = float(np.mean(np.abs(ncc)))
    if cmax <= 1e-9 or flat_mean <= 1e-12 or cmax < conf_ratio * flat_mean:
        raise LowConfidenceError(
            f"object {k}: correlation peak {cmax:.4f} below {conf_ratio}x surface mean {flat_mean:.4f}"
        )
    est_frame, _ = _soft_argmax_peak(ncc, w, temperature)
    p = est_frame.copy()
    for _ in range(refine_iters):
        synth = _single_object_render_frame(p, assets, k, frame.shape)
        est_synth, _ = _soft_argmax_peak(_ncc_surface(synth, template), w, temperature)
        p = p + (est_frame - est_synth)
    x = float(np.clip(p[0], 0.0, W))
    y = float(np.clip(p[1], 0.0, H))
    return x, y


def _single_object_render_frame(p, assets: SceneAssets, k: int, shape):
    """Render only object k on the background at position p (for calibration)."""
    solo = SceneAssets(assets.background, assets.sprites[k:k + 1], assets.alpha_logits[k:k + 1])
    return decode(np.asarray(p, dtype=float)[None], solo, frame_shape=shape)
