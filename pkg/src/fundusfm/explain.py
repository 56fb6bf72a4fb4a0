"""Saliency maps and embedding projections.

Grad-CAM targets the raw logit of the requested class: channel weights are
the spatially averaged gradients at the final convolutional stage, the
weighted activation sum is ReLU'd, bilinearly upsampled, and min-max
normalized. Targeting the raw logit (not softmax) keeps the map exactly
invariant to shifts of other classes' logits.

The t-SNE here is a direct O(N^2) implementation rather than a library call:
the desk-scale N is tiny, and the tests need access to the conditional
affinity rows, a per-iteration KL trace, and strict seed determinism. The
last half of the iterations runs plain gradient descent with a backtracking
step, which keeps the KL non-increasing to within float noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .models import ModelBundle, to_model_input

OVERLAY_ALPHA = 0.4


@dataclass(frozen=True)
class SaliencyMap:
    heatmap: np.ndarray          # resolution x resolution in [0, 1]
    target_class: int
    source_layer: str
    record_ref: str | None = None
    degenerate: bool = False
    raw_shape: tuple[int, int] = (0, 0)   # pre-upsample feature-map dims

    def __post_init__(self):
        h = self.heatmap
        if h.ndim != 2:
            raise DataError("heatmap must be 2-D")
        if h.min() < 0.0 or h.max() > 1.0:
            raise DataError("heatmap values must lie in [0, 1]")
        if not self.degenerate and h.max() != 1.0:
            raise DataError("non-degenerate heatmap must peak at 1.0")


@dataclass(frozen=True)
class EmbeddingProjection:
    coords: np.ndarray           # N x 2
    labels: np.ndarray
    perplexity: float
    seed: int
    kl_trace: tuple = field(default=())

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DataError("projection coords must be N x 2")
        if len(self.labels) != len(self.coords):
            raise DataError("labels must align with coords")
        if not np.isfinite(self.coords).all():
            raise DataError("projection coords must be finite")


def grad_cam(bundle: ModelBundle, image: np.ndarray, target_class: int,
             source_layer: str = "layer4",
             record_ref: str | None = None) -> SaliencyMap:
    """Class activation map for one preprocessed image.

    ``image`` is the normalized H x W x 3 array the model consumes; the
    heatmap comes back at the same spatial size.
    """
    if bundle.is_segmentation:
        raise ConfigError("grad_cam applies to classification bundles")
    x = to_model_input(image)
    if x.shape[0] != 1:
        raise DataError("grad_cam takes a single image")
    layer = getattr(bundle.backbone, source_layer, None)
    if layer is None:
        raise ConfigError(f"backbone has no stage named {source_layer!r}")

    bundle.backbone.eval()
    bundle.head.eval()
    captured: dict = {}

    def keep_activation(module, args, output):
        captured["activation"] = output

    handle = layer.register_forward_hook(keep_activation)
    try:
        feats = bundle.backbone(x)
        logits = bundle.head(feats.mean(dim=(2, 3)))
    finally:
        handle.remove()
    if not (0 <= target_class < logits.shape[1]):
        raise ConfigError(f"target class {target_class} out of range for a "
                          f"{logits.shape[1]}-logit head")
    activation = captured["activation"]
    grads = torch.autograd.grad(logits[0, target_class], activation)[0]

    weights = grads.mean(dim=(2, 3))
    cam = F.relu((weights[:, :, None, None] * activation).sum(dim=1,
                                                              keepdim=True))
    raw_shape = tuple(cam.shape[2:])
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear",
                        align_corners=False)[0, 0].detach().numpy()
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= 0.0:
        return SaliencyMap(heatmap=np.zeros_like(cam), target_class=target_class,
                           source_layer=source_layer, record_ref=record_ref,
                           degenerate=True, raw_shape=raw_shape)
    if hi == lo:  # constant positive map: normalization is the identity scale
        heat = np.ones_like(cam)
    else:
        heat = (cam - lo) / (hi - lo)
    return SaliencyMap(heatmap=heat, target_class=target_class,
                       source_layer=source_layer, record_ref=record_ref,
                       degenerate=False, raw_shape=raw_shape)


# --------------------------------------------------------------------------
# t-SNE


def conditional_affinities(embeddings: np.ndarray, perplexity: float,
                           tol: float = 1e-5,
                           max_search: int = 64) -> np.ndarray:
    """Row-stochastic conditional affinities P(j|i) with per-row precision
    found by binary search so each row's entropy matches log(perplexity)."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    sq_norms = (X ** 2).sum(axis=1)
    distances = sq_norms[:, None] + sq_norms[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(distances, 0.0)
    distances = np.maximum(distances, 0.0)
    target_entropy = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(distances[i], i)
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        for _ in range(max_search):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                entropy = 0.0
                probs = np.zeros_like(w)
            else:
                probs = w / total
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log(probs[nz]))
            if abs(entropy - target_entropy) < tol:
                break
            if entropy > target_entropy:
                beta_lo = beta
                beta = beta * 2.0 if np.isinf(beta_hi) else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        row = np.insert(probs, i, 0.0)
        P[i] = row
    return P


def _kl_and_grad(Y: np.ndarray, P: np.ndarray) -> tuple[float, np.ndarray]:
    sq_norms = (Y ** 2).sum(axis=1)
    sq = sq_norms[:, None] + sq_norms[None, :] - 2.0 * Y @ Y.T
    num = 1.0 / (1.0 + np.maximum(sq, 0.0))
    np.fill_diagonal(num, 0.0)
    denom = num.sum()
    Q = np.maximum(num / denom, 1e-12)
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))
    PQ = (P - Q) * num
    grad = 4.0 * ((np.diag(PQ.sum(axis=1)) - PQ) @ Y)
    return kl, grad


def tsne_project(embeddings: np.ndarray, labels=None, perplexity: float = 30.0,
                 seed: int = 0, n_iter: int = 1000,
                 early_exaggeration: float = 12.0,
                 exaggeration_iters: int = 250,
                 learning_rate: float = 200.0) -> EmbeddingProjection:
    """Project N x D embeddings to 2-D by minimizing the t-SNE KL objective.

    Momentum gradient descent with early exaggeration for the first half,
    then monotone plain descent (backtracking step) for the second half.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("embeddings must be N x D")
    n = X.shape[0]
    if n <= 3 * perplexity:
        raise ConfigError(f"need N > 3 * perplexity; got N={n}, "
                          f"perplexity={perplexity}")
    if labels is None:
        labels = np.zeros(n, dtype=int)
    labels = np.asarray(labels)
    if len(labels) != n:
        raise DataError("labels must align with embeddings")

    cond = conditional_affinities(X, perplexity)
    P = (cond + cond.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(Y)
    switch = n_iter // 2
    kl_trace = []
    step = learning_rate
    prev_kl = grad_true = None
    for iteration in range(n_iter):
        if iteration < switch:
            exaggerated = iteration < exaggeration_iters
            P_eff = P * early_exaggeration if exaggerated else P
            kl_eff, grad = _kl_and_grad(Y, P_eff)
            momentum = 0.5 if iteration < exaggeration_iters else 0.8
            velocity = momentum * velocity - learning_rate * grad
            Y = Y + velocity
            true_kl = _kl_and_grad(Y, P)[0] if exaggerated else kl_eff
        else:
            # plain descent with backtracking keeps the objective monotone
            if prev_kl is None:
                prev_kl, grad_true = _kl_and_grad(Y, P)
            candidate = Y - step * grad_true
            kl_new, grad_new = _kl_and_grad(candidate, P)
            while kl_new > prev_kl and step > 1e-8:
                step *= 0.5
                candidate = Y - step * grad_true
                kl_new, grad_new = _kl_and_grad(candidate, P)
            if kl_new <= prev_kl:
                Y = candidate
                prev_kl, grad_true = kl_new, grad_new
                step *= 1.05
            true_kl = prev_kl
        Y = Y - Y.mean(axis=0)
        kl_trace.append(float(true_kl))
    return EmbeddingProjection(coords=Y, labels=labels, perplexity=perplexity,
                               seed=seed, kl_trace=tuple(kl_trace))


# --------------------------------------------------------------------------
# rendering


def overlay_heatmap(image_u8: np.ndarray, heatmap: np.ndarray,
                    alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend a color-mapped heatmap over an RGB image; weighting scales with
    the heatmap so zero-activation pixels show the input untouched."""
    if image_u8.shape[:2] != heatmap.shape:
        raise DataError(f"image {image_u8.shape[:2]} and heatmap "
                        f"{heatmap.shape} sizes differ")
    heat_u8 = np.clip(heatmap * 255.0, 0, 255).astype(np.uint8)
    colored_bgr = cv2.applyColorMap(heat_u8, cv2.COLORMAP_JET)
    colored = cv2.cvtColor(colored_bgr, cv2.COLOR_BGR2RGB).astype(np.float64)
    weight = (alpha * heatmap)[:, :, None]
    blended = (1.0 - weight) * image_u8.astype(np.float64) + weight * colored
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def _write_png(path: Path, image_rgb: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(image_rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write image {path}")


def _render_projection(projection: EmbeddingProjection, path: Path,
                       label_names: dict | None) -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    try:
        for value in sorted(set(projection.labels.tolist())):
            pick = projection.labels == value
            name = (label_names or {}).get(value, str(value))
            ax.scatter(projection.coords[pick, 0], projection.coords[pick, 1],
                       s=12, label=name)
        ax.legend(loc="best", frameon=False)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path, dpi=150, metadata={"Software": None})
    except OSError as exc:
        raise OSError(f"failed to write plot {path}: {exc}") from exc
    finally:
        plt.close(fig)


def render_outputs(out_dir: str | Path, saliency=(), images=(),
                   projections=(), label_names: dict | None = None) -> list[Path]:
    """Write heatmap overlays and projection scatters plus an index JSON.

    ``images`` aligns with ``saliency`` and holds the uint8 RGB images the
    overlays are drawn on. Returns every written path, index last.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    saliency = list(saliency)
    images = list(images)
    if len(saliency) != len(images):
        raise DataError("need one display image per saliency map")
    written: list[Path] = []
    index = []
    for pos, (smap, image) in enumerate(zip(saliency, images)):
        ref = smap.record_ref or f"item_{pos:04d}"
        filename = f"cam_{ref}_c{smap.target_class}.png"
        path = out_dir / filename
        _write_png(path, overlay_heatmap(image, smap.heatmap))
        written.append(path)
        index.append({"artifact_type": "grad_cam", "record_ref": ref,
                      "target_class": smap.target_class, "file": filename})
    for pos, projection in enumerate(projections):
        filename = f"tsne_{pos:02d}.png"
        path = out_dir / filename
        _render_projection(projection, path, label_names)
        written.append(path)
        index.append({"artifact_type": "tsne_projection", "record_ref": None,
                      "target_class": None, "file": filename})
    index_path = out_dir / "index.json"
    index_path.write_text(json.dumps({"artifacts": index}, indent=2,
                                     sort_keys=True) + "\n")
    written.append(index_path)
    return written
