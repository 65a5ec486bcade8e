import itertools

import numpy as np
from scipy.special import comb
from skimage import measure, segmentation
from sklearn.linear_model import LinearRegression, Ridge

from app.exceptions import ExplanationError
from app.imaging import GrainMask, RasterImage, normalize
from app.models import LimeConfig, LimeExplanation, ShapConfig, ShapExplanation
from app.tools import get_logger, seeded_rng

EXACT_LIMIT = 12
MIN_FRAGMENT = 8
LIME_COLOR = np.array([1.0, 1.0, 0.0])
POSITIVE_COLOR = np.array([1.0, 0.0, 0.0])
NEGATIVE_COLOR = np.array([0.0, 0.0, 1.0])
MAX_TINT = 0.6


class SuperpixelMap:
    """Segment id per pixel, ids 0..count-1 numbered in raster order."""

    def __init__(self, segments):
        self.segments = np.asarray(segments, dtype=np.int64)
        self.count = int(self.segments.max()) + 1 if self.segments.size else 0

    @property
    def height(self):
        return self.segments.shape[0]

    @property
    def width(self):
        return self.segments.shape[1]

    def sizes(self):
        return np.bincount(self.segments.ravel(), minlength=self.count)


def _raster_relabel(labels):
    _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(labels.shape)


def grid_superpixels(height=50, width=50, grid=6):
    """g×g rectangular cells; the last row/column of cells takes the remainder."""
    if grid < 1 or grid > min(height, width):
        raise ValueError(f"grid must be in [1, {min(height, width)}], got {grid}")
    row_cell = np.minimum(np.arange(height) // (height // grid), grid - 1)
    col_cell = np.minimum(np.arange(width) // (width // grid), grid - 1)
    return SuperpixelMap(row_cell[:, np.newaxis] * grid + col_cell[np.newaxis, :])


def _merge_small(labels):
    """Folds fragments under MIN_FRAGMENT pixels into the neighbor with the longest shared border."""
    while True:
        ids, sizes = np.unique(labels, return_counts=True)
        if len(ids) <= 1:
            return labels
        small = ids[sizes < MIN_FRAGMENT]
        if small.size == 0:
            return labels
        target = small[np.argmin(sizes[sizes < MIN_FRAGMENT])]
        region = labels == target

        borders = {}
        adjacent = ((labels[:, :-1], labels[:, 1:], region[:, :-1], region[:, 1:]),
                    (labels[:-1, :], labels[1:, :], region[:-1, :], region[1:, :]))
        for a, b, ra, rb in adjacent:
            for neighbor in np.concatenate([b[ra & ~rb], a[rb & ~ra]]):
                borders[int(neighbor)] = borders.get(int(neighbor), 0) + 1
        if not borders:
            return labels
        merge_into = min(borders, key=lambda n: (-borders[n], n))
        labels = np.where(region, merge_into, labels)


def mask_aware_superpixels(mask: GrainMask, grid=6):
    """Grid cells split where the grain boundary crosses them."""
    flags = mask.flags
    base = grid_superpixels(flags.shape[0], flags.shape[1], grid).segments
    combined = base * 2 + flags.astype(np.int64)
    labels = measure.label(combined, background=-1, connectivity=1)
    return SuperpixelMap(_raster_relabel(_merge_small(labels)))


def _pixels(img):
    if isinstance(img, RasterImage):
        return (img if img.normalized else normalize(img)).pixels
    return np.asarray(img, dtype=np.float64)


def perturb_batch(img, spmap: SuperpixelMap, coalitions, baseline=0.0):
    """Images with every segment whose bit is 0 replaced by the baseline value."""
    pixels = _pixels(img)
    coalitions = np.atleast_2d(np.asarray(coalitions))
    if coalitions.shape[1] != spmap.count:
        raise ExplanationError(f"coalition length {coalitions.shape[1]} != {spmap.count} segments")
    keep = coalitions[:, spmap.segments].astype(pixels.dtype)[..., np.newaxis]
    return pixels * keep + baseline * (1.0 - keep)


def predict_coalitions(predict_fn, img, spmap, coalitions, baseline=0.0, batch_size=64):
    coalitions = np.atleast_2d(np.asarray(coalitions))
    out = []
    for start in range(0, len(coalitions), batch_size):
        batch = perturb_batch(img, spmap, coalitions[start:start + batch_size], baseline)
        out.append(np.asarray(predict_fn(batch), dtype=np.float64))
    return np.concatenate(out)


def perturb_and_predict(predict_fn, img, spmap, z, baseline=0.0):
    return predict_coalitions(predict_fn, img, spmap, [z], baseline)[0]


def cosine_distance_to_full(coalitions):
    """Cosine distance between each z and the all-ones vector; 1 for z = 0."""
    m = coalitions.shape[1]
    on = coalitions.sum(axis=1)
    return 1.0 - np.sqrt(on / m)


def lime_explain(predict_fn, img, spmap: SuperpixelMap, target, config: LimeConfig = None):
    """Weighted ridge surrogate of the target-class probability over segment bits."""
    config = config or LimeConfig()
    m = spmap.count
    rng = seeded_rng(config.seed)
    coalitions = rng.integers(0, 2, size=(config.samples, m))
    coalitions[0] = 1

    y = predict_coalitions(predict_fn, img, spmap, coalitions)[:, target]
    distance = cosine_distance_to_full(coalitions)
    weights = np.exp(-(distance ** 2) / config.kernel_width ** 2)

    if config.ridge == 0:
        design = np.sqrt(weights)[:, np.newaxis] * np.hstack([np.ones((len(y), 1)), coalitions])
        if np.linalg.matrix_rank(design) < m + 1:
            raise ExplanationError(
                "weighted system is singular at ridge 0: raise the sample count or use ridge > 0")
        surrogate = LinearRegression()
    else:
        surrogate = Ridge(alpha=config.ridge)
    surrogate.fit(coalitions, y, sample_weight=weights)
    fidelity = float(surrogate.score(coalitions, y, sample_weight=weights))

    coefficients = surrogate.coef_
    top = np.argsort(-np.abs(coefficients), kind="stable")[:min(config.top_k, m)]
    get_logger("explain").info("lime target=%d segments=%d samples=%d r2=%.4f",
                               target, m, config.samples, fidelity)
    return LimeExplanation(
        target=int(target), coefficients=[float(c) for c in coefficients],
        intercept=float(surrogate.intercept_), top_k=[int(i) for i in top],
        ridge=config.ridge, samples=config.samples, kernel_width=config.kernel_width,
        fidelity_r2=fidelity, seed=config.seed)


def shap_kernel_weight(m, size):
    if size <= 0 or size >= m:
        raise ValueError(f"coalition size {size} must be strictly between 0 and {m}")
    return (m - 1) / (comb(m, size, exact=True) * size * (m - size))


def _all_coalitions(m):
    codes = np.arange(1, 2 ** m - 1)
    return ((codes[:, np.newaxis] >> np.arange(m)) & 1).astype(np.int8)


def _sampled_coalitions(m, n_samples, rng):
    """Coalitions and weights stratified by size.

    Size pairs (s, m-s) are enumerated while the budget covers them; the
    rest are drawn at random and share their stratum's kernel mass.
    """
    pairs = list(range(1, m // 2 + 1))
    mass = {s: (m - 1) / (s * (m - s)) * (1 if 2 * s == m else 2) for s in pairs}
    rows, weights = [], []
    budget = n_samples

    while pairs:
        s = pairs[0]
        total = sum(mass[p] for p in pairs)
        n_full = comb(m, s, exact=True) * (1 if 2 * s == m else 2)
        if budget * mass[s] / total < n_full:
            break
        for size in {s, m - s}:
            for members in itertools.combinations(range(m), size):
                z = np.zeros(m, dtype=np.int8)
                z[list(members)] = 1
                rows.append(z)
                weights.append(shap_kernel_weight(m, size))
        budget -= n_full
        pairs.pop(0)

    if pairs and budget > 0:
        total = sum(mass[p] for p in pairs)
        for s in pairs:
            n_draw = max(1, int(round(budget * mass[s] / total / (1 if 2 * s == m else 2))))
            for size in {s, m - s}:
                stratum = (m - 1) / (size * (m - size))
                for _ in range(n_draw):
                    z = np.zeros(m, dtype=np.int8)
                    z[rng.choice(m, size, replace=False)] = 1
                    rows.append(z)
                    weights.append(stratum / n_draw)
    return np.array(rows), np.array(weights)


def _constrained_wls(coalitions, weights, values, v0, v1):
    """Shapley-kernel least squares with sum(phi) = v1 - v0 enforced exactly."""
    delta = v1 - v0
    y = values - v0 - coalitions[:, -1:] * delta
    x = coalitions[:, :-1] - coalitions[:, -1:]
    wx = weights[:, np.newaxis] * x
    try:
        w = np.linalg.solve(x.T @ wx, wx.T @ y)
    except np.linalg.LinAlgError:
        sqrt_w = np.sqrt(weights)
        w = np.linalg.lstsq(sqrt_w[:, np.newaxis] * x, sqrt_w[:, np.newaxis] * y, rcond=None)[0]
    return np.vstack([w, delta - w.sum(axis=0)])


def kernel_shap(value_fn, m, mode="auto", n_samples=2048, seed=0):
    """Shapley values of a coalition value function.

    value_fn maps an (N, m) binary matrix to (N, K) outputs. Returns
    (phi[K, m], base[K], full[K], method).
    """
    if m < 1:
        raise ExplanationError("need at least one feature")
    if mode == "auto":
        mode = "exact" if m <= EXACT_LIMIT else "sampled"
    if mode == "exact" and m > EXACT_LIMIT:
        raise ExplanationError(
            f"exact mode supports at most {EXACT_LIMIT} segments, got {m}; "
            "use mode=sampled or a coarser grid")

    def evaluate(z):
        out = np.asarray(value_fn(z), dtype=np.float64)
        return out[:, np.newaxis] if out.ndim == 1 else out

    v0 = evaluate(np.zeros((1, m), dtype=np.int8))[0]
    v1 = evaluate(np.ones((1, m), dtype=np.int8))[0]
    if m == 1:
        return (v1 - v0)[:, np.newaxis], v0, v1, mode

    if mode == "exact":
        coalitions = _all_coalitions(m)
        weights = np.array([shap_kernel_weight(m, int(s)) for s in coalitions.sum(axis=1)])
    else:
        coalitions, weights = _sampled_coalitions(m, n_samples, seeded_rng(seed))

    values = evaluate(coalitions)
    phi = _constrained_wls(coalitions.astype(np.float64), weights, values, v0, v1)
    return phi.T, v0, v1, mode


def shap_explain(predict_fn, img, spmap: SuperpixelMap, config: ShapConfig = None, baseline=0.0):
    """Per-class Shapley values of the softmax probabilities over segments."""
    config = config or ShapConfig()

    def value_fn(coalitions):
        return predict_coalitions(predict_fn, img, spmap, coalitions, baseline)

    phi, base, full, method = kernel_shap(value_fn, spmap.count, config.mode, config.samples, config.seed)
    get_logger("explain").info("shap method=%s segments=%d", method, spmap.count)
    return ShapExplanation(
        phi=phi.tolist(), base_values=base.tolist(), outputs=full.tolist(), method=method,
        segments=spmap.count, samples=config.samples if method == "sampled" else 2 ** spmap.count,
        seed=config.seed)


def global_importance(explanations):
    """Mean |phi| per class and segment across explanations sharing one layout."""
    if not explanations:
        raise ExplanationError("no explanations to aggregate")
    counts = {e.segments for e in explanations}
    if len(counts) != 1:
        raise ExplanationError(f"explanations use different segment counts: {sorted(counts)}")
    stacked = np.abs(np.array([e.phi for e in explanations]))
    mean_abs = stacked.mean(axis=0)
    return {
        "images": len(explanations),
        "segments": counts.pop(),
        "mean_abs_phi": mean_abs.tolist(),
        "ranking": np.argsort(-mean_abs, axis=1, kind="stable").tolist(),
    }


def segment_outline(spmap: SuperpixelMap, segment):
    """Inner boundary pixels of one segment, image border included."""
    region = np.pad(spmap.segments == segment, 1)
    return segmentation.find_boundaries(region, mode="inner")[1:-1, 1:-1]


def render_overlay(img, spmap: SuperpixelMap, weights, style="lime_outline", k=5):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (spmap.count,):
        raise ExplanationError(f"expected {spmap.count} weights, got {weights.shape}")
    pixels = _pixels(img).copy()
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)

    if style == "lime_outline":
        top = np.argsort(-np.abs(weights), kind="stable")[:min(k, spmap.count)]
        for segment in top:
            pixels[segment_outline(spmap, segment)] = LIME_COLOR
        return RasterImage(pixels, normalized=True)

    if style == "shap_heat":
        scale = np.abs(weights).max()
        if scale == 0:
            return RasterImage(pixels, normalized=True)
        alpha = (MAX_TINT * np.abs(weights) / scale)[spmap.segments][..., np.newaxis]
        color = np.where((weights > 0)[spmap.segments][..., np.newaxis], POSITIVE_COLOR, NEGATIVE_COLOR)
        return RasterImage((1.0 - alpha) * pixels + alpha * color, normalized=True)

    raise ValueError(f"unknown overlay style {style}")
