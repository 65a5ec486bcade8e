import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import measure, segmentation
from skimage.filters import threshold_otsu

from app.exceptions import GrainNotFound, ImageDecodeError, TensorShapeError
from app.models import CannyConfig

LUMA = np.array([0.299, 0.587, 0.114])

# (row, col) step for each of the 8 quantized gradient directions, 45° apart
DIRECTIONS = np.array([(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)])

# magnitude comparisons in non-maximum suppression ignore differences below this
NMS_TOLERANCE = 1e-6

TRANSFORMS = ("identity", "rot90", "rot180", "flip_h", "flip_v")


class RasterImage:
    """H×W×C pixel buffer, raw 8-bit scale unless normalized is set."""

    def __init__(self, pixels, normalized=False):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[..., np.newaxis]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise TensorShapeError(f"expected H×W×1 or H×W×3 pixels, got {pixels.shape}")
        if normalized and pixels.size and (pixels.min() < 0 or pixels.max() > 1):
            raise ValueError("normalized image has values outside [0, 1]")
        self.pixels = pixels
        self.normalized = normalized

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def scale(self):
        return 1.0 if self.normalized else 255.0

    def plane(self):
        """Single-channel view as a 2-D array."""
        if self.channels != 1:
            raise TensorShapeError("plane() needs a single-channel image")
        return self.pixels[..., 0]


class EdgeMap:
    def __init__(self, flags):
        self.flags = np.asarray(flags, dtype=bool)

    @property
    def height(self):
        return self.flags.shape[0]

    @property
    def width(self):
        return self.flags.shape[1]

    def count(self):
        return int(self.flags.sum())


class GrainMask(EdgeMap):
    """Binary foreground flags marking the grain."""

    @property
    def area(self):
        return self.count()


def decode_and_resize(path, target=50):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (target, target):
                im = im.resize((target, target), Image.Resampling.BILINEAR)
            pixels = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ImageDecodeError(str(path), str(e))
    return RasterImage(pixels)


def to_grayscale(img: RasterImage):
    if img.channels != 3:
        raise TensorShapeError(f"to_grayscale needs 3 channels, got {img.channels}")
    return RasterImage(img.pixels @ LUMA, normalized=img.normalized)


def _gaussian_1d(sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = max(1, int(np.floor(1.5 * sigma + 0.5)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_kernel(sigma=1.4):
    """Normalized 2-D Gaussian; 5×5 at sigma 1.4."""
    k = _gaussian_1d(sigma)
    return np.outer(k, k)


def gaussian_blur(img: RasterImage, sigma=1.4):
    k = _gaussian_1d(sigma)
    plane = img.plane()
    out = ndimage.convolve1d(plane, k, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, k, axis=1, mode="nearest")
    return RasterImage(out, normalized=img.normalized)


def _non_maximum_suppression(magnitude, gx, gy):
    h, w = magnitude.shape
    angle = np.degrees(np.arctan2(gy, gx))
    bins = np.rint(angle / 45.0).astype(int) % 8
    dr, dc = DIRECTIONS[bins, 0], DIRECTIONS[bins, 1]

    padded = np.pad(magnitude, 1)
    rows, cols = np.indices((h, w))
    ahead = padded[rows + 1 + dr, cols + 1 + dc]
    behind = padded[rows + 1 - dr, cols + 1 - dc]

    # a flat ridge two pixels wide keeps its pixel on the brighter side
    keep = (magnitude > ahead + NMS_TOLERANCE) & (magnitude >= behind - NMS_TOLERANCE)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    return keep


def canny_edges(img: RasterImage, low=None, high=None, sigma=None):
    """Canny edge map of a grayscale (or RGB, converted) image.

    Thresholds apply to the Sobel magnitude on the 8-bit scale. Defaults
    come from CannyConfig.
    """
    defaults = CannyConfig()
    config = CannyConfig(
        low=defaults.low if low is None else low,
        high=defaults.high if high is None else high,
        sigma=defaults.sigma if sigma is None else sigma)

    if img.channels == 3:
        img = to_grayscale(img)
    if img.normalized:
        img = RasterImage(img.pixels * 255.0)
    if img.height < 3 or img.width < 3:
        return EdgeMap(np.zeros((img.height, img.width), dtype=bool))

    blurred = gaussian_blur(img, config.sigma).plane()
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy)

    thin = _non_maximum_suppression(magnitude, gx, gy)
    strong = thin & (magnitude >= config.high)
    weak = thin & (magnitude >= config.low)

    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return EdgeMap(np.zeros_like(weak))
    linked = np.zeros(n + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return EdgeMap(linked[labels])


def segment_grain(img: RasterImage):
    gray = to_grayscale(img).plane() if img.channels == 3 else img.plane()
    if gray.size == 0 or gray.max() == gray.min():
        raise GrainNotFound()

    foreground = gray > threshold_otsu(gray)
    labels = measure.label(foreground, connectivity=2)
    if labels.max() == 0:
        raise GrainNotFound()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = ndimage.binary_fill_holes(labels == int(np.argmax(sizes)))
    return GrainMask(mask)


def normalize(img: RasterImage):
    if img.normalized:
        raise ValueError("image is already normalized")
    return RasterImage(img.pixels / 255.0, normalized=True)


def augment_pixels(pixels, transform):
    """Exact pixel permutation of an H×W(×C) array."""
    if transform == "identity":
        return pixels
    if transform in ("rot90", "rot180") and pixels.shape[0] != pixels.shape[1]:
        raise TensorShapeError(f"rotation needs a square image, got {pixels.shape[:2]}")
    if transform == "rot90":
        return np.rot90(pixels, 1, axes=(0, 1))
    if transform == "rot180":
        return np.rot90(pixels, 2, axes=(0, 1))
    if transform == "flip_h":
        return pixels[:, ::-1]
    if transform == "flip_v":
        return pixels[::-1]
    raise ValueError(f"unknown transform {transform}")


def augment(img: RasterImage, transform):
    return RasterImage(np.ascontiguousarray(augment_pixels(img.pixels, transform)),
                       normalized=img.normalized)


def random_transforms(rng):
    """Training augmentation draw: a rotation, then each flip with p=0.5."""
    chosen = [("identity", "rot90", "rot180")[int(rng.integers(3))]]
    if rng.random() < 0.5:
        chosen.append("flip_h")
    if rng.random() < 0.5:
        chosen.append("flip_v")
    return chosen


def apply_mask(img: RasterImage, mask: GrainMask):
    if mask.flags.shape != (img.height, img.width):
        raise TensorShapeError(
            f"mask {mask.flags.shape} does not match image {(img.height, img.width)}")
    return RasterImage(img.pixels * mask.flags[..., np.newaxis], normalized=img.normalized)


def highlight_edges(img: RasterImage, edges: EdgeMap):
    if edges.flags.shape != (img.height, img.width):
        raise TensorShapeError(
            f"edge map {edges.flags.shape} does not match image {(img.height, img.width)}")
    pixels = img.pixels.copy()
    pixels[edges.flags] = img.scale
    return RasterImage(pixels, normalized=img.normalized)


def mask_contour(mask: GrainMask):
    return EdgeMap(segmentation.find_boundaries(mask.flags, mode="inner"))


def preprocess_image(img: RasterImage, mode="raw", canny=None):
    """CNN input variant: raw RGB, background-masked RGB, or edge-highlighted RGB."""
    if mode == "raw":
        return img
    if mode == "mask":
        return apply_mask(img, segment_grain(img))
    if mode == "edges":
        canny = canny or CannyConfig()
        return highlight_edges(img, canny_edges(img, canny.low, canny.high, canny.sigma))
    raise ValueError(f"unknown preprocess mode {mode}")


def save_png(image, path):
    if isinstance(image, EdgeMap):
        data = image.flags.astype(np.uint8) * 255
    else:
        pixels = image.pixels * (255.0 if image.normalized else 1.0)
        data = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
        if data.shape[2] == 1:
            data = data[..., 0]
    Image.fromarray(data).save(path, format="PNG")
