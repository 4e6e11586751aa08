"""
Bild-Deskriptoren für Abtastpunkte auf projizierten Straßen.

Aus einem 24 x 24 Pixel großen, Gauß-geglätteten Ausschnitt um jeden
Abtastpunkt entsteht ein Vektor mit 29 Komponenten:
- Farbmomente in CIELUV (9)
- normalisierter Gradient in Haupt- und Normalenrichtung (4)
- steuerbare Filter G2/H2 als Quadraturpaar (10)
- Eigenwerte der Hesse-Matrix (2)
- Difference-of-Gaussians in zwei Bändern (4)

Die Form-Familien (Gradient, Filter, Hesse, DoG) arbeiten auf dem
bias-gain-normalisierten L-Kanal, die Farbmomente auf den rohen CIELUV-Werten.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d, gaussian_filter

from src.projection import ProjectedSample

# Glättung vor der Deskriptor-Berechnung (Pixel)
SIGMA_S = 2.8

# Kantenlänge des Bildausschnitts (Pixel)
PATCH_SIZE = 24

# Breitenverhältnis der DoG-Stufen
DOG_FACTOR = 1.6

# Gauß-Kerne werden bei 3 sigma abgeschnitten
TRUNCATE = 3.0

DESCRIPTOR_LENGTH = 29

COLOR = slice(0, 9)
GRAD = slice(9, 13)
STEER = slice(13, 23)
HESSIAN = slice(23, 25)
DOG = slice(25, 29)

DESCRIPTOR_LAYOUT = [
    'color.L.center', 'color.L.std', 'color.L.skew',
    'color.U.center', 'color.U.std', 'color.U.skew',
    'color.V.center', 'color.V.std', 'color.V.skew',
    'grad.primary.neg', 'grad.primary.pos', 'grad.normal.neg', 'grad.normal.pos',
    'steer.primary.mag', 'steer.normal.mag',
    'steer.primary.g2.neg', 'steer.primary.g2.pos',
    'steer.primary.h2.neg', 'steer.primary.h2.pos',
    'steer.normal.g2.neg', 'steer.normal.g2.pos',
    'steer.normal.h2.neg', 'steer.normal.h2.pos',
    'hessian.major', 'hessian.minor',
    'dog.inner.neg', 'dog.inner.pos', 'dog.outer.neg', 'dog.outer.pos',
]

# sRGB-Primärvalenzen -> XYZ, Weißpunkt D65
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = (0.95047, 1.0, 1.08883)

# Bezugspunkt der Farbmomente
COLOR_CENTERS = ('median', 'mean')

# Varianz darunter gilt als Null
ZERO_VARIANCE = 1e-12

# Koeffizienten der G2/H2-Basis; b- und c-Terme so gewählt, dass das Steuern exakt ist
G2_NORM = 0.9213
H2_NORM = 0.978
H2_LINEAR = 2.254


class DescriptorError(ValueError):
    """Deskriptor enthält nicht-endliche Komponenten."""


@dataclass(frozen=True)
class DescriptorParams:
    sigma_s: float = SIGMA_S
    patch_size: int = PATCH_SIZE
    # 'median' wie im Verfahren beschrieben, 'mean' als Alternative
    color_center: str = 'median'


@dataclass(frozen=True, eq=False)
class Patch:
    """
    Geglätteter Ausschnitt um einen Abtastpunkt.

    Zentrumspixel ist pixels[n // 2, n // 2]. surround ist der ebenfalls
    geglättete Bereich um das Fenster, den die breiten DoG-Kerne brauchen;
    surround_center ist die Lage des Zentrumspixels darin. Ohne surround
    arbeitet dog_response nur auf dem Fenster.
    """
    pixels: np.ndarray  # (n, n, 3), Werte in [0, 1], bereits mit sigma_s geglättet
    center_px: Tuple[float, float]
    primary_dir: Tuple[float, float]
    normal_dir: Tuple[float, float]
    sigma_s: float = SIGMA_S
    surround: Optional[np.ndarray] = None
    surround_center: Optional[Tuple[int, int]] = None

    @property
    def center(self) -> int:
        return self.pixels.shape[0] // 2

    @cached_property
    def luv(self) -> np.ndarray:
        return srgb_to_luv(self.pixels)

    @cached_property
    def shape_channel(self) -> Optional[np.ndarray]:
        """Bias-gain-normalisierter L-Kanal, None bei konstanter Helligkeit."""
        return bias_gain_normalize(self.luv[..., 0])

    def surround_shape_channel(self) -> Tuple[Optional[np.ndarray], Tuple[int, int]]:
        """
        L-Kanal des Umfelds, normalisiert mit Mittelwert und Std des Fensters.

        Returns:
            (Kanal oder None bei konstantem Fenster, Zentrumsindex (Zeile, Spalte))
        """
        window = self.luv[..., 0]
        if self.shape_channel is None:
            return None, (self.center, self.center)
        if self.surround is None:
            return self.shape_channel, (self.center, self.center)
        lightness = srgb_to_luv(self.surround)[..., 0]
        return (lightness - window.mean()) / window.std(), self.surround_center


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    degenerate: bool = False

    @property
    def color(self) -> np.ndarray:
        return self.values[COLOR]

    @property
    def grad(self) -> np.ndarray:
        return self.values[GRAD]

    @property
    def steer(self) -> np.ndarray:
        return self.values[STEER]

    @property
    def hessian(self) -> np.ndarray:
        return self.values[HESSIAN]

    @property
    def dog(self) -> np.ndarray:
        return self.values[DOG]


# --- Hilfsfunktionen ---

@lru_cache(maxsize=32)
def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Abgetasteter Gauß-Kern, bei 3 sigma abgeschnitten, Summe 1."""
    radius = int(TRUNCATE * sigma)
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-x * x / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def srgb_to_luv(rgb: np.ndarray) -> np.ndarray:
    """
    sRGB (Werte in [0, 1]) -> CIELUV mit D65-Weißpunkt.

    Args:
        rgb: Array der Form (..., 3)

    Returns:
        Array (..., 3) mit L in [0, 100] und u, v
    """
    rgb = np.asarray(rgb, dtype=float)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ SRGB_TO_XYZ.T
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]

    xn, yn, zn = D65_WHITE
    un = 4.0 * xn / (xn + 15.0 * yn + 3.0 * zn)
    vn = 9.0 * yn / (xn + 15.0 * yn + 3.0 * zn)

    y_rel = y / yn
    lightness = np.where(y_rel > (6.0 / 29.0) ** 3,
                         116.0 * np.cbrt(y_rel) - 16.0,
                         (29.0 / 3.0) ** 3 * y_rel)

    denom = x + 15.0 * y + 3.0 * z
    safe = np.where(denom > 0, denom, 1.0)
    u_prime = np.where(denom > 0, 4.0 * x / safe, un)
    v_prime = np.where(denom > 0, 9.0 * y / safe, vn)

    return np.stack([lightness,
                     13.0 * lightness * (u_prime - un),
                     13.0 * lightness * (v_prime - vn)], axis=-1)


def bias_gain_normalize(channel: np.ndarray) -> Optional[np.ndarray]:
    """Mittelwert abziehen, durch Standardabweichung teilen. None bei Varianz 0."""
    mean = channel.mean()
    std = channel.std()
    if std <= ZERO_VARIANCE * max(1.0, abs(mean)):
        return None
    return (channel - mean) / std


def _rectify(values) -> np.ndarray:
    """[|r| - r, |r| + r] für jede Antwort r."""
    out = []
    for r in values:
        out.extend([abs(r) - r, abs(r) + r])
    return np.array(out, dtype=float)


def patch_fits(px: Tuple[float, float], image_shape, params: DescriptorParams = DescriptorParams()) -> bool:
    """True, wenn Fenster plus Glättungsrand um px vollständig im Bild liegen."""
    half = params.patch_size // 2
    apron = len(gaussian_kernel1d(params.sigma_s)) // 2
    cu = int(math.floor(px[0] + 0.5))
    cv = int(math.floor(px[1] + 0.5))
    height, width = image_shape[:2]
    return (cv - half - apron >= 0 and cu - half - apron >= 0
            and cv - half + params.patch_size + apron <= height
            and cu - half + params.patch_size + apron <= width)


# --- Ausschnitt ---

def extract_patch(image: np.ndarray, sample: ProjectedSample,
                  params: DescriptorParams = DescriptorParams()) -> Optional[Patch]:
    """
    Schneidet den geglätteten Ausschnitt um einen Abtastpunkt aus.

    Das Fenster ist achsparallel und um den auf ganze Pixel gerundeten Punkt
    zentriert. Geglättet wird nur das Fenster plus Rand (Radius des Kerns).

    Args:
        image: Bild (H, W, 3), uint8 oder float in [0, 1]
        sample: Abtastpunkt mit Bildposition und Richtungen
        params: sigma_s und Fenstergröße

    Returns:
        Patch oder None, wenn Fenster plus Glättungsrand nicht ins Bild passt
    """
    if not patch_fits(sample.px, image.shape, params):
        return None
    size = params.patch_size
    half = size // 2
    kernel = gaussian_kernel1d(params.sigma_s)
    apron = len(kernel) // 2
    reach = dog_apron(params.sigma_s)

    # Umfeld für die DoG-Kerne, am Bildrand abgeschnitten
    height, width = image.shape[:2]
    top = int(math.floor(sample.px[1] + 0.5)) - half
    left = int(math.floor(sample.px[0] + 0.5)) - half
    row0, col0 = max(0, top - reach - apron), max(0, left - reach - apron)
    row1 = min(height, top + size + reach + apron)
    col1 = min(width, left + size + reach + apron)
    region = image[row0:row1, col0:col1, :3]
    if region.dtype == np.uint8:
        region = region.astype(float) / 255.0
    else:
        region = region.astype(float)

    smoothed = correlate1d(region, kernel, axis=0, mode='nearest')
    smoothed = correlate1d(smoothed, kernel, axis=1, mode='nearest')
    r, c = top - row0, left - col0
    pixels = smoothed[r:r + size, c:c + size]
    s_row, s_col = max(0, r - reach), max(0, c - reach)
    surround = smoothed[s_row:r + size + reach, s_col:c + size + reach]

    return Patch(
        pixels=pixels,
        center_px=(float(sample.px[0]), float(sample.px[1])),
        primary_dir=sample.primary_dir,
        normal_dir=sample.normal_dir,
        sigma_s=params.sigma_s,
        surround=surround,
        surround_center=(r + half - s_row, c + half - s_col),
    )


# --- Familien ---

def color_moments(patch: Patch, scaling: Optional[np.ndarray] = None,
                  center: str = 'median') -> np.ndarray:
    """
    Median (bzw. Mittelwert), Standardabweichung und Schiefe je CIELUV-Kanal.

    Reihenfolge L, U, V mit je (Zentrum, Std, Schiefe). Mit scaling wird jede
    der 9 Dimensionen durch die Standardabweichung des Trainingssatzes geteilt.
    """
    values = patch.luv.reshape(-1, 3)
    moments = []
    for k in range(3):
        channel = values[:, k]
        mean = channel.mean()
        std = channel.std()
        middle = np.median(channel) if center == 'median' else mean
        if std <= ZERO_VARIANCE * max(1.0, abs(mean)):
            skew = 0.0
        else:
            skew = float(np.mean(((channel - mean) / std) ** 3))
        moments.extend([float(middle), float(std), skew])

    result = np.array(moments)
    if scaling is not None:
        result = result / scaling
    return result


def normalized_gradient(patch: Patch) -> np.ndarray:
    """
    Mittlerer Gradient des Ausschnitts, projiziert auf Haupt- und Normalenrichtung.

    Returns:
        [|gp| - gp, |gp| + gp, |gn| - gn, |gn| + gn]
    """
    channel = patch.shape_channel
    if channel is None:
        return np.zeros(4)
    gx = (channel[1:-1, 2:] - channel[1:-1, :-2]) / 2.0
    gy = (channel[2:, 1:-1] - channel[:-2, 1:-1]) / 2.0
    g = (gx.mean(), gy.mean())
    gp = g[0] * patch.primary_dir[0] + g[1] * patch.primary_dir[1]
    gn = g[0] * patch.normal_dir[0] + g[1] * patch.normal_dir[1]
    return _rectify([gp, gn])


@lru_cache(maxsize=8)
def steerable_basis(size: int, sigma_s: float) -> Tuple[np.ndarray, ...]:
    """
    Basisfilter G2a..G2c und H2a..H2d (Freeman/Adelson) über dem Ausschnitt.

    Die Gauß-Hülle exp(-r^2) hat in Pixeln die Breite sigma_s und sitzt
    auf dem Zentrumspixel (size // 2, size // 2).
    """
    center = float(size // 2)
    scale = math.sqrt(2.0) * sigma_s
    y, x = np.mgrid[0:size, 0:size].astype(float)
    x = (x - center) / scale
    y = (y - center) / scale
    envelope = np.exp(-(x * x + y * y))

    g2a = G2_NORM * (2.0 * x * x - 1.0) * envelope
    g2b = 2.0 * G2_NORM * x * y * envelope
    g2c = G2_NORM * (2.0 * y * y - 1.0) * envelope
    h2a = H2_NORM * (-H2_LINEAR * x + x ** 3) * envelope
    h2b = H2_NORM * (-H2_LINEAR / 3.0 + x * x) * y * envelope
    h2c = H2_NORM * (-H2_LINEAR / 3.0 + y * y) * x * envelope
    h2d = H2_NORM * (-H2_LINEAR * y + y ** 3) * envelope
    return g2a, g2b, g2c, h2a, h2b, h2c, h2d


def steer_quadrature(responses: Sequence[float], direction: Tuple[float, float]) -> Tuple[float, float]:
    """Steuert die Basisantworten auf die Orientierung von direction: (G2, H2)."""
    ga, gb, gc, ha, hb, hc, hd = responses
    theta = math.atan2(direction[1], direction[0])
    c, s = math.cos(theta), math.sin(theta)
    g2 = c * c * ga + 2.0 * c * s * gb + s * s * gc
    h2 = c ** 3 * ha + 3.0 * c * c * s * hb + 3.0 * c * s * s * hc + s ** 3 * hd
    return g2, h2


def steerable_response(patch: Patch) -> np.ndarray:
    """
    Quadraturpaar G2/H2 in Haupt- und Normalenrichtung, am Ausschnittzentrum.

    Returns:
        [Betrag_p, Betrag_n] + gleichgerichtete [G2p, H2p, G2n, H2n] (je 2 Werte)
    """
    channel = patch.shape_channel
    if channel is None:
        return np.zeros(10)
    basis = steerable_basis(channel.shape[0], patch.sigma_s)
    responses = [float(np.sum(channel * b)) for b in basis]
    g_p, h_p = steer_quadrature(responses, patch.primary_dir)
    g_n, h_n = steer_quadrature(responses, patch.normal_dir)
    magnitudes = np.array([math.sqrt(g_p * g_p + h_p * h_p), math.sqrt(g_n * g_n + h_n * h_n)])
    return np.concatenate([magnitudes, _rectify([g_p, h_p, g_n, h_n])])


def hessian_eigenvalues(patch: Patch) -> np.ndarray:
    """Eigenwerte der 2x2-Hesse-Matrix am Zentrumspixel, absteigend."""
    channel = patch.shape_channel
    if channel is None:
        return np.zeros(2)
    c = patch.center
    hxx = channel[c, c + 1] - 2.0 * channel[c, c] + channel[c, c - 1]
    hyy = channel[c + 1, c] - 2.0 * channel[c, c] + channel[c - 1, c]
    hxy = (channel[c + 1, c + 1] - channel[c + 1, c - 1]
           - channel[c - 1, c + 1] + channel[c - 1, c - 1]) / 4.0
    mean = (hxx + hyy) / 2.0
    spread = math.hypot((hxx - hyy) / 2.0, hxy)
    return np.array([mean + spread, mean - spread])


def dog_sigmas(sigma_s: float) -> Tuple[float, float]:
    """
    Zusätzliche Glättung auf dem bereits mit sigma_s geglätteten Ausschnitt.

    G(s1) * I = G(sqrt(s1^2 - s^2)) * (G(s) * I), analog für s2.
    """
    s1 = DOG_FACTOR * sigma_s
    s2 = DOG_FACTOR * s1
    return math.sqrt(s1 * s1 - sigma_s * sigma_s), math.sqrt(s2 * s2 - sigma_s * sigma_s)


def dog_apron(sigma_s: float) -> int:
    """Radius des breiteren DoG-Kerns (wie scipy.ndimage bei truncate=3)."""
    return int(TRUNCATE * dog_sigmas(sigma_s)[1] + 0.5)


def dog_response(patch: Patch) -> np.ndarray:
    """
    Zwei DoG-Antworten am Zentrumspixel, gleichgerichtet.

    D1 = (G(s1) - G(s)) * I, D2 = (G(s2) - G(s1)) * I mit s1 = 1.6 s, s2 = 1.6 s1.
    Die Kerne laufen über das Umfeld des Fensters und sind bei 3 sigma
    abgeschnitten; jenseits des Bildrands wird der Randwert fortgesetzt.
    """
    channel, (row, col) = patch.surround_shape_channel()
    if channel is None:
        return np.zeros(4)
    extra1, extra2 = dog_sigmas(patch.sigma_s)
    blur1 = float(gaussian_filter(channel, extra1, mode='nearest', truncate=TRUNCATE)[row, col])
    blur2 = float(gaussian_filter(channel, extra2, mode='nearest', truncate=TRUNCATE)[row, col])
    d1 = blur1 - float(channel[row, col])
    d2 = blur2 - blur1
    return _rectify([d1, d2])


def compose(color, grad, steer, hessian, dog) -> Descriptor:
    """
    Verkettet die fünf Familien und normiert auf Länge 1.

    Raises:
        DescriptorError: bei nicht-endlichen Komponenten
    """
    values = np.concatenate([np.asarray(color, dtype=float), np.asarray(grad, dtype=float),
                             np.asarray(steer, dtype=float), np.asarray(hessian, dtype=float),
                             np.asarray(dog, dtype=float)])
    if len(values) != DESCRIPTOR_LENGTH:
        raise DescriptorError(f"Deskriptor hat {len(values)} statt {DESCRIPTOR_LENGTH} Komponenten")
    if not np.all(np.isfinite(values)):
        raise DescriptorError("Deskriptor enthält nicht-endliche Werte")
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        return Descriptor(values=np.zeros(DESCRIPTOR_LENGTH), degenerate=True)
    return Descriptor(values=values / norm)


# --- Roh-Deskriptoren und Skalierung ---

def raw_descriptor(patch: Patch, params: DescriptorParams = DescriptorParams()) -> np.ndarray:
    """Unskalierte, nicht normierte 29 Komponenten (so stehen sie im Dump)."""
    values = np.concatenate([
        color_moments(patch, center=params.color_center),
        normalized_gradient(patch),
        steerable_response(patch),
        hessian_eigenvalues(patch),
        dog_response(patch),
    ])
    if not np.all(np.isfinite(values)):
        raise DescriptorError(f"Deskriptor bei {patch.center_px} enthält nicht-endliche Werte")
    return values


def describe_sample(image: np.ndarray, sample: ProjectedSample,
                    params: DescriptorParams = DescriptorParams()) -> Optional[np.ndarray]:
    """Roh-Deskriptor eines Abtastpunkts oder None, wenn der Ausschnitt nicht ins Bild passt."""
    patch = extract_patch(image, sample, params)
    if patch is None:
        return None
    return raw_descriptor(patch, params)


def fit_color_scaling(raw: np.ndarray) -> np.ndarray:
    """Standardabweichung der 9 Farbdimensionen über den Trainingssatz (0 -> 1)."""
    raw = np.atleast_2d(raw)
    std = raw[:, COLOR].std(axis=0)
    return np.where(std > 0, std, 1.0)


def finalize_descriptor(raw: np.ndarray, scaling: Optional[np.ndarray]) -> Descriptor:
    """Farbskalierung anwenden und auf Einheitslänge normieren."""
    raw = np.asarray(raw, dtype=float)
    color = raw[COLOR] if scaling is None else raw[COLOR] / np.asarray(scaling, dtype=float)
    return compose(color, raw[GRAD], raw[STEER], raw[HESSIAN], raw[DOG])


def finalize_matrix(raw: np.ndarray, scaling: Optional[np.ndarray]) -> np.ndarray:
    """finalize_descriptor für jede Zeile einer (n, 29)-Matrix."""
    raw = np.atleast_2d(raw)
    return np.array([finalize_descriptor(row, scaling).values for row in raw]).reshape(-1, DESCRIPTOR_LENGTH)


# --- Stapelverarbeitung ---

_WORKER_IMAGE: Optional[np.ndarray] = None
_WORKER_PARAMS: Optional[DescriptorParams] = None


def _init_worker(image: np.ndarray, params: DescriptorParams) -> None:
    global _WORKER_IMAGE, _WORKER_PARAMS
    _WORKER_IMAGE = image
    _WORKER_PARAMS = params


def _describe_chunk(chunk: List[ProjectedSample]) -> List[Optional[np.ndarray]]:
    return [describe_sample(_WORKER_IMAGE, sample, _WORKER_PARAMS) for sample in chunk]


def extract_raw_descriptors(image: np.ndarray, samples: Sequence[ProjectedSample],
                            params: DescriptorParams = DescriptorParams(),
                            workers: int = 1, verbose: bool = False) -> Tuple[np.ndarray, List[int]]:
    """
    Roh-Deskriptoren für viele Abtastpunkte.

    Args:
        image: Bild (H, W, 3)
        samples: Abtastpunkte
        params: Deskriptor-Parameter
        workers: Anzahl Prozesse (1 = im aktuellen Prozess)
        verbose: Fortschritt ausgeben

    Returns:
        Tuple von (Matrix (k, 29), Indizes der Abtastpunkte mit gültigem Ausschnitt);
        Reihenfolge wie in samples
    """
    samples = list(samples)
    if workers <= 1 or len(samples) < 2 * workers:
        results = [describe_sample(image, sample, params) for sample in samples]
    else:
        chunk_size = int(math.ceil(len(samples) / (workers * 4)))
        chunks = [samples[i:i + chunk_size] for i in range(0, len(samples), chunk_size)]
        results = []
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(image, params)) as pool:
            for part in pool.map(_describe_chunk, chunks):
                results.extend(part)

    kept = [i for i, row in enumerate(results) if row is not None]
    if verbose:
        print(f"   Descriptors: {len(kept)} of {len(samples)} samples (skipped {len(samples) - len(kept)})")
    if not kept:
        return np.zeros((0, DESCRIPTOR_LENGTH)), []
    return np.array([results[i] for i in kept]), kept
