"""Procedural scenes, their renderer and detector, and the synthetic text encoders.

Images are 3x16x16 in [-1, 1] on a black background. The canvas is a 4x4
grid of 4-pixel cells; a shape occupies at most the top-left 3x3 pixels of
its cell so neighbouring shapes never touch.

Prompts are lists of ``attribute:value`` clauses. A clause may be repeated;
repeats restate information already present and are what "prompt length"
means here. The pooled encoder sees the set of distinct clauses, the sequence
encoder sees every clause.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, LengthError, VocabularyError

GRID = 4
CELL = 4
RESOLUTION = GRID * CELL
N_TEXT = 8
D_POOL = 32
D_TOKEN = 64
ENCODER_SEED = 1234

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
COLOR_NAMES = tuple(COLORS)
KINDS = ("circle", "square")
SIZES = ("small", "large")
DETAILS = ("plain", "textured")
LAYOUTS = ("top", "bottom", "left", "right")
COUNTS = (1, 2, 3, 4, 5)

# attribute -> ordered values; the order fixes clause normalization and the pooled blocks
VOCAB: dict[str, tuple[str, ...]] = {
    "count": tuple(str(c) for c in COUNTS),
    "color": COLOR_NAMES,
    "shape": KINDS,
    "size": SIZES,
    "detail": DETAILS,
    "layout": LAYOUTS,
}
ATTRS = tuple(VOCAB)

# textured shapes dim every pixel on this parity
_TEXTURE_DIM = 0.0

_MASKS = {
    ("square", "large"): np.ones((3, 3), bool),
    ("circle", "large"): np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool),
    ("square", "small"): np.array([[0, 0, 0], [0, 1, 1], [0, 1, 1]], bool),
    ("circle", "small"): np.array([[0, 0, 0], [0, 1, 1], [0, 1, 0]], bool),
}


@dataclass(frozen=True)
class ToyScene:
    kind: str
    count: int
    color: str
    positions: tuple[tuple[int, int], ...]
    size: str = "large"
    detail: str = "plain"

    def __post_init__(self):
        if self.kind not in KINDS or self.size not in SIZES or self.detail not in DETAILS:
            raise ConfigError(f"invalid scene attributes: {self.kind}/{self.size}/{self.detail}")
        if self.color not in COLORS:
            raise ConfigError(f"unknown color {self.color!r}")
        if not 1 <= self.count <= 5:
            raise ConfigError(f"count must be in 1..5, got {self.count}")
        cells = tuple(tuple(int(v) for v in p) for p in self.positions)
        if len(cells) != self.count or len(set(cells)) != self.count:
            raise ConfigError("positions must be count distinct cells")
        if any(not (0 <= r < GRID and 0 <= c < GRID) for r, c in cells):
            raise ConfigError("position outside the 4x4 grid")
        object.__setattr__(self, "positions", tuple(sorted(cells)))

    @property
    def layout(self) -> str | None:
        """The half of the canvas holding every shape, if any (top/bottom before left/right)."""
        halves = layouts_of(self.positions)
        return halves[0] if halves else None


def layouts_of(cells) -> tuple[str, ...]:
    """Every canvas half that contains all of ``cells``, in LAYOUTS order."""
    rows = [r for r, _ in cells]
    cols = [c for _, c in cells]
    half = GRID // 2
    held = {"top": max(rows) < half, "bottom": min(rows) >= half,
            "left": max(cols) < half, "right": min(cols) >= half}
    return tuple(k for k in LAYOUTS if held[k])


@dataclass(frozen=True)
class ToyPrompt:
    clauses: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for attr, value in self.clauses:
            if attr not in VOCAB or value not in VOCAB[attr]:
                raise VocabularyError(f"unknown clause {attr}:{value}")
        ordered = tuple(sorted(self.clauses, key=lambda c: (ATTRS.index(c[0]), VOCAB[c[0]].index(c[1]))))
        object.__setattr__(self, "clauses", ordered)

    @classmethod
    def parse(cls, text: str) -> "ToyPrompt":
        text = text.strip()
        if not text:
            return cls()
        clauses = []
        for part in text.split(","):
            attr, sep, value = part.strip().partition(":")
            if not sep:
                raise VocabularyError(f"malformed clause {part.strip()!r}")
            clauses.append((attr.strip(), value.strip()))
        return cls(tuple(clauses))

    @classmethod
    def of(cls, **attrs) -> "ToyPrompt":
        return cls(tuple((k, str(v)) for k, v in attrs.items() if v is not None))

    @property
    def canonical(self) -> str:
        return ", ".join(f"{a}:{v}" for a, v in self.clauses)

    def __str__(self):
        return self.canonical

    def get(self, attr: str) -> str | None:
        for a, v in self.clauses:
            if a == attr:
                return v
        return None

    @property
    def distinct(self) -> tuple[tuple[str, str], ...]:
        return tuple(dict.fromkeys(self.clauses))

    @property
    def redundant(self) -> int:
        return len(self.clauses) - len(self.distinct)

    def with_clauses(self, *extra: tuple[str, str]) -> "ToyPrompt":
        return ToyPrompt(self.clauses + tuple(extra))


UNCONDITIONAL = ToyPrompt()


def describe(scene: ToyScene, rng: np.random.Generator | None = None, redundancy: bool = False) -> ToyPrompt:
    """A prompt that truthfully describes ``scene``.

    Count, color and detail are always stated; shape, size and layout (when
    one holds) are stated with probability 1/2 each when ``rng`` is given.
    With ``redundancy`` some stated clauses are repeated, up to 8 clauses.
    """
    clauses = [("count", str(scene.count)), ("color", scene.color), ("detail", scene.detail)]
    optional = [("shape", scene.kind), ("size", scene.size)]
    if scene.layout is not None:
        optional.append(("layout", scene.layout))
    for clause in optional:
        if rng is None or rng.random() < 0.5:
            clauses.append(clause)
    if redundancy and rng is not None and len(clauses) < N_TEXT:
        k = int(rng.integers(1, N_TEXT - len(clauses) + 1))
        base = list(clauses)
        clauses += [base[int(j)] for j in rng.integers(0, len(base), size=k)]
    return ToyPrompt(tuple(clauses))


# -- rendering ---------------------------------------------------------------

def _texture(res: int = RESOLUTION) -> np.ndarray:
    r, c = np.indices((res, res))
    return (r + c) % 2 == 1


def render_scene(scene: ToyScene, resolution: int = RESOLUTION) -> np.ndarray:
    """Raster ``scene`` to a float32 array [3, 16, 16] in [-1, 1]."""
    if resolution != RESOLUTION:
        raise ConfigError(f"only resolution {RESOLUTION} is supported")
    img = np.full((3, RESOLUTION, RESOLUTION), -1.0, np.float32)
    mask = np.zeros((RESOLUTION, RESOLUTION), bool)
    shape = _MASKS[(scene.kind, scene.size)]
    for r, c in scene.positions:
        mask[r * CELL:r * CELL + 3, c * CELL:c * CELL + 3] |= shape
    rgb = np.array(COLORS[scene.color], np.float32)
    img[:, mask] = rgb[:, None]
    if scene.detail == "textured":
        dim = mask & _texture()
        for ch in np.nonzero(rgb > 0)[0]:
            img[ch][dim] = _TEXTURE_DIM
    return img


@dataclass
class Detection:
    count: int = 0
    color: str | None = None
    cells: tuple[tuple[int, int], ...] = ()
    textured: bool = False
    rejected: bool = True
    reason: str = ""

    def matches(self, scene: ToyScene) -> bool:
        return (not self.rejected and self.count == scene.count and self.color == scene.color
                and self.cells == scene.positions)

    def satisfies(self, prompt: "ToyPrompt") -> bool:
        """Every stated attribute the detector can observe agrees with the image.

        Shape and size are not observable at this resolution and are ignored.
        """
        if self.rejected:
            return False
        checks = {
            "count": str(self.count),
            "color": self.color,
            "detail": "textured" if self.textured else "plain",
        }
        for attr, value in prompt.distinct:
            if attr == "layout" and value not in layouts_of(self.cells):
                return False
            if attr in checks and checks[attr] != value:
                return False
        return True


_FG_THRESHOLD = -0.5
_MIN_COMPONENT = 2
_MAX_COMPONENT = 12


def detect_scene(image: np.ndarray) -> Detection:
    """Recover count, dominant color, occupied cells and the detail flag from an image.

    Foreground is any pixel whose brightest channel exceeds -0.5. Components
    use 8-connectivity; components of one pixel are ignored as noise. Anything
    that cannot be a rendered scene is rejected.
    """
    img = np.asarray(image, np.float64)
    if img.shape != (3, RESOLUTION, RESOLUTION):
        raise ConfigError(f"expected image of shape (3, 16, 16), got {img.shape}")
    bright = img.max(axis=0)
    fg = bright > _FG_THRESHOLD
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), int))
    sizes = ndimage.sum(fg, labels, index=np.arange(1, n + 1)) if n else np.zeros(0)
    keep = [i + 1 for i, s in enumerate(sizes) if s >= _MIN_COMPONENT]
    if not keep:
        return Detection(reason="no components")
    if len(keep) > 5:
        return Detection(count=len(keep), reason="more than five components")
    cells = []
    for lab in keep:
        rows, cols = np.nonzero(labels == lab)
        if len(rows) > _MAX_COMPONENT or np.ptp(rows) >= CELL or np.ptp(cols) >= CELL:
            return Detection(count=len(keep), reason="component larger than a cell")
        cells.append((int(rows.mean()) // CELL, int(cols.mean()) // CELL))
    if len(set(cells)) != len(cells):
        return Detection(count=len(keep), reason="two components in one cell")
    region = np.isin(labels, keep)
    color = _dominant_color(img[:, region])
    if color is None:
        return Detection(count=len(keep), cells=tuple(sorted(cells)), reason="unclassifiable color")
    return Detection(count=len(keep), color=color, cells=tuple(sorted(cells)),
                     textured=_high_frequency(bright, region) > 0.5, rejected=False)


def _dominant_color(pixels: np.ndarray) -> str | None:
    mean = pixels.mean(axis=1)
    best, best_res = None, np.inf
    for name, rgb in COLORS.items():
        on = np.array(rgb) > 0
        level = mean[on].mean()
        fit = np.where(on, level, -1.0)
        res = float(np.abs(mean - fit).max())
        if level > _FG_THRESHOLD and res < best_res:
            best, best_res = name, res
    return best if best_res < 0.75 else None


def _high_frequency(bright: np.ndarray, region: np.ndarray) -> float:
    """Brightness contrast between the two checkerboard parities inside ``region``."""
    odd = _texture() & region
    even = ~_texture() & region
    if not odd.any() or not even.any():
        return 0.0
    return float(bright[even].mean() - bright[odd].mean())


def detail_energy(image: np.ndarray) -> float:
    """Checkerboard energy of the foreground; the quality proxy of the sweeps."""
    img = np.asarray(image, np.float64)
    bright = img.max(axis=0)
    region = bright > _FG_THRESHOLD
    return max(0.0, _high_frequency(bright, region))


# -- encoders --------------------------------------------------------------------

def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class Encoders:
    """Seed-fixed pooled and sequence encoders.

    The pooled vector places each attribute in its own block of ``d_pool``
    (block width = number of values); a clause contributes an orthogonal
    rotation of its one-hot code. Sequence tokens are orthonormal rows scaled
    to norm sqrt(d_token).
    """

    seed: int = ENCODER_SEED
    d_pool: int = D_POOL
    d_token: int = D_TOKEN
    blocks: dict[str, slice] = field(init=False)
    _pool_rot: dict[str, np.ndarray] = field(init=False)
    _tokens: dict[tuple[str, str], np.ndarray] = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.blocks, self._pool_rot = {}, {}
        start = 0
        for attr, values in VOCAB.items():
            self.blocks[attr] = slice(start, start + len(values))
            self._pool_rot[attr] = _orthogonal(rng, len(values)).astype(np.float32)
            start += len(values)
        if start > self.d_pool:
            raise ConfigError(f"d_pool={self.d_pool} too small for {start} attribute values")
        clauses = [(a, v) for a, vals in VOCAB.items() for v in vals]
        if len(clauses) > self.d_token:
            raise ConfigError(f"d_token={self.d_token} too small for {len(clauses)} clauses")
        basis = _orthogonal(rng, self.d_token)[: len(clauses)] * np.sqrt(self.d_token)
        self._tokens = {c: basis[i].astype(np.float32) for i, c in enumerate(clauses)}

    def pooled(self, prompt: ToyPrompt) -> np.ndarray:
        vec = np.zeros(self.d_pool, np.float32)
        for attr, value in prompt.distinct:
            vec[self.blocks[attr]] += self._pool_rot[attr][:, VOCAB[attr].index(value)]
        return vec

    def sequence(self, prompt: ToyPrompt) -> tuple[np.ndarray, np.ndarray]:
        """Token matrix [8, d_token] and a mask of real (non-null) positions.

        Null positions are zero here; the model substitutes its learned null
        sequence for them.
        """
        if len(prompt.clauses) > N_TEXT:
            raise LengthError(f"prompt has {len(prompt.clauses)} clauses, at most {N_TEXT} allowed")
        mat = np.zeros((N_TEXT, self.d_token), np.float32)
        mask = np.zeros(N_TEXT, bool)
        for i, clause in enumerate(prompt.clauses):
            mat[i] = self._tokens[clause]
            mask[i] = True
        return mat, mask

    def token(self, clause: tuple[str, str]) -> np.ndarray:
        return self._tokens[clause]


_default_encoders: Encoders | None = None


def default_encoders() -> Encoders:
    global _default_encoders
    if _default_encoders is None:
        _default_encoders = Encoders()
    return _default_encoders


def pooled_encode(prompt: ToyPrompt, enc: Encoders | None = None) -> np.ndarray:
    return (enc or default_encoders()).pooled(prompt)


def sequence_encode(prompt: ToyPrompt, enc: Encoders | None = None) -> tuple[np.ndarray, np.ndarray]:
    return (enc or default_encoders()).sequence(prompt)


def encode_batch(prompts, enc: Encoders | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pooled [B, d_pool], tokens [B, 8, d_token] and masks [B, 8] for a list of prompts."""
    enc = enc or default_encoders()
    pooled = np.stack([enc.pooled(p) for p in prompts])
    seqs = [enc.sequence(p) for p in prompts]
    return pooled, np.stack([s[0] for s in seqs]), np.stack([s[1] for s in seqs])


# -- dataset ---------------------------------------------------------------------

def random_scene(rng: np.random.Generator) -> ToyScene:
    count = int(rng.integers(1, 6))
    flat = rng.choice(GRID * GRID, size=count, replace=False)
    return ToyScene(
        kind=KINDS[int(rng.integers(2))],
        count=count,
        color=COLOR_NAMES[int(rng.integers(6))],
        positions=tuple((int(i) // GRID, int(i) % GRID) for i in flat),
        size=SIZES[int(rng.integers(2))],
        detail=DETAILS[int(rng.integers(2))],
    )


@dataclass
class ToyDataset:
    seed: int
    scenes: list[ToyScene]
    prompts: list[ToyPrompt]
    images: np.ndarray  # [N, 3, 16, 16]

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(zip(self.scenes, self.prompts, self.images))


def sample_dataset(seed: int, size: int) -> ToyDataset:
    """``size`` uniform scenes with faithful prompts; half carry repeated clauses."""
    if size < 1:
        raise ConfigError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    scenes, prompts = [], []
    for _ in range(size):
        scene = random_scene(rng)
        scenes.append(scene)
        prompts.append(describe(scene, rng, redundancy=bool(rng.random() < 0.5)))
    images = np.stack([render_scene(s) for s in scenes])
    return ToyDataset(seed, scenes, prompts, images)


# -- export ------------------------------------------------------------------------

_MAGIC = b"MGDATA1\0"
_HEADER = struct.Struct("<8sqqqq")
# kind, count, color, size, detail, then 5 (row, col) pairs padded with -1
_RECORD = struct.Struct("<5b10b")


def export_dataset(ds: ToyDataset, path: str | Path, encoder_seed: int = ENCODER_SEED) -> None:
    """Write a split: header (seed, size, resolution, encoder seed) then fixed-size records."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, ds.seed, len(ds), RESOLUTION, encoder_seed))
        for scene, image in zip(ds.scenes, ds.images):
            cells = [v for rc in scene.positions for v in rc] + [-1] * (10 - 2 * scene.count)
            fh.write(_RECORD.pack(KINDS.index(scene.kind), scene.count, COLOR_NAMES.index(scene.color),
                                  SIZES.index(scene.size), DETAILS.index(scene.detail), *cells))
            fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def load_dataset(path: str | Path) -> tuple[dict, list[ToyScene], np.ndarray]:
    raw = Path(path).read_bytes()
    magic, seed, size, res, enc_seed = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ConfigError(f"{path} is not a dataset export")
    off = _HEADER.size
    nimg = 3 * res * res
    scenes, images = [], np.empty((size, 3, res, res), np.float32)
    for i in range(size):
        kind, count, color, sz, detail, *cells = _RECORD.unpack_from(raw, off)
        off += _RECORD.size
        images[i] = np.frombuffer(raw, dtype="<f4", count=nimg, offset=off).reshape(3, res, res)
        off += 4 * nimg
        scenes.append(ToyScene(KINDS[kind], count, COLOR_NAMES[color],
                               tuple(zip(cells[0:2 * count:2], cells[1:2 * count:2])),
                               SIZES[sz], DETAILS[detail]))
    header = {"seed": seed, "size": size, "resolution": res, "encoder_seed": enc_seed}
    return header, scenes, images
