"""Procedural relational VQA data, its binary container, and feature-map files.

Scenes hold six objects (square or circle), one per palette color, on a
mid-gray canvas. Questions come from a closed grammar in three families:
non-relational (shape / left-side queries about one object), relational
(shape of the nearest / farthest object) and counting (objects sharing a
shape). Answers are computed from integer pixel geometry, so distance ties
are exact and broken by ascending object index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError
from .tensor import Tensor

SHAPES = ("square", "circle")
COLORS = ("red", "green", "blue", "orange", "yellow", "magenta")
PALETTE = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.5, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
    ],
    dtype=np.float32,
)
BACKGROUND = 0.5
N_OBJECTS = 6
MAX_ATTEMPTS = 1000

QUESTION_VOCAB = (
    "what", "shape", "is", "the", "object", "on", "left", "closest", "to",
    "farthest", "from", "how", "many", "objects", "have", "same", "as", "?",
) + COLORS
ANSWER_VOCAB = ("square", "circle", "yes", "no", "1", "2", "3", "4", "5", "6") + tuple(
    f"unused{i}" for i in range(10, 16)
)
MAX_QUESTION_LEN = 12
PAD = -1

FAMILIES = ("non-relational", "relational", "count")
NON_RELATIONAL, RELATIONAL, COUNT = range(3)

_WORD = {w: i for i, w in enumerate(QUESTION_VOCAB)}
_ANSWER = {a: i for i, a in enumerate(ANSWER_VOCAB)}

TEMPLATES = {
    "query_shape": (NON_RELATIONAL, "what shape is the {c} object ?"),
    "query_left": (NON_RELATIONAL, "is the {c} object on the left ?"),
    "closest": (RELATIONAL, "what shape is the object closest to the {c} object ?"),
    "farthest": (RELATIONAL, "what shape is the object farthest from the {c} object ?"),
    "count": (COUNT, "how many objects have the same shape as the {c} object ?"),
}
_BY_FAMILY = {f: [name for name, (fam, _) in TEMPLATES.items() if fam == f] for f in range(3)}


@dataclass(frozen=True)
class SceneObject:
    shape: int  # index into SHAPES
    color: int  # index into COLORS
    x: int  # pixel column of the center
    y: int  # pixel row of the center
    size: int  # side / diameter in pixels (odd)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    canvas: int = 64

    def unit_position(self, i: int) -> tuple[float, float]:
        o = self.objects[i]
        return (o.x + 0.5) / self.canvas, (o.y + 0.5) / self.canvas

    def by_color(self, color: int) -> int:
        for i, o in enumerate(self.objects):
            if o.color == color:
                return i
        raise KeyError(f"no object with color {COLORS[color]}")


def default_object_size(canvas: int) -> int:
    return 2 * (canvas // 14) + 1


def generate_scene(seed, canvas: int = 64, size: int | None = None) -> Scene:
    """Place six objects by rejection sampling; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    size = size or default_object_size(canvas)
    r = size // 2
    colors = rng.permutation(len(COLORS))
    shapes = rng.integers(0, len(SHAPES), N_OBJECTS)
    placed: list[tuple[int, int]] = []
    attempts = 0
    while len(placed) < N_OBJECTS:
        if attempts >= MAX_ATTEMPTS:
            raise GenerationError(f"could not place {N_OBJECTS} objects in {MAX_ATTEMPTS} attempts")
        attempts += 1
        x, y = (int(v) for v in rng.integers(r, canvas - r, 2))
        if all((x - px) ** 2 + (y - py) ** 2 >= size * size for px, py in placed):
            placed.append((x, y))
    objs = tuple(
        SceneObject(int(shapes[i]), int(colors[i]), x, y, size) for i, (x, y) in enumerate(placed)
    )
    return Scene(objs, canvas)


def render(scene: Scene) -> np.ndarray:
    """Rasterize to a ``[canvas, canvas, 3]`` float32 image in [0, 1], no anti-aliasing."""
    n = scene.canvas
    img = np.full((n, n, 3), BACKGROUND, dtype=np.float32)
    rows, cols = np.mgrid[0:n, 0:n]
    for o in scene.objects:
        r = o.size // 2
        dy, dx = rows - o.y, cols - o.x
        if SHAPES[o.shape] == "square":
            inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        else:
            inside = dx * dx + dy * dy <= r * r
        img[inside] = PALETTE[o.color]
    return img


def tokenize(text: str) -> list[int]:
    return [_WORD[w] for w in text.split()]


def detokenize(tokens) -> list[str]:
    return [QUESTION_VOCAB[t] for t in tokens if t >= 0]


def _sq_dist(a: SceneObject, b: SceneObject) -> int:
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2


def answer_question(scene: Scene, template: str, color: int) -> int:
    objs = scene.objects
    t = scene.by_color(color)
    target = objs[t]
    if template == "query_shape":
        return _ANSWER[SHAPES[target.shape]]
    if template == "query_left":
        return _ANSWER["yes" if 2 * target.x + 1 < scene.canvas else "no"]
    if template in ("closest", "farthest"):
        others = np.array([i for i in range(len(objs)) if i != t])
        d = np.array([_sq_dist(target, objs[i]) for i in others])
        # argmin/argmax return the first extreme, i.e. the lowest object index
        pick = others[np.argmin(d) if template == "closest" else np.argmax(d)]
        return _ANSWER[SHAPES[objs[pick].shape]]
    if template == "count":
        same = sum(o.shape == target.shape for o in objs)
        return _ANSWER[str(same)]
    raise ValueError(f"unknown template {template!r}")


def make_qa(scene: Scene, seed) -> tuple[list[int], int, int]:
    """Sample a question about ``scene``; returns ``(tokens, answer, family)``."""
    rng = np.random.default_rng(seed)
    family = int(rng.integers(len(FAMILIES)))
    options = _BY_FAMILY[family]
    template = options[int(rng.integers(len(options)))]
    color = int(rng.integers(len(COLORS)))
    text = TEMPLATES[template][1].format(c=COLORS[color])
    return tokenize(text), answer_question(scene, template, color), family


@dataclass
class Sample:
    image: np.ndarray
    tokens: list[int]
    answer: int
    family: int
    scene: Scene | None = None


def sample_seeds(master_seed: int, i: int, per_scene: int = 1) -> tuple[list[int], list[int]]:
    """Scene and question seeds for sample ``i``.

    Consecutive runs of ``per_scene`` samples share one scene and ask
    independently drawn questions about it.
    """
    return [master_seed, i // per_scene, 0], [master_seed, i, 1]


def make_sample(master_seed: int, i: int, canvas: int = 64, per_scene: int = 1) -> Sample:
    scene_seed, qa_seed = sample_seeds(master_seed, i, per_scene)
    scene = generate_scene(scene_seed, canvas)
    tokens, answer, family = make_qa(scene, qa_seed)
    return Sample(render(scene), tokens, answer, family, scene)


@dataclass
class Dataset:
    """Column-oriented samples. ``tokens`` is ``[N, T]`` padded with -1."""

    images: np.ndarray
    tokens: np.ndarray
    answers: np.ndarray
    families: np.ndarray
    question_vocab: list[str] = field(default_factory=lambda: list(QUESTION_VOCAB))
    answer_vocab: list[str] = field(default_factory=lambda: list(ANSWER_VOCAB))

    def __len__(self):
        return len(self.answers)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def lengths(self) -> np.ndarray:
        return (self.tokens >= 0).sum(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx], self.tokens[idx], self.answers[idx], self.families[idx],
            list(self.question_vocab), list(self.answer_vocab),
        )

    def samples(self):
        for i in range(len(self)):
            yield Sample(self.images[i], [int(t) for t in self.tokens[i] if t >= 0],
                         int(self.answers[i]), int(self.families[i]))

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of every column and both vocabularies."""
        return (
            self.question_vocab == other.question_vocab
            and self.answer_vocab == other.answer_vocab
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.images, other.images),
                    (self.tokens, other.tokens),
                    (self.answers, other.answers),
                    (self.families, other.families),
                )
            )
        )

    @classmethod
    def from_samples(cls, samples, image_shape=(64, 64, 3), max_len: int = MAX_QUESTION_LEN) -> "Dataset":
        samples = list(samples)
        n = len(samples)
        images = np.zeros((n, *image_shape), dtype=np.float32)
        tokens = np.full((n, max_len), PAD, dtype=np.int64)
        answers = np.zeros(n, dtype=np.int64)
        families = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(samples):
            images[i] = s.image
            tokens[i, : len(s.tokens)] = s.tokens
            answers[i] = s.answer
            families[i] = s.family
        return cls(images, tokens, answers, families)


def generate_dataset(n: int, seed: int, canvas: int = 64, per_scene: int = 1) -> Dataset:
    """``n`` samples; sample ``i`` depends only on ``(seed, i, per_scene)``.

    With ``per_scene > 1`` each scene is asked that many questions, so an
    image alone no longer determines the answer.
    """
    if n < 0:
        raise ValueError("sample count must be non-negative")
    if per_scene < 1:
        raise ValueError("per_scene must be at least 1")
    if per_scene == 1:
        samples = (make_sample(seed, i, canvas) for i in range(n))
    else:
        samples = _shared_scene_samples(n, seed, canvas, per_scene)
    return Dataset.from_samples(samples, (canvas, canvas, 3))


def _shared_scene_samples(n: int, seed: int, canvas: int, per_scene: int):
    scene = image = None
    for i in range(n):
        scene_seed, qa_seed = sample_seeds(seed, i, per_scene)
        if i % per_scene == 0:
            scene = generate_scene(scene_seed, canvas)
            image = render(scene)
        tokens, answer, family = make_qa(scene, qa_seed)
        yield Sample(image, tokens, answer, family, scene)


def answer_histogram(ds: Dataset) -> dict[str, dict[str, int]]:
    """Answer counts per question family."""
    out: dict[str, dict[str, int]] = {}
    for f, name in enumerate(FAMILIES):
        answers = ds.answers[ds.families == f]
        values, counts = np.unique(answers, return_counts=True)
        out[name] = {ds.answer_vocab[v]: int(c) for v, c in zip(values, counts)}
    return out


def normalize_image(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Divide by the whole-tensor L2 norm (guarded by ``eps``)."""
    x = np.asarray(x)
    return x / max(float(np.sqrt((x.astype(np.float64) ** 2).sum())), eps)


def normalize_images(batch: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """:func:`normalize_image` applied to each image of a ``[B, ...]`` batch."""
    flat = batch.reshape(len(batch), -1).astype(np.float64)
    norms = np.maximum(np.sqrt((flat * flat).sum(axis=1)), eps)
    return (batch / norms.reshape(-1, *([1] * (batch.ndim - 1)))).astype(batch.dtype)


# --------------------------------------------------------------------------
# Binary container
# --------------------------------------------------------------------------

DATASET_MAGIC = b"HVQA"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIII")
_PAD_TOKEN = 0xFFFF


def _record_dtype(h: int, w: int, c: int, max_len: int) -> np.dtype:
    return np.dtype(
        [("image", "<f4", (h, w, c)), ("tokens", "<u2", (max_len,)), ("answer", "<u2"), ("family", "u1")]
    )


def _vocab_blob(words) -> bytes:
    raw = "\n".join(words).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as an HVQA container.

    Layout: magic, u32 version, u32 count, u32 width, height, channels,
    max question length, question vocabulary size, answer vocabulary size;
    both vocabularies as u32-length-prefixed newline-joined UTF-8; then
    fixed-width little-endian records.
    """
    n = len(ds)
    h, w, c = ds.image_shape if n else ds.images.shape[1:]
    max_len = ds.tokens.shape[1]
    recs = np.zeros(n, dtype=_record_dtype(h, w, c, max_len))
    recs["image"] = ds.images
    recs["tokens"] = np.where(ds.tokens >= 0, ds.tokens, _PAD_TOKEN)
    recs["answer"] = ds.answers
    recs["family"] = ds.families
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, n, w, h, c, max_len, len(ds.question_vocab), len(ds.answer_vocab)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(_vocab_blob(ds.question_vocab))
        f.write(_vocab_blob(ds.answer_vocab))
        f.write(recs.tobytes())


def _read_vocab(buf: bytes, offset: int, expected: int) -> tuple[list[str], int]:
    if offset + 4 > len(buf):
        raise FormatError("truncated vocabulary length", offset)
    (size,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4
    if start + size > len(buf):
        raise FormatError("truncated vocabulary", start)
    words = buf[start : start + size].decode("utf-8").split("\n") if size else []
    if len(words) != expected:
        raise FormatError(f"vocabulary has {len(words)} entries, header says {expected}", offset)
    return words, start + size


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError("bad magic, expected HVQA", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, n, w, h, c, max_len, qv, av = _HEADER.unpack_from(buf, 0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    qvocab, off = _read_vocab(buf, _HEADER.size, qv)
    avocab, off = _read_vocab(buf, off, av)
    dt = _record_dtype(h, w, c, max_len)
    body = len(buf) - off
    if body < n * dt.itemsize:
        complete = body // dt.itemsize
        raise FormatError(f"truncated: {complete} of {n} records present", off + complete * dt.itemsize)
    if body > n * dt.itemsize:
        raise FormatError("trailing bytes after last record", off + n * dt.itemsize)
    recs = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    tokens = recs["tokens"].astype(np.int64)
    tokens[tokens == _PAD_TOKEN] = PAD
    return Dataset(
        np.array(recs["image"], dtype=np.float32).reshape(n, h, w, c),
        tokens.reshape(n, max_len),
        recs["answer"].astype(np.int64),
        recs["family"].astype(np.int64),
        qvocab,
        avocab,
    )


# --------------------------------------------------------------------------
# Externally computed feature maps
# --------------------------------------------------------------------------

FEATURE_MAGIC = b"HFMP"
_FEATURE_HEADER = struct.Struct("<4sIII")


def write_feature_map(fmap: np.ndarray, path) -> None:
    """Store a ``[w, h, d]`` map: magic, u32 w, h, d, then row-major f32."""
    arr = np.asarray(fmap, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"feature map must be [w, h, d], got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, *arr.shape))
        f.write(arr.tobytes())


def load_feature_map(path) -> Tensor:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise FormatError("bad magic, expected HFMP", 0)
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, w, h, d = _FEATURE_HEADER.unpack_from(buf, 0)
    expected = w * h * d * 4
    payload = len(buf) - _FEATURE_HEADER.size
    if payload != expected:
        raise FormatError(
            f"payload is {payload} bytes, header {w}x{h}x{d} needs {expected}",
            _FEATURE_HEADER.size + min(payload, expected),
        )
    arr = np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(w, h, d)
    return Tensor(arr.astype(np.float32))
