"""Attention-mask overlays written as binary PPM images.

Each cell of a ``w x h`` grid owns the pixel block
``rows [i*H//w, (i+1)*H//w) x cols [j*W//h, (j+1)*W//h)``. Pixels of
cells the model did not attend are multiplied by :data:`DARKEN`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import FormatError
from .model import VQAModel

DARKEN = 0.3


def cell_boxes(height: int, width: int, w: int, h: int):
    """Yield ``(cell, row_slice, col_slice)`` in row-major cell order."""
    for i in range(w):
        for j in range(h):
            yield i * h + j, slice(i * height // w, (i + 1) * height // w), slice(j * width // h, (j + 1) * width // h)


def darken(image: np.ndarray, cell_mask: np.ndarray, factor: float = DARKEN) -> np.ndarray:
    """Scale the pixels of unselected cells. ``cell_mask`` is ``[w, h]`` boolean."""
    cell_mask = np.asarray(cell_mask, dtype=bool)
    if cell_mask.ndim != 2:
        raise ValueError(f"cell mask must be [w, h], got {cell_mask.shape}")
    out = np.array(image, dtype=np.float32, copy=True)
    H, W = out.shape[:2]
    w, h = cell_mask.shape
    flat = cell_mask.reshape(-1)
    for cell, rs, cs in cell_boxes(H, W, w, h):
        if not flat[cell]:
            out[rs, cs] *= factor
    return out


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)


def write_ppm(image: np.ndarray, path) -> None:
    """Write an ``[H, W, 3]`` image in [0, 1] as binary PPM (P6, maxval 255)."""
    px = to_bytes(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] pixels, got {px.shape}")
    H, W, _ = px.shape
    with open(path, "wb") as f:
        f.write(f"P6 {W} {H} 255\n".encode("ascii"))
        f.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into ``[H, W, 3]`` uint8."""
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise FormatError("not a binary PPM", 0)
    W, H, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    pos += 1
    if len(buf) - pos != W * H * 3:
        raise FormatError(f"pixel payload is {len(buf) - pos} bytes, expected {W * H * 3}", pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(H, W, 3)


def attended_cells(model: VQAModel, images, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``([B, w, h] bool mask, [B] predicted answer)``.

    Soft attention discards nothing, so every cell counts as attended.
    """
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            res = model(images, tokens)
    finally:
        model.train(was)
    B, w, h, _ = res.fused.m.shape
    if res.selection is not None:
        mask = res.selection.cell_mask()
    elif res.st_mask is not None:
        mask = res.st_mask.reshape(B, w * h) > 0
    else:
        mask = np.ones((B, w * h), dtype=bool)
    return mask.reshape(B, w, h), res.logits.data.argmax(axis=1)


def render_samples(model: VQAModel, dataset: Dataset, indices, out_dir) -> list[Path]:
    """Write ``sample_<i>.ppm`` and ``sample_<i>.txt`` for each index; returns the image paths."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if len(idx) == 0:
        return []
    if idx.min() < 0 or idx.max() >= len(dataset):
        raise ValueError(f"sample index out of range for a dataset of {len(dataset)}")
    if model.config.model.encoder == "features":
        raise ValueError("visualization needs image inputs, not feature maps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    masks, preds = attended_cells(model, dataset.images[idx], dataset.tokens[idx])
    paths = []
    for i, mask, pred in zip(idx, masks, preds):
        img = darken(dataset.images[i], mask)
        path = out / f"sample_{i}.ppm"
        write_ppm(img, path)
        question = " ".join(dataset.question_vocab[t] for t in dataset.tokens[i] if t >= 0)
        cells = ",".join(str(c) for c in np.flatnonzero(mask.reshape(-1)))
        (out / f"sample_{i}.txt").write_text(
            f"question: {question}\n"
            f"predicted: {dataset.answer_vocab[pred]}\n"
            f"true: {dataset.answer_vocab[dataset.answers[i]]}\n"
            f"attended cells: {cells}\n"
        )
        paths.append(path)
    return paths
