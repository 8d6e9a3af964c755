"""Loss, Adam, the training loop, evaluation and checkpoints.

The loop is deterministic given ``(config, dataset)``: the batch order of
epoch ``e`` is a permutation drawn from ``default_rng([seed, e])`` and the
dropout stream of step ``s`` from ``default_rng([seed, 7, s])``. Neither
depends on generator state carried across steps, so a restored checkpoint
continues exactly where the original run would have.

Metrics CSV columns: ``step, loss, train_acc, eval_acc,
mean_selected_fraction, wall_ms``. Every step writes a row with the
minibatch loss and accuracy (training mode, before the update). At the
eval cadence and on the final step ``eval_acc`` is filled in, and
``train_acc`` is replaced by the accuracy over the whole training split in
eval mode.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import FAMILIES, Dataset
from .errors import ConfigError, FormatError, TrainingDiverged
from .model import VQAModel
from .tensor import Tensor

METRIC_COLUMNS = ("step", "loss", "train_acc", "eval_acc", "mean_selected_fraction", "wall_ms")


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``."""
    z = logits.data
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (z2.shape[0],) or not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"need one integer target per row, got {np.asarray(target)!r}")
    C = z2.shape[1]
    if t.min(initial=0) < 0 or t.max(initial=0) >= C:
        raise ValueError(f"target out of range for {C} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    nll = logsum - shifted[rows, t]
    B = len(t)

    def bw(g):
        probs = np.exp(shifted - logsum[:, None])
        probs[rows, t] -= 1
        gz = probs * (g / B)
        return (gz.reshape(z.shape).astype(z.dtype),)

    return Tensor.from_op(np.asarray(nll.mean(), dtype=z.dtype), (logits,), bw)


def l2_penalty(params, coeff: float) -> Tensor | None:
    """``coeff * sum(w**2)`` over weight matrices and kernels (biases and norm scales excluded)."""
    weights = [p for p in params if p.ndim >= 2]
    if coeff == 0 or not weights:
        return None
    total = None
    for w in weights:
        sq = (w * w).sum()
        total = sq if total is None else total + sq
    return total * coeff


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, names=None) -> None:
    """Bias-corrected Adam update in place.

    A missing gradient counts as zero. Raises :class:`TrainingDiverged` with
    per-parameter diagnostics if any gradient is non-finite; nothing is
    updated in that case.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
    if bad:
        names = names or [f"param{i}" for i in range(len(params))]
        raise TrainingDiverged(
            f"non-finite gradient in {', '.join(names[i] for i in bad)}",
            {
                "optimizer_step": state.t,
                "non_finite": [names[i] for i in bad],
                "grad_norms": {names[i]: float(np.linalg.norm(np.nan_to_num(g))) for i, g in enumerate(grads)},
            },
        )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * step).astype(p.dtype)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"HCKP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sQI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue its training run."""

    config: RunConfig
    step: int
    params: dict
    buffers: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    plateau: dict
    question_vocab: list
    answer_vocab: list

    def build_model(self) -> VQAModel:
        model = VQAModel(self.config, len(self.question_vocab), len(self.answer_vocab))
        for name, p in model.named_parameters():
            if name not in self.params:
                raise ConfigError(f"checkpoint has no parameter {name!r}")
            if self.params[name].shape != p.shape:
                raise ConfigError(f"parameter {name!r} has shape {self.params[name].shape}, model wants {p.shape}")
            p.data[...] = self.params[name]
        for name, _ in model.named_buffers():
            model.set_buffer(name, self.buffers[name])
        return model

    def adam_state(self, model: VQAModel) -> AdamState:
        names = [n for n, _ in model.named_parameters()]
        return AdamState([self.adam_m[n].copy() for n in names], [self.adam_v[n].copy() for n in names], self.adam_t)


def _entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES[arr.dtype.newbyteorder("<")]
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DTYPES[code]).tobytes()


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write an HCKP file.

    Layout: magic ``HCKP``, u32 version, 32-byte SHA-256 of the config
    text, u64 step, u32 entry count, then entries. Each entry is a u16
    name length, the UTF-8 name, a u8 dtype code (0 f32, 1 f64, 2 i64,
    3 u8), a u8 rank, u32 extents and the little-endian payload.
    """
    entries = [
        ("config", _text(ckpt.config.to_text())),
        ("vocab.question", _text("\n".join(ckpt.question_vocab))),
        ("vocab.answer", _text("\n".join(ckpt.answer_vocab))),
        ("adam.t", np.array(ckpt.adam_t, dtype=np.int64)),
        ("plateau", np.array([ckpt.plateau["best"], ckpt.plateau["stale"], ckpt.plateau["evals"]], dtype=np.float64)),
    ]
    entries += [(f"param/{k}", v) for k, v in ckpt.params.items()]
    entries += [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
    entries += [(f"adam.m/{k}", v) for k, v in ckpt.adam_m.items()]
    entries += [(f"adam.v/{k}", v) for k, v in ckpt.adam_v.items()]
    digest = hashlib.sha256(ckpt.config.to_text().encode()).digest()
    body = b"".join(_entry(n, a) for n, a in entries)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, digest, ckpt.step, len(entries)) + body)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected HCKP", 0)
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, digest, step, count = _CKPT_HEADER.unpack_from(buf, 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _CKPT_HEADER.size
    table = {}
    for _ in range(count):
        start = off
        try:
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
        except struct.error:
            raise FormatError("truncated entry header", start) from None
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} in entry {name!r}", start)
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise FormatError(f"truncated payload of entry {name!r}", off)
        table[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise FormatError("trailing bytes after last entry", off)
    try:
        text = table["config"].tobytes().decode()
        qv = table["vocab.question"].tobytes().decode().split("\n")
        av = table["vocab.answer"].tobytes().decode().split("\n")
        plateau = table["plateau"]
        adam_t = int(table["adam.t"].reshape(-1)[0])
    except KeyError as e:
        raise FormatError(f"missing entry {e.args[0]!r}", off) from None
    if hashlib.sha256(text.encode()).digest() != digest:
        raise FormatError("config text does not match header hash", 8)

    def section(prefix):
        return {k[len(prefix) :]: v for k, v in table.items() if k.startswith(prefix)}

    return Checkpoint(
        config=RunConfig.from_text(text),
        step=step,
        params=section("param/"),
        buffers=section("buffer/"),
        adam_m=section("adam.m/"),
        adam_v=section("adam.v/"),
        adam_t=adam_t,
        plateau={"best": float(plateau[0]), "stale": int(plateau[1]), "evals": int(plateau[2])},
        question_vocab=qv,
        answer_vocab=av,
    )


def snapshot(model: VQAModel, state: AdamState, step: int, plateau: dict, dataset: Dataset) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    return Checkpoint(
        config=model.config.copy(),
        step=step,
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: np.array(b, copy=True) for n, b in model.named_buffers()},
        adam_m={n: m.copy() for n, m in zip(names, state.m)},
        adam_v={n: v.copy() for n, v in zip(names, state.v)},
        adam_t=state.t,
        plateau=dict(plateau),
        question_vocab=list(dataset.question_vocab),
        answer_vocab=list(dataset.answer_vocab),
    )


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def predict(model: VQAModel, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Argmax answers in eval mode, without recording a graph."""
    was_training = model.training
    model.eval()
    out = np.empty(len(dataset), dtype=np.int64)
    try:
        with T.no_grad():
            for lo in range(0, len(dataset), batch_size):
                hi = min(lo + batch_size, len(dataset))
                res = model(dataset.images[lo:hi], dataset.tokens[lo:hi])
                out[lo:hi] = res.logits.data.argmax(axis=1)
    finally:
        model.train(was_training)
    return out


def accuracy_table(pred: np.ndarray, dataset: Dataset) -> dict:
    correct = pred == dataset.answers
    table = {"overall": float(correct.mean()) if len(correct) else float("nan"), "n": int(len(correct))}
    for i, fam in enumerate(FAMILIES):
        sel = dataset.families == i
        table[fam] = float(correct[sel].mean()) if sel.any() else float("nan")
        table[f"n_{fam}"] = int(sel.sum())
    return table


def evaluate(source, dataset: Dataset, batch_size: int = 256) -> dict:
    """Overall and per-family accuracy of a model, checkpoint or checkpoint path."""
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        for kind, ours, theirs in (
            ("question", source.question_vocab, dataset.question_vocab),
            ("answer", source.answer_vocab, dataset.answer_vocab),
        ):
            if list(ours) != list(theirs):
                raise ConfigError(f"{kind} vocabulary of the checkpoint does not match the dataset")
        model = source.build_model()
    else:
        model = source
    check_compatible(model.config, dataset)
    return accuracy_table(predict(model, dataset, batch_size), dataset)


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def check_compatible(config: RunConfig, dataset: Dataset) -> None:
    """Raise :class:`ConfigError` if the dataset cannot feed the configured model."""
    if len(dataset) and dataset.images.ndim != 4:
        raise ConfigError(f"dataset images must be [N, H, W, C], got {dataset.images.shape}")
    shape = dataset.images.shape[1:]
    m = config.model
    if m.encoder == "features":
        if shape[-1] != m.feature_channels:
            raise ConfigError(f"model.feature_channels = {m.feature_channels} but the dataset has {shape[-1]}")
    else:
        if shape != (m.image_size, m.image_size, 3):
            raise ConfigError(f"model.image_size = {m.image_size} needs [{m.image_size}, {m.image_size}, 3] images, dataset has {list(shape)}")
    if len(dataset) and (dataset.answers.max() >= len(dataset.answer_vocab) or dataset.tokens.max() >= len(dataset.question_vocab)):
        raise ConfigError("dataset contains ids outside its own vocabularies")
    k = config.attention.k
    if k and m.encoder != "features":
        w, h = config.grid()
        if k > w * h:
            raise ConfigError(f"attention.k = {k} exceeds the {w * h} cells of the {w}x{h} grid")


@dataclass
class TrainResult:
    model: VQAModel
    state: AdamState
    step: int
    rows: list = field(default_factory=list)
    stopped: str = "max_steps"
    epoch_fractions: list = field(default_factory=list)
    checkpoint: Checkpoint | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _batch_indices(seed: int, step: int, n: int, batch: int) -> tuple[int, np.ndarray]:
    per_epoch = max(n // batch, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return epoch, perm[pos * batch : (pos + 1) * batch]


def train(
    config: RunConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    out_dir=None,
    resume: Checkpoint | str | Path | None = None,
    log=None,
) -> TrainResult:
    """Train ``config`` on ``dataset`` until ``train.max_steps`` or a plateau.

    ``eval_dataset`` defaults to the training split. With ``out_dir`` the
    metrics CSV (``metrics.csv``), periodic checkpoints (``checkpoint.hckp``)
    and, on divergence, ``diverged.json`` are written there. ``log`` is an
    optional callable receiving each eval row as a dict.
    """
    config = config.copy().validate()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    check_compatible(config, dataset)
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    check_compatible(config, eval_dataset)
    tc = config.train

    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, Path)) else resume
        if ckpt.config.hash() != config.hash():
            changed = [k for k, v in config.items() if ckpt.config.get(k) != v and k != "train.max_steps"]
            if changed:
                raise ConfigError(f"resume config differs from the checkpoint in {', '.join(changed)}")
        if list(ckpt.question_vocab) != list(dataset.question_vocab) or list(ckpt.answer_vocab) != list(dataset.answer_vocab):
            raise ConfigError("checkpoint vocabularies do not match the dataset")
        model = ckpt.build_model()
        object.__setattr__(model, "config", config)
        state = ckpt.adam_state(model)
        step = ckpt.step
        plateau = dict(ckpt.plateau)
    else:
        model = VQAModel(config, len(dataset.question_vocab), len(dataset.answer_vocab))
        state = AdamState.zeros_like(model.parameters())
        step = 0
        plateau = {"best": -1.0, "stale": 0, "evals": 0}

    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        append = resume is not None and metrics_path.exists()
        if append:
            _truncate_metrics(metrics_path, step)
        fh = open(metrics_path, "a" if append else "w", newline="")
        writer = csv.writer(fh)
        if not append:
            writer.writerow(METRIC_COLUMNS)

    result = TrainResult(model, state, step)
    model.train()
    epoch_frac: dict[int, list] = {}
    n = len(dataset)
    try:
        while step < tc.max_steps:
            t0 = time.perf_counter()
            epoch, idx = _batch_indices(tc.seed, step, n, tc.batch_size)
            model.set_rng(np.random.default_rng([tc.seed, 7, step]))
            for p in params:
                p.grad = None
            res = model(dataset.images[idx], dataset.tokens[idx])
            targets = dataset.answers[idx]
            loss = cross_entropy(res.logits, targets)
            penalty = l2_penalty(params, tc.l2)
            total = loss if penalty is None else loss + penalty
            loss_value = float(total.data)
            if not np.isfinite(loss_value):
                raise TrainingDiverged("non-finite loss", {"loss": loss_value})
            T.backward(total)
            adam_step(params, [p.grad for p in params], state, tc.lr, names)
            step += 1
            batch_acc = float((res.logits.data.argmax(axis=1) == targets).mean())
            frac = float(res.selected_fraction().mean())
            epoch_frac.setdefault(epoch, []).append(frac)
            row = {"step": step, "loss": loss_value, "train_acc": batch_acc, "eval_acc": None,
                   "mean_selected_fraction": frac}
            stop = None
            if step % tc.eval_every == 0 or step == tc.max_steps:
                row["train_acc"] = accuracy_table(predict(model, dataset), dataset)["overall"]
                row["eval_acc"] = (
                    row["train_acc"] if eval_dataset is dataset
                    else accuracy_table(predict(model, eval_dataset), eval_dataset)["overall"]
                )
                # an off-cadence final eval is reporting only; counting it would
                # make a run stopped and resumed here differ from an uninterrupted one
                if step % tc.eval_every == 0:
                    stop = _update_plateau(plateau, row["train_acc"], tc)
            row["wall_ms"] = (time.perf_counter() - t0) * 1000
            result.rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
            if row["eval_acc"] is not None:
                if fh is not None:
                    fh.flush()
                if log is not None:
                    log(row)
            if out is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                save_checkpoint(snapshot(model, state, step, plateau, dataset), out / "checkpoint.hckp")
            if stop:
                result.stopped = "plateau"
                break
    except TrainingDiverged as e:
        e.diagnostics.setdefault("step", step)
        if out is not None:
            (out / "diverged.json").write_text(json.dumps(e.diagnostics, indent=2, sort_keys=True))
        raise
    finally:
        if fh is not None:
            fh.close()

    result.step = step
    result.epoch_fractions = [(e, float(np.mean(v))) for e, v in sorted(epoch_frac.items())]
    result.checkpoint = snapshot(model, state, step, plateau, dataset)
    if out is not None:
        save_checkpoint(result.checkpoint, out / "checkpoint.hckp")
    return result


def _update_plateau(plateau: dict, acc: float, tc) -> bool:
    """Track the best train accuracy; true once it has not improved for enough windows."""
    plateau["evals"] += 1
    if not tc.plateau:
        plateau["best"] = max(plateau["best"], acc)
        return False
    if plateau["best"] < 0 or acc > plateau["best"] + tc.plateau_delta:
        plateau["best"] = acc
        plateau["stale"] = 0
        return False
    plateau["stale"] += 1
    return plateau["stale"] >= tc.plateau_windows


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop rows logged after ``step`` so a resumed run does not duplicate them."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts with numeric values (``None`` for blanks)."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise FormatError(f"unexpected metrics columns {reader.fieldnames}", 0)
        rows = []
        for r in reader:
            rows.append({k: (None if r[k] == "" else (int(r[k]) if k == "step" else float(r[k]))) for k in METRIC_COLUMNS})
    return rows
