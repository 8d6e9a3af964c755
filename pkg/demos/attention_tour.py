"""How the three hard-attention choices pick cells on one question.

Builds an untrained desk-scale model, runs a single sample through it and
prints the 4x4 presence map (L2 norm of each fused cell) next to the cells
kept by top-k at k/n = 0.25 and by the adaptive softmax threshold.

    python3 demos/attention_tour.py [sample_index]
"""

import sys

import numpy as np

from hvqa import tensor as T
from hvqa.attention import presence, select_adahan, select_han
from hvqa.config import preset
from hvqa.data import ANSWER_VOCAB, detokenize, generate_dataset
from hvqa.model import VQAModel


def grid(mask, w, h):
    return "\n".join(" ".join("#" if mask[r * h + c] else "." for c in range(h)) for r in range(w))


def main(index=0):
    ds = generate_dataset(index + 1, 0)
    model = VQAModel(preset("desk"), len(ds.question_vocab), len(ds.answer_vocab)).eval()
    with T.no_grad():
        fused = model(ds.images[index:index + 1], ds.tokens[index:index + 1]).fused.m
    m = np.asarray(getattr(fused, "data", fused))[0]
    w, h, _ = m.shape
    p = presence(m).data
    print("question:", " ".join(detokenize(ds.tokens[index])), "->", ANSWER_VOCAB[ds.answers[index]])
    print("presence (L2 norm per cell):")
    print(np.array2string(p, precision=2))
    han, _ = select_han(m, 4)
    ada, _, _ = select_adahan(m)
    print(f"\nHAN, k = 4 of {w * h}:\n{grid(han.cell_mask(), w, h)}")
    print(f"\nAdaHAN, threshold {ada.threshold:.4f}, kept {int(ada.cell_mask().sum())}:\n{grid(ada.cell_mask(), w, h)}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
