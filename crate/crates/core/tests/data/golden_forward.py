"""Reference forward pass for the golden-record test.

Parameters and the input image are closed-form functions of their flat
index, so the Rust test rebuilds the same network without reading weights
from disk. Run `python3 golden_forward.py` to regenerate golden_forward.json.
"""
import json
import numpy as np

IN_CH, SIDE, LABELS = 3, 8, 5
BLOCKS = [(4, True), (6, False)]


def conv_weights(layer, count):
    i = np.arange(count, dtype=np.float64)
    return 0.5 * np.sin(0.7 * i + 0.3 + layer)


def conv_bias(layer, count):
    i = np.arange(count, dtype=np.float64)
    return 0.05 * np.cos(i + layer)


def head_weights(count):
    i = np.arange(count, dtype=np.float64)
    return 0.8 * np.cos(0.37 * i)


def head_bias(count):
    return 0.1 * np.arange(count, dtype=np.float64) - 0.2


def image():
    i = np.arange(IN_CH * SIDE * SIDE, dtype=np.float64)
    return ((np.sin(1.3 * i) + 1.0) / 2.0).reshape(IN_CH, SIDE, SIDE)


def conv3x3(x, w, b):
    c_in, h, wd = x.shape
    padded = np.zeros((c_in, h + 2, wd + 2))
    padded[:, 1:-1, 1:-1] = x
    out = np.empty((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        acc = np.full((h, wd), b[o])
        for ky in range(3):
            for kx in range(3):
                acc += np.einsum("c,chw->hw", w[o, :, ky, kx], padded[:, ky:ky + h, kx:kx + wd])
        out[o] = acc
    return out


def maxpool2(x):
    c, h, w = x.shape
    return x[:, : h // 2 * 2, : w // 2 * 2].reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def main():
    x = image()
    c_in = IN_CH
    for layer, (c_out, pool) in enumerate(BLOCKS):
        w = conv_weights(layer, c_out * c_in * 9).reshape(c_out, c_in, 3, 3)
        b = conv_bias(layer, c_out)
        x = np.maximum(conv3x3(x, w, b), 0.0)
        if pool:
            x = maxpool2(x)
        c_in = c_out
    gap = x.mean(axis=(1, 2))
    n = gap.shape[0]
    logits = head_weights(LABELS * n).reshape(LABELS, n) @ gap + head_bias(LABELS)
    e = np.exp(logits - logits.max())
    probs = e / e.sum()
    sig = 1.0 / (1.0 + np.exp(-gap))
    golden = {
        "gap_features": gap.tolist(),
        "logits": logits.tolist(),
        "probabilities": probs.tolist(),
        "inferred_class": int(np.argmax(logits)),
        "confidence": float(probs.max()),
        "activation_map": [int(s > 0.5) for s in sig],
        "activation_map_t055": [int(s > 0.55) for s in sig],
    }
    with open("golden_forward.json", "w") as f:
        json.dump(golden, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
