"""Reference computation of one KAR layer on a tiny instance.

Writes crates/core/data/worked_kar.json with the inputs (hidden states,
candidates, entity table, every parameter) and each intermediate value.
Written directly from the layer's definition with numpy, sharing no code
with the Rust implementation.

    python3 docs/worked_kar.py
"""

import json
import math
import pathlib

import numpy as np

N, D, E, FFN, HID = 4, 4, 3, 6, 5
DELTA = -0.2
LN_EPS = 1e-12


def fill(rows, cols, k, scale=0.5):
    """Deterministic two-decimal entries from a sine sequence."""
    vals = [round(scale * math.sin(1.7 * (k + 1) + 0.9 * (i + 1)), 2) for i in range(rows * cols)]
    return np.array(vals, dtype=np.float64).reshape(rows, cols)


def block_shapes(prefix, dim, ffn):
    shapes = []
    for p in ["q", "k", "v", "o"]:
        shapes += [(f"{prefix}.attn.{p}.w", dim, dim), (f"{prefix}.attn.{p}.b", 1, dim)]
    shapes += [(f"{prefix}.ln1.gamma", 1, dim), (f"{prefix}.ln1.beta", 1, dim)]
    shapes += [(f"{prefix}.ffn.in.w", dim, ffn), (f"{prefix}.ffn.in.b", 1, ffn)]
    shapes += [(f"{prefix}.ffn.out.w", ffn, dim), (f"{prefix}.ffn.out.b", 1, dim)]
    shapes += [(f"{prefix}.ln2.gamma", 1, dim), (f"{prefix}.ln2.beta", 1, dim)]
    return shapes


P = "kar.toy"
shapes = [(f"{P}.proj_down.w", D, E), (f"{P}.proj_down.b", 1, E), (f"{P}.pool.w", E, 1)]
shapes += block_shapes(f"{P}.span", E, FFN)
shapes += [(f"{P}.score.in.w", 2, HID), (f"{P}.score.in.b", 1, HID)]
shapes += [(f"{P}.score.out.w", HID, 1), (f"{P}.score.out.b", 1, 1)]
shapes += block_shapes(f"{P}.recontext", E, FFN)
shapes += [(f"{P}.null", 1, E), (f"{P}.mask", 1, E)]

params = {}
for k, (name, r, c) in enumerate(shapes):
    params[name] = fill(r, c, k)
    if name.endswith(".gamma"):
        params[name] = 1.0 + params[name]
# Alignment initialization: W2 = pinv(W1), b2 = 0.
params[f"{P}.proj_up.w"] = np.linalg.pinv(params[f"{P}.proj_down.w"])
params[f"{P}.proj_up.b"] = np.zeros((1, D))

H = fill(N, D, 100, scale=1.0)
entities = fill(3, E, 200, scale=1.0)
span = (1, 2)  # inclusive piece offsets
candidates = [(0, 0.6), (2, 0.3)]  # (entity id, prior)


def lin(x, name):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def layer_norm(x, name):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * params[f"{name}.gamma"] + params[f"{name}.beta"]


def softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def block(q_in, kv_in, prefix):
    """Single-head post-norm block: LN(q + Attn), then LN(a + FFN(a))."""
    q = lin(q_in, f"{prefix}.attn.q")
    k = lin(kv_in, f"{prefix}.attn.k")
    v = lin(kv_in, f"{prefix}.attn.v")
    att = softmax(q @ k.T / math.sqrt(q.shape[1])) @ v
    a = layer_norm(q_in + lin(att, f"{prefix}.attn.o"), f"{prefix}.ln1")
    f = lin(gelu(lin(a, f"{prefix}.ffn.in")), f"{prefix}.ffn.out")
    return layer_norm(a + f, f"{prefix}.ln2")


H_proj = lin(H, f"{P}.proj_down")
pieces = H_proj[span[0] : span[1] + 1]
alpha = softmax((pieces @ params[f"{P}.pool.w"]).ravel())
S = (alpha[:, None] * pieces).sum(axis=0, keepdims=True)
S_e = block(S, S, f"{P}.span")
cand_emb = np.stack([entities[e] for e, _ in candidates])
features = np.array([[p, float(S_e[0] @ cand_emb[i])] for i, (_, p) in enumerate(candidates)])
psi = lin(np.maximum(lin(features, f"{P}.score.in"), 0.0), f"{P}.score.out").ravel()
keep = psi >= DELTA
psi_tilde = np.zeros_like(psi)
if keep.any():
    psi_tilde[keep] = softmax(psi[keep])
    e_tilde = (psi_tilde[:, None] * cand_emb).sum(axis=0, keepdims=True)
else:
    e_tilde = params[f"{P}.null"].copy()
S_prime_e = S_e + e_tilde
H_recontext = block(H_proj, S_prime_e, f"{P}.recontext")
H_prime = lin(H_recontext, f"{P}.proj_up") + H

out = {
    "inputs": {
        "config": {"kb": "toy", "layer": 1, "entity_dim": E, "heads": 1, "ffn": FFN, "score_hidden": HID, "threshold": DELTA},
        "h": H.tolist(),
        "entities": entities.tolist(),
        "span": list(span),
        "candidates": [list(c) for c in candidates],
        "params": {k: v.tolist() for k, v in sorted(params.items())},
    },
    "trace": {
        "H_proj": H_proj.tolist(),
        "S": S.tolist(),
        "S_e": S_e.tolist(),
        "psi": [psi.tolist()],
        "psi_tilde": [psi_tilde.tolist()],
        "e_tilde": e_tilde.tolist(),
        "S_prime_e": S_prime_e.tolist(),
        "H_prime": H_prime.tolist(),
    },
}
path = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "data" / "worked_kar.json"
path.write_text(json.dumps(out, indent=1) + "\n")
print("psi", psi, "psi_tilde", psi_tilde)
