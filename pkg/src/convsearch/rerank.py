"""Context-aware re-ranking heads over pair embeddings.

Six head kinds score (query, passage) pair embeddings:

- linear: a two-logit feed-forward readout of the pair embedding alone.
- gru / lstm: a recurrent cell whose hidden state threads the conversation;
  each turn the state advances through the newly chosen top passage.
- bigru / bilstm: both directions run over the stored history plus the
  candidate, and the two outputs at the final position are concatenated.
- memnet: a single-hop memory attention over previous turns' top pair
  embeddings; with no memories yet it degrades exactly to the linear head.

Forward passes and gradients are written out by hand in numpy so they can
be verified against finite differences; parameters live in a flat dict of
float64 arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .retrieval import RankedList

HEAD_KINDS = ("linear", "gru", "lstm", "bigru", "bilstm", "memnet")

_RNN_KINDS = ("gru", "lstm", "bigru", "bilstm")
_BI_KINDS = ("bigru", "bilstm")

_MODEL_MAGIC = b"CSHD"
_MODEL_VERSION = 1

_GRU_GATES = ("z", "r", "h")
_LSTM_GATES = ("i", "f", "o", "g")


@dataclass
class HeadParams:
    kind: str
    emb_dim: int
    hidden: int
    seed: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def ffnn_width(self) -> int:
        return ffnn_width(self.kind, self.emb_dim, self.hidden)


def ffnn_width(kind: str, emb_dim: int, hidden: int) -> int:
    if kind in ("linear", "memnet"):
        return emb_dim
    if kind in _BI_KINDS:
        return 2 * hidden
    return hidden


def _array_spec(kind: str, emb_dim: int, hidden: int) -> list[tuple[str, tuple, int]]:
    """Ordered (name, shape, fan_in) triples; order fixes init and file layout."""
    spec: list[tuple[str, tuple, int]] = []
    gate_fan = emb_dim + hidden

    def cell(prefix: str, gates: tuple[str, ...]):
        for gate in gates:
            spec.append((f"{prefix}w_{gate}", (hidden, emb_dim), emb_dim))
            spec.append((f"{prefix}u_{gate}", (hidden, hidden), hidden))
            spec.append((f"{prefix}b_{gate}", (hidden,), gate_fan))

    if kind == "gru":
        cell("", _GRU_GATES)
    elif kind == "lstm":
        cell("", _LSTM_GATES)
    elif kind == "bigru":
        cell("f_", _GRU_GATES)
        cell("b_", _GRU_GATES)
    elif kind == "bilstm":
        cell("f_", _LSTM_GATES)
        cell("b_", _LSTM_GATES)
    elif kind not in ("linear", "memnet"):
        raise ValueError(f"unknown head kind: {kind!r}")
    width = ffnn_width(kind, emb_dim, hidden)
    spec.append(("ffnn_w", (2, width), width))
    spec.append(("ffnn_b", (2,), width))
    return spec


def init_head(kind: str, emb_dim: int, hidden: int = 256, seed: int = 0) -> HeadParams:
    """Fresh parameters, each array uniform in +-1/sqrt(fan_in)."""
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind: {kind!r}")
    if emb_dim <= 0:
        raise ValueError(f"emb_dim must be positive, got {emb_dim}")
    if kind in _RNN_KINDS and hidden <= 0:
        raise ValueError(f"hidden size must be positive, got {hidden}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape, fan_in in _array_spec(kind, emb_dim, hidden):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, shape)
    return HeadParams(kind=kind, emb_dim=emb_dim, hidden=hidden, seed=seed, arrays=arrays)


def zero_grads(params: HeadParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays.items()}


# ---------------------------------------------------------------------------
# Elementwise pieces.


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=-1, keepdims=True)


def ffnn_logits(params: HeadParams, x: np.ndarray) -> np.ndarray:
    return x @ params.arrays["ffnn_w"].T + params.arrays["ffnn_b"]


def ffnn_prob(params: HeadParams, x: np.ndarray) -> np.ndarray:
    """Relevance probability: softmax over the two logits, class-1 entry."""
    logits = ffnn_logits(params, x)
    return _sigmoid(logits[..., 1] - logits[..., 0])


# ---------------------------------------------------------------------------
# Cells.


def gru_cell(params: HeadParams, prefix: str, x: np.ndarray, h: np.ndarray):
    """One GRU step, original update-gate convention h' = z*h + (1-z)*htil."""
    a = params.arrays
    z = _sigmoid(x @ a[prefix + "w_z"].T + h @ a[prefix + "u_z"].T + a[prefix + "b_z"])
    r = _sigmoid(x @ a[prefix + "w_r"].T + h @ a[prefix + "u_r"].T + a[prefix + "b_r"])
    htil = np.tanh(
        x @ a[prefix + "w_h"].T + (r * h) @ a[prefix + "u_h"].T + a[prefix + "b_h"]
    )
    h_new = z * h + (1.0 - z) * htil
    cache = {"x": x, "h_prev": h, "z": z, "r": r, "htil": htil}
    return h_new, cache


def lstm_cell(params: HeadParams, prefix: str, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    a = params.arrays
    i = _sigmoid(x @ a[prefix + "w_i"].T + h @ a[prefix + "u_i"].T + a[prefix + "b_i"])
    f = _sigmoid(x @ a[prefix + "w_f"].T + h @ a[prefix + "u_f"].T + a[prefix + "b_f"])
    o = _sigmoid(x @ a[prefix + "w_o"].T + h @ a[prefix + "u_o"].T + a[prefix + "b_o"])
    g = np.tanh(x @ a[prefix + "w_g"].T + h @ a[prefix + "u_g"].T + a[prefix + "b_g"])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = {
        "x": x, "h_prev": h, "c_prev": c,
        "i": i, "f": f, "o": o, "g": g, "c_new": c_new, "tc": tc,
    }
    return h_new, c_new, cache


def _gru_cell_backward(params, prefix, cache, dh, grads):
    a = params.arrays
    x, h_prev = cache["x"], cache["h_prev"]
    z, r, htil = cache["z"], cache["r"], cache["htil"]
    dz = dh * (h_prev - htil)
    dhtil = dh * (1.0 - z)
    dh_prev = dh * z
    dhtil_pre = dhtil * (1.0 - htil**2)
    grads[prefix + "w_h"] += np.outer(dhtil_pre, x)
    grads[prefix + "u_h"] += np.outer(dhtil_pre, r * h_prev)
    grads[prefix + "b_h"] += dhtil_pre
    drh = a[prefix + "u_h"].T @ dhtil_pre
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    dz_pre = dz * z * (1.0 - z)
    dr_pre = dr * r * (1.0 - r)
    grads[prefix + "w_z"] += np.outer(dz_pre, x)
    grads[prefix + "u_z"] += np.outer(dz_pre, h_prev)
    grads[prefix + "b_z"] += dz_pre
    grads[prefix + "w_r"] += np.outer(dr_pre, x)
    grads[prefix + "u_r"] += np.outer(dr_pre, h_prev)
    grads[prefix + "b_r"] += dr_pre
    dh_prev = dh_prev + a[prefix + "u_z"].T @ dz_pre + a[prefix + "u_r"].T @ dr_pre
    dx = (
        a[prefix + "w_z"].T @ dz_pre
        + a[prefix + "w_r"].T @ dr_pre
        + a[prefix + "w_h"].T @ dhtil_pre
    )
    return dx, dh_prev


def _lstm_cell_backward(params, prefix, cache, dh, dc_carry, grads):
    a = params.arrays
    x, h_prev, c_prev = cache["x"], cache["h_prev"], cache["c_prev"]
    i, f, o, g, tc = cache["i"], cache["f"], cache["o"], cache["g"], cache["tc"]
    do = dh * tc
    dc = dc_carry + dh * o * (1.0 - tc**2)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    di_pre = di * i * (1.0 - i)
    df_pre = df * f * (1.0 - f)
    do_pre = do * o * (1.0 - o)
    dg_pre = dg * (1.0 - g**2)
    for gate, dpre in (("i", di_pre), ("f", df_pre), ("o", do_pre), ("g", dg_pre)):
        grads[prefix + "w_" + gate] += np.outer(dpre, x)
        grads[prefix + "u_" + gate] += np.outer(dpre, h_prev)
        grads[prefix + "b_" + gate] += dpre
    dh_prev = (
        a[prefix + "u_i"].T @ di_pre
        + a[prefix + "u_f"].T @ df_pre
        + a[prefix + "u_o"].T @ do_pre
        + a[prefix + "u_g"].T @ dg_pre
    )
    dx = (
        a[prefix + "w_i"].T @ di_pre
        + a[prefix + "w_f"].T @ df_pre
        + a[prefix + "w_o"].T @ do_pre
        + a[prefix + "w_g"].T @ dg_pre
    )
    return dx, dh_prev, dc_prev


def rnn_step(params: HeadParams, emb: np.ndarray, h_prev: np.ndarray,
             c_prev: np.ndarray | None = None, prefix: str = ""):
    """Advance one cell step; returns (h, c) with c None for GRU kinds."""
    emb = np.asarray(emb, dtype=np.float64)
    if params.kind in ("gru", "bigru"):
        h, _ = gru_cell(params, prefix, emb, h_prev)
        return h, None
    if params.kind in ("lstm", "bilstm"):
        if c_prev is None:
            c_prev = np.zeros(params.hidden)
        h, c, _ = lstm_cell(params, prefix, emb, h_prev, c_prev)
        return h, c
    raise ValueError(f"rnn_step does not apply to head kind {params.kind!r}")


# ---------------------------------------------------------------------------
# Memory attention.


def memnet_attention(memories: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Softmax over inner products of the embedding with each memory row."""
    memories = np.asarray(memories, dtype=np.float64)
    if memories.ndim != 2 or memories.shape[0] == 0:
        raise ValueError("memories must be a non-empty (n, dim) array")
    return _softmax(memories @ np.asarray(emb, dtype=np.float64))


def memnet_score(params: HeadParams, memories: list[np.ndarray], emb: np.ndarray):
    """Score one pair; empty memories fall back to the linear readout.

    Returns (probability, attention-or-None).
    """
    emb = np.asarray(emb, dtype=np.float64)
    if not memories:
        return float(ffnn_prob(params, emb)), None
    mem = np.stack([np.asarray(m, dtype=np.float64) for m in memories])
    a = memnet_attention(mem, emb)
    c = a @ mem
    return float(ffnn_prob(params, c + emb)), a


# ---------------------------------------------------------------------------
# Conversation state and turn re-ranking.


@dataclass
class ConversationState:
    kind: str
    h: np.ndarray | None = None
    c: np.ndarray | None = None
    history: list[np.ndarray] = field(default_factory=list)
    memories: list[np.ndarray] = field(default_factory=list)


def init_state(params: HeadParams) -> ConversationState:
    """Start-of-conversation state; absent hidden state is all zeros."""
    state = ConversationState(kind=params.kind)
    if params.kind in ("gru", "lstm"):
        state.h = np.zeros(params.hidden)
    if params.kind == "lstm":
        state.c = np.zeros(params.hidden)
    return state


def _score_candidates(params: HeadParams, state: ConversationState, embs: np.ndarray):
    """Probabilities plus whatever per-candidate pieces the kind threads on."""
    kind = params.kind
    if kind == "linear":
        return ffnn_prob(params, embs), {}
    if kind == "gru":
        h_new, _ = gru_cell(params, "", embs, state.h)
        return ffnn_prob(params, h_new), {"h": h_new}
    if kind == "lstm":
        h_new, c_new, _ = lstm_cell(params, "", embs, state.h, state.c)
        return ffnn_prob(params, h_new), {"h": h_new, "c": c_new}
    if kind in _BI_KINDS:
        h_fwd = np.zeros(params.hidden)
        c_fwd = np.zeros(params.hidden)
        for past in state.history:
            if kind == "bigru":
                h_fwd, _ = gru_cell(params, "f_", past, h_fwd)
            else:
                h_fwd, c_fwd, _ = lstm_cell(params, "f_", past, h_fwd, c_fwd)
        zeros = np.zeros(params.hidden)
        if kind == "bigru":
            hf, _ = gru_cell(params, "f_", embs, h_fwd)
            hb, _ = gru_cell(params, "b_", embs, zeros)
        else:
            hf, _, _ = lstm_cell(params, "f_", embs, h_fwd, c_fwd)
            hb, _, _ = lstm_cell(params, "b_", embs, zeros, zeros)
        return ffnn_prob(params, np.concatenate([hf, hb], axis=-1)), {}
    if kind == "memnet":
        if not state.memories:
            return ffnn_prob(params, embs), {}
        mem = np.stack(state.memories)
        att = _softmax(embs @ mem.T)
        context = att @ mem
        return ffnn_prob(params, context + embs), {"attention": att}
    raise ValueError(f"unknown head kind: {kind!r}")


def rerank_turn(
    params: HeadParams,
    state: ConversationState,
    ranked: RankedList,
    embeddings: dict[str, np.ndarray],
):
    """Re-order one turn's candidates by relevance probability.

    Ties break by ascending doc id.  The returned state is a fresh object
    advanced through the new top-1 candidate: RNN kinds take its hidden
    (and cell) state, bidirectional kinds append its embedding to the
    history, and memnet appends it to the memories.  The input state is
    not modified.

    Returns (reranked list, new state, attention-by-doc or None).
    """
    doc_ids = ranked.doc_ids()
    new_state = ConversationState(
        kind=state.kind,
        h=None if state.h is None else state.h.copy(),
        c=None if state.c is None else state.c.copy(),
        history=list(state.history),
        memories=list(state.memories),
    )
    if not doc_ids:
        return RankedList(ranked.turn_key), new_state, None
    embs = np.stack([np.asarray(embeddings[d], dtype=np.float64) for d in doc_ids])
    probs, extra = _score_candidates(params, state, embs)
    order = sorted(range(len(doc_ids)), key=lambda i: (-probs[i], doc_ids[i]))
    entries = [(doc_ids[i], float(probs[i])) for i in order]
    top = order[0]
    kind = params.kind
    if kind in ("gru", "lstm"):
        new_state.h = extra["h"][top].copy()
        if kind == "lstm":
            new_state.c = extra["c"][top].copy()
    elif kind in _BI_KINDS:
        new_state.history.append(embs[top].copy())
    elif kind == "memnet":
        new_state.memories.append(embs[top].copy())
    attention = None
    if "attention" in extra:
        attention = {doc_ids[i]: extra["attention"][i].copy() for i in range(len(doc_ids))}
    return RankedList(ranked.turn_key, entries), new_state, attention


def score_pair(params: HeadParams, state: ConversationState, emb: np.ndarray):
    """Probability for a single candidate given the current state."""
    embs = np.asarray(emb, dtype=np.float64)[None, :]
    probs, _ = _score_candidates(params, state, embs)
    return float(probs[0])


# ---------------------------------------------------------------------------
# Training forward/backward over one conversation.


def _run_sequence(params: HeadParams, prefix: str, xs: list[np.ndarray], cell_kind: str):
    caches = []
    h = np.zeros(params.hidden)
    c = np.zeros(params.hidden)
    outs = []
    for x in xs:
        if cell_kind == "gru":
            h, cache = gru_cell(params, prefix, x, h)
        else:
            h, c, cache = lstm_cell(params, prefix, x, h, c)
        caches.append(cache)
        outs.append(h)
    return outs, caches


def _backprop_sequence(params, prefix, caches, douts, cell_kind, grads):
    dxs = [None] * len(caches)
    dh_carry = np.zeros(params.hidden)
    dc_carry = np.zeros(params.hidden)
    for t in reversed(range(len(caches))):
        dh = douts[t] + dh_carry
        if cell_kind == "gru":
            dx, dh_carry = _gru_cell_backward(params, prefix, caches[t], dh, grads)
        else:
            dx, dh_carry, dc_carry = _lstm_cell_backward(
                params, prefix, caches[t], dh, dc_carry, grads
            )
        dxs[t] = dx
    return dxs


def _readout_backward(params, inputs, g, grads):
    """Gradients of the two-logit readout; returns per-turn input grads."""
    X = np.stack(inputs)
    gw = g @ X
    grads["ffnn_w"][1] += gw
    grads["ffnn_w"][0] -= gw
    grads["ffnn_b"][1] += g.sum()
    grads["ffnn_b"][0] -= g.sum()
    v = params.arrays["ffnn_w"][1] - params.arrays["ffnn_w"][0]
    return [g_t * v for g_t in g]


def conversation_forward_backward(
    params: HeadParams,
    embs: np.ndarray,
    labels: np.ndarray,
    want_input_grads: bool = False,
):
    """Loss, parameter gradients, and scores for one training conversation.

    `embs` is (T, emb_dim): the sampled pair embedding per turn, which is
    also what threads the state between turns.  The loss is the summed
    cross entropy of Eq-style relevance scores against binary labels.
    """
    embs = np.asarray(embs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    T = embs.shape[0]
    if T == 0:
        raise ValueError("conversation must have at least one turn")
    kind = params.kind
    grads = zero_grads(params)

    caches_f = caches_b = None
    mem_atts: list[np.ndarray | None] = []

    if kind == "linear":
        inputs = [embs[t] for t in range(T)]
    elif kind == "gru":
        outs, caches_f = _run_sequence(params, "", list(embs), "gru")
        inputs = outs
    elif kind == "lstm":
        outs, caches_f = _run_sequence(params, "", list(embs), "lstm")
        inputs = outs
    elif kind in _BI_KINDS:
        cell_kind = "gru" if kind == "bigru" else "lstm"
        outs_f, caches_f = _run_sequence(params, "f_", list(embs), cell_kind)
        outs_b_rev, caches_b = _run_sequence(params, "b_", list(embs[::-1]), cell_kind)
        outs_b = outs_b_rev[::-1]
        inputs = [np.concatenate([outs_f[t], outs_b[t]]) for t in range(T)]
    elif kind == "memnet":
        inputs = []
        for t in range(T):
            if t == 0:
                inputs.append(embs[t])
                mem_atts.append(None)
            else:
                mem = embs[:t]
                a = _softmax(mem @ embs[t])
                inputs.append(a @ mem + embs[t])
                mem_atts.append(a)
    else:
        raise ValueError(f"unknown head kind: {kind!r}")

    X = np.stack(inputs)
    logits = ffnn_logits(params, X)
    z = logits[:, 1] - logits[:, 0]
    scores = _sigmoid(z)
    # cross entropy of Eq-style scores; softplus form is the clamped log
    loss = float(np.sum(np.where(labels > 0.5, _softplus(-z), _softplus(z))))
    g = scores - labels

    dinputs = _readout_backward(params, inputs, g, grads)

    input_grads = None
    if kind == "linear":
        input_grads = dinputs
    elif kind in ("gru", "lstm"):
        cell_kind = kind
        dxs = _backprop_sequence(params, "", caches_f, dinputs, cell_kind, grads)
        input_grads = dxs
    elif kind in _BI_KINDS:
        cell_kind = "gru" if kind == "bigru" else "lstm"
        d_f = [d[: params.hidden] for d in dinputs]
        d_b = [d[params.hidden :] for d in dinputs]
        dx_f = _backprop_sequence(params, "f_", caches_f, d_f, cell_kind, grads)
        dx_b_rev = _backprop_sequence(params, "b_", caches_b, d_b[::-1], cell_kind, grads)
        dx_b = dx_b_rev[::-1]
        input_grads = [dx_f[t] + dx_b[t] for t in range(T)]
    elif kind == "memnet":
        dembs = [np.zeros(params.emb_dim) for _ in range(T)]
        for t in range(T):
            dx = dinputs[t]
            dembs[t] += dx
            if t == 0:
                continue
            mem = embs[:t]
            a = mem_atts[t]
            # context = a @ mem with a = softmax(mem @ emb_t)
            da = mem @ dx
            dz_att = a * (da - float(a @ da))
            dembs[t] += mem.T @ dz_att
            dmem = np.outer(a, dx) + np.outer(dz_att, embs[t])
            for j in range(t):
                dembs[j] += dmem[j]
        input_grads = dembs

    result = {"loss": loss, "grads": grads, "scores": scores}
    if want_input_grads:
        result["input_grads"] = np.stack(input_grads)
    return result


# ---------------------------------------------------------------------------
# Persistence.


def save_head(params: HeadParams, path) -> None:
    """Write the model as a versioned binary: header JSON + raw float64 LE."""
    names = sorted(params.arrays)
    header = {
        "kind": params.kind,
        "emb_dim": params.emb_dim,
        "hidden": params.hidden,
        "seed": params.seed,
        "meta": params.meta,
        "arrays": [
            {"name": n, "shape": list(params.arrays[n].shape)} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<B", _MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_head(path) -> HeadParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a re-ranking head model file")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != _MODEL_VERSION:
            raise ValueError(
                f"{path}: unsupported model format version {version} "
                f"(this build reads version {_MODEL_VERSION})"
            )
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise ValueError(f"{path}: truncated model file at array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    params = HeadParams(
        kind=header["kind"],
        emb_dim=int(header["emb_dim"]),
        hidden=int(header["hidden"]),
        seed=int(header["seed"]),
        arrays=arrays,
        meta=header.get("meta", {}),
    )
    expected = {name for name, _, _ in _array_spec(params.kind, params.emb_dim, params.hidden)}
    if set(arrays) != expected:
        raise ValueError(f"{path}: model arrays do not match kind {params.kind!r}")
    return params


def export_head_json(params: HeadParams, path) -> None:
    """Human-inspectable JSON dump of the full parameter set."""
    payload = {
        "kind": params.kind,
        "emb_dim": params.emb_dim,
        "hidden": params.hidden,
        "seed": params.seed,
        "meta": params.meta,
        "arrays": {n: params.arrays[n].tolist() for n in sorted(params.arrays)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def copy_params(params: HeadParams) -> HeadParams:
    return replace(
        params,
        arrays={n: a.copy() for n, a in params.arrays.items()},
        meta=dict(params.meta),
    )
