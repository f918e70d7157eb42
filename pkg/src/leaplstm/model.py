"""LSTM classifier with a learned per-word skip decision.

Before each word the model looks at three things: the word's own embedding,
the hidden state so far, and a summary of the text still to come (a tiny
reversed LSTM plus n-gram convolutions over the next few words).  A small MLP
turns them into keep/skip probabilities.  Training mixes the two branches with
a gumbel-softmax sample so everything is differentiable; inference takes the
argmax and really skips the cell update.

Weights follow the ``[out, in]`` layout.  The LSTM weight matrix acts on
``[h_prev; x]`` with gate blocks ordered input, forget, output, candidate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor, gumbel_noise, sigmoid_np, softmax_np
from .data import Batch, Document

KEEP, SKIP = 0, 1


@dataclass
class LeapConfig:
    vocab_size: int
    num_classes: int
    hidden: int = 300
    embed_dim: int = 300
    skip_hidden: int = 20
    reverse_hidden: int = 20
    kernel_widths: tuple[int, ...] = (3, 4, 5)
    filters_per_width: int = 60
    skip: bool = True
    use_cnn: bool = True
    use_rnn_r: bool = True
    use_follow: bool = True
    use_preceding: bool = True
    use_current: bool = True

    def __post_init__(self):
        self.kernel_widths = tuple(int(w) for w in self.kernel_widths)
        for name in ("vocab_size", "num_classes", "hidden", "embed_dim", "skip_hidden",
                     "reverse_hidden", "filters_per_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"LeapConfig.{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError("LeapConfig.num_classes must be at least 2")
        if not self.kernel_widths or min(self.kernel_widths) < 1:
            raise ValueError(f"bad kernel widths {self.kernel_widths}")

    @property
    def preceding_dim(self) -> int:
        return self.hidden

    @property
    def conv_dim(self) -> int:
        return self.filters_per_width * len(self.kernel_widths)

    @property
    def follow_dim(self) -> int:
        return self.reverse_hidden + self.conv_dim

    @property
    def skip_input_dim(self) -> int:
        return self.embed_dim + self.preceding_dim + self.follow_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_widths"] = list(self.kernel_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LeapConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown LeapConfig keys: {sorted(unknown)}")
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h, d, k = self.hidden, self.embed_dim, self.num_classes
        shapes = {
            "embedding": (self.vocab_size, d),
            "lstm_w": (4 * h, h + d),
            "lstm_b": (4 * h,),
            "classifier": (k, h),
        }
        if self.skip:
            hr, s = self.reverse_hidden, self.skip_hidden
            shapes["rev_w"] = (4 * hr, hr + d)
            shapes["rev_b"] = (4 * hr,)
            for w in self.kernel_widths:
                shapes[f"conv_w{w}"] = (w, d, self.filters_per_width)
                shapes[f"conv_b{w}"] = (self.filters_per_width,)
            shapes["skip_w1"] = (s, self.skip_input_dim)
            shapes["skip_b1"] = (s,)
            shapes["skip_w2"] = (2, s)
            shapes["skip_b2"] = (2,)
            shapes["h_end"] = (self.follow_dim,)
        return shapes


def init_params(cfg: LeapConfig, rng: np.random.Generator, scale: float = 0.05,
                embedding: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Matrices ~ U(-scale, scale); biases and ``h_end`` start at zero; PAD row is zero."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-scale, scale, size=shape)
    if embedding is not None:
        if embedding.shape != params["embedding"].shape:
            raise ValueError(f"embedding table {embedding.shape} != {params['embedding'].shape}")
        params["embedding"] = np.array(embedding, dtype=np.float64)
    params["embedding"][0] = 0.0
    return params


# -- numpy building blocks (used by inference) ------------------------------

def lstm_step(h_prev, c_prev, x, w, b, tape: Tape | None = None):
    """One LSTM update; returns ``(h, c)``.

    With ``tape`` the arguments are tensors and the step is recorded;
    otherwise they are numpy arrays (a single vector or a ``[batch, .]`` stack).
    """
    h = w.shape[0] // 4
    if tape is not None:
        hc = tape.lstm_cell(tape.linear(tape.concat([h_prev, x], axis=-1), w, b), c_prev)
        return tape.slice(hc, -1, 0, h), tape.slice(hc, -1, h, 2 * h)
    if h_prev.shape[-1] != h or x.shape[-1] != w.shape[1] - h:
        raise ValueError(f"lstm_step: h {h_prev.shape}, x {x.shape} do not fit weights {w.shape}")
    gates = w[:, :h] @ h_prev + w[:, h:] @ x + b if h_prev.ndim == 1 else \
        h_prev @ w[:, :h].T + x @ w[:, h:].T + b
    ifo = sigmoid_np(gates[..., :3 * h])
    g = np.tanh(gates[..., 3 * h:])
    c = ifo[..., h:2 * h] * c_prev + ifo[..., :h] * g
    return ifo[..., 2 * h:] * np.tanh(c), c


def conv_features(embedded: np.ndarray, params: dict, cfg: LeapConfig) -> np.ndarray:
    """ReLU n-gram features ``[T, filters * len(widths)]``; windows run past the end into zeros."""
    T, d = embedded.shape
    out = []
    for w in cfg.kernel_widths:
        padded = np.concatenate([embedded, np.zeros((w - 1, d))], axis=0)
        win = np.concatenate([padded[j:j + T] for j in range(w)], axis=1)
        filt = params[f"conv_w{w}"].reshape(w * d, -1)
        out.append(np.maximum(win @ filt + params[f"conv_b{w}"], 0.0))
    return np.concatenate(out, axis=1)


def reverse_encode(embedded: np.ndarray, params: dict) -> np.ndarray:
    """Row ``t`` is the reversed-LSTM state after reading ``x[T-1], ..., x[t]``."""
    w, b = params["rev_w"], params["rev_b"]
    hr = w.shape[0] // 4
    T = embedded.shape[0]
    out = np.zeros((T, hr))
    h = np.zeros(hr)
    c = np.zeros(hr)
    for t in range(T - 1, -1, -1):
        h, c = lstm_step(h, c, embedded[t], w, b)
        out[t] = h
    return out


def follow_features(t: int, conv: np.ndarray, rev: np.ndarray, h_end: np.ndarray,
                    cfg: LeapConfig | None = None) -> np.ndarray:
    """Summary of the text after position ``t`` (0-based).

    ``[rev[t+1]; conv[t+1]]`` before the last word, ``h_end`` at it.  Ablation
    flags in ``cfg`` zero the corresponding slice.
    """
    T = conv.shape[0]
    if not 0 <= t < T:
        raise IndexError(f"position {t} outside a {T}-token document")
    if cfg is not None and not cfg.use_follow:
        return np.zeros(h_end.shape)
    if t == T - 1:
        return h_end.copy()
    r, c = rev[t + 1], conv[t + 1]
    if cfg is not None:
        if not cfg.use_rnn_r:
            r = np.zeros_like(r)
        if not cfg.use_cnn:
            c = np.zeros_like(c)
    return np.concatenate([r, c])


def skip_distribution(x_t, f_pre, f_fol, params, cfg: LeapConfig | None = None) -> np.ndarray:
    """``softmax(W2 relu(W1 [x; f_pre; f_fol] + b1) + b2)``; index 0 keep, 1 skip."""
    if cfg is not None:
        if not cfg.use_current:
            x_t = np.zeros_like(x_t)
        if not cfg.use_preceding:
            f_pre = np.zeros_like(f_pre)
    z = np.concatenate([x_t, f_pre, f_fol])
    if z.shape[0] != params["skip_w1"].shape[1]:
        raise ValueError(f"skip input has {z.shape[0]} features, W1 expects {params['skip_w1'].shape[1]}")
    s = np.maximum(params["skip_w1"] @ z + params["skip_b1"], 0.0)
    return softmax_np(params["skip_w2"] @ s + params["skip_b2"])


def classify(h_T: np.ndarray, W: np.ndarray) -> np.ndarray:
    if W.shape[1] != h_T.shape[-1]:
        raise ValueError(f"classifier {W.shape} does not fit state {h_T.shape}")
    return softmax_np(h_T @ W.T)


# -- results -----------------------------------------------------------------

@dataclass
class SkipTrace:
    """Per-token keep/skip record of one hard inference pass."""

    probs: np.ndarray      # [T, 2]
    decisions: np.ndarray  # [T], 0 keep / 1 skip

    @property
    def skip_rate(self) -> float:
        return float(self.decisions.mean()) if self.decisions.size else 0.0

    @property
    def kept(self) -> int:
        return int((self.decisions == KEEP).sum())


@dataclass
class InferResult:
    probs: np.ndarray
    trace: SkipTrace
    updates: int
    h_T: np.ndarray = field(repr=False)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.probs))


@dataclass
class TrainOutput:
    probs: Tensor           # [batch, k]
    skip_rate: Tensor       # scalar soft skip rate over non-PAD tokens
    params: dict[str, Tensor]
    skip_probs: np.ndarray  # [batch, T, 2] pi per token (zeros when skipping is off)
    samples: np.ndarray     # [batch, T, 2] relaxed decisions y per token
    h_T: Tensor


class LeapLSTM:
    """Parameters plus the soft (training) and hard (inference) passes."""

    def __init__(self, cfg: LeapConfig, params: dict[str, np.ndarray]):
        expected = cfg.param_shapes()
        if set(params) != set(expected):
            raise ValueError(f"parameter names {sorted(params)} != expected {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"parameter {name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: LeapConfig, seed: int = 0, embedding: np.ndarray | None = None) -> "LeapLSTM":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), embedding=embedding))

    def copy(self) -> "LeapLSTM":
        return LeapLSTM(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    # -- training pass ---------------------------------------------------

    def forward_train(self, batch: Batch, tau: float, rng: np.random.Generator | None,
                      tape: Tape, noise: np.ndarray | None = None,
                      forced: np.ndarray | None = None) -> TrainOutput:
        """Differentiable pass over a padded batch.

        Every real token gets a relaxed decision ``y`` (gumbel-softmax of the
        skip distribution, or ``forced[:, t]`` when given) and the state
        becomes ``y[0] * LSTM(h, x) + y[1] * h``.  Padding is always skipped
        and does not count toward the skip rate.  ``noise`` fixes the Gumbel
        draws (``[batch, T, 2]``); otherwise they come from ``rng``.
        """
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        cfg = self.cfg
        P = self.tensors()
        ids = batch.ids
        B, T = ids.shape
        h_dim, d = cfg.hidden, cfg.embed_dim
        mask = batch.mask
        n_tokens = float(mask.sum())
        if cfg.skip and forced is None and noise is None:
            if rng is None:
                raise ValueError("forward_train needs rng or explicit noise")
            noise = gumbel_noise(rng, (B, T, 2))

        X = tape.embedding(P["embedding"], ids)
        x_proj = tape.linear(X, tape.slice(P["lstm_w"], 1, h_dim, h_dim + d), P["lstm_b"])
        w_hh = tape.slice(P["lstm_w"], 1, 0, h_dim)

        if cfg.skip:
            static = self._skip_static(tape, P, X, batch)
            w1_h = tape.slice(P["skip_w1"], 1, d, d + h_dim)

        h = Tensor(np.zeros((B, h_dim)))
        c = Tensor(np.zeros((B, h_dim)))
        skip_total = None
        pis = np.zeros((B, T, 2))
        ys = np.zeros((B, T, 2))
        for t in range(T):
            m = mask[:, t:t + 1]
            hc = tape.lstm_cell(tape.add(tape.select(x_proj, 1, t), tape.linear(h, w_hh)), c)
            h_new = tape.slice(hc, 1, 0, h_dim)
            c_new = tape.slice(hc, 1, h_dim, 2 * h_dim)

            if cfg.skip:
                pre = tape.select(static, 1, t)
                if cfg.use_preceding:
                    pre = tape.add(pre, tape.linear(h, w1_h))
                s = tape.relu(pre)
                pi = tape.softmax(tape.linear(s, P["skip_w2"], P["skip_b2"]))
                if forced is not None:
                    y = Tensor(np.asarray(forced[:, t], dtype=np.float64))
                else:
                    y = tape.gumbel_softmax_sample(pi, tau, noise=noise[:, t])
                pis[:, t] = pi.data
                ys[:, t] = y.data
                keep = tape.mul(tape.slice(y, 1, 0, 1), m)
                skip = tape.add(tape.mul(tape.slice(y, 1, 1, 2), m), 1.0 - m)
                masked_skip = tape.sum(tape.mul(tape.slice(y, 1, 1, 2), m))
                skip_total = masked_skip if skip_total is None else tape.add(skip_total, masked_skip)
            else:
                keep = Tensor(m)
                skip = Tensor(1.0 - m)
                ys[:, t, KEEP] = m[:, 0]
                ys[:, t, SKIP] = 1.0 - m[:, 0]

            h = tape.add(tape.mul(keep, h_new), tape.mul(skip, h))
            c = tape.add(tape.mul(keep, c_new), tape.mul(skip, c))

        probs = tape.softmax(tape.linear(h, P["classifier"]))
        if skip_total is None:
            rate = Tensor(np.asarray(0.0))
        else:
            rate = tape.scale(skip_total, 1.0 / n_tokens)
        return TrainOutput(probs, rate, P, pis, ys, h)

    def _skip_static(self, tape: Tape, P: dict[str, Tensor], X: Tensor, batch: Batch) -> Tensor:
        # Everything in the skip MLP's first layer that does not depend on h.
        cfg = self.cfg
        B, T = batch.ids.shape
        d, h_dim, f_dim = cfg.embed_dim, cfg.hidden, cfg.follow_dim
        w1 = P["skip_w1"]
        static = tape.expand(P["skip_b1"], (B, T, cfg.skip_hidden))
        if cfg.use_current:
            static = tape.add(static, tape.linear(X, tape.slice(w1, 1, 0, d)))
        if not cfg.use_follow:
            return static

        parts = []
        if cfg.use_rnn_r:
            parts.append(self._reverse_train(tape, P, X, batch.mask))
        else:
            parts.append(Tensor(np.zeros((B, T, cfg.reverse_hidden))))
        if cfg.use_cnn:
            feats = []
            for w in cfg.kernel_widths:
                filt = tape.reshape(P[f"conv_w{w}"], (w * d, cfg.filters_per_width))
                win = tape.windows(X, w)
                feats.append(tape.relu(tape.add(tape.matmul(win, filt), P[f"conv_b{w}"])))
            parts.append(tape.concat(feats, axis=-1))
        else:
            parts.append(Tensor(np.zeros((B, T, cfg.conv_dim))))
        at_pos = tape.concat(parts, axis=-1)
        # Features of position t+1, zero beyond the end of the padded batch.
        if T > 1:
            shifted = tape.concat([tape.slice(at_pos, 1, 1, T), Tensor(np.zeros((B, 1, f_dim)))], axis=1)
        else:
            shifted = Tensor(np.zeros((B, 1, f_dim)))
        is_last = np.zeros((B, T, 1))
        is_last[np.arange(B), batch.lengths - 1, 0] = 1.0
        follow = tape.add(tape.mul(shifted, 1.0 - is_last), tape.mul(is_last, P["h_end"]))
        return tape.add(static, tape.linear(follow, tape.slice(w1, 1, d + h_dim, d + h_dim + f_dim)))

    def _reverse_train(self, tape: Tape, P: dict[str, Tensor], X: Tensor, mask: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, T = mask.shape
        hr, d = cfg.reverse_hidden, cfg.embed_dim
        x_proj = tape.linear(X, tape.slice(P["rev_w"], 1, hr, hr + d), P["rev_b"])
        w_hh = tape.slice(P["rev_w"], 1, 0, hr)
        h = Tensor(np.zeros((B, hr)))
        c = Tensor(np.zeros((B, hr)))
        rows = [None] * T
        for t in range(T - 1, -1, -1):
            m = mask[:, t:t + 1]
            hc = tape.lstm_cell(tape.add(tape.select(x_proj, 1, t), tape.linear(h, w_hh)), c)
            # Padding sits at the end, so the state stays zero until the real tokens start.
            hc = tape.mul(hc, m)
            h = tape.slice(hc, 1, 0, hr)
            c = tape.slice(hc, 1, hr, 2 * hr)
            rows[t] = h
        return tape.stack(rows, axis=1)

    # -- inference pass ----------------------------------------------------

    def forward_infer(self, doc: Document | Sequence[int] | np.ndarray,
                      force: str | np.ndarray | None = None,
                      rng: np.random.Generator | None = None) -> InferResult:
        """Hard-decision pass over one document.

        Each word is kept iff ``pi[keep] >= pi[skip]``; only kept words run
        the LSTM update.  With ``rng`` the decision is instead drawn from
        ``pi``.  ``force`` overrides the decision with "keep", "skip", or a
        per-token array of decisions (0 keep, 1 skip).  The skip MLP is still
        evaluated, so timing reflects the real cost.
        """
        ids = doc.tokens if isinstance(doc, Document) else np.asarray(doc, dtype=np.int64)
        T = len(ids)
        if T == 0:
            raise ValueError("cannot run inference on an empty document")
        cfg, P = self.cfg, self.params
        h_dim = cfg.hidden
        X = P["embedding"][ids]
        w, b = P["lstm_w"], P["lstm_b"]
        w_hh = w[:, :h_dim]
        w_ih = w[:, h_dim:]
        h = np.zeros(h_dim)
        c = np.zeros(h_dim)
        probs = np.zeros((T, 2))
        decisions = np.zeros(T, dtype=np.int8)
        updates = 0

        if not cfg.skip:
            for t in range(T):
                h, c = self._cell(h, c, X[t], w_hh, w_ih, b, h_dim)
                updates += 1
            probs[:, KEEP] = 1.0
            return InferResult(classify(h, P["classifier"]), SkipTrace(probs, decisions), updates, h)

        forced = None
        if force is not None:
            if isinstance(force, str):
                if force not in ("keep", "skip"):
                    raise ValueError(f"force must be 'keep', 'skip' or a decision array, got {force!r}")
                forced = np.full(T, KEEP if force == "keep" else SKIP)
            else:
                forced = np.asarray(force)
                if forced.shape != (T,):
                    raise ValueError(f"forced decisions have shape {forced.shape}, document has {T} tokens")
        static = self._infer_static(X)
        w1_h = P["skip_w1"][:, cfg.embed_dim:cfg.embed_dim + h_dim]
        w2, b2 = P["skip_w2"], P["skip_b2"]
        use_pre = cfg.use_preceding
        for t in range(T):
            pre = static[t] + w1_h @ h if use_pre else static[t]
            logits = w2 @ np.maximum(pre, 0.0) + b2
            e = np.exp(logits - logits.max())
            pi = e / e.sum()
            probs[t] = pi
            if forced is not None:
                keep = forced[t] == KEEP
            elif rng is not None:
                keep = rng.random() < pi[KEEP]
            else:
                keep = pi[KEEP] >= pi[SKIP]
            if keep:
                h, c = self._cell(h, c, X[t], w_hh, w_ih, b, h_dim)
                updates += 1
            else:
                decisions[t] = SKIP
        return InferResult(classify(h, P["classifier"]), SkipTrace(probs, decisions), updates, h)

    @staticmethod
    def _cell(h, c, x, w_hh, w_ih, b, h_dim):
        gates = w_hh @ h + w_ih @ x + b
        ifo = 0.5 * (1.0 + np.tanh(0.5 * gates[:3 * h_dim]))
        c = ifo[h_dim:2 * h_dim] * c + ifo[:h_dim] * np.tanh(gates[3 * h_dim:])
        return ifo[2 * h_dim:] * np.tanh(c), c

    def _infer_static(self, X: np.ndarray) -> np.ndarray:
        cfg, P = self.cfg, self.params
        T = X.shape[0]
        d, h_dim, f_dim = cfg.embed_dim, cfg.hidden, cfg.follow_dim
        w1 = P["skip_w1"]
        static = np.broadcast_to(P["skip_b1"], (T, cfg.skip_hidden)).copy()
        if cfg.use_current:
            static += X @ w1[:, :d].T
        if cfg.use_follow:
            rev = reverse_encode(X, P) if cfg.use_rnn_r else np.zeros((T, cfg.reverse_hidden))
            conv = conv_features(X, P, cfg) if cfg.use_cnn else np.zeros((T, cfg.conv_dim))
            follow = np.zeros((T, f_dim))
            follow[:-1] = np.concatenate([rev[1:], conv[1:]], axis=1)
            follow[-1] = P["h_end"]
            static += follow @ w1[:, d + h_dim:].T
        return static

    def predict(self, docs: Sequence[Document]) -> np.ndarray:
        return np.array([self.forward_infer(doc).prediction for doc in docs], dtype=np.int64)
