"""Neural building blocks: linear layers, (bi)LSTM stacks, scaled
dot-product attention, and an Adam optimizer.

The LSTM scan over a whole sequence is a single fused tape node with a
hand-written backward pass; ``lstm_step`` composes the same gate equations
from elementary ops and is used for stepwise decoding and as a reference
in tests. Gate blocks are ordered input, forget, cell candidate, output.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng, shape, fan_in):
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the default initializer."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """Affine map x -> xW + b with weight [D_in, D_out] and bias [D_out]."""

    def __init__(self, d_in, d_out, rng=None):
        if rng is None:
            self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
            self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        else:
            self.weight = uniform_init(rng, (d_in, d_out), d_in)
            self.bias = uniform_init(rng, (d_out,), d_in)

    def __call__(self, x):
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


def linear_forward(layer, x):
    return layer(x)


class LstmParams:
    """One direction of one LSTM layer: wx [D,4H], wh [H,4H], b [4H].

    The forget-gate bias block is initialized to 1.0 so gradients flow
    early in training.
    """

    def __init__(self, d_in, hidden, rng):
        self.hidden = hidden
        self.wx = uniform_init(rng, (d_in, 4 * hidden), d_in)
        self.wh = uniform_init(rng, (hidden, 4 * hidden), hidden)
        bias = uniform_init(rng, (4 * hidden,), d_in).data
        bias[hidden:2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)

    def parameters(self):
        return {"wx": self.wx, "wh": self.wh, "b": self.b}


def lstm_step(params, x_t, h, c):
    """Single LSTM step from elementary ops.

    x_t is [D] (or [1,D]); h and c are [H] (or [1,H]). Returns (h', c')
    with the input shapes preserved.
    """
    vector_in = x_t.data.ndim == 1
    if vector_in:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
        h = ad.reshape(h, (1, h.shape[0]))
        c = ad.reshape(c, (1, c.shape[0]))
    hsz = params.hidden
    pre = ad.add_bias(ad.add(ad.matmul(x_t, params.wx), ad.matmul(h, params.wh)),
                      params.b)
    i = ad.sigmoid(ad.slice_cols(pre, 0, hsz))
    f = ad.sigmoid(ad.slice_cols(pre, hsz, 2 * hsz))
    g = ad.tanh(ad.slice_cols(pre, 2 * hsz, 3 * hsz))
    o = ad.sigmoid(ad.slice_cols(pre, 3 * hsz, 4 * hsz))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    if vector_in:
        h_new = ad.reshape(h_new, (hsz,))
        c_new = ad.reshape(c_new, (hsz,))
    return h_new, c_new


def lstm_step_np(params, x, h, c):
    """Raw numpy LSTM step for gradient-free decoding; mirrors lstm_step
    operation for operation so values match bit for bit."""
    H = params.hidden
    a = (x @ params.wx.data + h @ params.wh.data) + params.b.data
    i = 1.0 / (1.0 + np.exp(-a[0:H]))
    f = 1.0 / (1.0 + np.exp(-a[H:2 * H]))
    g = np.tanh(a[2 * H:3 * H])
    o = 1.0 / (1.0 + np.exp(-a[3 * H:]))
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def lstm_layer(x, params):
    """Fused scan of one LSTM direction over x [T,D], from zero state.

    Forward stores the per-step gate activations; backward runs
    backpropagation through time over them in one tape node.
    """
    if x.data.ndim != 2:
        raise ad.ShapeError(f"lstm_layer: input must be [T,D], got {x.shape}")
    T = x.shape[0]
    H = params.hidden
    wx, wh, b = params.wx.data, params.wh.data, params.b.data

    pre_x = x.data @ wx + b  # input contribution for every step at once
    i_all = np.empty((T, H)); f_all = np.empty((T, H))
    g_all = np.empty((T, H)); o_all = np.empty((T, H))
    c_all = np.empty((T, H)); tanh_c = np.empty((T, H))
    h_prev_all = np.empty((T, H))
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(T):
        h_prev_all[t] = h
        a = pre_x[t] + h @ wh
        i = 1.0 / (1.0 + np.exp(-a[0:H]))
        f = 1.0 / (1.0 + np.exp(-a[H:2 * H]))
        g = np.tanh(a[2 * H:3 * H])
        o = 1.0 / (1.0 + np.exp(-a[3 * H:]))
        c = f * c + i * g
        h = o * np.tanh(c)
        i_all[t], f_all[t], g_all[t], o_all[t] = i, f, g, o
        c_all[t] = c
        tanh_c[t] = np.tanh(c)
    out = o_all * tanh_c
    x_data = x.data

    def vjp(grad_h):
        da_all = np.empty((T, 4 * H))
        dh_carry = np.zeros(H)
        dc_carry = np.zeros(H)
        for t in range(T - 1, -1, -1):
            dh = grad_h[t] + dh_carry
            i, f, g, o = i_all[t], f_all[t], g_all[t], o_all[t]
            do = dh * tanh_c[t]
            dc = dh * o * (1.0 - tanh_c[t] ** 2) + dc_carry
            c_prev = c_all[t - 1] if t > 0 else np.zeros(H)
            df = dc * c_prev
            di = dc * g
            dg = dc * i
            da = da_all[t]
            da[0:H] = di * i * (1.0 - i)
            da[H:2 * H] = df * f * (1.0 - f)
            da[2 * H:3 * H] = dg * (1.0 - g * g)
            da[3 * H:] = do * o * (1.0 - o)
            dh_carry = da @ wh.T
            dc_carry = dc * f
        dx = da_all @ wx.T
        dwx = x_data.T @ da_all
        dwh = h_prev_all.T @ da_all
        db = da_all.sum(axis=0)
        return dx, dwx, dwh, db

    return ad.record(out, (x, params.wx, params.wh, params.b), vjp)


class LstmStack:
    """Stack of LSTM layers; bidirectional layers concatenate a forward and
    a time-reversed backward scan, doubling the output width."""

    def __init__(self, d_in, hidden, layers, bidirectional, rng):
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.layers = []
        width = d_in
        for _ in range(layers):
            fwd = LstmParams(width, hidden, rng)
            bwd = LstmParams(width, hidden, rng) if bidirectional else None
            self.layers.append((fwd, bwd))
            width = 2 * hidden if bidirectional else hidden
        self.out_dim = width

    def parameters(self):
        out = {}
        for k, (fwd, bwd) in enumerate(self.layers):
            for name, p in fwd.parameters().items():
                out[f"l{k}.fwd.{name}"] = p
            if bwd is not None:
                for name, p in bwd.parameters().items():
                    out[f"l{k}.bwd.{name}"] = p
        return out

    def __call__(self, x):
        for fwd, bwd in self.layers:
            hf = lstm_layer(x, fwd)
            if bwd is None:
                x = hf
            else:
                rev = list(range(x.shape[0] - 1, -1, -1))
                hb = ad.gather_rows(lstm_layer(ad.gather_rows(x, rev), bwd), rev)
                x = ad.concat_cols([hf, hb])
        return x


def lstm_forward(stack, x):
    return stack(x)


def attention(q, keys, values):
    """Scaled dot-product attention for one query.

    q is [D], keys and values are [T,D]. Returns (context [D], weights [T]);
    weights are softmax(q . K^T / sqrt(D)).
    """
    if q.data.ndim != 1 or keys.data.ndim != 2 or keys.shape[1] != q.shape[0]:
        raise ad.ShapeError(
            f"attention: query {q.shape} does not match keys {keys.shape}")
    if values.shape[0] != keys.shape[0]:
        raise ad.ShapeError(
            f"attention: {keys.shape[0]} keys but {values.shape[0]} values")
    d = q.shape[0]
    scores = ad.matmul(keys, ad.reshape(q, (d, 1)))
    scores = ad.reshape(ad.scale(scores, 1.0 / math.sqrt(d)), (keys.shape[0],))
    weights = ad.softmax(scores)
    context = ad.reshape(
        ad.matmul(ad.reshape(weights, (1, keys.shape[0])), values),
        (values.shape[1],))
    return context, weights


class AttentionHead:
    """Single-head cross attention with query/key/value projections."""

    def __init__(self, d_query, d_enc, d_att, rng):
        self.wq = Linear(d_query, d_att, rng)
        self.wk = Linear(d_enc, d_att, rng)
        self.wv = Linear(d_enc, d_att, rng)
        self.d_att = d_att

    def parameters(self):
        out = {}
        for tag, layer in (("q", self.wq), ("k", self.wk), ("v", self.wv)):
            for name, p in layer.parameters().items():
                out[f"{tag}.{name}"] = p
        return out

    def project_memory(self, memory):
        """Precompute keys/values for a [T,d_enc] attended matrix."""
        return self.wk(memory), self.wv(memory)

    def __call__(self, query, keys, values):
        q = ad.reshape(self.wq(ad.reshape(query, (1, query.shape[0]))),
                       (self.d_att,))
        return attention(q, keys, values)


class Adam:
    """Adam with bias correction, optional global-norm clipping and an
    optional linear learning-rate warmup."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_norm=5.0, warmup_steps=0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        """Update parameters in place.

        params maps name -> Tensor; grads maps Tensor -> gradient Tensor
        (as returned by autodiff.backward). Parameters without a gradient
        this step are treated as zero-gradient.
        """
        self.step_count += 1
        named = [(name, p, grads.get(p)) for name, p in params.items()]
        for name, _, g in named:
            if g is not None and not np.all(np.isfinite(g.data)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")

        if self.clip_norm is not None and self.clip_norm > 0:
            total = 0.0
            for _, _, g in named:
                if g is not None:
                    total += float((g.data ** 2).sum())
            norm = math.sqrt(total)
            clip_factor = min(1.0, self.clip_norm / norm) if norm > 0 else 1.0
        else:
            clip_factor = 1.0

        lr = self.lr
        if self.warmup_steps > 0 and self.step_count <= self.warmup_steps:
            lr = self.lr * self.step_count / self.warmup_steps

        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p, g in named:
            gd = np.zeros_like(p.data) if g is None else g.data * clip_factor
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * gd
            v *= self.beta2
            v += (1.0 - self.beta2) * gd * gd
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state, params, grads):
    state.step(params, grads)
