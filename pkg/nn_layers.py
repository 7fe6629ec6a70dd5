"""
SigTraj - Neural Layers
Linear/embedding, LSTM cell, MLP encoder, and the attention scoring head
"""

import json
import logging
import math

import numpy as np

from tensor_core import (
    Tensor, TensorError, add, concat, expand, leaky_relu, matmul, mul, reshape,
    sigmoid, softmax, stack_rows, take_slice, tanh, transpose,
)

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


def init_uniform(rng, shape, fan_in, name=None):
    """Uniform in +-1/sqrt(fan_in), seeded"""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Layer:
    """Base: sub-classes list their tensors in `_params` and sub-layers in `_children`"""

    _params = ()
    _children = ()

    def named_parameters(self, prefix=""):
        named = {}
        for attr in self._params:
            named[f"{prefix}{attr}"] = getattr(self, attr)
        for attr in self._children:
            child = getattr(self, attr)
            if isinstance(child, (list, tuple)):
                for i, layer in enumerate(child):
                    named.update(layer.named_parameters(f"{prefix}{attr}.{i}."))
            elif child is not None:
                named.update(child.named_parameters(f"{prefix}{attr}."))
        return named

    def parameters(self):
        return list(self.named_parameters().values())


class LinearLayer(Layer):
    """y = W x + b, W is (out x in)"""

    _params = ("W", "b")

    def __init__(self, in_dim, out_dim, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = init_uniform(rng, (out_dim, in_dim), in_dim)
        self.b = init_uniform(rng, (out_dim,), in_dim)

    def __call__(self, x):
        if x.shape[-1] != self.in_dim or x.ndim not in (1, 2):
            raise TensorError(f"linear: expected input (..., {self.in_dim}), got {x.shape}")
        if x.ndim == 1:
            return add(matmul(self.W, x), self.b)
        rows = x.shape[0]
        return add(matmul(x, transpose(self.W)), expand(reshape(self.b, (1, self.out_dim)), (rows, self.out_dim)))


def embed_position(p, layer):
    """e = Phi(p, W_p) for one 2-vector or a batch of rows"""
    p = p if isinstance(p, Tensor) else Tensor(p)
    if not np.isfinite(p.data).all():
        raise TensorError(f"embed_position: non-finite position {p.data.tolist()}")
    return layer(p)


class LstmCell(Layer):
    """Standard LSTM cell; each gate weight is (H x (in + H))"""

    _params = ("W_i", "b_i", "W_f", "b_f", "W_g", "b_g", "W_o", "b_o")

    def __init__(self, in_dim, hidden, rng):
        self.in_dim = in_dim
        self.hidden = hidden
        fan_in = in_dim + hidden
        for gate in "ifgo":
            setattr(self, f"W_{gate}", init_uniform(rng, (hidden, fan_in), fan_in))
            setattr(self, f"b_{gate}", init_uniform(rng, (hidden,), fan_in))

    def _gate(self, W, b, z):
        if z.ndim == 1:
            return add(matmul(W, z), b)
        rows = z.shape[0]
        return add(matmul(z, transpose(W)), expand(reshape(b, (1, self.hidden)), (rows, self.hidden)))

    def step(self, h_prev, c_prev, e):
        if e.shape[-1] != self.in_dim or h_prev.shape[-1] != self.hidden or c_prev.shape != h_prev.shape:
            raise TensorError(
                f"lstm_step: expected e (..., {self.in_dim}) and h/c (..., {self.hidden}), "
                f"got {e.shape}, {h_prev.shape}, {c_prev.shape}"
            )
        z = concat([e, h_prev])
        i = sigmoid(self._gate(self.W_i, self.b_i, z))
        f = sigmoid(self._gate(self.W_f, self.b_f, z))
        g = tanh(self._gate(self.W_g, self.b_g, z))
        o = sigmoid(self._gate(self.W_o, self.b_o, z))
        c = add(mul(f, c_prev), mul(i, g))
        h = mul(o, tanh(c))
        return h, c

    def zero_state(self, rows=None):
        shape = (self.hidden,) if rows is None else (rows, self.hidden)
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def lstm_step(h_prev, c_prev, e, cell):
    return cell.step(h_prev, c_prev, e)


class AttentionHead(Layer):
    """Single-layer feedforward scoring: s_j = LeakyReLU(beta . [W q || W k_j])"""

    _params = ("W", "beta")

    def __init__(self, in_dim, attn_dim, rng, leaky_slope=LEAKY_SLOPE):
        self.in_dim = in_dim
        self.attn_dim = attn_dim
        self.leaky_slope = leaky_slope
        self.W = init_uniform(rng, (attn_dim, in_dim), in_dim)
        self.beta = init_uniform(rng, (2 * attn_dim,), 2 * attn_dim)

    def _beta_halves(self):
        return take_slice(self.beta, 0, self.attn_dim), take_slice(self.beta, self.attn_dim, 2 * self.attn_dim)

    def query_scores(self, rows):
        """(N, D) -> (N,) query half beta_q . W x"""
        beta_q, _ = self._beta_halves()
        return matmul(matmul(rows, transpose(self.W)), beta_q)

    def key_scores(self, rows):
        """(N, D) -> (N,) key half beta_k . W x"""
        _, beta_k = self._beta_halves()
        return matmul(matmul(rows, transpose(self.W)), beta_k)

    def logits(self, queries, keys):
        """(N, D) x (M, D) -> (N, M) raw scores"""
        n, m = queries.shape[0], keys.shape[0]
        q = expand(reshape(self.query_scores(queries), (n, 1)), (n, m))
        k = expand(reshape(self.key_scores(keys), (1, m)), (n, m))
        return leaky_relu(add(q, k), self.leaky_slope)

    def attend(self, queries, keys, mask=None):
        """Row-wise softmax of logits restricted to mask"""
        return softmax(self.logits(queries, keys), mask=mask)


def gat_scores(query, keys, head):
    """Attention weights of one query over a list of keys"""
    if not keys:
        raise TensorError("gat_scores: empty key list")
    for k in keys:
        if k.shape != query.shape:
            raise TensorError(f"gat_scores: key shape {k.shape} differs from query shape {query.shape}")
    q = reshape(query, (1, query.size))
    return reshape(head.attend(q, stack_rows(keys)), (len(keys),))


class MlpEncoder(Layer):
    """Linear layers with leaky_relu between them; last layer is linear"""

    _children = ("layers",)

    def __init__(self, dims, rng):
        if len(dims) < 2:
            raise TensorError(f"MlpEncoder needs at least in/out dims, got {dims}")
        self.dims = tuple(dims)
        self.layers = [LinearLayer(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def in_dim(self):
        return self.dims[0]

    def __call__(self, x):
        if x.shape[-1] != self.in_dim:
            raise TensorError(f"mlp_forward: expected input dim {self.in_dim}, got {x.shape}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, LEAKY_SLOPE)
        return x


def mlp_forward(x, enc):
    return enc(x)


# === PARAMETER SERIALIZATION ===

def save_parameters(named, blob_path, manifest_path):
    """Flat float64 blob + JSON manifest (name, shape, offset)"""
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in named.items():
        values = np.asarray(tensor.data if isinstance(tensor, Tensor) else tensor, dtype="<f8").reshape(-1)
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(values)
        offset += values.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(blob_path, "wb") as f:
        f.write(blob.astype("<f8").tobytes())
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump({"dtype": "float64", "count": int(offset), "tensors": manifest}, f, indent=2)
    logger.info(f"💾 Saved {len(manifest)} tensors ({offset} values) to {blob_path}")
    return manifest


def load_parameters(blob_path, manifest_path):
    """Returns {name: float64 array}"""
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    with open(blob_path, "rb") as f:
        blob = np.frombuffer(f.read(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise TensorError(f"parameter blob has {blob.size} values, manifest expects {manifest['count']}")
    arrays = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = blob[entry["offset"]:entry["offset"] + size]
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    return arrays


def assign_parameters(named, arrays):
    """Copy loaded arrays into live tensors; names and shapes must match exactly"""
    missing = set(named) ^ set(arrays)
    if missing:
        raise TensorError(f"parameter sets differ: {sorted(missing)}")
    for name, tensor in named.items():
        if tuple(arrays[name].shape) != tensor.shape:
            raise TensorError(f"{name}: shape {arrays[name].shape} vs {tensor.shape}")
        tensor.data[...] = arrays[name]
