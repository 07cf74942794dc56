"""A static computation graph with reverse-mode differentiation.

Nodes are appended in evaluation order, so the node list is already a
topological order.  Parameters live in one flat float64 vector owned by the
caller; nodes hold index arrays into it and ``backward`` scatters gradients
back into a vector of the same length.  Parameters a loss never reaches get
exact zeros.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GraphStateError, InputError, ShapeError
from .tensor import check_labels


@dataclass
class _Node:
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)


class Graph:
    def __init__(self, num_params):
        self.num_params = int(num_params)
        self.nodes = []
        self._values = None
        self._theta = None

    # ------------------------------------------------------------ building

    def _push(self, op, inputs=(), **attrs):
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise InputError(f"unknown input node {i}")
        self.nodes.append(_Node(op, tuple(inputs), attrs))
        return len(self.nodes) - 1

    def input(self, name="x"):
        return self._push("input", name=name)

    def labels(self, name="y"):
        return self._push("labels", name=name)

    def param(self, index, shape):
        index = np.asarray(index, dtype=np.int64)
        if index.size != int(np.prod(shape)):
            raise ShapeError(f"{index.size} parameters cannot fill shape {shape}")
        self._check_index(index)
        return self._push("param", index=index, shape=tuple(shape))

    def affine(self, x, w_index, w_pos, w_shape, b_index=None):
        """``x @ M + b`` where ``M`` is gathered from the parameter vector.

        ``M`` has shape ``w_shape``; entries ``M.flat[w_pos]`` come from
        ``theta[w_index]`` and every other entry is a structural zero.
        """
        w_index = np.asarray(w_index, dtype=np.int64)
        w_pos = np.asarray(w_pos, dtype=np.int64)
        fin, fout = w_shape
        if w_index.shape != w_pos.shape:
            raise ShapeError("w_index and w_pos must have equal length")
        if w_pos.size and (w_pos.min() < 0 or w_pos.max() >= fin * fout):
            raise ShapeError("w_pos outside the weight matrix")
        if np.unique(w_pos).size != w_pos.size:
            raise ShapeError("duplicate positions in w_pos")
        self._check_index(w_index)
        attrs = {"w_index": w_index, "w_pos": w_pos, "w_shape": (fin, fout)}
        dense = (w_pos.size == fin * fout and np.array_equal(w_pos, np.arange(w_pos.size))
                 and w_index.size > 0
                 and np.array_equal(w_index, np.arange(w_index[0], w_index[0] + w_index.size)))
        attrs["w_slice"] = slice(int(w_index[0]), int(w_index[0]) + w_index.size) if dense else None
        if b_index is not None:
            b_index = np.asarray(b_index, dtype=np.int64)
            if b_index.size != fout:
                raise ShapeError(f"bias of length {b_index.size} for {fout} outputs")
            self._check_index(b_index)
        attrs["b_index"] = b_index
        return self._push("affine", (x,), **attrs)

    def add(self, *xs):
        if not xs:
            raise InputError("add needs at least one input")
        if len(xs) == 1:
            return xs[0]
        return self._push("add", xs)

    def relu(self, x):
        return self._push("relu", (x,))

    def softmax_xent(self, logits, labels):
        return self._push("xent", (logits, labels))

    def sum(self, x):
        return self._push("sum", (x,))

    def half_sq_error(self, x, target):
        """0.5 * sum((x - target)**2) / batch."""
        return self._push("sqerr", (x, target))

    def weighted_mean(self, losses, weights):
        """(sum k_i L_i) / (sum k_i) over scalar loss nodes."""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(losses),):
            raise ShapeError("one weight per loss required")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise InputError("weights must be non-negative and not all zero")
        return self._push("wmean", tuple(losses), weights=weights)

    def _check_index(self, index):
        if index.size and (index.min() < 0 or index.max() >= self.num_params):
            raise ShapeError("parameter index out of range")

    # ------------------------------------------------------------ evaluation

    def forward(self, theta, **feeds):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {theta.shape}")
        vals = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            op, a = node.op, node.attrs
            if op == "input":
                if a["name"] not in feeds:
                    raise InputError(f"missing feed {a['name']!r}")
                vals[i] = np.ascontiguousarray(feeds[a["name"]], dtype=np.float64)
            elif op == "labels":
                if a["name"] not in feeds:
                    raise InputError(f"missing feed {a['name']!r}")
                vals[i] = np.asarray(feeds[a["name"]])
            elif op == "param":
                vals[i] = theta[a["index"]].reshape(a["shape"])
            elif op == "affine":
                x = vals[node.inputs[0]]
                if x.ndim != 2 or x.shape[1] != a["w_shape"][0]:
                    raise ShapeError(f"affine expects (*, {a['w_shape'][0]}), got {x.shape}")
                y = _kernels.matmul(x, self._weight(theta, a))
                if a["b_index"] is not None:
                    y += theta[a["b_index"]]
                vals[i] = y
            elif op == "add":
                acc = vals[node.inputs[0]].copy()
                for j in node.inputs[1:]:
                    acc += vals[j]
                vals[i] = acc
            elif op == "relu":
                vals[i] = np.maximum(vals[node.inputs[0]], 0.0)
            elif op == "xent":
                logits = vals[node.inputs[0]]
                labels = check_labels(vals[node.inputs[1]], logits.shape[1], logits.shape[0])
                loss, dlogits = _kernels.softmax_xent(logits, np.ascontiguousarray(labels))
                vals[i] = float(loss)
                a["_dlogits"] = dlogits
            elif op == "sum":
                vals[i] = float(vals[node.inputs[0]].sum())
            elif op == "sqerr":
                x, t = vals[node.inputs[0]], vals[node.inputs[1]]
                vals[i] = 0.5 * float(np.sum((x - t) ** 2)) / x.shape[0]
            elif op == "wmean":
                w = a["weights"]
                vals[i] = float(sum(w[k] * vals[j] for k, j in enumerate(node.inputs)) / w.sum())
            else:  # pragma: no cover
                raise GraphStateError(f"unknown op {op}")
        self._values = vals
        self._theta = theta
        return vals

    def value(self, node):
        if self._values is None:
            raise GraphStateError("forward has not been run")
        return self._values[node]

    @staticmethod
    def _weight(theta, a):
        if a["w_slice"] is not None:
            return theta[a["w_slice"]].reshape(a["w_shape"])
        m = np.zeros(a["w_shape"][0] * a["w_shape"][1])
        m[a["w_pos"]] = theta[a["w_index"]]
        return m.reshape(a["w_shape"])

    def backward(self, loss):
        """Gradient of scalar node ``loss`` over the whole parameter vector."""
        if self._values is None:
            raise GraphStateError("backward called before forward")
        if not isinstance(self._values[loss], float):
            raise GraphStateError(f"node {loss} is not a scalar loss")
        vals, theta = self._values, self._theta
        grad = np.zeros(self.num_params)
        adj = [None] * len(self.nodes)
        adj[loss] = 1.0

        def push(j, g):
            adj[j] = g if adj[j] is None else adj[j] + g

        for i in range(loss, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node, a = self.nodes[i], self.nodes[i].attrs
            op = node.op
            if op in ("input", "labels"):
                continue
            if op == "param":
                grad[a["index"]] += np.ravel(g)
            elif op == "affine":
                src = node.inputs[0]
                x = vals[src]
                dm = _kernels.matmul_tn(x, g)
                grad[a["w_index"]] += dm.ravel()[a["w_pos"]]
                if a["b_index"] is not None:
                    grad[a["b_index"]] += g.sum(axis=0)
                if self.nodes[src].op != "input":
                    push(src, _kernels.matmul_nt(g, self._weight(theta, a)))
            elif op == "add":
                for j in node.inputs:
                    push(j, g)
            elif op == "relu":
                src = node.inputs[0]
                push(src, g * (vals[src] > 0.0))
            elif op == "xent":
                push(node.inputs[0], a["_dlogits"] * g if g != 1.0 else a["_dlogits"])
            elif op == "sum":
                push(node.inputs[0], np.full_like(vals[node.inputs[0]], g))
            elif op == "sqerr":
                x, t = vals[node.inputs[0]], vals[node.inputs[1]]
                push(node.inputs[0], g * (x - t) / x.shape[0])
            elif op == "wmean":
                w = a["weights"]
                tot = w.sum()
                for k, j in enumerate(node.inputs):
                    if w[k] != 0.0:
                        push(j, g * (w[k] / tot))
        return grad

    def relu_margin(self):
        """Smallest |pre-activation| seen by any relu in the last forward."""
        if self._values is None:
            raise GraphStateError("forward has not been run")
        margins = [np.min(np.abs(self._values[n.inputs[0]]))
                   for n in self.nodes if n.op == "relu"]
        return float(min(margins)) if margins else float("inf")


def central_differences(graph, loss, theta, feeds, eps=1e-5, indices=None):
    """Central-difference estimate of d loss / d theta at ``indices``."""
    if eps <= 0:
        raise InputError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)
    fd = np.empty(idx.size)
    for j, k in enumerate(idx):
        orig = theta[k]
        theta[k] = orig + eps
        up = graph.forward(theta, **feeds)[loss]
        theta[k] = orig - eps
        down = graph.forward(theta, **feeds)[loss]
        theta[k] = orig
        fd[j] = (up - down) / (2.0 * eps)
    graph.forward(theta, **feeds)
    return fd


def relative_error(fd, bp):
    """Max over coordinates of |fd - bp| / max(1e-12, |fd| + |bp|)."""
    fd, bp = np.asarray(fd), np.asarray(bp)
    if fd.size == 0:
        return 0.0
    return float(np.max(np.abs(fd - bp) / np.maximum(1e-12, np.abs(fd) + np.abs(bp))))


def finite_diff_check(graph, loss, theta, feeds, eps=1e-5, indices=None):
    """Max relative error between central differences and ``backward``."""
    graph.forward(theta, **feeds)
    bp = graph.backward(loss)
    idx = np.arange(bp.size) if indices is None else np.asarray(indices)
    fd = central_differences(graph, loss, theta, feeds, eps, idx)
    return relative_error(fd, bp[idx])
