"""Immutable static computation graph, topological execution, reverse-mode
backward pass, and the finite-difference gradient-check harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import GraphError, ShapeError
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, elementwise, tensor_create

KINDS = ("input", "conv", "bn", "relu", "pool_max", "pool_avg", "gap",
         "linear", "ir", "concat", "block_sum", "slice", "add", "output")


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    config: dict
    inputs: tuple[int, ...]
    name: str


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    per_param: dict  # "name.field" -> max relative error
    input_error: float
    passed: bool

    def max_error(self) -> float:
        errs = list(self.per_param.values()) + [self.input_error]
        return max(errs) if errs else 0.0


class Graph:
    """A frozen DAG of layers plus its weight table.

    Node ids are assigned in construction order, which is a topological
    order by construction (a node may only consume already-added nodes).
    """

    def __init__(self, nodes, input_id, output_id, weights):
        self.nodes = {n.id: n for n in nodes}
        self.order = sorted(self.nodes)
        self.input_id = input_id
        self.output_id = output_id
        self.weights = weights

    def node(self, nid) -> LayerNode:
        return self.nodes[nid]

    def consumers(self):
        cons = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                cons[src].append(n.id)
        return cons

    def param_names(self):
        """Trainable parameter table entries, in deterministic order."""
        out = []
        for nid in self.order:
            for field_name in sorted(self.weights.get(nid, ())):
                if field_name in ("running_mean", "running_var"):
                    continue
                out.append((nid, field_name))
        return out

    def num_params(self) -> int:
        return sum(self.weights[nid][f].size for nid, f in self.param_names())

    def copy_weights(self, dtype=None):
        out = {}
        for nid, table in self.weights.items():
            out[nid] = {k: (v.astype(dtype) if dtype else v.copy())
                        for k, v in table.items()}
        return out


class GraphBuilder:
    def __init__(self):
        self._nodes = []
        self._names = set()

    def add(self, kind: str, inputs=(), name: str = "", **config) -> int:
        if kind not in KINDS:
            raise GraphError(f"unknown node kind {kind!r}")
        nid = len(self._nodes)
        inputs = tuple(inputs)
        for src in inputs:
            if not 0 <= src < nid:
                raise GraphError(f"node {name!r} references unknown input {src}")
        if kind != "input" and not inputs:
            raise GraphError(f"node {name!r} ({kind}) needs a predecessor")
        if kind in ("add", "concat") and len(inputs) < 2:
            raise GraphError(f"node {name!r} ({kind}) needs >= 2 inputs")
        if not name:
            name = f"{kind}{nid}"
        if name in self._names:
            name = f"{name}#{nid}"
        self._names.add(name)
        self._nodes.append(LayerNode(nid, kind, dict(config), inputs, name))
        return nid

    def freeze(self, output_id: int, seed: int = 0,
               init: bool = True) -> Graph:
        """Freeze into a Graph; ``init=False`` skips weight instantiation
        (static analysis only)."""
        inputs = [n.id for n in self._nodes if n.kind == "input"]
        if len(inputs) != 1:
            raise GraphError(f"graph must have exactly one input, got {len(inputs)}")
        weights = {}
        if init:
            rng = np.random.Generator(np.random.PCG64(seed))
            for n in self._nodes:
                w = _init_weights(n, rng)
                if w:
                    weights[n.id] = w
        return Graph(self._nodes, inputs[0], output_id, weights)


def _init_weights(node: LayerNode, rng) -> dict:
    """He-style init: normal with std sqrt(2/fan_in); BN affine is identity."""
    if node.kind == "conv":
        p: ConvParams = node.config["params"]
        fan_in = (p.in_channels // p.groups) * p.kernel[0] * p.kernel[1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=p.weight_shape).astype(np.float32)
        table = {"weight": w}
        if p.has_bias:
            table["bias"] = np.zeros(p.out_channels, dtype=np.float32)
        return table
    if node.kind == "bn":
        c = node.config["channels"]
        return {"gamma": np.ones(c, dtype=np.float32),
                "beta": np.zeros(c, dtype=np.float32),
                "running_mean": np.zeros(c, dtype=np.float32),
                "running_var": np.ones(c, dtype=np.float32)}
    if node.kind == "linear":
        cin = node.config["in_features"]
        cout = node.config["out_features"]
        w = rng.normal(0.0, np.sqrt(2.0 / cin),
                       size=(cout, cin)).astype(np.float32)
        return {"weight": w, "bias": np.zeros(cout, dtype=np.float32)}
    return {}


def reinit_weights(graph: Graph, seed: int) -> dict:
    """Fresh seeded weight table for an existing graph (same shapes)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = {}
    for nid in graph.order:
        w = _init_weights(graph.node(nid), rng)
        if w:
            weights[nid] = w
    return weights


def _bn_state(node, table, mode) -> BatchNormState:
    return BatchNormState(gamma=table["gamma"], beta=table["beta"],
                          running_mean=table["running_mean"],
                          running_var=table["running_var"],
                          momentum=node.config.get("momentum", 0.1),
                          epsilon=node.config.get("epsilon", 1e-5),
                          mode=mode)


def infer_shapes(graph: Graph, input_shape) -> dict:
    """Propagate (n,c,h,w) shapes through the graph without executing it."""
    shapes = {}
    for nid in graph.order:
        n = graph.node(nid)
        try:
            if n.kind == "input":
                shapes[nid] = tuple(input_shape)
                continue
            ins = [shapes[i] for i in n.inputs]
            bn, c, h, w = ins[0]
            if n.kind == "conv":
                p: ConvParams = n.config["params"]
                if c != p.in_channels:
                    raise ShapeError(f"{c} channels into conv expecting "
                                     f"{p.in_channels}")
                from .tensor import _out_hw
                ho, wo = _out_hw(h, w, p.kernel, p.stride, p.pad)
                shapes[nid] = (bn, p.out_channels, ho, wo)
            elif n.kind in ("bn", "relu", "output"):
                if n.kind == "bn" and c != n.config["channels"]:
                    raise ShapeError(f"{c} channels into bn expecting "
                                     f"{n.config['channels']}")
                shapes[nid] = ins[0]
            elif n.kind in ("pool_max", "pool_avg"):
                from .tensor import _out_hw
                ho, wo = _out_hw(h, w, n.config["kernel"], n.config["stride"],
                                 n.config["pad"])
                shapes[nid] = (bn, c, ho, wo)
            elif n.kind == "gap":
                shapes[nid] = (bn, c, 1, 1)
            elif n.kind == "linear":
                if c != n.config["in_features"] or (h, w) != (1, 1):
                    raise ShapeError(f"linear expects ({n.config['in_features']},"
                                     f"1,1) features, got ({c},{h},{w})")
                shapes[nid] = (bn, n.config["out_features"], 1, 1)
            elif n.kind == "ir":
                shapes[nid] = (bn, c * n.config["m"], h, w)
            elif n.kind == "concat":
                if any(s[0] != bn or s[2:] != (h, w) for s in ins):
                    raise ShapeError(f"concat inputs disagree: {ins}")
                shapes[nid] = (bn, sum(s[1] for s in ins), h, w)
            elif n.kind == "block_sum":
                m = n.config["m"]
                if c % m:
                    raise ShapeError(f"{c} channels not divisible by m={m}")
                shapes[nid] = (bn, c // m, h, w)
            elif n.kind == "slice":
                start, stop = n.config["start"], n.config["stop"]
                if not 0 <= start < stop <= c:
                    raise ShapeError(f"slice [{start}:{stop}] out of range "
                                     f"for {c} channels")
                shapes[nid] = (bn, stop - start, h, w)
            elif n.kind == "add":
                if any(s != ins[0] for s in ins):
                    raise ShapeError(f"add inputs disagree: {ins}")
                shapes[nid] = ins[0]
            else:
                raise ShapeError(f"unknown kind {n.kind}")
        except ShapeError as exc:
            raise GraphError(f"shape propagation failed at node {nid} "
                             f"({n.name}): {exc}") from exc
    return shapes


def _eval_node(node: LayerNode, ins, table, mode):
    if node.kind == "conv":
        p = node.config["params"]
        return ops.conv2d_forward(ins[0], table["weight"],
                                  table.get("bias"), p)
    if node.kind == "bn":
        return ops.batchnorm2d(ins[0], _bn_state(node, table, mode))
    if node.kind == "relu":
        return ops.relu(ins[0])
    if node.kind in ("pool_max", "pool_avg"):
        return ops.pool2d(ins[0], node.kind[5:], node.config["kernel"],
                          node.config["stride"], node.config["pad"])
    if node.kind == "gap":
        return ops.global_avg_pool(ins[0])
    if node.kind == "linear":
        return ops.linear(ins[0], table["weight"], table["bias"])
    if node.kind == "ir":
        return ops.input_replicate(ins[0], node.config["m"])
    if node.kind == "concat":
        return ops.channel_concat(ins)
    if node.kind == "block_sum":
        return ops.channel_block_sum(ins[0], node.config["m"])
    if node.kind == "slice":
        start, stop = node.config["start"], node.config["stop"]
        if not 0 <= start < stop <= ins[0].c:
            raise ShapeError(f"slice [{start}:{stop}] out of range for "
                             f"{ins[0].c} channels")
        return Tensor(ins[0].data[:, start:stop].copy())
    if node.kind == "add":
        out = ins[0]
        for t in ins[1:]:
            out = elementwise("add", out, t)
        return out
    if node.kind == "output":
        return ins[0]
    raise GraphError(f"cannot evaluate kind {node.kind}")


def graph_forward(graph: Graph, x: Tensor, mode: str = "eval",
                  weights=None):
    """Evaluate nodes in topological order.

    Returns (output, tape); the tape retains per-node activations and is only
    produced in train mode (eval returns tape=None).
    """
    if mode not in ("train", "eval"):
        raise GraphError(f"unknown mode {mode!r}")
    weights = weights if weights is not None else graph.weights
    acts = {}
    for nid in graph.order:
        node = graph.node(nid)
        if node.kind == "input":
            acts[nid] = x
            continue
        ins = []
        for src in node.inputs:
            if src not in acts:
                raise GraphError(f"node {node.name} reads unevaluated node {src}")
            ins.append(acts[src])
        try:
            acts[nid] = _eval_node(node, ins, weights.get(nid, {}), mode)
        except (ShapeError, GraphError) as exc:
            raise GraphError(f"forward failed at node {nid} ({node.name}): "
                             f"{exc}") from exc
    out = acts[graph.output_id]
    tape = {"mode": mode, "acts": acts} if mode == "train" else None
    return out, tape


def _node_backward(node: LayerNode, grad_out: Tensor, ins, table, mode):
    """Returns (per-input gradients, parameter gradients dict)."""
    if node.kind == "conv":
        p = node.config["params"]
        gx, gw, gb = ops.conv2d_backward(grad_out, ins[0], table["weight"], p)
        grads = {"weight": gw}
        if gb is not None:
            grads["bias"] = gb
        return [gx], grads
    if node.kind == "bn":
        gx, gg, gb = ops.batchnorm2d_backward(grad_out, ins[0],
                                              _bn_state(node, table, mode))
        return [gx], {"gamma": gg, "beta": gb}
    if node.kind == "relu":
        return [ops.relu_backward(grad_out, ins[0])], {}
    if node.kind in ("pool_max", "pool_avg"):
        gx = ops.pool2d_backward(grad_out, ins[0], node.kind[5:],
                                 node.config["kernel"], node.config["stride"],
                                 node.config["pad"])
        return [gx], {}
    if node.kind == "gap":
        return [ops.global_avg_pool_backward(grad_out, ins[0])], {}
    if node.kind == "linear":
        gx, gw, gb = ops.linear_backward(grad_out, ins[0], table["weight"])
        return [gx], {"weight": gw, "bias": gb}
    if node.kind == "ir":
        return [ops.input_replicate_backward(grad_out, node.config["m"])], {}
    if node.kind == "concat":
        return ops.channel_concat_backward(grad_out, [t.c for t in ins]), {}
    if node.kind == "block_sum":
        return [ops.channel_block_sum_backward(grad_out, node.config["m"])], {}
    if node.kind == "slice":
        start, stop = node.config["start"], node.config["stop"]
        full = np.zeros((grad_out.n, ins[0].c, grad_out.h, grad_out.w),
                        dtype=grad_out.dtype)
        full[:, start:stop] = grad_out.data
        return [Tensor(full)], {}
    if node.kind == "add":
        return [grad_out for _ in ins], {}
    if node.kind == "output":
        return [grad_out], {}
    raise GraphError(f"cannot differentiate kind {node.kind}")


def graph_backward(graph: Graph, tape, grad_output: Tensor, weights=None):
    """Reverse-mode gradients; fan-out accumulates by summation.

    Returns (grad table keyed like the weight table, grad w.r.t. the input).
    """
    if tape is None or tape.get("mode") != "train":
        raise GraphError("backward requires a tape from a train-mode forward")
    weights = weights if weights is not None else graph.weights
    acts = tape["acts"]
    out_grads = {graph.output_id: grad_output}
    param_grads = {}
    for nid in reversed(graph.order):
        node = graph.node(nid)
        if nid not in out_grads or node.kind == "input":
            continue
        go = out_grads.pop(nid)
        ins = [acts[src] for src in node.inputs]
        in_grads, pgrads = _node_backward(node, go, ins,
                                          weights.get(nid, {}), tape["mode"])
        if pgrads:
            param_grads[nid] = pgrads
        for src, g in zip(node.inputs, in_grads):
            if src in out_grads:
                out_grads[src] = Tensor(out_grads[src].data + g.data)
            else:
                out_grads[src] = g
    grad_input = out_grads.get(graph.input_id)
    if grad_input is None:
        grad_input = Tensor(np.zeros(acts[graph.input_id].shape,
                                     dtype=grad_output.dtype))
    return param_grads, grad_input


def _activation_signature(graph: Graph, acts) -> bytes:
    """Fingerprint of every piecewise-linear decision taken in a forward
    pass (ReLU sign masks and max-pool winner indices).  Two evaluations
    with different signatures sit on different linear pieces, so a finite
    difference across them is not an estimate of the local derivative."""
    parts = []
    for nid in graph.order:
        node = graph.node(nid)
        if node.kind == "relu":
            parts.append(np.packbits(acts[node.inputs[0]].data > 0).tobytes())
        elif node.kind == "pool_max":
            win, _ = ops._pool_windows(acts[node.inputs[0]].data,
                                       node.config["kernel"],
                                       node.config["stride"],
                                       node.config["pad"], -np.inf)
            parts.append(win.argmax(axis=2).astype(np.uint8).tobytes())
    return b"".join(parts)


def grad_check(graph: Graph, input_shape, seed: int = 0, eps: float = 1e-3,
               tol: float = 1e-3) -> GradCheckReport:
    """Central finite differences against the analytic backward pass.

    The loss is the sum of all network outputs; everything is re-executed in
    64-bit.  BN runs in train mode so normalization gradients are exercised.
    Relative error uses a unit floor in the denominator:
    ``|a-f| / max(|a|, |f|, 1)``.  Elements whose ±eps perturbation crosses
    a ReLU or max-pool kink are skipped: the difference quotient there does
    not measure a derivative.
    """
    if graph.num_params() > 10_000:
        raise GraphError(f"grad_check guard: {graph.num_params()} parameters "
                         "exceeds the 10,000 limit")
    w64 = graph.copy_weights(dtype=np.float64)
    x = tensor_create(input_shape, "uniform", seed=seed, lo=-1.0, hi=1.0,
                      dtype=np.float64)

    def loss_of(weights, xt):
        out, tape = graph_forward(graph, xt, mode="train", weights=weights)
        return float(out.data.sum()), _activation_signature(graph,
                                                            tape["acts"])

    out, tape = graph_forward(graph, x, mode="train", weights=w64)
    ones = Tensor(np.ones(out.shape, dtype=np.float64))
    pgrads, gin = graph_backward(graph, tape, ones, weights=w64)

    def rel(a, f):
        return abs(a - f) / max(abs(a), abs(f), 1.0)

    per_param = {}
    for nid, fname in graph.param_names():
        arr = w64[nid][fname]
        analytic = pgrads.get(nid, {}).get(fname)
        if analytic is None:
            analytic = np.zeros_like(arr)
        else:
            analytic = np.asarray(analytic)
        worst = 0.0
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, sp = loss_of(w64, x)
            flat[i] = orig - eps
            lm, sm = loss_of(w64, x)
            flat[i] = orig
            if sp != sm:
                continue
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, rel(aflat[i], fd))
        per_param[f"{graph.node(nid).name}.{fname}"] = worst

    xin = x.data.reshape(-1)
    ginf = gin.data.reshape(-1)
    worst_in = 0.0
    for i in range(xin.size):
        orig = xin[i]
        xin[i] = orig + eps
        lp, sp = loss_of(w64, x)
        xin[i] = orig - eps
        lm, sm = loss_of(w64, x)
        xin[i] = orig
        if sp != sm:
            continue
        fd = (lp - lm) / (2 * eps)
        worst_in = max(worst_in, rel(ginf[i], fd))

    errs = list(per_param.values()) + [worst_in]
    passed = all(e <= tol for e in errs)
    return GradCheckReport(eps=eps, tol=tol, per_param=per_param,
                           input_error=worst_in, passed=passed)


def describe(graph: Graph, input_shape=None) -> str:
    """Text rendering of nodes in topological order."""
    shapes = infer_shapes(graph, input_shape) if input_shape else {}
    lines = []
    for nid in graph.order:
        n = graph.node(nid)
        detail = ""
        if n.kind == "conv":
            p = n.config["params"]
            g = f" g={p.groups}" if p.groups > 1 else ""
            detail = (f" {p.in_channels}->{p.out_channels} "
                      f"k={p.kernel[0]}x{p.kernel[1]} s={p.stride[0]}{g}")
        elif n.kind == "ir":
            detail = f" m={n.config['m']}"
        elif n.kind == "block_sum":
            detail = f" m={n.config['m']}"
        elif n.kind == "linear":
            detail = f" {n.config['in_features']}->{n.config['out_features']}"
        shape = f" -> {shapes[nid]}" if shapes else ""
        src = ",".join(str(s) for s in n.inputs)
        lines.append(f"[{nid:3d}] {n.name:<24} {n.kind:<9} in=({src}){detail}{shape}")
    return "\n".join(lines)
