"""Reference execution engine: lowering a graph to an execution plan and
running it, in two column-execution modes.

``batched`` keeps every grouped convolution as one fused step and evaluates
it with per-kernel-position accumulation (a sequence of small gemms summed in
kernel order).  ``unrolled`` expands each grouped convolution into explicit
per-group slice / convolve / concatenate steps, each group evaluated by the
im2col path.  The two modes are mathematically identical but accumulate in a
different order, so their float32 outputs differ at rounding level; the
equivalence checker bounds that difference.  A graph whose convolutions all
have a single group lowers to step-identical plans in both modes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import ops
from .errors import PlanError, ShapeError
from .graph import Graph, reinit_weights
from .ops import BatchNormState, ConvParams
from .tensor import Tensor, elementwise, mm, tensor_create, _out_hw

MODES = ("batched", "unrolled")
INPUT_ID = -1   # plan-level id of the external input tensor


@dataclass(frozen=True)
class PlanStep:
    id: int
    kind: str
    config: dict
    inputs: tuple
    name: str
    src_node: int | None = None   # graph node whose weight table this reads
    group: int | None = None      # group index for unrolled per-group convs


@dataclass
class ExecutionPlan:
    mode: str
    graph: Graph
    steps: list
    output_id: int

    def num_steps(self) -> int:
        return len(self.steps)


def plans_identical(a: ExecutionPlan, b: ExecutionPlan) -> bool:
    """Step-by-step structural equality (ignores the mode label)."""
    return a.steps == b.steps and a.output_id == b.output_id


def plan(graph: Graph, mode: str) -> ExecutionPlan:
    """Lower a graph into an ordered step list for the chosen mode."""
    if mode not in MODES:
        raise PlanError(f"unknown execution mode {mode!r}; pick from {MODES}")
    steps = []
    produced = {graph.input_id: INPUT_ID}   # graph node -> plan tensor id

    def emit(kind, config, inputs, name, src_node=None, group=None):
        sid = len(steps)
        steps.append(PlanStep(id=sid, kind=kind, config=config,
                              inputs=tuple(inputs), name=name,
                              src_node=src_node, group=group))
        return sid

    for nid in graph.order:
        node = graph.node(nid)
        if node.kind == "input":
            continue
        try:
            ins = [produced[src] for src in node.inputs]
        except KeyError as exc:
            raise PlanError(f"node {node.name} reads unplanned node "
                            f"{exc.args[0]}") from None
        if node.kind == "conv":
            p: ConvParams = node.config["params"]
            if mode == "unrolled" and p.groups > 1:
                g = p.groups
                cin_g = p.in_channels // g
                cout_g = p.out_channels // g
                gp = dc_replace(p, in_channels=cin_g, out_channels=cout_g,
                                groups=1)
                parts = []
                for gi in range(g):
                    sl = emit("slice",
                              {"start": gi * cin_g, "stop": (gi + 1) * cin_g},
                              ins, f"{node.name}.g{gi}.slice")
                    parts.append(emit("conv", {"params": gp}, [sl],
                                      f"{node.name}.g{gi}", src_node=nid,
                                      group=gi))
                produced[nid] = emit("concat", {}, parts,
                                     f"{node.name}.join")
                continue
            produced[nid] = emit("conv", dict(node.config), ins, node.name,
                                 src_node=nid)
            continue
        produced[nid] = emit(node.kind, dict(node.config), ins, node.name,
                             src_node=nid if nid in graph.weights else None)
    return ExecutionPlan(mode=mode, graph=graph, steps=steps,
                         output_id=produced[graph.output_id])


def _conv_shift(x: Tensor, weight, bias, p: ConvParams) -> Tensor:
    """Grouped convolution by kernel-position accumulation.

    One small gemm per (group, kernel row, kernel col), summed in kernel
    order — a deliberately different reduction order from the im2col path.
    """
    n = x.n
    g = p.groups
    cin_g = p.in_channels // g
    cout_g = p.out_channels // g
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.pad
    ho, wo = _out_hw(x.h, x.w, p.kernel, p.stride, p.pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((p.out_channels, n * ho * wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + sh * ho:sh, kj:kj + sw * wo:sw]
            patch = patch.transpose(1, 0, 2, 3).reshape(p.in_channels,
                                                        n * ho * wo)
            for gi in range(g):
                wmat = weight[gi * cout_g:(gi + 1) * cout_g, :, ki, kj]
                out[gi * cout_g:(gi + 1) * cout_g] += mm(
                    wmat.astype(x.dtype, copy=False),
                    patch[gi * cin_g:(gi + 1) * cin_g])
    out = out.reshape(p.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.astype(x.dtype, copy=False)[None, :, None, None]
    return Tensor(out)


def _exec_step(step: PlanStep, ins, weights, mode):
    if step.kind == "conv":
        p: ConvParams = step.config["params"]
        table = weights[step.src_node]
        w = table["weight"]
        b = table.get("bias")
        if step.group is not None:
            lo = step.group * p.out_channels
            hi = lo + p.out_channels
            w = w[lo:hi]
            b = b[lo:hi] if b is not None else None
            return ops.conv2d_forward(ins[0], w, b, p)
        if mode == "batched" and p.groups > 1:
            return _conv_shift(ins[0], w, b, p)
        return ops.conv2d_forward(ins[0], w, b, p)
    if step.kind == "bn":
        table = weights[step.src_node]
        state = BatchNormState(gamma=table["gamma"], beta=table["beta"],
                               running_mean=table["running_mean"],
                               running_var=table["running_var"],
                               momentum=step.config.get("momentum", 0.1),
                               epsilon=step.config.get("epsilon", 1e-5),
                               mode="eval")
        return ops.batchnorm2d(ins[0], state)
    if step.kind == "relu":
        return ops.relu(ins[0])
    if step.kind in ("pool_max", "pool_avg"):
        return ops.pool2d(ins[0], step.kind[5:], step.config["kernel"],
                          step.config["stride"], step.config["pad"])
    if step.kind == "gap":
        return ops.global_avg_pool(ins[0])
    if step.kind == "linear":
        table = weights[step.src_node]
        return ops.linear(ins[0], table["weight"], table["bias"])
    if step.kind == "ir":
        return ops.input_replicate(ins[0], step.config["m"])
    if step.kind == "concat":
        return ops.channel_concat(ins)
    if step.kind == "block_sum":
        return ops.channel_block_sum(ins[0], step.config["m"])
    if step.kind == "slice":
        start, stop = step.config["start"], step.config["stop"]
        if not 0 <= start < stop <= ins[0].c:
            raise ShapeError(f"slice [{start}:{stop}] out of range for "
                             f"{ins[0].c} channels")
        return Tensor(ins[0].data[:, start:stop].copy())
    if step.kind == "add":
        out = ins[0]
        for t in ins[1:]:
            out = elementwise("add", out, t)
        return out
    if step.kind == "output":
        return ins[0]
    raise PlanError(f"cannot execute step kind {step.kind!r}")


def execute(p: ExecutionPlan, x: Tensor, weights=None) -> Tensor:
    """Run a plan in inference mode; tensors are freed at last use."""
    weights = weights if weights is not None else p.graph.weights
    consumers = {INPUT_ID: 0}
    for s in p.steps:
        consumers[s.id] = 0
        for src in s.inputs:
            consumers[src] += 1
    acts = {INPUT_ID: x}
    out = None
    for s in p.steps:
        ins = [acts[src] for src in s.inputs]
        try:
            acts[s.id] = _exec_step(s, ins, weights, p.mode)
        except (ShapeError, KeyError) as exc:
            raise PlanError(f"execution failed at step {s.id} "
                            f"({s.name}): {exc}") from exc
        for src in set(s.inputs):
            consumers[src] -= s.inputs.count(src)
            if consumers[src] == 0:
                del acts[src]
        if s.id == p.output_id:
            out = acts[s.id]
    if out is None:
        raise PlanError("plan never produced its output tensor")
    return out


@dataclass
class EquivalenceReport:
    tol: float
    trial_diffs: list    # max |batched - unrolled| per trial
    identical_plans: bool
    passed: bool

    def max_diff(self) -> float:
        return max(self.trial_diffs) if self.trial_diffs else 0.0


def equivalence_check(graph: Graph, input_shape, trials: int = 5,
                      seed: int = 0, tol: float = 1e-5) -> EquivalenceReport:
    """Compare batched and unrolled execution over freshly seeded weights.

    Each trial draws new weights and a new input, then reports the maximum
    absolute elementwise difference between the two modes.  Failures are
    reported, not raised.
    """
    pb = plan(graph, "batched")
    pu = plan(graph, "unrolled")
    diffs = []
    for t in range(trials):
        weights = reinit_weights(graph, seed + 1000 * t)
        x = tensor_create(input_shape, "uniform", seed=seed + 1000 * t + 1,
                          lo=-1.0, hi=1.0)
        yb = execute(pb, x, weights=weights)
        yu = execute(pu, x, weights=weights)
        diffs.append(float(np.abs(yb.data - yu.data).max()))
    return EquivalenceReport(tol=tol, trial_diffs=diffs,
                             identical_plans=plans_identical(pb, pu),
                             passed=all(d <= tol for d in diffs))


def bench(p: ExecutionPlan, input_shape, warmup: int = 1, iters: int = 5,
          seed: int = 0) -> dict:
    """Wall-clock timing of :func:`execute`; returns milliseconds."""
    x = tensor_create(input_shape, "uniform", seed=seed, lo=-1.0, hi=1.0)
    for _ in range(warmup):
        execute(p, x)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        execute(p, x)
        times.append((time.perf_counter() - t0) * 1000.0)
    times.sort()
    return {"mode": p.mode, "steps": p.num_steps(), "iters": iters,
            "mean_ms": sum(times) / len(times),
            "p50_ms": times[len(times) // 2],
            "p95_ms": times[min(len(times) - 1, int(len(times) * 0.95))]}


def plan_branch_stats(p: ExecutionPlan) -> dict:
    """Concurrent-tensor statistics for a plan's step sequence."""
    from .analysis import branch_stats
    return branch_stats(p.steps, input_ids=(INPUT_ID,))
