"""Anytime networks built from nested subnetworks.

A network is one flat parameter vector plus bookkeeping that says which
parameters each stage may use.  The trunk is

    stem (layer 0):  h_0 = relu(x @ W_0 + b_0)
    layer d >= 1:    h_d = relu((sum of source activations) @ W_d + b_d)

Every layer is split into stripes of units.  A weight block from stripe a of
one layer into stripe b of the next exists only when a <= b, so units added
by later stages never feed units of earlier stages.  Stage s sees the first
``stage_stripes[s]`` stripes of every layer it selects, and owns a private
affine head on top of its last layer.

Depth nesting selects an interlaced subset of layers (every 2**m-th layer,
starting at layer 1).  Within a stage the selected layers are renumbered
1..m and each one sums the activations of the stage-relative layers at
power-of-2 distances (relative layer 0 is the stem).  The EANN cascade
instead selects a prefix of the trunk and uses the full-network wiring.

Stage indices are 1-based in the public API.
"""
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .errors import ConstructionError, InputError, ShapeError
from .graph import Graph

MODES = (
    "width",
    "depth",
    "width-depth-alternating",
    "width-depth-simultaneous",
    "even-width",
    "eann-cascade",
)

_ALIASES = {
    "alternating": "width-depth-alternating",
    "simultaneous": "width-depth-simultaneous",
    "width-depth": "width-depth-alternating",
    "even": "even-width",
    "eann": "eann-cascade",
    "cascade": "eann-cascade",
}


def canonical_mode(mode):
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConstructionError(f"unknown nesting mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


@dataclass(frozen=True)
class StagePlan:
    num_stages: int
    mode: str
    base_width: int
    base_depth: int = 1
    num_classes: int = 3
    input_dim: int = 2
    depth: int = None  # total trunk depth; derived when None

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        for name in ("num_stages", "base_width", "base_depth", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise ConstructionError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConstructionError("num_classes must be >= 2")
        want = self.base_depth * 2 ** self.depth_levels[-1]
        if self.depth is not None and self.depth != want:
            raise ConstructionError(
                f"{self.mode} with {self.num_stages} stages and base depth "
                f"{self.base_depth} needs {want} layers, got {self.depth}")

    @property
    def width_levels(self):
        """Number of width doublings (or even-width additions) before each stage."""
        n = self.num_stages
        if self.mode in ("width", "even-width", "width-depth-simultaneous"):
            return tuple(range(n))
        if self.mode == "width-depth-alternating":
            return tuple((s + 1) // 2 for s in range(n))
        return (0,) * n

    @property
    def depth_levels(self):
        n = self.num_stages
        if self.mode in ("depth", "eann-cascade", "width-depth-simultaneous"):
            return tuple(range(n))
        if self.mode == "width-depth-alternating":
            return tuple(s // 2 for s in range(n))
        return (0,) * n

    @property
    def total_depth(self):
        return self.base_depth * 2 ** self.depth_levels[-1]

    @property
    def wiring(self):
        return "chain" if self.mode in ("width", "even-width") else "pow2"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: tuple
    layer: int       # 0 = stem, 1..L trunk, -1 = head
    src_stripe: int  # -1 for stem weights, biases and heads
    dst_stripe: int  # -1 for heads
    stage: int       # 1-based stage that introduces the slot

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def index(self):
        return np.arange(self.offset, self.offset + self.size)


def source_offsets(r, wiring):
    """Stage-relative distances feeding relative layer ``r`` (r >= 1)."""
    if wiring == "chain":
        return [1]
    offs, p = [], 1
    while p <= r:
        offs.append(p)
        p *= 2
    return offs


class NestedNetwork:
    """Topology, parameter layout and per-stage graphs of an anytime network.

    ``params`` is the only mutable state; everything else is fixed at
    construction.
    """

    def __init__(self, plan, params=None, seed=None):
        self.plan = plan
        n, w = plan.num_stages, plan.base_width
        wl = plan.width_levels
        nstripes = wl[-1] + 1
        if plan.mode == "even-width":
            sizes = [w] * nstripes
        else:
            sizes = [w] + [w * 2 ** (j - 1) for j in range(1, nstripes)]
        self.stripe_sizes = tuple(sizes)
        self.stripe_offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)]))
        self.num_layers = plan.total_depth
        self.stage_stripes = tuple(lv + 1 for lv in wl)
        self.stage_widths = tuple(self.stripe_offsets[v] for v in self.stage_stripes)

        L, D = self.num_layers, plan.depth_levels[-1]
        layers = []
        for s in range(n):
            if plan.mode == "eann-cascade":
                layers.append(tuple(range(1, plan.base_depth * 2 ** s + 1)))
            else:
                stride = 2 ** (D - plan.depth_levels[s])
                layers.append(tuple(d for d in range(1, L + 1) if (d - 1) % stride == 0))
        self.stage_layers = tuple(layers)

        self._build_layout()
        self._gathers = {}
        self._stage_graphs = {}
        self._stage_logits = {}
        self._train_graphs = {}
        if params is not None:
            params = np.array(params, dtype=np.float64)
            if params.shape != (self.num_params,):
                raise ShapeError(f"expected {self.num_params} parameters, got {params.shape}")
            self.params = params
        else:
            self.params = self.init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ layout

    @property
    def num_stages(self):
        return self.plan.num_stages

    def unit_stage(self, layer, stripe):
        """1-based stage that introduces (layer, stripe)."""
        for s in range(self.num_stages):
            if stripe < self.stage_stripes[s] and (layer == 0 or layer in self.stage_layers[s]):
                return s + 1
        raise InputError(f"unit ({layer}, {stripe}) belongs to no stage")

    def _build_layout(self):
        plan = self.plan
        slots, off = [], 0

        def add(name, shape, layer, a, b, stage):
            nonlocal off
            slot = ParamSlot(name, off, tuple(shape), layer, a, b, stage)
            slots.append(slot)
            off += slot.size

        sizes = self.stripe_sizes
        for b, sb in enumerate(sizes):
            st = self.unit_stage(0, b)
            add(f"stem.w.{b}", (plan.input_dim, sb), 0, -1, b, st)
            add(f"stem.b.{b}", (sb,), 0, -1, b, st)
        for d in range(1, self.num_layers + 1):
            for b, sb in enumerate(sizes):
                st = self.unit_stage(d, b)
                for a in range(b + 1):
                    add(f"layer{d}.w.{a}.{b}", (sizes[a], sb), d, a, b, st)
                add(f"layer{d}.b.{b}", (sb,), d, -1, b, st)
        self.num_trunk_params = off
        for s in range(self.num_stages):
            add(f"head{s + 1}.w", (self.stage_widths[s], plan.num_classes), -1, -1, -1, s + 1)
            add(f"head{s + 1}.b", (plan.num_classes,), -1, -1, -1, s + 1)
        self.slots = tuple(slots)
        self.num_params = off

        n = self.num_stages
        self.masks = np.zeros((n, off), dtype=bool)
        self.head_masks = np.zeros((n, off), dtype=bool)
        for slot in slots:
            if slot.layer >= 0:
                self.masks[slot.stage - 1:, slot.offset:slot.offset + slot.size] = True
            else:
                self.head_masks[slot.stage - 1, slot.offset:slot.offset + slot.size] = True

    def mask(self, i):
        """Trunk parameters visible to stage ``i`` (boolean over all params)."""
        return self.masks[self._stage(i)]

    def head_mask(self, i):
        return self.head_masks[self._stage(i)]

    def stage_mask(self, i):
        """mask(i) plus head(i): every coordinate stage i's loss can touch."""
        k = self._stage(i)
        return self.masks[k] | self.head_masks[k]

    def exclusive_mask(self, i):
        """Parameters first introduced by stage ``i``: mask(i) minus mask(i-1), plus head(i)."""
        k = self._stage(i)
        prev = self.masks[k - 1] if k > 0 else np.zeros(self.num_params, dtype=bool)
        return (self.masks[k] & ~prev) | self.head_masks[k]

    def stage_dim(self, i):
        return int(self.stage_mask(i).sum())

    @cached_property
    def participation(self):
        """Per coordinate, how many stages' masks (with heads) cover it."""
        cover = (self.masks | self.head_masks).sum(axis=0)
        return np.maximum(cover, 1)

    def _stage(self, i):
        if not 1 <= i <= self.num_stages:
            raise InputError(f"stage {i} out of range 1..{self.num_stages}")
        return i - 1

    def init_params(self, rng):
        theta = np.zeros(self.num_params)
        for slot in self.slots:
            if len(slot.shape) != 2:
                continue
            if slot.layer == 0:
                std = np.sqrt(2.0 / self.plan.input_dim)
            elif slot.layer > 0:
                fan_in = self.stripe_offsets[slot.dst_stripe + 1]
                nsrc = len(source_offsets(slot.layer, self.plan.wiring))
                std = np.sqrt(2.0 / (fan_in * nsrc))
            else:
                std = np.sqrt(1.0 / slot.shape[0])
            theta[slot.offset:slot.offset + slot.size] = rng.normal(0.0, std, slot.size)
        return theta

    # ------------------------------------------------------------ graphs

    def _gather(self, layer, nvis):
        key = (layer, nvis)
        if key in self._gathers:
            return self._gathers[key]
        V = self.stripe_offsets[nvis]
        fin = self.plan.input_dim if layer == 0 else V
        w_index, w_pos, b_index = [], [], []
        for slot in self.slots:
            if slot.layer != layer or slot.dst_stripe >= nvis:
                continue
            if len(slot.shape) == 1:
                continue
            rows, cols = slot.shape
            r0 = 0 if layer == 0 else self.stripe_offsets[slot.src_stripe]
            c0 = self.stripe_offsets[slot.dst_stripe]
            rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
            w_pos.append(((r0 + rr) * V + c0 + cc).ravel())
            w_index.append(slot.index)
        for b in range(nvis):
            slot = self._slot(f"{'stem' if layer == 0 else f'layer{layer}'}.b.{b}")
            b_index.append(slot.index)
        g = (np.concatenate(w_index), np.concatenate(w_pos), (fin, V), np.concatenate(b_index))
        self._gathers[key] = g
        return g

    @cached_property
    def _slot_by_name(self):
        return {s.name: s for s in self.slots}

    def _slot(self, name):
        return self._slot_by_name[name]

    def stage_wiring(self, i):
        """Absolute source layers of each selected layer of stage ``i``.

        Returns a list of ``(layer, [source layers])``; source 0 is the stem.
        """
        sel = self.stage_layers[self._stage(i)]
        rel = (0,) + sel
        out = []
        for r, d in enumerate(sel, start=1):
            out.append((d, [rel[r - o] for o in source_offsets(r, self.plan.wiring)]))
        return out

    def _emit_stage(self, g, i, x):
        k = self._stage(i)
        nvis = self.stage_stripes[k]
        w_index, w_pos, shape, b_index = self._gather(0, nvis)
        acts = {0: g.relu(g.affine(x, w_index, w_pos, shape, b_index))}
        last = 0
        for d, srcs in self.stage_wiring(i):
            agg = g.add(*[acts[s] for s in srcs])
            w_index, w_pos, shape, b_index = self._gather(d, nvis)
            acts[d] = g.relu(g.affine(agg, w_index, w_pos, shape, b_index))
            last = d
        hw = self._slot(f"head{i}.w")
        hb = self._slot(f"head{i}.b")
        return g.affine(acts[last], hw.index, np.arange(hw.size), hw.shape, hb.index)

    def stage_graph(self, i):
        """Graph computing stage ``i`` logits from feed ``x``."""
        if i not in self._stage_graphs:
            self._stage(i)
            g = Graph(self.num_params)
            x = g.input("x")
            self._stage_logits[i] = self._emit_stage(g, i, x)
            self._stage_graphs[i] = g
        return self._stage_graphs[i], self._stage_logits[i]

    def train_graph(self, weights=None):
        """Graph with every stage's loss and their weighted mean.

        Returns ``(graph, loss_nodes, combined_node)``.
        """
        n = self.num_stages
        weights = tuple(float(v) for v in (np.ones(n) if weights is None else weights))
        if len(weights) != n:
            raise InputError(f"{len(weights)} loss weights for {n} stages")
        if weights not in self._train_graphs:
            g = Graph(self.num_params)
            x, y = g.input("x"), g.labels("y")
            losses = [g.softmax_xent(self._emit_stage(g, i, x), y) for i in range(1, n + 1)]
            total = g.weighted_mean(losses, weights)
            self._train_graphs[weights] = (g, losses, total)
        return self._train_graphs[weights]

    # ------------------------------------------------------------ costs

    def layer_macs(self, nvis):
        sizes = self.stripe_sizes
        return sum(sizes[a] * sizes[b] for b in range(nvis) for a in range(b + 1))

    def flops(self, i):
        """Multiply-accumulates per example for ``forward_stage(self, i, .)``."""
        k = self._stage(i)
        nvis, V = self.stage_stripes[k], self.stage_widths[k]
        macs = self.plan.input_dim * V
        macs += len(self.stage_layers[k]) * self.layer_macs(nvis)
        macs += V * self.plan.num_classes
        return int(macs)

    def pruned_edges(self):
        """Dense hidden-to-hidden weight entries removed by the nesting rule."""
        sizes = self.stripe_sizes
        per_layer = sum(sizes[a] * sizes[b] for b in range(len(sizes)) for a in range(b + 1, len(sizes)))
        return int(per_layer * self.num_layers)

    def connection_edges(self, i):
        """Unit-level edges used by stage ``i``.

        Each edge is ``((src_layer, src_stripe), (dst_layer, dst_stripe))``;
        the input is ``(-1, 0)``.
        """
        nvis = self.stage_stripes[self._stage(i)]
        edges = [((-1, 0), (0, b)) for b in range(nvis)]
        for d, srcs in self.stage_wiring(i):
            for s in srcs:
                for b in range(nvis):
                    for a in range(b + 1):
                        edges.append(((s, a), (d, b)))
        return edges

    def describe(self):
        rows = []
        for i in range(1, self.num_stages + 1):
            k = i - 1
            rows.append({
                "stage": i,
                "width": self.stage_widths[k],
                "depth": len(self.stage_layers[k]),
                "layers": list(self.stage_layers[k]),
                "params": self.stage_dim(i),
                "macs": self.flops(i),
            })
        return rows


def build_network(plan, seed=None, params=None):
    return NestedNetwork(plan, params=params, seed=seed)


def _require(plan, modes):
    if plan.mode not in modes:
        raise ConstructionError(f"plan mode {plan.mode!r} not accepted here (want {', '.join(modes)})")


def build_width_nested(plan, seed=None):
    _require(plan, ("width",))
    return NestedNetwork(plan, seed=seed)


def build_depth_nested(plan, seed=None):
    _require(plan, ("depth",))
    return NestedNetwork(plan, seed=seed)


def build_width_depth_nested(plan, seed=None):
    _require(plan, ("width-depth-alternating", "width-depth-simultaneous"))
    return NestedNetwork(plan, seed=seed)


def build_even_width(plan, seed=None):
    _require(plan, ("even-width",))
    return NestedNetwork(plan, seed=seed)


def build_eann_cascade(plan, seed=None):
    _require(plan, ("eann-cascade",))
    return NestedNetwork(plan, seed=seed)


def forward_stage(net, i, x):
    """Logits of stage ``i``; reads only mask(i) and head(i)."""
    g, logits = net.stage_graph(i)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return g.forward(net.params, x=x)[logits]


class StandaloneNet:
    """One stage copied out as a free-standing network.

    Holds only the stage's own weight blocks and evaluates them block by
    block, without the gather-into-dense path the nested graphs use.
    """

    def __init__(self, net, i):
        k = net._stage(i)
        self.stage = i
        nvis = net.stage_stripes[k]
        self.stripe_sizes = net.stripe_sizes[:nvis]
        self.wiring = net.stage_wiring(i)
        theta = net.params
        self.blocks = {}
        for slot in net.slots:
            if slot.layer < 0:
                continue
            used = slot.dst_stripe < nvis and (slot.layer == 0 or slot.layer in net.stage_layers[k])
            if used:
                self.blocks[slot.name] = theta[slot.offset:slot.offset + slot.size].reshape(slot.shape).copy()
        for tag in ("w", "b"):
            slot = net._slot(f"head{i}.{tag}")
            self.blocks[f"head.{tag}"] = theta[slot.offset:slot.offset + slot.size].reshape(slot.shape).copy()

    @property
    def num_params(self):
        return int(sum(b.size for b in self.blocks.values()))

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        nv = len(self.stripe_sizes)
        acts = {0: [np.maximum(x @ self.blocks[f"stem.w.{b}"] + self.blocks[f"stem.b.{b}"], 0.0)
                    for b in range(nv)]}
        last = 0
        for d, srcs in self.wiring:
            agg = [sum(acts[s][a] for s in srcs) for a in range(nv)]
            out = []
            for b in range(nv):
                z = self.blocks[f"layer{d}.b.{b}"].copy()
                for a in range(b + 1):
                    z = z + agg[a] @ self.blocks[f"layer{d}.w.{a}.{b}"]
                out.append(np.maximum(z, 0.0))
            acts[d] = out
            last = d
        feat = np.concatenate(acts[last], axis=1)
        return feat @ self.blocks["head.w"] + self.blocks["head.b"]


def extract_standalone(net, i):
    return StandaloneNet(net, i)


def independent_plan(plan, i):
    """Plain single-stage network matching stage ``i``'s width and depth."""
    k = i - 1
    if not 0 <= k < plan.num_stages:
        raise InputError(f"stage {i} out of range 1..{plan.num_stages}")
    probe = NestedNetwork(plan, seed=0)
    width = probe.stage_widths[k]
    depth = len(probe.stage_layers[k])
    mode = "width" if plan.wiring == "chain" else "depth"
    return StagePlan(1, mode, width, depth, plan.num_classes, plan.input_dim)
