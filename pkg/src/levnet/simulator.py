"""Leveled fixed-point SIMD simulator with the HW slot layout.

Executes compiled model graphs under faithful CKKS scale/level/rescale
bookkeeping without any cryptography: slot values are arbitrary-precision
scaled integers, the true scale of every ciphertext is tracked as an exact
rational, and rescaling divides by the actual chain modulus with
round-to-nearest.  When the chain moduli equal Delta^ell exactly the only
error source is encoding/rescale rounding; when they deviate, constants added
at nominal scale are slightly misrepresented, which reproduces how modulus
deviation degrades accuracy on real RNS-CKKS stacks.

Layout: one input channel per ciphertext, spatial values packed row-major
into a per-region grid with a zero ring wide enough for every padded
convolution downstream.  Convolution taps then become plain rotations whose
out-of-bounds reads hit structural zeros, so one weight plaintext per
(layer, kernel column, value) suffices and clustered models materialize at
most k encodings per column.  Strides are lazy: outputs stay at the slots of
their top-left input anchor and the logical coordinate stride doubles, with
no compaction.  An ensemble of M topology-identical models replicates the
input into M slot regions and encodes per-region weights, so one encrypted
run evaluates all members; region anchors never mix, making the packed run
bit-identical to M solo runs.

Slot vectors are stored at the used span (regions * region_size) rather than
the full ring capacity: every read a program performs lands inside a region
grid, so no rotation ever pulls wrapped content into a read position and the
truncation is exact.  The full capacity is still enforced when layouts are
built.

The lowering consumes the planner's walk schedule, so rescales execute
exactly where they were planned and running out of moduli is impossible on a
plan-consistent graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .graph import (AddNode, AvgPoolNode, BatchNormNode, ConvNode, InputNode,
                    LinearNode, ModelGraph, Node, OutputNode, PolyActNode,
                    PolySkipNode)
from .levels import (CiphertextMeta, DepthExhausted, ModulusChainPlan, _eager,
                     apply_rescale)

__all__ = [
    "SimError",
    "SlotLayout",
    "SimPlaintext",
    "SimCiphertext",
    "PlainRef",
    "Instr",
    "CircuitProgram",
    "SimMachine",
    "SimRun",
    "encode_input",
    "decode_output",
    "lower_model",
    "run_model",
    "run_circuit",
    "ProbeReport",
    "rescale_error_probe",
    "perturbed_chain",
]


class SimError(Exception):
    """Layout, capacity, or schedule violation during simulation."""


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _round_div(v: int, q: int) -> int:
    """Nearest-integer division of a signed scaled integer (ties up)."""
    return (2 * v + q) // (2 * q)


# ---------------------------------------------------------------------------
# slot layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotLayout:
    """Injective map from logical coordinates to slots.

    Grid form: logical (replica r, row i, col j) sits at
    ``r*region_size + (i*stride + ring)*grid_w + (j*stride + ring)``.
    Flat form (``flat_len > 0``): logical (r, k) sits at
    ``r*region_size + k``, used for logits after the dense layer.
    Slots outside the mapping are gaps and hold zero.
    """

    n_slots: int
    region_size: int
    regions: int
    grid_h: int = 0
    grid_w: int = 0
    ring: int = 0
    stride: int = 1
    height: int = 0
    width: int = 0
    flat_len: int = 0

    def __post_init__(self) -> None:
        if self.regions * self.region_size > self.n_slots:
            raise SimError(
                f"capacity exceeded: {self.regions} regions of {self.region_size} "
                f"slots > {self.n_slots} available")
        if not self.flat_len:
            top = (self.height - 1) * self.stride + self.ring
            left = (self.width - 1) * self.stride + self.ring
            if top >= self.grid_h or left >= self.grid_w:
                raise SimError(f"grid {self.grid_h}x{self.grid_w} cannot hold "
                               f"{self.height}x{self.width} at stride {self.stride}")

    def slot(self, r: int, i: int, j: int = 0) -> int:
        if self.flat_len:
            return r * self.region_size + i
        return (r * self.region_size
                + (i * self.stride + self.ring) * self.grid_w
                + (j * self.stride + self.ring))

    def anchors(self, r: int) -> np.ndarray:
        if self.flat_len:
            return r * self.region_size + np.arange(self.flat_len)
        rows = (np.arange(self.height) * self.stride + self.ring) * self.grid_w
        cols = np.arange(self.width) * self.stride + self.ring
        return (r * self.region_size + (rows[:, None] + cols[None, :])).ravel()

    def all_anchors(self) -> np.ndarray:
        return np.concatenate([self.anchors(r) for r in range(self.regions)])

    def gap_mask(self) -> np.ndarray:
        mask = np.ones(self.n_slots, dtype=bool)
        mask[self.all_anchors()] = False
        return mask

    @property
    def used_span(self) -> int:
        return self.regions * self.region_size

    def to_json(self) -> Dict:
        return {k: getattr(self, k) for k in (
            "n_slots", "region_size", "regions", "grid_h", "grid_w", "ring",
            "stride", "height", "width", "flat_len")}

    @classmethod
    def from_json(cls, d: Dict) -> "SlotLayout":
        return cls(**d)


@dataclass
class SimPlaintext:
    """Encoded constants at nominal scale Delta^lam."""

    slots: np.ndarray
    lam: int

    def __post_init__(self) -> None:
        if self.lam < 1:
            raise SimError(f"plaintext sublevel must be >= 1, got {self.lam}")


class TrueScale:
    """Exact ciphertext scale ``2**pow2 / prod(q**e)``, kept factored.

    Multiplying scales adds exponents and rescaling bumps a prime's count, so
    no operation ever normalizes a huge rational mid-run (squarings double
    the exponents, which would blow reduced numerators into megabits).  When
    every chain modulus is a power of two the prime map stays empty and the
    scale converts to an exact Fraction; otherwise it is resolved in
    log-space at decode, which is where real implementations approximate too.
    """

    __slots__ = ("pow2", "primes")

    def __init__(self, pow2: int = 0,
                 primes: Optional[Dict[int, int]] = None) -> None:
        self.pow2 = pow2
        self.primes = dict(primes) if primes else {}

    @classmethod
    def from_pow2(cls, value: int) -> "TrueScale":
        b = value.bit_length() - 1
        if value <= 0 or (1 << b) != value:
            raise SimError(f"scale base must be a power of two, got {value}")
        return cls(b)

    def times(self, other: "TrueScale") -> "TrueScale":
        merged = dict(self.primes)
        for q, e in other.primes.items():
            merged[q] = merged.get(q, 0) + e
        return TrueScale(self.pow2 + other.pow2, merged)

    def times_pow2(self, bits: int) -> "TrueScale":
        return TrueScale(self.pow2 + bits, self.primes)

    def div_modulus(self, q: int) -> "TrueScale":
        b = q.bit_length() - 1
        if (1 << b) == q:
            return TrueScale(self.pow2 - b, self.primes)
        merged = dict(self.primes)
        merged[q] = merged.get(q, 0) + 1
        return TrueScale(self.pow2, merged)

    @property
    def exact(self) -> bool:
        return not self.primes

    def log2(self) -> float:
        return float(self.pow2) - math.fsum(
            e * math.log2(q) for q, e in self.primes.items())

    def divide_into(self, v: int) -> float:
        """v / scale as a float; exact division when there are no primes."""
        if self.exact:
            if self.pow2 >= 0:
                return float(Fraction(v, 1 << self.pow2))
            return float(v << -self.pow2)
        if v == 0:
            return 0.0
        av = abs(v)
        shift = max(0, av.bit_length() - 53)
        mant = float(av >> shift)
        return math.copysign(mant * 2.0 ** (shift - self.log2()), v)


@dataclass
class SimCiphertext:
    slots: np.ndarray           # object dtype, python ints
    scale: TrueScale
    level: int
    lam: int                    # sublevel
    layout: SlotLayout


# ---------------------------------------------------------------------------
# instructions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlainRef:
    """Reference to a constant the machine materializes (and caches).

    ``values`` holds one value per ensemble region.  ``mask`` selects which
    slots receive the value: the result layout's anchors, one region-relative
    slot, or the whole used span.  Weight references carry the 1-based kernel
    column in ``slice_idx`` so the cache can count distinct encodings per
    slice.
    """

    node: str
    role: str
    values: Tuple[float, ...]
    lam: int
    mask: str = "anchors"       # "anchors" | "slot" | "span"
    slot: int = -1
    slice_idx: int = -1

    def to_json(self) -> Dict:
        return {"node": self.node, "role": self.role, "values": list(self.values),
                "lam": self.lam, "mask": self.mask, "slot": self.slot,
                "slice_idx": self.slice_idx}

    @classmethod
    def from_json(cls, d: Dict) -> "PlainRef":
        d = dict(d)
        d["values"] = tuple(d["values"])
        return cls(**d)


@dataclass
class Instr:
    """One simulator instruction; ``node`` records provenance for traces."""

    op: str                     # encode|add|add_plain|mult_plain|mult_ct|rotate|rescale|decode
    out: str = ""
    a: str = ""
    b: str = ""
    step: int = 0
    pt: Optional[PlainRef] = None
    channel: int = -1
    node: str = ""
    layout: str = ""            # key into the program layout table, "" = inherit
    free: Tuple[str, ...] = ()

    def to_json(self) -> Dict:
        d = {"op": self.op, "out": self.out}
        if self.a:
            d["a"] = self.a
        if self.b:
            d["b"] = self.b
        if self.step:
            d["step"] = self.step
        if self.pt is not None:
            d["pt"] = self.pt.to_json()
        if self.channel >= 0:
            d["channel"] = self.channel
        if self.node:
            d["node"] = self.node
        if self.layout:
            d["layout"] = self.layout
        if self.free:
            d["free"] = list(self.free)
        return d

    @classmethod
    def from_json(cls, d: Dict) -> "Instr":
        d = dict(d)
        if "pt" in d:
            d["pt"] = PlainRef.from_json(d["pt"])
        if "free" in d:
            d["free"] = tuple(d["free"])
        return cls(**d)


@dataclass
class CircuitProgram:
    """Materialized instruction stream plus everything needed to execute it."""

    instructions: List[Instr]
    layouts: Dict[str, SlotLayout]
    plan: ModulusChainPlan
    outputs: List[str]
    regions: int

    def to_json(self) -> Dict:
        return {
            "regions": self.regions,
            "outputs": list(self.outputs),
            "layouts": {k: v.to_json() for k, v in self.layouts.items()},
            "plan": self.plan.to_json(),
            "instructions": [i.to_json() for i in self.instructions],
        }

    @classmethod
    def from_json(cls, d: Dict) -> "CircuitProgram":
        from .levels import plan_from_json

        return cls(
            instructions=[Instr.from_json(i) for i in d["instructions"]],
            layouts={k: SlotLayout.from_json(v) for k, v in d["layouts"].items()},
            plan=plan_from_json(d["plan"]),
            outputs=list(d["outputs"]),
            regions=d["regions"],
        )


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _zero_slots(n: int) -> np.ndarray:
    return np.zeros(n, dtype=object)


def encode_input(image: np.ndarray, delta: int, layout: SlotLayout,
                 level: int = 0) -> List[SimCiphertext]:
    """Encode a (C, h, w) tensor, one ciphertext per channel, replicated into
    every region of the layout at scale Delta (sublevel 1)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise SimError(f"expected a (C, h, w) image, got shape {image.shape}")
    c, h, w = image.shape
    if (h, w) != (layout.height, layout.width):
        raise SimError(f"image {h}x{w} does not match layout "
                       f"{layout.height}x{layout.width}")
    cts = []
    for ch in range(c):
        slots = _zero_slots(layout.used_span)
        for r in range(layout.regions):
            for i in range(h):
                for j in range(w):
                    slots[layout.slot(r, i, j)] = _round_half_away(image[ch, i, j] * delta)
        cts.append(SimCiphertext(
            slots=slots, scale=TrueScale.from_pow2(delta), level=level, lam=1,
            layout=layout,
        ))
    return cts


def decode_output(ct: SimCiphertext) -> np.ndarray:
    """Per-region logical values, shape (regions, ...) matching the layout."""
    out = []
    for r in range(ct.layout.regions):
        idx = ct.layout.anchors(r)
        vals = np.array([ct.scale.divide_into(int(v)) for v in ct.slots[idx]],
                        dtype=np.float64)
        if not ct.layout.flat_len:
            vals = vals.reshape(ct.layout.height, ct.layout.width)
        out.append(vals)
    return np.stack(out)


# ---------------------------------------------------------------------------
# the machine
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    index: int
    op: str
    node: str
    out: str
    sublevel: int
    level: int
    log2_scale: float

    def to_json(self) -> Dict:
        return {"index": self.index, "op": self.op, "node": self.node,
                "out": self.out, "sublevel": self.sublevel, "level": self.level,
                "log2_scale": self.log2_scale}


class SimMachine:
    """Executes instructions over named ciphertext registers.

    Multiplications only touch the used span (all regions); slots beyond it
    are structurally zero.  Constants are materialized once per distinct
    (node, role, slice, values, sublevel) and counted, which is what bounds
    clustered runs to k encodings per kernel column.
    """

    def __init__(self, plan: ModulusChainPlan, regions: int,
                 trace: bool = False) -> None:
        self.plan = plan
        self.delta = plan.delta
        self.delta_bits = plan.delta_log2
        self.chain = [(m.value, m.sublevel) for m in plan.rescale_moduli()]
        self.regions = regions
        self.regs: Dict[str, SimCiphertext] = {}
        self.outputs: Dict[str, np.ndarray] = {}
        self.pt_cache: Dict[Tuple, SimPlaintext] = {}
        self.weight_encodings: Dict[Tuple[str, int], set] = {}
        self.trace_enabled = trace
        self.trace: List[TraceRow] = []
        self.max_used = 0

    # -- plaintexts ---------------------------------------------------------

    def _materialize(self, ref: PlainRef, layout: SlotLayout) -> SimPlaintext:
        key = (ref.node, ref.role, ref.slice_idx, ref.values, ref.lam,
               ref.mask, ref.slot)
        hit = self.pt_cache.get(key)
        if hit is not None:
            return hit
        if len(ref.values) != layout.regions:
            raise SimError(f"plaintext {ref.node}/{ref.role} carries "
                           f"{len(ref.values)} region values, layout has "
                           f"{layout.regions} regions")
        scale = self.delta ** ref.lam
        slots = _zero_slots(layout.used_span)
        for r, v in enumerate(ref.values):
            iv = _round_half_away(float(v) * scale)
            if ref.mask == "anchors":
                slots[layout.anchors(r)] = iv
            elif ref.mask == "slot":
                slots[r * layout.region_size + ref.slot] = iv
            elif ref.mask == "span":
                slots[r * layout.region_size:(r + 1) * layout.region_size] = iv
            else:
                raise SimError(f"unknown plaintext mask {ref.mask!r}")
        pt = SimPlaintext(slots=slots, lam=ref.lam)
        self.pt_cache[key] = pt
        if ref.role == "weight":
            self.weight_encodings.setdefault(
                (ref.node, ref.slice_idx), set()).add(ref.values)
        return pt

    def encodings_per_slice(self) -> Dict[Tuple[str, int], int]:
        return {k: len(v) for k, v in self.weight_encodings.items()}

    # -- execution ----------------------------------------------------------

    def _get(self, name: str) -> SimCiphertext:
        ct = self.regs.get(name)
        if ct is None:
            raise SimError(f"register {name!r} undefined")
        return ct

    def _used(self, ct: SimCiphertext) -> int:
        return self.plan.levels - ct.level

    def run(self, program: CircuitProgram, inputs: np.ndarray) -> None:
        for i, instr in enumerate(program.instructions):
            self.step(instr, program, inputs)
            if self.trace_enabled and instr.op != "decode":
                ct = self.regs[instr.out]
                self.trace.append(TraceRow(
                    index=i, op=instr.op, node=instr.node, out=instr.out,
                    sublevel=ct.lam, level=ct.level,
                    log2_scale=ct.scale.log2()))
            for name in instr.free:
                self.regs.pop(name, None)

    def step(self, instr: Instr, program: CircuitProgram,
             inputs: np.ndarray) -> None:
        op = instr.op
        layout_override = program.layouts[instr.layout] if instr.layout else None

        if op == "encode":
            layout = layout_override
            if layout is None:
                raise SimError("encode needs an explicit layout")
            cts = encode_input(np.asarray(inputs, dtype=np.float64)[instr.channel:instr.channel + 1],
                               self.delta, layout, level=self.plan.levels)
            self.regs[instr.out] = cts[0]
            return

        if op == "decode":
            ct = self._get(instr.a)
            self.outputs[instr.out] = decode_output(ct)
            return

        if op == "rotate":
            ct = self._get(instr.a)
            self.regs[instr.out] = SimCiphertext(
                slots=np.roll(ct.slots, -instr.step), scale=ct.scale,
                level=ct.level, lam=ct.lam,
                layout=layout_override or ct.layout)
            return

        if op == "rescale":
            ct = self._get(instr.a)
            used = self._used(ct)
            if used >= len(self.chain):
                raise DepthExhausted(
                    f"instruction at node {instr.node!r} needs rescale modulus "
                    f"#{used + 1} but the chain has {len(self.chain)}")
            q, lam_q = self.chain[used]
            self.max_used = max(self.max_used, used + 1)
            slots = _zero_slots(len(ct.slots))
            slots[:] = [_round_div(int(v), q) for v in ct.slots]
            self.regs[instr.out] = SimCiphertext(
                slots=slots, scale=ct.scale.div_modulus(q),
                level=ct.level - 1, lam=ct.lam - lam_q,
                layout=layout_override or ct.layout)
            return

        if op == "add":
            a, b = self._get(instr.a), self._get(instr.b)
            if a.lam != b.lam:
                raise SimError(f"add at node {instr.node!r}: sublevel mismatch "
                               f"{a.lam} vs {b.lam}")
            self.regs[instr.out] = SimCiphertext(
                slots=a.slots + b.slots, scale=a.scale,
                level=min(a.level, b.level), lam=a.lam,
                layout=layout_override or a.layout)
            return

        if op == "add_plain":
            ct = self._get(instr.a)
            target = layout_override or ct.layout
            pt = self._materialize(instr.pt, target)
            if pt.lam != ct.lam:
                raise SimError(
                    f"add_plain at node {instr.node!r}: plaintext sublevel "
                    f"{pt.lam} vs ciphertext {ct.lam}")
            self.regs[instr.out] = SimCiphertext(
                slots=ct.slots + pt.slots, scale=ct.scale, level=ct.level,
                lam=ct.lam, layout=target)
            return

        if op == "mult_plain":
            ct = self._get(instr.a)
            target = layout_override or ct.layout
            pt = self._materialize(instr.pt, target)
            self.regs[instr.out] = SimCiphertext(
                slots=ct.slots * pt.slots,
                scale=ct.scale.times_pow2(self.delta_bits * pt.lam),
                level=ct.level, lam=ct.lam + pt.lam, layout=target)
            return

        if op == "mult_ct":
            a, b = self._get(instr.a), self._get(instr.b)
            self.regs[instr.out] = SimCiphertext(
                slots=a.slots * b.slots, scale=a.scale.times(b.scale),
                level=min(a.level, b.level), lam=a.lam + b.lam,
                layout=layout_override or a.layout)
            return

        raise SimError(f"unknown instruction {op!r}")


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------


def _chan_val(arr: np.ndarray, ch: int) -> float:
    a = np.asarray(arr, dtype=np.float64).ravel()
    return float(a[0] if a.size == 1 else a[ch])


def _ring_for(g: ModelGraph) -> Tuple[int, Dict[str, int]]:
    """Zero-ring width covering every conv's padded reads, plus the logical
    coordinate stride in front of each node."""
    stride_in: Dict[str, int] = {}
    ring = 0
    for nid in g.topo_order():
        node = g.nodes[nid]
        preds = g.inputs_of(nid)
        s = max((stride_in[p] for p in preds), default=1)
        stride_in[nid] = s
        if isinstance(node, ConvNode):
            ring = max(ring, s * node.padding)
            stride_in[nid] = s * node.stride
    return ring, stride_in


class _Lowerer:
    def __init__(self, models: Sequence[ModelGraph], plan: ModulusChainPlan,
                 regions: int, n_slots: Optional[int]) -> None:
        self.models = list(models)
        self.g = self.models[0]
        self.plan = plan
        self.ell = plan.ell
        self.regions = regions
        self.n_slots = n_slots or (1 << plan.ring_degree_log2) // 2
        self.instrs: List[Instr] = []
        self.layouts: Dict[str, SlotLayout] = {}
        self.regmap: Dict[str, List[str]] = {}
        self.node_layout: Dict[str, SlotLayout] = {}
        self._tmp = 0

    # -- helpers ------------------------------------------------------------

    def _name(self, stem: str) -> str:
        self._tmp += 1
        return f"{stem}#{self._tmp}"

    def _layout_key(self, layout: SlotLayout) -> str:
        for k, v in self.layouts.items():
            if v == layout:
                return k
        key = f"L{len(self.layouts)}"
        self.layouts[key] = layout
        return key

    def emit(self, **kw) -> str:
        layout = kw.pop("layout_obj", None)
        if layout is not None:
            kw["layout"] = self._layout_key(layout)
        instr = Instr(**kw)
        self.instrs.append(instr)
        return instr.out

    def _values(self, nid: str, pull) -> Tuple[float, ...]:
        return tuple(float(pull(m.nodes[nid])) for m in self.models)

    def _step(self, nid: str):
        try:
            return self.plan.schedule.steps[nid]
        except KeyError:
            raise SimError(f"plan schedule has no entry for node {nid!r}") from None

    def _rescale(self, reg: str, nid: str, count: int) -> str:
        for _ in range(count):
            reg = self.emit(op="rescale", out=self._name(f"{nid}.rs"),
                            a=reg, node=nid, free=(reg,))
        return reg

    # -- node lowerings -----------------------------------------------------

    def lower(self) -> CircuitProgram:
        g = self.g
        ring, _ = _ring_for(g)
        outputs: List[str] = []
        pending = {nid: len(g.consumers_of(nid)) for nid in g.nodes}
        for nid in g.topo_order():
            node = g.nodes[nid]
            preds = g.inputs_of(nid)
            if isinstance(node, InputNode):
                self._lower_input(node, ring)
            elif isinstance(node, ConvNode):
                self._lower_conv(node, preds[0])
            elif isinstance(node, BatchNormNode):
                self._lower_bn(node, preds[0])
            elif isinstance(node, PolyActNode):
                self._lower_act(node, preds[0])
            elif isinstance(node, (AddNode, PolySkipNode)):
                self._lower_join(node, preds)
            elif isinstance(node, AvgPoolNode):
                self._lower_pool(node, preds[0])
            elif isinstance(node, LinearNode):
                self._lower_linear(node, preds[0])
            elif isinstance(node, OutputNode):
                src = self.regmap[preds[0]]
                if len(src) != 1:
                    raise SimError("output expects a single logits ciphertext")
                self.emit(op="decode", out="logits", a=src[0], node=nid)
                outputs.append("logits")
                self.regmap[nid] = src
            else:
                raise SimError(f"cannot lower node kind {node.kind!r}")
            # Drop predecessor registers once their last consumer is lowered,
            # so peak liveness tracks the graph frontier, not the whole model.
            for p in set(preds):
                pending[p] -= preds.count(p)
                if pending[p] == 0 and not isinstance(node, OutputNode):
                    stale = tuple(r for r in self.regmap[p]
                                  if r not in self.regmap[nid])
                    self.instrs[-1].free = self.instrs[-1].free + stale
        return CircuitProgram(instructions=self.instrs, layouts=self.layouts,
                              plan=self.plan, outputs=outputs,
                              regions=self.regions)

    def _lower_input(self, node: InputNode, ring: int) -> None:
        grid_h, grid_w = node.height + 2 * ring, node.width + 2 * ring
        layout = SlotLayout(
            n_slots=self.n_slots, region_size=grid_h * grid_w,
            regions=self.regions, grid_h=grid_h, grid_w=grid_w, ring=ring,
            stride=1, height=node.height, width=node.width)
        regs = []
        for c in range(node.channels):
            regs.append(self.emit(op="encode", out=f"{node.id}.c{c}",
                                  channel=c, node=node.id, layout_obj=layout))
        self.regmap[node.id] = regs
        self.node_layout[node.id] = layout

    def _out_layout(self, lin: SlotLayout, height: int, width: int,
                    stride_mult: int = 1) -> SlotLayout:
        return SlotLayout(
            n_slots=lin.n_slots, region_size=lin.region_size,
            regions=lin.regions, grid_h=lin.grid_h, grid_w=lin.grid_w,
            ring=lin.ring, stride=lin.stride * stride_mult,
            height=height, width=width)

    def _lower_conv(self, node: ConvNode, pred: str) -> None:
        step = self._step(node.id)
        lin = self.node_layout[pred]
        in_regs = self.regmap[pred]
        o_ch, i_ch, kh, kw = node.weight.shape
        h_out = (lin.height + 2 * node.padding - kh) // node.stride + 1
        w_out = (lin.width + 2 * node.padding - kw) // node.stride + 1
        lout = self._out_layout(lin, h_out, w_out, node.stride)
        if lin.ring < lin.stride * node.padding:
            raise SimError(f"conv {node.id!r} needs ring >= "
                           f"{lin.stride * node.padding}, layout has {lin.ring}")

        # One rotation per (input channel, tap), shared by all output channels.
        rotated: Dict[Tuple[int, int, int], str] = {}
        for c in range(i_ch):
            for dh in range(kh):
                for dw in range(kw):
                    delta = lin.stride * ((dh - node.padding) * lin.grid_w
                                          + (dw - node.padding))
                    if delta == 0:
                        rotated[c, dh, dw] = in_regs[c]
                    else:
                        rotated[c, dh, dw] = self.emit(
                            op="rotate", out=self._name(f"{node.id}.rot"),
                            a=in_regs[c], step=delta, node=node.id)

        out_regs = []
        for o in range(o_ch):
            acc = ""
            for dw in range(kw):
                for dh in range(kh):
                    for c in range(i_ch):
                        ref = PlainRef(
                            node=node.id, role="weight", slice_idx=dw + 1,
                            values=self._values(node.id,
                                                lambda n, o=o, c=c, dh=dh, dw=dw:
                                                n.weight[o, c, dh, dw]),
                            lam=step.plain_lams["weight"])
                        prod = self.emit(op="mult_plain",
                                         out=self._name(f"{node.id}.m"),
                                         a=rotated[c, dh, dw], pt=ref,
                                         node=node.id, layout_obj=lout)
                        if not acc:
                            acc = prod
                        else:
                            acc = self.emit(op="add",
                                            out=self._name(f"{node.id}.a"),
                                            a=acc, b=prod, node=node.id,
                                            free=(acc, prod))
            bias = PlainRef(node=node.id, role="bias",
                            values=self._values(node.id, lambda n, o=o: n.bias[o]),
                            lam=step.plain_lams["bias"])
            acc = self.emit(op="add_plain", out=self._name(f"{node.id}.b"),
                            a=acc, pt=bias, node=node.id, free=(acc,))
            self._rescale(acc, node.id, step.rescales)
            self.instrs[-1].out = f"{node.id}.c{o}"
            out_regs.append(f"{node.id}.c{o}")
        self.regmap[node.id] = out_regs
        self.node_layout[node.id] = lout
        frees = tuple(r for r in set(rotated.values()) if r not in in_regs)
        if frees:
            self.instrs[-1].free = self.instrs[-1].free + frees

    def _lower_bn(self, node: BatchNormNode, pred: str) -> None:
        step = self._step(node.id)
        lin = self.node_layout[pred]
        out_regs = []
        for c, reg in enumerate(self.regmap[pred]):
            if "b1" in step.plain_lams:
                slope = PlainRef(node=node.id, role="b1",
                                 values=self._values(node.id,
                                                     lambda n, c=c: _chan_val(n.b1, c)),
                                 lam=step.plain_lams["b1"])
                reg = self.emit(op="mult_plain", out=self._name(f"{node.id}.s"),
                                a=reg, pt=slope, node=node.id)
            shift = PlainRef(node=node.id, role="b0",
                             values=self._values(node.id,
                                                 lambda n, c=c: _chan_val(n.b0, c)),
                             lam=step.plain_lams["b0"])
            reg = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                            a=reg, pt=shift, node=node.id)
            reg = self._rescale(reg, node.id, step.rescales)
            self.instrs[-1].out = f"{node.id}.c{c}"
            out_regs.append(f"{node.id}.c{c}")
        self.regmap[node.id] = out_regs
        self.node_layout[node.id] = lin

    def _lower_act(self, node: PolyActNode, pred: str) -> None:
        step = self._step(node.id)
        lam = step.in_lams[0]
        out_regs = []
        for c, reg in enumerate(self.regmap[pred]):
            coeff = lambda k, c=c: self._values(
                node.id, lambda n, k=k, c=c: _chan_val(n.coeffs[k], c))
            if node.degree == 1:
                if node.is_monic():
                    out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                                    a=reg,
                                    pt=PlainRef(node.id, "c0", coeff(0),
                                                step.plain_lams["c0"]),
                                    node=node.id)
                else:
                    out = self.emit(op="mult_plain", out=self._name(f"{node.id}.m"),
                                    a=reg,
                                    pt=PlainRef(node.id, "c1", coeff(1),
                                                step.plain_lams["c1"]),
                                    node=node.id)
                    out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                                    a=out,
                                    pt=PlainRef(node.id, "c0", coeff(0),
                                                step.plain_lams["c0"]),
                                    node=node.id, free=(out,))
                out = self._rescale(out, node.id, step.rescales)
            elif node.is_monic():
                sq = self.emit(op="mult_ct", out=self._name(f"{node.id}.sq"),
                               a=reg, b=reg, node=node.id)
                lin = self.emit(op="mult_plain", out=self._name(f"{node.id}.l"),
                                a=reg,
                                pt=PlainRef(node.id, "c1", coeff(1),
                                            step.plain_lams["c1"]),
                                node=node.id)
                out = self.emit(op="add", out=self._name(f"{node.id}.s"),
                                a=sq, b=lin, node=node.id, free=(sq, lin))
                out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                                a=out,
                                pt=PlainRef(node.id, "c0", coeff(0),
                                            step.plain_lams["c0"]),
                                node=node.id, free=(out,))
                out = self._rescale(out, node.id, step.rescales)
            else:
                t_lam, t_resc = _eager(lam + 1, self.ell)
                t = self.emit(op="mult_plain", out=self._name(f"{node.id}.t"),
                              a=reg,
                              pt=PlainRef(node.id, "c2", coeff(2),
                                          step.plain_lams["c2"]),
                              node=node.id)
                t = self._rescale(t, node.id, t_resc)
                sq = self.emit(op="mult_ct", out=self._name(f"{node.id}.sq"),
                               a=t, b=reg, node=node.id, free=(t,))
                lin = self.emit(op="mult_plain", out=self._name(f"{node.id}.l"),
                                a=reg,
                                pt=PlainRef(node.id, "c1", coeff(1),
                                            step.plain_lams["c1"]),
                                node=node.id)
                out = self.emit(op="add", out=self._name(f"{node.id}.s"),
                                a=sq, b=lin, node=node.id, free=(sq, lin))
                out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                                a=out,
                                pt=PlainRef(node.id, "c0", coeff(0),
                                            step.plain_lams["c0"]),
                                node=node.id, free=(out,))
                out = self._rescale(out, node.id, step.rescales - t_resc)
            self.instrs[-1].out = f"{node.id}.c{c}"
            out_regs.append(f"{node.id}.c{c}")
        self.regmap[node.id] = out_regs
        self.node_layout[node.id] = self.node_layout[pred]

    def _aligned_inputs(self, node: Node, preds: List[str]):
        step = self._step(node.id)
        branches = []
        for i, p in enumerate(preds):
            regs = list(self.regmap[p])
            if step.align[i] is not None:
                boost, k = step.align[i]
                fixed = []
                for c, reg in enumerate(regs):
                    b = self.emit(op="mult_plain",
                                  out=self._name(f"{node.id}.al"),
                                  a=reg,
                                  pt=PlainRef(node.id, f"align{i}",
                                              (1.0,) * self.regions, boost),
                                  node=node.id)
                    b = self._rescale(b, node.id, k)
                    fixed.append(b)
                regs = fixed
            branches.append(regs)
        return step, branches

    def _lower_join(self, node: Node, preds: List[str]) -> None:
        step, (xs, ys) = self._aligned_inputs(node, preds)
        out_regs = []
        for c, (x, y) in enumerate(zip(xs, ys)):
            if isinstance(node, AddNode):
                self.emit(op="add", out=f"{node.id}.c{c}", a=x, b=y, node=node.id)
            else:
                self._lower_ps_channel(node, step, c, x, y)
            out_regs.append(f"{node.id}.c{c}")
        self.regmap[node.id] = out_regs
        self.node_layout[node.id] = self.node_layout[preds[0]]

    def _lower_ps_channel(self, node: PolySkipNode, step, c: int,
                          x: str, y: str) -> None:
        coeff = lambda key, c=c: self._values(
            node.id, lambda n, key=key, c=c: _chan_val(n.coeffs[key], c))
        pl = step.plain_lams
        if node.is_monic():
            u = self.emit(op="add", out=self._name(f"{node.id}.u"),
                          a=x, b=y, node=node.id)
            sq = self.emit(op="mult_ct", out=self._name(f"{node.id}.sq"),
                           a=u, b=u, node=node.id, free=(u,))
            tx = self.emit(op="mult_plain", out=self._name(f"{node.id}.tx"),
                           a=x, pt=PlainRef(node.id, "x", coeff("x"), pl["x"]),
                           node=node.id)
            ty = self.emit(op="mult_plain", out=self._name(f"{node.id}.ty"),
                           a=y, pt=PlainRef(node.id, "y", coeff("y"), pl["y"]),
                           node=node.id)
            s = self.emit(op="add", out=self._name(f"{node.id}.s1"),
                          a=sq, b=tx, node=node.id, free=(sq, tx))
            s = self.emit(op="add", out=self._name(f"{node.id}.s2"),
                          a=s, b=ty, node=node.id, free=(s, ty))
            out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                            a=s, pt=PlainRef(node.id, "c", coeff("c"), pl["c"]),
                            node=node.id, free=(s,))
        else:
            t1 = self.emit(op="mult_plain", out=self._name(f"{node.id}.t1"),
                           a=x, pt=PlainRef(node.id, "x2", coeff("x2"), pl["x2"]),
                           node=node.id)
            t2 = self.emit(op="mult_plain", out=self._name(f"{node.id}.t2"),
                           a=y, pt=PlainRef(node.id, "xy", coeff("xy"), pl["xy"]),
                           node=node.id)
            s1 = self.emit(op="add", out=self._name(f"{node.id}.s1"),
                           a=t1, b=t2, node=node.id, free=(t1, t2))
            w1 = self.emit(op="mult_ct", out=self._name(f"{node.id}.w1"),
                           a=s1, b=x, node=node.id, free=(s1,))
            t3 = self.emit(op="mult_plain", out=self._name(f"{node.id}.t3"),
                           a=y, pt=PlainRef(node.id, "y2", coeff("y2"), pl["y2"]),
                           node=node.id)
            w2 = self.emit(op="mult_ct", out=self._name(f"{node.id}.w2"),
                           a=t3, b=y, node=node.id, free=(t3,))
            lx = self.emit(op="mult_plain", out=self._name(f"{node.id}.lx"),
                           a=x, pt=PlainRef(node.id, "x", coeff("x"), pl["x"]),
                           node=node.id)
            ly = self.emit(op="mult_plain", out=self._name(f"{node.id}.ly"),
                           a=y, pt=PlainRef(node.id, "y", coeff("y"), pl["y"]),
                           node=node.id)
            s = self.emit(op="add", out=self._name(f"{node.id}.s2"),
                          a=w1, b=w2, node=node.id, free=(w1, w2))
            s = self.emit(op="add", out=self._name(f"{node.id}.s3"),
                          a=s, b=lx, node=node.id, free=(s, lx))
            s = self.emit(op="add", out=self._name(f"{node.id}.s4"),
                          a=s, b=ly, node=node.id, free=(s, ly))
            out = self.emit(op="add_plain", out=self._name(f"{node.id}.o"),
                            a=s, pt=PlainRef(node.id, "c", coeff("c"), pl["c"]),
                            node=node.id, free=(s,))
        out = self._rescale(out, node.id, step.rescales)
        self.instrs[-1].out = f"{node.id}.c{c}"

    def _lower_pool(self, node: AvgPoolNode, pred: str) -> None:
        step = self._step(node.id)
        lin = self.node_layout[pred]
        lout = self._out_layout(lin, 1, 1)
        anchor0 = lin.slot(0, 0, 0)
        out_regs = []
        unit = bool(np.all(np.asarray(node.divisor) == 1.0))
        for c, reg in enumerate(self.regmap[pred]):
            acc = reg
            for i in range(lin.height):
                for j in range(lin.width):
                    if (i, j) == (0, 0):
                        continue
                    r = self.emit(op="rotate", out=self._name(f"{node.id}.r"),
                                  a=reg, step=lin.slot(0, i, j) - anchor0,
                                  node=node.id)
                    acc = self.emit(op="add", out=self._name(f"{node.id}.a"),
                                    a=acc, b=r, node=node.id,
                                    free=(r,) if acc == reg else (acc, r))
            if not unit:
                div = PlainRef(node.id, "divisor",
                               self._values(node.id,
                                            lambda n: float(np.asarray(n.divisor))),
                               step.plain_lams["divisor"])
                acc = self.emit(op="mult_plain", out=self._name(f"{node.id}.d"),
                                a=acc, pt=div, node=node.id, layout_obj=lout)
                acc = self._rescale(acc, node.id, step.rescales)
            else:
                acc = self.emit(op="rotate", out=self._name(f"{node.id}.id"),
                                a=acc, step=0, node=node.id, layout_obj=lout)
            self.instrs[-1].out = f"{node.id}.c{c}"
            out_regs.append(f"{node.id}.c{c}")
        self.regmap[node.id] = out_regs
        self.node_layout[node.id] = lout

    def _lower_linear(self, node: LinearNode, pred: str) -> None:
        step = self._step(node.id)
        lin = self.node_layout[pred]
        in_regs = self.regmap[pred]
        k_out, c_in = node.weight.shape
        if len(in_regs) != c_in:
            raise SimError(f"linear {node.id!r} expects {c_in} channel "
                           f"ciphertexts, got {len(in_regs)}")
        lout = SlotLayout(n_slots=lin.n_slots, region_size=lin.region_size,
                          regions=lin.regions, flat_len=k_out)
        src = lin.slot(0, 0, 0)
        acc = ""
        for k in range(k_out):
            for c in range(c_in):
                rot = self.emit(op="rotate", out=self._name(f"{node.id}.r"),
                                a=in_regs[c], step=src - k, node=node.id)
                prod = self.emit(op="mult_plain", out=self._name(f"{node.id}.m"),
                                 a=rot,
                                 pt=PlainRef(node.id, "weight",
                                             self._values(node.id,
                                                          lambda n, k=k, c=c:
                                                          n.weight[k, c]),
                                             step.plain_lams["weight"],
                                             mask="slot", slot=k),
                                 node=node.id, layout_obj=lout, free=(rot,))
                if not acc:
                    acc = prod
                else:
                    acc = self.emit(op="add", out=self._name(f"{node.id}.a"),
                                    a=acc, b=prod, node=node.id,
                                    free=(acc, prod))
            bias = PlainRef(node.id, "bias",
                            self._values(node.id, lambda n, k=k: n.bias[k]),
                            step.plain_lams["bias"], mask="slot", slot=k)
            acc = self.emit(op="add_plain", out=self._name(f"{node.id}.b"),
                            a=acc, pt=bias, node=node.id, free=(acc,))
        acc = self._rescale(acc, node.id, step.rescales)
        self.instrs[-1].out = f"{node.id}.out"
        self.regmap[node.id] = [f"{node.id}.out"]
        self.node_layout[node.id] = lout


def lower_model(models: Union[ModelGraph, Sequence[ModelGraph]],
                plan: ModulusChainPlan,
                n_slots: Optional[int] = None) -> CircuitProgram:
    """Compile a model (or an ensemble of topology-identical models sharing
    one plan) into an executable instruction stream."""
    if isinstance(models, ModelGraph):
        models = [models]
    if not models:
        raise SimError("need at least one model")
    base = models[0].topo_order()
    for m in models[1:]:
        if m.topo_order() != base:
            raise SimError("ensemble models must share node topology")
    return _Lowerer(models, plan, regions=len(models), n_slots=n_slots).lower()


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


@dataclass
class SimRun:
    member_logits: np.ndarray       # (regions, classes)
    logits: np.ndarray              # averaged over members
    rescales_used: int
    trace: List[TraceRow] = field(default_factory=list)
    weight_encodings: Dict[Tuple[str, int], int] = field(default_factory=dict)


def run_circuit(program: CircuitProgram, inputs: np.ndarray,
                trace: bool = False) -> SimRun:
    """Execute a compiled program on one input image (C, h, w)."""
    machine = SimMachine(program.plan, program.regions, trace=trace)
    machine.run(program, np.asarray(inputs, dtype=np.float64))
    if not program.outputs:
        raise SimError("program has no decode outputs")
    member = machine.outputs[program.outputs[0]]
    member = member.reshape(member.shape[0], -1)
    return SimRun(
        member_logits=member,
        logits=member.mean(axis=0),
        rescales_used=machine.max_used,
        trace=machine.trace,
        weight_encodings=machine.encodings_per_slice(),
    )


def run_model(models: Union[ModelGraph, Sequence[ModelGraph]],
              plan: ModulusChainPlan, image: np.ndarray,
              n_slots: Optional[int] = None, trace: bool = False) -> SimRun:
    """Lower and execute in one step."""
    program = lower_model(models, plan, n_slots=n_slots)
    return run_circuit(program, image, trace=trace)


# ---------------------------------------------------------------------------
# rescale error probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeReport:
    max_rel_err: float
    per_round: List[float]


def perturbed_chain(delta: int, ell: int, depth: int, eps: float) -> List[int]:
    """Rescale moduli primes near Delta^ell scaled by (1 + eps); eps = 0
    returns the exact power (the error-free mode)."""
    base = delta ** ell
    if eps == 0:
        return [base] * depth
    from sympy import nextprime

    return [int(nextprime(int(base * (1 + eps))))] * depth


def rescale_error_probe(delta: int, chain: Union[Sequence[int], ModulusChainPlan],
                        depth: int, ell: int = 2,
                        values: Optional[np.ndarray] = None) -> ProbeReport:
    """Fixed instrumentation circuit: ``depth`` rounds of square, rescale by
    the chain modulus, then add 0.3 encoded at nominal scale.

    Reports the running maximum relative error against the float reference;
    with q_i = Delta^ell exactly the only error is rounding, and the error is
    nondecreasing in both depth and |log(q_i / Delta^ell)|.
    """
    if isinstance(chain, ModulusChainPlan):
        chain = [m.value for m in chain.rescale_moduli()]
    if len(chain) < depth:
        raise SimError(f"chain has {len(chain)} moduli, probe needs {depth}")
    if values is None:
        values = np.linspace(0.1, 0.6, 8)
    ref = np.asarray(values, dtype=np.float64).copy()
    scale = Fraction(delta) ** ell
    slots = [_round_half_away(v * delta ** ell) for v in ref]
    meta = CiphertextMeta(scale=scale, level=depth, sublevel=ell)

    max_rel = 0.0
    per_round: List[float] = []
    for i in range(depth):
        slots = [v * v for v in slots]
        meta = CiphertextMeta(scale=meta.scale * meta.scale, level=meta.level,
                              sublevel=meta.sublevel * 2)
        q = int(chain[i])
        slots = [_round_div(v, q) for v in slots]
        meta = apply_rescale(meta, q, delta)
        const = _round_half_away(0.3 * delta ** meta.sublevel)
        slots = [v + const for v in slots]
        ref = ref * ref + 0.3
        measured = np.array([int(v) / meta.scale for v in slots], dtype=np.float64)
        rel = float(np.max(np.abs(measured - ref)) / np.max(np.abs(ref)))
        max_rel = max(max_rel, rel)
        per_round.append(max_rel)
    return ProbeReport(max_rel_err=max_rel, per_round=per_round)
