"""Reverse-mode differentiation of dataflow programs.

The pipeline:

1. ``extract_ccs`` walks the program backwards from the dependent and keeps
   every compute node whose result the gradient chain can touch. Tracking is
   per array name, not per version (sound; gradient clearing compensates for
   overwrites). Loop bodies are swept repeatedly until the kept/tracked pair
   stabilizes; if the first passes differ from the steady state, the last
   iterations of the reversed loop need their own (larger or smaller) body,
   which is emitted as peeled one-trip loops.

2. ``build_backward`` emits the adjoint program: control flow mirrored in
   reverse, loops reversed in closed form when the update is affine
   (otherwise by declared inverse, otherwise by replaying recorded
   iterates), conditionals replaying recorded outcomes. Each kept node
   becomes an adjoint node writing gradient contributions with ``sum``
   conflict resolution. A write that killed a previous value clears the
   gradient buffer after consuming it; when an operand aliases the output
   at the same subset, the overwrite itself plays the role of the clear.

Gradient buffers are named ``<data>__grad``; forwarded values are read
through ``<data>__v<version>`` descriptors resolved against the forward
tape (or against materialized copies once a store/recompute plan is
applied).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .errors import (
    DependentUnreachable,
    IrrecomputableValue,
    NoFixpoint,
    NonDifferentiableOp,
    UnsupportedConstruct,
    UnsupportedLoop,
)
from .ir import (
    AccessNode,
    Block,
    Conditional,
    DataDescriptor,
    Dataflow,
    LibraryNode,
    LoopRegion,
    MapNode,
    Memlet,
    Program,
    State,
    Tasklet,
    affine_stride,
    copy_program,
    pristine_inputs,
    schedule,
    validate,
    walk_blocks,
    written_descriptors,
)
from .symexpr import (
    Binary,
    Const,
    Expr,
    Name,
    Unary,
    free_names,
    simplify,
)
from .versions import ForwardingEntry, ReachSet, VersionInfo, analyze_versions

NodeRef = tuple[str, str]  # (state label, node id)


def grad_name(data: str) -> str:
    return data + "__grad"


def stored_name(data: str, versions: tuple[int, ...]) -> str:
    return data + "__v" + "_".join(str(v) for v in versions)


# ---------------------------------------------------------------------------
# scalar derivatives


def _warn_ae(op: str):
    warnings.warn(
        f"'{op}' is not differentiable everywhere; using its almost-everywhere derivative",
        NonDifferentiableOp,
        stacklevel=3,
    )


def derivative(expr: Expr, wrt: str) -> Expr:
    """Symbolic partial derivative with respect to the name ``wrt``."""
    return simplify(_deriv(expr, wrt))


def _deriv(e: Expr, w: str) -> Expr:
    if isinstance(e, Const):
        return Const(0)
    if isinstance(e, Name):
        return Const(1 if e.id == w else 0)
    if isinstance(e, Unary):
        dx = _deriv(e.x, w)
        if isinstance(dx, Const) and dx.value == 0 and e.op != "sign":
            return Const(0)
        x = e.x
        if e.op == "neg":
            return Unary("neg", dx)
        if e.op == "sin":
            return Binary("mul", Unary("cos", x), dx)
        if e.op == "cos":
            return Unary("neg", Binary("mul", Unary("sin", x), dx))
        if e.op == "exp":
            return Binary("mul", Unary("exp", x), dx)
        if e.op == "log":
            return Binary("div", dx, x)
        if e.op == "sqrt":
            return Binary("div", dx, Binary("mul", Const(2), Unary("sqrt", x)))
        if e.op == "tanh":
            t = Unary("tanh", x)
            return Binary("mul", Binary("sub", Const(1), Binary("mul", t, t)), dx)
        if e.op == "abs":
            _warn_ae("abs")
            return Binary("mul", Unary("sign", x), dx)
        if e.op == "sign":
            if not (isinstance(dx, Const) and dx.value == 0):
                _warn_ae("sign")
            return Const(0)
        raise UnsupportedConstruct(f"no derivative rule for '{e.op}'")
    if isinstance(e, Binary):
        dx, dy = _deriv(e.x, w), _deriv(e.y, w)
        x, y = e.x, e.y
        zx = isinstance(dx, Const) and dx.value == 0
        zy = isinstance(dy, Const) and dy.value == 0
        if e.op == "add":
            return Binary("add", dx, dy)
        if e.op == "sub":
            return Binary("sub", dx, dy)
        if e.op == "mul":
            return Binary("add", Binary("mul", dx, y), Binary("mul", x, dy))
        if e.op == "div":
            # x'/y - x*y'/y^2
            return Binary(
                "sub",
                Binary("div", dx, y),
                Binary("div", Binary("mul", x, dy), Binary("mul", y, y)),
            )
        if e.op == "pow":
            if zx and zy:
                return Const(0)
            if isinstance(y, Const):
                c = y.value
                return Binary(
                    "mul",
                    Binary("mul", Const(c), Binary("pow", x, Const(c - 1))),
                    dx,
                )
            # general: x^y * (y' log x + y x' / x)
            return Binary(
                "mul",
                Binary("pow", x, y),
                Binary(
                    "add",
                    Binary("mul", dy, Unary("log", x)),
                    Binary("div", Binary("mul", y, dx), x),
                ),
            )
        if e.op in ("min", "max"):
            if zx and zy:
                return Const(0)
            _warn_ae(e.op)
            s = Unary("sign", Binary("sub", x, y))  # -1 / 0 / +1
            lo = Binary("mul", Const(0.5), Binary("sub", Const(1), s))  # picks x for min
            hi = Binary("mul", Const(0.5), Binary("add", Const(1), s))  # picks x for max
            wx = hi if e.op == "max" else lo
            wy = lo if e.op == "max" else hi
            return Binary("add", Binary("mul", wx, dx), Binary("mul", wy, dy))
        if e.op in ("idiv", "mod"):
            if not (zx and zy):
                _warn_ae(e.op)
            return Const(0)
        raise UnsupportedConstruct(f"no derivative rule for '{e.op}'")
    raise UnsupportedConstruct("conditions are not differentiable")


def differentiate_tasklet(tasklet: Tasklet, out_conn: str, wrt_connector: str) -> Expr:
    """Partial of one tasklet output with respect to one input connector."""
    return derivative(tasklet.body[out_conn], wrt_connector)


# ---------------------------------------------------------------------------
# contributing computation slice


@dataclass
class CCS:
    tracked: frozenset[str]
    active: frozenset[str]
    kept_union: frozenset[NodeRef]
    # per loop label: kept sets of the distinct leading reverse passes;
    # the last entry is the steady state, earlier ones become peels
    loop_passes: dict[str, list[frozenset[NodeRef]]] = field(default_factory=dict)

    def peel_count(self, label: str) -> int:
        passes = self.loop_passes.get(label)
        return max(0, len(passes) - 1) if passes else 0


def _node_reads(df: Dataflow, nid: str) -> set[str]:
    return {e.data for e in df.in_edges(nid)}


def _node_writes(df: Dataflow, nid: str) -> set[str]:
    return {e.data for e in df.out_edges(nid)}


def extract_ccs(program: Program) -> CCS:
    if program.dependent not in written_descriptors(program):
        raise DependentUnreachable(
            f"'{program.dependent}' is never written; nothing to differentiate"
        )
    n_descs = len(program.descriptors)
    loop_passes: dict[str, list[frozenset[NodeRef]]] = {}

    def sweep_state(state: State, tracked: set[str]) -> set[NodeRef]:
        kept: set[NodeRef] = set()
        df = state.graph
        by_id = {n.id: n for n in df.nodes}
        for nid in reversed(schedule(df)):
            node = by_id[nid]
            if isinstance(node, AccessNode):
                continue
            if _node_writes(df, nid) & tracked:
                kept.add((state.label, nid))
                tracked |= _node_reads(df, nid)
        return kept

    def sweep_region(region: list[Block], tracked: set[str]) -> set[NodeRef]:
        kept: set[NodeRef] = set()
        for block in reversed(region):
            if isinstance(block, State):
                kept |= sweep_state(block, tracked)
            elif isinstance(block, Conditional):
                t_then, t_else = set(tracked), set(tracked)
                kept |= sweep_region(block.then_body, t_then)
                kept |= sweep_region(block.else_body, t_else)
                tracked |= t_then | t_else
            elif isinstance(block, LoopRegion):
                passes: list[tuple[frozenset[NodeRef], frozenset[str]]] = []
                while True:
                    k = frozenset(sweep_region(block.body, tracked))
                    passes.append((k, frozenset(tracked)))
                    if len(passes) >= 2 and passes[-1] == passes[-2]:
                        break
                    if len(passes) > n_descs + 2:
                        raise NoFixpoint(
                            f"slice of loop '{block.label}' failed to stabilize"
                        )
                kept_seq = [p[0] for p in passes]
                while len(kept_seq) >= 2 and kept_seq[-1] == kept_seq[-2]:
                    kept_seq.pop()
                loop_passes[block.label] = kept_seq
                for ks in kept_seq:
                    kept |= ks
        return kept

    tracked: set[str] = {program.dependent}
    kept_union = frozenset(sweep_region(program.region, tracked))

    # forward reachability from the independents
    active: set[str] = set(program.independents)
    for _ in range(n_descs + 1):
        before = len(active)
        for _, block in walk_blocks(program.region):
            if not isinstance(block, State):
                continue
            df = block.graph
            for node in df.nodes:
                if isinstance(node, AccessNode):
                    continue
                if _node_reads(df, node.id) & active:
                    active |= _node_writes(df, node.id)
        if len(active) == before:
            break

    return CCS(
        tracked=frozenset(tracked),
        active=frozenset(active & tracked),
        kept_union=kept_union,
        loop_passes=loop_passes,
    )


def restrict_to_ccs(program: Program, ccs: CCS | None = None) -> Program:
    """Forward program with every compute node outside the slice removed.
    The dependent's value is unchanged."""
    ccs = ccs or extract_ccs(program)
    out = copy_program(program)
    for _, block in walk_blocks(out.region):
        if not isinstance(block, State):
            continue
        df = block.graph
        drop = {
            n.id
            for n in df.nodes
            if not isinstance(n, AccessNode) and (block.label, n.id) not in ccs.kept_union
        }
        df.edges = [e for e in df.edges if e.src not in drop and e.dst not in drop]
        df.nodes = [n for n in df.nodes if n.id not in drop]
        touched = {e.src for e in df.edges} | {e.dst for e in df.edges}
        df.nodes = [
            n for n in df.nodes if not isinstance(n, AccessNode) or n.id in touched
        ]
    return out


# ---------------------------------------------------------------------------
# loop reversal


def _last_iterate_expr(loop: LoopRegion, stride: Expr) -> Expr:
    L, U, s = loop.init, loop.bound, stride
    if loop.cmp == "<":
        span = Binary("sub", Binary("sub", U, Const(1)), L)
    else:
        span = Binary("sub", Binary("add", U, Const(1)), L)
    return simplify(Binary("add", L, Binary("mul", s, Binary("idiv", span, s))))


def reverse_loop_header(loop: LoopRegion) -> LoopRegion:
    """Header visiting the forward iterates in reverse. Affine updates get a
    closed form; a declared inverse yields a re-simulating header; anything
    else replays the recorded iterate sequence."""
    stride = affine_stride(loop)
    if stride is not None:
        last = _last_iterate_expr(loop, stride)
        if loop.cmp == "<":
            cmp, bound = ">", simplify(Binary("sub", loop.init, Const(1)))
        else:
            cmp, bound = "<", simplify(Binary("add", loop.init, Const(1)))
        return LoopRegion(
            label=loop.label + "__bwd",
            iterator=loop.iterator,
            init=last,
            bound=bound,
            cmp=cmp,
            update=simplify(Binary("sub", Name(loop.iterator), stride)),
            reverse_of=loop.label,
        )
    if loop.inverse is not None:
        return LoopRegion(
            label=loop.label + "__bwd",
            iterator=loop.iterator,
            init=loop.init,
            bound=loop.bound,
            cmp=loop.cmp,
            update=loop.update,
            inverse=loop.inverse,
            reversed_simulate=True,
            reverse_of=loop.label,
        )
    return LoopRegion(
        label=loop.label + "__bwd",
        iterator=loop.iterator,
        init=loop.init,
        bound=loop.bound,
        cmp=loop.cmp,
        update=loop.update,
        replay_of=loop.label,
        reverse_of=loop.label,
    )


def _peel_header(loop: LoopRegion, stride: Expr, p: int) -> LoopRegion:
    """One-trip region for the p-th reversed iteration (0 = last forward),
    degenerating to zero trips when the loop ran fewer than p+1 times."""
    last = _last_iterate_expr(loop, stride)
    init = simplify(Binary("sub", last, Binary("mul", Const(p), stride)))
    step_back = simplify(Binary("sub", init, stride))
    if loop.cmp == "<":
        floor = simplify(Binary("sub", loop.init, Const(1)))
        bound = simplify(Binary("max", floor, step_back))
        cmp = ">"
    else:
        ceil = simplify(Binary("add", loop.init, Const(1)))
        bound = simplify(Binary("min", ceil, step_back))
        cmp = "<"
    return LoopRegion(
        label=f"{loop.label}__peel{p}",
        iterator=loop.iterator,
        init=init,
        bound=bound,
        cmp=cmp,
        update=simplify(Binary("sub", Name(loop.iterator), stride)),
        reverse_of=loop.label,
    )


def _main_reversed_header(loop: LoopRegion, stride: Expr, k: int) -> LoopRegion:
    rev = reverse_loop_header(loop)
    if k:
        rev.init = simplify(Binary("sub", rev.init, Binary("mul", Const(k), stride)))
        rev.label = f"{loop.label}__bwd"
    return rev


def _suffix_labels(region: list[Block], suffix: str):
    """Rename every block label in a region copy; reversal back-references
    (``reverse_of``, ``replay_of``, ``trace_ref``) keep pointing at the
    forward program and are left alone."""
    for b in region:
        b.label = b.label + suffix
        if isinstance(b, LoopRegion):
            _suffix_labels(b.body, suffix)
        elif isinstance(b, Conditional):
            _suffix_labels(b.then_body, suffix)
            _suffix_labels(b.else_body, suffix)


# ---------------------------------------------------------------------------
# backward construction


@dataclass
class BackwardBundle:
    backward: Program
    forwarding: dict[str, ForwardingEntry]
    required: frozenset[tuple[str, int]]
    vinfo: VersionInfo
    ccs: CCS
    # forward read sites per forwarded name: ((state label, access id), ...)
    read_sites: dict[str, tuple[tuple[str, str], ...]] = field(default_factory=dict)


class _Assembler:
    """Per-state graph accumulation with access-instance tracking."""

    def __init__(self, fresh):
        self.df = Dataflow()
        self.fresh = fresh
        self.cur: dict[str, str] = {}

    def read(self, data: str) -> str:
        nid = self.cur.get(data)
        if nid is None:
            nid = self.fresh("a")
            self.df.nodes.append(AccessNode(nid, data))
            self.cur[data] = nid
        return nid

    def write(self, data: str) -> str:
        nid = self.fresh("a")
        self.df.nodes.append(AccessNode(nid, data))
        self.cur[data] = nid
        return nid

    @property
    def empty(self) -> bool:
        return not any(not isinstance(n, AccessNode) for n in self.df.nodes)


_UNARY_ADJ_BODY = {
    "sin": lambda x, g: Binary("mul", Unary("cos", Name(x)), Name(g)),
    "cos": lambda x, g: Unary("neg", Binary("mul", Unary("sin", Name(x)), Name(g))),
    "exp": lambda x, g: Binary("mul", Unary("exp", Name(x)), Name(g)),
    "log": lambda x, g: Binary("div", Name(g), Name(x)),
    "sqrt": lambda x, g: Binary(
        "div", Name(g), Binary("mul", Const(2), Unary("sqrt", Name(x)))
    ),
    "tanh": lambda x, g: Binary(
        "mul",
        Binary("sub", Const(1), Binary("mul", Unary("tanh", Name(x)), Unary("tanh", Name(x)))),
        Name(g),
    ),
    "abs": lambda x, g: Binary("mul", Unary("sign", Name(x)), Name(g)),
}


class _BackwardBuilder:
    def __init__(self, program: Program, vinfo: VersionInfo, ccs: CCS):
        self.p = program
        self.vinfo = vinfo
        self.ccs = ccs
        self.pristine = pristine_inputs(program)
        self.gradset = set(ccs.active) | {program.dependent}
        self.entries: dict[tuple, ForwardingEntry] = {}
        self.entry_data: dict[str, str] = {}  # stored name -> forward array
        self.read_sites: dict[str, list[tuple[str, str]]] = {}
        self.used_inputs: set[str] = set()
        self.used_grads: set[str] = {program.dependent}
        self._n = 0

    def fresh(self, prefix: str) -> str:
        self._n += 1
        return f"{prefix}{self._n}"

    # -- value sourcing ------------------------------------------------------

    def value_source(self, state_label: str, access_id: str, data: str) -> str:
        """Name to read the forward value of ``data`` from, as seen by the
        node that read it through the given access instance."""
        if data in self.pristine:
            self.used_inputs.add(data)
            return data
        rs = self.vinfo.reads.get((state_label, access_id), ReachSet(()))
        if rs.branch_merged:
            raise UnsupportedConstruct(
                f"the reverse pass needs the value of '{data}', which merges "
                "across branch arms; materialize it outside the branch"
            )
        if not rs.candidates:
            raise IrrecomputableValue(
                f"the reverse pass needs '{data}' before any write to it"
            )
        key = (data, rs.candidates)
        entry = self.entries.get(key)
        if entry is None:
            versions = tuple(c.version for c in rs.candidates)
            entry = ForwardingEntry(stored_name(data, versions), data, rs.candidates)
            self.entries[key] = entry
            self.entry_data[entry.name] = data
        sites = self.read_sites.setdefault(entry.name, [])
        if (state_label, access_id) not in sites:
            sites.append((state_label, access_id))
        return entry.name

    def grad_of(self, data: str) -> str:
        self.used_grads.add(data)
        return grad_name(data)

    def base_desc(self, data: str) -> DataDescriptor:
        """Forward descriptor giving the shape of any backward data name."""
        d = self.p.descriptors.get(data)
        if d is not None:
            return d
        base = self.entry_data.get(data)
        if base is None and data.endswith("__grad"):
            base = data[: -len("__grad")]
        return self.p.descriptors[base]

    # -- region reversal -----------------------------------------------------

    def rev_region(self, region: list[Block], kept: frozenset[NodeRef]) -> list[Block]:
        out: list[Block] = []
        for block in reversed(region):
            if isinstance(block, State):
                state = self.rev_state(block, kept)
                if state is not None:
                    out.append(state)
            elif isinstance(block, Conditional):
                then_b = self.rev_region(block.then_body, kept)
                else_b = self.rev_region(block.else_body, kept)
                if then_b or else_b:
                    out.append(
                        Conditional(
                            label=block.label + "__bwd",
                            condition=block.condition,
                            then_body=then_b,
                            else_body=else_b,
                            trace_ref=block.label,
                        )
                    )
            elif isinstance(block, LoopRegion):
                out.extend(self.rev_loop(block))
        return out

    def rev_loop(self, loop: LoopRegion) -> list[Block]:
        passes = self.ccs.loop_passes.get(loop.label, [])
        if not passes or not any(passes):
            return []
        k = len(passes) - 1
        steady = passes[-1]
        if k == 0:
            body = self.rev_region(loop.body, steady)
            if not body:
                return []
            rev = reverse_loop_header(loop)
            rev.body = body
            return [rev]
        stride = affine_stride(loop)
        if stride is None:
            raise UnsupportedLoop(
                f"loop '{loop.label}' needs peeled reversal, which requires an affine update"
            )
        if any(not isinstance(b, State) for b in loop.body):
            raise UnsupportedLoop(
                f"loop '{loop.label}' needs peeled reversal, which requires a flat body"
            )
        out: list[Block] = []
        for p in range(k):
            body = self.rev_region(loop.body, passes[p])
            if body:
                peel = _peel_header(loop, stride, p)
                # nested labels must stay unique across the peeled copies
                _suffix_labels(body, f"__p{p}")
                peel.body = body
                out.append(peel)
        body = self.rev_region(loop.body, steady)
        if body:
            main = _main_reversed_header(loop, stride, k)
            main.body = body
            out.append(main)
        return out

    # -- state reversal ------------------------------------------------------

    def rev_state(self, state: State, kept: frozenset[NodeRef]) -> State | None:
        df = state.graph
        by_id = {n.id: n for n in df.nodes}
        asm = _Assembler(self.fresh)
        for nid in reversed(schedule(df)):
            node = by_id[nid]
            if isinstance(node, AccessNode) or (state.label, nid) not in kept:
                continue
            writes = _node_writes(df, nid)
            if not writes & self.gradset:
                continue
            if isinstance(node, Tasklet):
                self.adj_tasklet(asm, state, df, node)
            elif isinstance(node, LibraryNode):
                self.adj_library(asm, state, df, node)
            else:
                self.adj_map(asm, state, df, node)
        if asm.empty:
            return None
        return State(state.label + "__bwd", asm.df)

    # -- adjoint emission ----------------------------------------------------

    def _killed(self, state_label: str, access_id: str) -> bool:
        rs = self.vinfo.killed.get((state_label, access_id), ReachSet(()))
        return bool(rs.candidates)

    def adj_tasklet(self, asm: _Assembler, state: State, df: Dataflow, node: Tasklet):
        in_edges = df.in_edges(node.id)
        out_edges = df.out_edges(node.id)
        in_by_conn = {e.dst_conn: e for e in in_edges}

        outs_info = []
        for e in out_edges:
            if e.data not in self.gradset:
                continue
            outs_info.append(e)
        if not outs_info:
            return

        # per active in connector: total contribution expression
        contribs: dict[str, Expr] = {}
        needed_values: set[str] = set()
        self_pairs: list[tuple[str, Memlet]] = []  # (in conn, out edge) same data+subset
        for conn, ie in in_by_conn.items():
            if ie.data not in self.gradset:
                continue
            total: Expr | None = None
            for oi, oe in enumerate(outs_info):
                part = derivative(node.body[oe.src_conn], conn)
                if isinstance(part, Const) and part.value == 0:
                    continue
                term = Binary("mul", part, Name(f"_g{oi}"))
                total = term if total is None else Binary("add", total, term)
                needed_values |= free_names(part) & set(node.ins)
            if total is None:
                continue
            contribs[conn] = simplify(total)
            for oe in outs_info:
                if oe.wcr is None and (ie.data, _sub_key(ie.subset)) == (oe.data, _sub_key(oe.subset)):
                    self_pairs.append((conn, oe))

        clears = [
            oe
            for oe in outs_info
            if oe.wcr is None
            and self._killed(state.label, oe.dst)
            and not any(se is oe for _, se in self_pairs)
        ]
        if not contribs and not clears:
            return
        if (self_pairs or clears) and len(outs_info) > 1:
            raise UnsupportedConstruct(
                f"tasklet '{node.id}': gradient clearing with multiple outputs"
            )

        tid = self.fresh("adj")
        ins: list[str] = []
        body: dict[str, Expr] = {}
        edges_in: list[Memlet] = []
        edges_out: list[Memlet] = []

        for oi, oe in enumerate(outs_info):
            gconn = f"_g{oi}"
            ins.append(gconn)
            src = asm.read(self.grad_of(oe.data))
            edges_in.append(Memlet(src, None, tid, gconn, self.grad_of(oe.data), oe.subset))
        for conn in sorted(needed_values):
            ie = in_by_conn[conn]
            vname = self.value_source(state.label, ie.src, ie.data)
            ins.append(conn)
            edges_in.append(Memlet(asm.read(vname), None, tid, conn, vname, ie.subset))

        self_conns = {c for c, _ in self_pairs}
        if len(self_conns) > 1:
            # several connectors read the overwritten element: their partials
            # sum into one replacement write
            merged = sorted(self_conns & set(contribs))
            if len(merged) > 1:
                total = contribs[merged[0]]
                for c in merged[1:]:
                    total = Binary("add", total, contribs.pop(c))
                contribs[merged[0]] = simplify(total)
            self_conns = set(merged[:1])

        # one new access instance per gradient array, shared by all its writes
        wdst: dict[str, str] = {}

        def dst_of(gdata: str) -> str:
            if gdata not in wdst:
                wdst[gdata] = asm.write(gdata)
            return wdst[gdata]

        outs: list[str] = []
        for conn, expr in contribs.items():
            ie = in_by_conn[conn]
            oconn = f"_d{conn}"
            outs.append(oconn)
            body[oconn] = expr
            gdata = self.grad_of(ie.data)
            wcr = None if conn in self_conns else "sum"
            edges_out.append(
                Memlet(tid, oconn, dst_of(gdata), None, gdata, ie.subset, wcr)
            )
        for oe in clears:
            zconn = "_z"
            outs.append(zconn)
            body[zconn] = Const(0)
            gdata = self.grad_of(oe.data)
            edges_out.append(Memlet(tid, zconn, dst_of(gdata), None, gdata, oe.subset))

        asm.df.nodes.append(Tasklet(tid, tuple(ins), tuple(outs), body))
        asm.df.edges.extend(edges_in)
        asm.df.edges.extend(edges_out)

    def adj_library(self, asm: _Assembler, state: State, df: Dataflow, node: LibraryNode):
        out_e = df.out_edges(node.id)[0]
        if out_e.data not in self.gradset:
            return
        in_by_conn = {e.dst_conn: e for e in df.in_edges(node.id)}
        g = self.grad_of(out_e.data)
        accumulate = out_e.wcr == "sum"
        killed = out_e.wcr is None and self._killed(state.label, out_e.dst)

        def val(conn: str) -> str:
            ie = in_by_conn[conn]
            return self.value_source(state.label, ie.src, ie.data)

        def active(conn: str) -> bool:
            return in_by_conn[conn].data in self.gradset

        def is_self(conn: str) -> bool:
            return in_by_conn[conn].data == out_e.data and not accumulate

        def lib(kind: str, ins: dict[str, str], out_data: str, *, wcr, op=None,
                const=None, ta=False, tb=False):
            nid = self.fresh("adjn")
            srcs = {c: asm.read(d) for c, d in ins.items()}
            asm.df.nodes.append(LibraryNode(nid, kind, op=op, const=const, ta=ta, tb=tb))
            for c, d in ins.items():
                asm.df.edges.append(Memlet(srcs[c], None, nid, c, d, None))
            asm.df.edges.append(
                Memlet(nid, {"matmul": "c", "ew_binary": "c", "ew_unary": "y",
                             "reduce_sum": "y"}[kind], asm.write(out_data), None,
                       out_data, None, wcr)
            )

        emitted_self = False

        if node.kind == "matmul":
            a_e, b_e = in_by_conn["a"], in_by_conn["b"]
            jobs = []
            if active("a"):
                if not node.ta:
                    jobs.append(("a", "matmul", {"a": g, "b": val("b")},
                                 dict(ta=False, tb=not node.tb)))
                else:
                    jobs.append(("a", "matmul", {"a": val("b"), "b": g},
                                 dict(ta=node.tb, tb=True)))
            if active("b"):
                if not node.tb:
                    jobs.append(("b", "matmul", {"a": val("a"), "b": g},
                                 dict(ta=not node.ta, tb=False)))
                else:
                    jobs.append(("b", "matmul", {"a": g, "b": val("a")},
                                 dict(ta=True, tb=node.ta)))
            jobs.sort(key=lambda j: is_self(j[0]))  # self contribution last
            for conn, kind, ins, flags in jobs:
                gdata = self.grad_of(in_by_conn[conn].data)
                wcr = None if is_self(conn) else "sum"
                emitted_self |= is_self(conn)
                lib(kind, ins, gdata, wcr=wcr, **flags)

        elif node.kind == "reduce_sum":
            x_e = in_by_conn["x"]
            if active("x"):
                rank = self.p.descriptors[x_e.data].rank
                gdata = self.grad_of(x_e.data)
                self._broadcast_map(asm, g, gdata, x_e.data, rank,
                                    overwrite=is_self("x"))
                emitted_self |= is_self("x")

        elif node.kind == "ew_unary":
            x_e = in_by_conn["x"]
            if active("x"):
                gdata = self.grad_of(x_e.data)
                self_w = is_self("x")
                wcr = None if self_w else "sum"
                if node.op == "copy":
                    lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="copy")
                elif node.op == "neg":
                    lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="neg")
                elif node.op == "scale":
                    lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="scale", const=node.const)
                elif node.op == "sign":
                    _warn_ae("sign")
                else:
                    if node.op in ("abs",):
                        _warn_ae(node.op)
                    fn = _UNARY_ADJ_BODY[node.op]
                    self._ew_map(
                        asm, x_e.data,
                        ins={"_g": g, "_x": val("x")},
                        out=gdata,
                        expr=simplify(fn("_x", "_g")),
                        overwrite=self_w,
                    )
                emitted_self |= self_w and node.op != "sign"

        else:  # ew_binary
            a_e, b_e = in_by_conn["a"], in_by_conn["b"]
            if is_self("a") and is_self("b"):
                raise UnsupportedConstruct(
                    f"'{node.id}': both operands alias the overwritten output"
                )
            jobs = []  # (conn, emit thunk)
            if active("a"):
                jobs.append("a")
            if active("b"):
                jobs.append("b")
            jobs.sort(key=is_self)
            for conn in jobs:
                gdata = self.grad_of(in_by_conn[conn].data)
                self_w = is_self(conn)
                wcr = None if self_w else "sum"
                op = node.op
                if op == "add":
                    lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="copy")
                elif op == "sub":
                    if conn == "a":
                        lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="copy")
                    else:
                        lib("ew_unary", {"x": g}, gdata, wcr=wcr, op="neg")
                elif op == "mul":
                    other = val("b" if conn == "a" else "a")
                    lib("ew_binary", {"a": other, "b": g}, gdata, wcr=wcr, op="mul")
                elif op == "div":
                    if conn == "a":
                        lib("ew_binary", {"a": g, "b": val("b")}, gdata, wcr=wcr, op="div")
                    else:
                        self._ew_map(
                            asm, b_e.data,
                            ins={"_g": g, "_a": val("a"), "_b": val("b")},
                            out=gdata,
                            expr=simplify(Unary("neg", Binary(
                                "div",
                                Binary("mul", Name("_a"), Name("_g")),
                                Binary("mul", Name("_b"), Name("_b")),
                            ))),
                            overwrite=self_w,
                        )
                        emitted_self |= self_w
                        continue
                elif op in ("min", "max"):
                    _warn_ae(op)
                    s = Unary("sign", Binary("sub", Name("_a"), Name("_b")))
                    lo = Binary("mul", Const(0.5), Binary("sub", Const(1), s))
                    hi = Binary("mul", Const(0.5), Binary("add", Const(1), s))
                    w = (hi if op == "max" else lo) if conn == "a" else (lo if op == "max" else hi)
                    self._ew_map(
                        asm, a_e.data,
                        ins={"_g": g, "_a": val("a"), "_b": val("b")},
                        out=gdata,
                        expr=simplify(Binary("mul", w, Name("_g"))),
                        overwrite=self_w,
                    )
                    emitted_self |= self_w
                    continue
                emitted_self |= self_w

        if killed and not emitted_self:
            lib_id = self.fresh("adjz")
            src = asm.read(g)
            asm.df.nodes.append(LibraryNode(lib_id, "ew_unary", op="scale", const=0.0))
            asm.df.edges.append(Memlet(src, None, lib_id, "x", g, None))
            asm.df.edges.append(Memlet(lib_id, "y", asm.write(g), None, g, None))

    def _ew_map(self, asm: _Assembler, shaped_like: str, ins: dict[str, str],
                out: str, expr: Expr, overwrite: bool):
        """Elementwise adjoint over the index space of ``shaped_like``."""
        desc = self.p.descriptors[shaped_like]
        params = tuple(f"_i{k}" for k in range(desc.rank))
        ranges = tuple((Const(0), dim, Const(1)) for dim in desc.shape)
        subset = tuple(Name(p) for p in params)
        body = Dataflow()
        tid = self.fresh("adjt")
        body_edges_in = []
        inner_in_ids = {}
        for conn, data in ins.items():
            aid = self.fresh("a")
            body.nodes.append(AccessNode(aid, data))
            inner_in_ids[conn] = aid
            dsub = subset if self.base_desc(data).rank else ()
            body_edges_in.append(Memlet(aid, None, tid, conn, data, dsub))
        body.nodes.append(Tasklet(tid, tuple(ins), ("_o",), {"_o": expr}))
        body.edges.extend(body_edges_in)
        out_aid = self.fresh("a")
        body.nodes.append(AccessNode(out_aid, out))
        body.edges.append(
            Memlet(tid, "_o", out_aid, None, out, subset, None if overwrite else "sum")
        )
        mid = self.fresh("adjm")
        asm.df.nodes.append(MapNode(mid, params, ranges, body))
        for data in sorted({d for d in ins.values()}):
            asm.df.edges.append(Memlet(asm.read(data), None, mid, None, data, None))
        asm.df.edges.append(
            Memlet(mid, None, asm.write(out), None, out, None, None if overwrite else "sum")
        )

    def _broadcast_map(self, asm: _Assembler, g: str, out: str, shaped_like: str,
                       rank: int, overwrite: bool):
        desc = self.p.descriptors[shaped_like]
        params = tuple(f"_i{k}" for k in range(rank))
        ranges = tuple((Const(0), dim, Const(1)) for dim in desc.shape)
        subset = tuple(Name(p) for p in params)
        body = Dataflow()
        tid = self.fresh("adjt")
        gid = self.fresh("a")
        oid = self.fresh("a")
        body.nodes.append(AccessNode(gid, g))
        body.nodes.append(Tasklet(tid, ("_g",), ("_o",), {"_o": Name("_g")}))
        body.nodes.append(AccessNode(oid, out))
        body.edges.append(Memlet(gid, None, tid, "_g", g, ()))
        body.edges.append(Memlet(tid, "_o", oid, None, out, subset, None if overwrite else "sum"))
        mid = self.fresh("adjm")
        asm.df.nodes.append(MapNode(mid, params, ranges, body))
        asm.df.edges.append(Memlet(asm.read(g), None, mid, None, g, None))
        asm.df.edges.append(
            Memlet(mid, None, asm.write(out), None, out, None, None if overwrite else "sum")
        )

    def adj_map(self, asm: _Assembler, state: State, df: Dataflow, node: MapNode):
        computes = [n for n in node.body.nodes if not isinstance(n, AccessNode)]
        if len(computes) != 1 or not isinstance(computes[0], Tasklet):
            raise UnsupportedConstruct(
                f"map '{node.id}': reversal supports single-tasklet bodies"
            )
        fwd_t = computes[0]
        body_in = {e.dst_conn: e for e in node.body.in_edges(fwd_t.id)}
        body_out = [e for e in node.body.out_edges(fwd_t.id) if e.data in self.gradset]
        if not body_out:
            return
        # state-level access instances of the forward map, for value sourcing
        state_in_src = {e.data: e.src for e in df.in_edges(node.id)}
        state_out_dst = {e.data: e.dst for e in df.out_edges(node.id)}

        contribs: dict[str, Expr] = {}
        needed_values: set[str] = set()
        self_conns: set[str] = set()
        for conn, ie in body_in.items():
            if ie.data not in self.gradset:
                continue
            total: Expr | None = None
            for oi, oe in enumerate(body_out):
                part = derivative(fwd_t.body[oe.src_conn], conn)
                if isinstance(part, Const) and part.value == 0:
                    continue
                total_term = Binary("mul", part, Name(f"_g{oi}"))
                total = total_term if total is None else Binary("add", total, total_term)
                needed_values |= free_names(part) & set(fwd_t.ins)
                if oe.wcr is None and (ie.data, _sub_key(ie.subset)) == (oe.data, _sub_key(oe.subset)):
                    self_conns.add(conn)
            if total is not None:
                contribs[conn] = simplify(total)

        clears = [
            oe for oe in body_out
            if oe.wcr is None
            and self._killed(state.label, state_out_dst[oe.data])
            and not any(
                body_in[c].data == oe.data and _sub_key(body_in[c].subset) == _sub_key(oe.subset)
                for c in self_conns
            )
        ]
        if not contribs and not clears:
            return
        if (self_conns or clears) and len(body_out) > 1:
            raise UnsupportedConstruct(
                f"map '{node.id}': gradient clearing with multiple outputs"
            )

        if len(self_conns) > 1:
            merged = sorted(self_conns & set(contribs))
            if len(merged) > 1:
                total = contribs[merged[0]]
                for c in merged[1:]:
                    total = Binary("add", total, contribs.pop(c))
                contribs[merged[0]] = simplify(total)
            self_conns = set(merged[:1])

        body = Dataflow()
        tid = self.fresh("adjt")
        ins: list[str] = []
        body_edges: list[Memlet] = []
        tbody: dict[str, Expr] = {}
        outs: list[str] = []

        for oi, oe in enumerate(body_out):
            gconn = f"_g{oi}"
            ins.append(gconn)
            gdata = self.grad_of(oe.data)
            aid = self.fresh("a")
            body.nodes.append(AccessNode(aid, gdata))
            body_edges.append(Memlet(aid, None, tid, gconn, gdata, oe.subset))
        for conn in sorted(needed_values):
            ie = body_in[conn]
            vname = self.value_source(state.label, state_in_src[ie.data], ie.data)
            ins.append(conn)
            aid = self.fresh("a")
            body.nodes.append(AccessNode(aid, vname))
            body_edges.append(Memlet(aid, None, tid, conn, vname, ie.subset))

        # one body access node per written gradient array
        bdst: dict[str, str] = {}

        def dst_of(gdata: str) -> str:
            if gdata not in bdst:
                aid = self.fresh("a")
                body.nodes.append(AccessNode(aid, gdata))
                bdst[gdata] = aid
            return bdst[gdata]

        for conn, expr in contribs.items():
            ie = body_in[conn]
            oconn = f"_d{conn}"
            outs.append(oconn)
            tbody[oconn] = expr
            gdata = self.grad_of(ie.data)
            wcr = None if conn in self_conns else "sum"
            body_edges.append(Memlet(tid, oconn, dst_of(gdata), None, gdata, ie.subset, wcr))
        for oe in clears:
            outs.append("_z")
            tbody["_z"] = Const(0)
            gdata = self.grad_of(oe.data)
            body_edges.append(Memlet(tid, "_z", dst_of(gdata), None, gdata, oe.subset))

        body.nodes.append(Tasklet(tid, tuple(ins), tuple(outs), tbody))
        body.edges.extend(body_edges)

        from .ir import data_read, data_written

        mid = self.fresh("adjm")
        asm.df.nodes.append(MapNode(mid, node.params, node.ranges, body))
        for data in sorted(data_read(body)):
            asm.df.edges.append(Memlet(asm.read(data), None, mid, None, data, None))
        for data in sorted(data_written(body)):
            wcrs = {e.wcr for e in body.edges if e.src == tid and e.data == data}
            asm.df.edges.append(
                Memlet(mid, None, asm.write(data), None, data, None,
                       "sum" if wcrs == {"sum"} else None)
            )


def _sub_key(subset):
    return None if subset is None else tuple(subset)


def build_backward(program: Program, vinfo: VersionInfo | None = None) -> BackwardBundle:
    vinfo = vinfo or analyze_versions(program)
    ccs = extract_ccs(program)
    builder = _BackwardBuilder(program, vinfo, ccs)
    region = builder.rev_region(program.region, ccs.kept_union)

    descriptors: dict[str, DataDescriptor] = {}
    dep_grad = grad_name(program.dependent)
    for data in sorted(builder.used_grads):
        d = program.descriptors[data]
        name = grad_name(data)
        if name == dep_grad:
            role = "input"
        elif data in program.independents:
            role = "output"
        else:
            role = "gradient"
        descriptors[name] = DataDescriptor(name, d.element_kind, d.shape, role)
    if dep_grad not in descriptors:
        descriptors[dep_grad] = DataDescriptor(
            dep_grad, program.descriptors[program.dependent].element_kind, (), "input"
        )
    for data in sorted(builder.used_inputs):
        descriptors[data] = program.descriptors[data]
    forwarding: dict[str, ForwardingEntry] = {}
    required: set[tuple[str, int]] = set()
    for entry in builder.entries.values():
        d = program.descriptors[entry.data]
        descriptors[entry.name] = DataDescriptor(entry.name, d.element_kind, d.shape, "stored-copy")
        forwarding[entry.name] = entry
        required |= {(entry.data, c.version) for c in entry.candidates}

    backward = Program(
        descriptors=descriptors,
        parameters=program.parameters,
        region=region,
        dependent=dep_grad,
        independents=(),
    )
    diags = validate(backward)
    if diags:
        raise AssertionError(f"internal: backward program invalid: {diags[:5]}")
    return BackwardBundle(
        backward=backward,
        forwarding=forwarding,
        required=frozenset(required),
        vinfo=vinfo,
        ccs=ccs,
        read_sites={k: tuple(v) for k, v in builder.read_sites.items()},
    )


# ---------------------------------------------------------------------------
# one-call differentiation


@dataclass
class GradientResult:
    value: object
    grads: dict[str, object]
    forward: object
    backward: object
    bundle: BackwardBundle


def gradient(
    program: Program,
    inputs: dict,
    params: dict[str, int] | None = None,
    *,
    seed=1.0,
    trip_limit: int | None = None,
    bundle: BackwardBundle | None = None,
) -> GradientResult:
    """Differentiate the dependent with respect to the independents at the
    given inputs, running forward (recording only what the adjoints need)
    and then the reverse program."""
    import numpy as np

    from .interpreter import run_backward, run_forward

    bundle = bundle or build_backward(program)
    fwd = run_forward(
        program, inputs, params,
        record=set(bundle.required), trip_limit=trip_limit, vinfo=bundle.vinfo,
    )
    bwd = run_backward(
        program, bundle.backward, inputs, params,
        tape=fwd.tape, forwarding=bundle.forwarding, seed=seed, trip_limit=trip_limit,
    )
    grads = {}
    for ind in program.independents:
        got = bwd.env.get(grad_name(ind))
        if got is None:
            got = np.zeros_like(np.asarray(fwd.env[ind]))
        grads[ind] = got
    return GradientResult(value=fwd.value, grads=grads, forward=fwd, backward=bwd, bundle=bundle)
