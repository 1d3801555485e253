"""Dataflow IR: programs made of states, loops and branches over named arrays.

A ``Program`` owns data descriptors and a tree of control-flow blocks. Each
``State`` holds an acyclic dataflow graph whose nodes are access nodes (one
*instance* per version touched, ordered by the node list) and compute nodes
(tasklets, library nodes, maps). Edges are memlets: they move one element
(explicit subset) or a whole array (subset ``None``, library nodes only), and
may carry ``sum`` conflict resolution instead of overwriting.

Invariants enforced by :func:`validate`:

* graphs are acyclic within a state, including write-after-read ordering
  between successive access instances of the same array;
* tasklet bodies reference only declared input connectors;
* a loop body never writes the loop iterator or any name free in the header;
* branch conditions are comparisons over scalars, elements and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

from .errors import (
    Diagnostic,
    NonTermination,
    UnboundName,
    UnresolvableTripCount,
    ValidationFailed,
)
from .symexpr import (
    Binary,
    Const,
    Expr,
    Name,
    contains_compare_or_index,
    eval_expr,
    free_names,
    is_condition,
    to_sexpr,
)

ELEMENT_WIDTH = {"real32": 4, "real64": 8}
ROLES = ("input", "output", "intermediate", "gradient", "stored-copy")

EW_UNARY_OPS = ("sin", "cos", "exp", "log", "sqrt", "tanh", "abs", "neg", "sign", "scale", "copy")
EW_BINARY_OPS = ("add", "sub", "mul", "div", "min", "max")


@dataclass(frozen=True)
class DataDescriptor:
    name: str
    element_kind: str  # real32 | real64
    shape: tuple[Expr, ...]  # () for scalars
    role: str

    @property
    def rank(self) -> int:
        return len(self.shape)


def size_bytes(desc: DataDescriptor, bindings: dict[str, int]) -> int:
    """Payload bytes: element width times the product of evaluated dims."""
    n = ELEMENT_WIDTH[desc.element_kind]
    for dim in desc.shape:
        d = eval_expr(dim, bindings)
        if not float(d).is_integer() or d < 0:
            raise UnresolvableTripCount(f"dimension of '{desc.name}' evaluated to {d}")
        n *= int(d)
    return n


# ---------------------------------------------------------------------------
# dataflow nodes


@dataclass
class AccessNode:
    id: str
    data: str


@dataclass
class Tasklet:
    id: str
    ins: tuple[str, ...]
    outs: tuple[str, ...]
    body: dict[str, Expr]  # one expression per output connector
    group: str | None = None


@dataclass
class LibraryNode:
    """Whole-array op: matmul (a,b)->c, reduce_sum x->y, ew_unary x->y,
    ew_binary (a,b)->c. ``op`` selects the elementwise function; ``const``
    parameterizes ``scale``; ``ta``/``tb`` transpose matmul operands."""

    id: str
    kind: str
    op: str | None = None
    const: float | None = None
    ta: bool = False
    tb: bool = False
    group: str | None = None


@dataclass
class MapNode:
    """Parallel region: ``body`` runs once per point of the range product.
    Later ranges may reference earlier parameters (triangular spaces)."""

    id: str
    params: tuple[str, ...]
    ranges: tuple[tuple[Expr, Expr, Expr], ...]  # (start, stop, step), step > 0
    body: "Dataflow"
    group: str | None = None


ComputeNode = Union[Tasklet, LibraryNode, MapNode]
Node = Union[AccessNode, ComputeNode]

LIB_CONNECTORS = {
    "matmul": (("a", "b"), ("c",)),
    "reduce_sum": (("x",), ("y",)),
    "ew_unary": (("x",), ("y",)),
    "ew_binary": (("a", "b"), ("c",)),
}


@dataclass
class Memlet:
    src: str
    src_conn: str | None
    dst: str
    dst_conn: str | None
    data: str
    subset: tuple[Expr, ...] | None  # None = whole array (library edges)
    wcr: str | None = None  # None (overwrite) or "sum"


@dataclass
class Dataflow:
    nodes: list[Node] = field(default_factory=list)
    edges: list[Memlet] = field(default_factory=list)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def in_edges(self, node_id: str) -> list[Memlet]:
        return [e for e in self.edges if e.dst == node_id]

    def out_edges(self, node_id: str) -> list[Memlet]:
        return [e for e in self.edges if e.src == node_id]


# ---------------------------------------------------------------------------
# control-flow blocks


@dataclass
class State:
    label: str
    graph: Dataflow = field(default_factory=Dataflow)


@dataclass
class LoopRegion:
    """``for iterator = init; iterator cmp bound; iterator = update``.

    ``inverse`` optionally declares the update's inverse for non-affine
    reversal. Reversed forms produced by the differentiator:

    * plain header (affine loops reversed in closed form);
    * ``reversed_simulate=True``: header fields describe the *forward* loop;
      execution first re-simulates it to find the last iterate and trip
      count, then runs backward applying ``inverse``;
    * ``replay_of=<label>``: execution replays the recorded iterate sequence
      of forward loop ``<label>`` in reverse (no inverse declared).
    """

    label: str
    iterator: str
    init: Expr
    bound: Expr
    cmp: str  # "<" or ">"
    update: Expr
    body: list["Block"] = field(default_factory=list)
    inverse: Expr | None = None
    reversed_simulate: bool = False
    replay_of: str | None = None
    reverse_of: str | None = None  # forward loop this one reverses, any mode


@dataclass
class Conditional:
    """Two-armed branch. ``trace_ref`` marks a reversed conditional: instead
    of evaluating ``condition`` it consumes the recorded outcome of forward
    branch ``trace_ref`` (in reverse execution order)."""

    label: str
    condition: Expr
    then_body: list["Block"] = field(default_factory=list)
    else_body: list["Block"] = field(default_factory=list)
    trace_ref: str | None = None


Block = Union[State, LoopRegion, Conditional]


@dataclass
class Program:
    descriptors: dict[str, DataDescriptor]
    parameters: tuple[str, ...]
    region: list[Block]
    dependent: str
    independents: tuple[str, ...]


# ---------------------------------------------------------------------------
# traversal helpers


def walk_blocks(region: list[Block], path: tuple[str, ...] = ()) -> Iterator[tuple[tuple[str, ...], Block]]:
    """Depth-first, program order. Yields (enclosing-label path, block)."""
    for block in region:
        yield path, block
        if isinstance(block, LoopRegion):
            yield from walk_blocks(block.body, path + (block.label,))
        elif isinstance(block, Conditional):
            yield from walk_blocks(block.then_body, path + (block.label, "then"))
            yield from walk_blocks(block.else_body, path + (block.label, "else"))


def enclosing_loops(program: Program, target_label: str) -> list[LoopRegion]:
    """Loop regions enclosing the block with the given label, outer first."""
    loops_by_label = {
        b.label: b for _, b in walk_blocks(program.region) if isinstance(b, LoopRegion)
    }
    for path, block in walk_blocks(program.region):
        label = getattr(block, "label", None)
        if label == target_label:
            return [loops_by_label[p] for p in path if p in loops_by_label]
    raise KeyError(target_label)


# ---------------------------------------------------------------------------
# scheduling


def schedule(df: Dataflow) -> list[str]:
    """Topological order of node ids, deterministic (node-list tie-break).

    Beyond dataflow edges, consecutive access instances of the same array
    impose write-after-read/write-after-write order: everything attached to
    instance k runs before the producers of instance k+1.

    Raises ValueError on a cycle.
    """
    ids = [n.id for n in df.nodes]
    index = {nid: i for i, nid in enumerate(ids)}
    succ: dict[str, set[str]] = {nid: set() for nid in ids}
    indeg: dict[str, int] = {nid: 0 for nid in ids}

    def add(a: str, b: str):
        if a == b or b in succ[a]:
            return
        succ[a].add(b)
        indeg[b] += 1

    for e in df.edges:
        add(e.src, e.dst)

    instances: dict[str, list[str]] = {}
    for n in df.nodes:
        if isinstance(n, AccessNode):
            instances.setdefault(n.data, []).append(n.id)
    for chain in instances.values():
        for prev, nxt in zip(chain, chain[1:]):
            producers = [e.src for e in df.in_edges(nxt)]
            add(prev, nxt)
            for r in (e.dst for e in df.out_edges(prev)):
                for p in producers:
                    add(r, p)
            for p in producers:
                add(prev, p)

    ready = sorted((nid for nid in ids if indeg[nid] == 0), key=index.__getitem__)
    order: list[str] = []
    import heapq

    heap = [index[nid] for nid in ready]
    heapq.heapify(heap)
    while heap:
        i = heapq.heappop(heap)
        nid = ids[i]
        order.append(nid)
        for m in succ[nid]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, index[m])
    if len(order) != len(ids):
        raise ValueError("cycle in state dataflow graph")
    return order


# ---------------------------------------------------------------------------
# loop header analysis


def affine_stride(loop: LoopRegion) -> Expr | None:
    """The additive stride when the update is ``i + s`` / ``i - s`` with
    ``s`` not depending on the iterator; None for non-affine updates."""
    u = loop.update
    if isinstance(u, Binary) and u.op in ("add", "sub") and isinstance(u.x, Name) and u.x.id == loop.iterator:
        if loop.iterator not in free_names(u.y):
            return u.y if u.op == "add" else Binary("sub", Const(0), u.y)
    if isinstance(u, Binary) and u.op == "add" and isinstance(u.y, Name) and u.y.id == loop.iterator:
        if loop.iterator not in free_names(u.x):
            return u.x
    return None


def simulate_header(
    loop: LoopRegion, bindings: dict[str, int], trip_limit: int,
    arrays=None,
) -> list[int]:
    """Iterate the header to enumerate the iteration values (trip-guarded)."""
    out: list[int] = []
    env = dict(bindings)
    i = int(eval_expr(loop.init, env, arrays))
    bound_cmp = (lambda a, b: a < b) if loop.cmp == "<" else (lambda a, b: a > b)
    while bound_cmp(i, int(eval_expr(loop.bound, env, arrays))):
        out.append(i)
        if len(out) > trip_limit:
            raise NonTermination(
                f"loop '{loop.label}' exceeded the trip limit of {trip_limit}"
            )
        env[loop.iterator] = i
        i = int(eval_expr(loop.update, env, arrays))
    return out


def trip_count(loop: LoopRegion, bindings: dict[str, int], trip_limit: int = 10**9) -> int:
    try:
        return len(simulate_header(loop, bindings, trip_limit))
    except UnboundName as exc:
        raise UnresolvableTripCount(
            f"cannot resolve trips of loop '{loop.label}': {exc}"
        ) from exc


# ---------------------------------------------------------------------------
# validation


def validate(program: Program) -> list[Diagnostic]:
    """Structural checks. Returns diagnostics; empty list means valid."""
    diags: list[Diagnostic] = []
    add = diags.append

    names = set(program.parameters)
    for pname in program.parameters:
        if program.parameters.count(pname) > 1:
            add(Diagnostic("DuplicateName", f"parameter '{pname}' repeated"))
    for dname, desc in program.descriptors.items():
        if dname != desc.name:
            add(Diagnostic("DuplicateName", f"descriptor key '{dname}' != name '{desc.name}'"))
        if dname in program.parameters:
            add(Diagnostic("DuplicateName", f"'{dname}' is both descriptor and parameter"))
        if desc.element_kind not in ELEMENT_WIDTH:
            add(Diagnostic("BadRole", f"'{dname}': unknown element kind '{desc.element_kind}'"))
        if desc.role not in ROLES:
            add(Diagnostic("BadRole", f"'{dname}': unknown role '{desc.role}'"))
        for dim in desc.shape:
            bad = free_names(dim) - set(program.parameters)
            if bad:
                add(Diagnostic("UnboundName", f"shape of '{dname}' uses {sorted(bad)}"))
    names |= set(program.descriptors)

    dep = program.descriptors.get(program.dependent)
    if dep is None:
        add(Diagnostic("BadDependent", f"dependent '{program.dependent}' is not declared"))
    elif dep.rank != 0:
        add(Diagnostic("BadDependent", f"dependent '{program.dependent}' must be a scalar"))
    for ind in program.independents:
        d = program.descriptors.get(ind)
        if d is None:
            add(Diagnostic("BadIndependent", f"independent '{ind}' is not declared"))
        elif d.role != "input":
            add(Diagnostic("BadIndependent", f"independent '{ind}' must have input role"))

    seen_labels: set[str] = set()
    for path, block in walk_blocks(program.region):
        label = block.label
        if label in seen_labels:
            add(Diagnostic("DuplicateName", f"block label '{label}' repeated"))
        seen_labels.add(label)

    scalar_names = {d.name for d in program.descriptors.values() if d.rank == 0}

    def check_scope(expr: Expr, scope: set[str], where: str, what: str):
        bad = free_names(expr) - scope
        if bad:
            add(Diagnostic("UnboundName", f"{what} uses {sorted(bad)}", where))

    def writes_in(region: list[Block]) -> set[str]:
        out: set[str] = set()
        for _, b in walk_blocks(region):
            if isinstance(b, State):
                out |= data_written(b.graph)
        return out

    def check_region(region: list[Block], iterators: tuple[str, ...]):
        for block in region:
            if isinstance(block, State):
                check_state(block, iterators)
            elif isinstance(block, LoopRegion):
                check_loop(block, iterators)
            elif isinstance(block, Conditional):
                check_branch(block, iterators)

    def check_loop(loop: LoopRegion, iterators: tuple[str, ...]):
        where = loop.label
        scope = set(program.parameters) | set(iterators) | scalar_names
        for what, expr in (("init", loop.init), ("bound", loop.bound), ("update", loop.update)):
            check_scope(expr, scope | {loop.iterator} if what == "update" else scope, where, f"loop {what}")
        if loop.cmp not in ("<", ">"):
            add(Diagnostic("BadLoop", f"comparison must be '<' or '>', got '{loop.cmp}'", where))
        if loop.inverse is not None:
            check_scope(loop.inverse, scope | {loop.iterator}, where, "loop inverse")
        header_names = free_names(loop.init) | free_names(loop.bound) | free_names(loop.update)
        mutated = writes_in(loop.body) & (header_names | {loop.iterator})
        for m in sorted(mutated):
            add(Diagnostic(
                "HeaderMutation",
                f"loop body writes '{m}' which the header of '{loop.label}' depends on",
                where,
            ))
        check_region(loop.body, iterators + (loop.iterator,))

    def check_branch(br: Conditional, iterators: tuple[str, ...]):
        where = br.label
        cond = br.condition
        if br.trace_ref is not None:
            # replayed branch: the condition is documentation, never evaluated
            check_region(br.then_body, iterators)
            check_region(br.else_body, iterators)
            return
        if not is_condition(cond):
            add(Diagnostic("BadCondition", "condition root must be a comparison", where))
        else:
            for side in (cond.x, cond.y):
                if contains_compare_or_index(side) and not _only_scalar_reads(side):
                    add(Diagnostic("BadCondition", "nested comparison in condition", where))
            scope = set(program.parameters) | set(iterators) | scalar_names | set(program.descriptors)
            check_scope(cond, scope, where, "condition")
            _check_condition_indices(cond, program, add, where)
        check_region(br.then_body, iterators)
        check_region(br.else_body, iterators)

    def check_state(state: State, iterators: tuple[str, ...]):
        check_graph(state.graph, state.label, iterators)

    def check_graph(df: Dataflow, where: str, symbol_scope: tuple[str, ...]):
        ids = [n.id for n in df.nodes]
        if len(ids) != len(set(ids)):
            add(Diagnostic("DuplicateName", "node ids repeated", where))
            return
        by_id = {n.id: n for n in df.nodes}
        scope = set(program.parameters) | set(symbol_scope)

        for n in df.nodes:
            if isinstance(n, AccessNode) and n.data not in program.descriptors:
                add(Diagnostic("UnknownData", f"access node '{n.id}' names '{n.data}'", where))
            if isinstance(n, Tasklet):
                for out in n.outs:
                    if out not in n.body:
                        add(Diagnostic("ArityMismatch", f"tasklet '{n.id}' missing body for '{out}'", where))
                for key, expr in n.body.items():
                    if key not in n.outs:
                        add(Diagnostic("ArityMismatch", f"tasklet '{n.id}' body for undeclared '{key}'", where))
                    bad = free_names(expr) - set(n.ins)
                    if bad:
                        add(Diagnostic("UnboundName", f"tasklet '{n.id}' body uses {sorted(bad)}", where))
                    if contains_compare_or_index(expr):
                        add(Diagnostic("BadCondition", f"tasklet '{n.id}' body uses condition-only syntax", where))
            if isinstance(n, LibraryNode):
                if n.kind not in LIB_CONNECTORS:
                    add(Diagnostic("BadLibrary", f"unknown library kind '{n.kind}'", where))
                elif n.kind == "ew_unary" and n.op not in EW_UNARY_OPS:
                    add(Diagnostic("BadLibrary", f"'{n.id}': unknown elementwise op '{n.op}'", where))
                elif n.kind == "ew_binary" and n.op not in EW_BINARY_OPS:
                    add(Diagnostic("BadLibrary", f"'{n.id}': unknown elementwise op '{n.op}'", where))
                if n.kind == "ew_unary" and n.op == "scale" and n.const is None:
                    add(Diagnostic("BadLibrary", f"'{n.id}': scale needs a constant", where))
            if isinstance(n, MapNode):
                if len(n.params) != len(n.ranges):
                    add(Diagnostic("ArityMismatch", f"map '{n.id}': {len(n.params)} params, {len(n.ranges)} ranges", where))
                inner = set(scope)
                for k, p in enumerate(n.params):
                    if p in inner:
                        add(Diagnostic("DuplicateName", f"map '{n.id}' param '{p}' shadows", where))
                    for part in n.ranges[k] if k < len(n.ranges) else ():
                        check_scope(part, inner, where, f"map '{n.id}' range")
                    inner.add(p)
                check_graph(n.body, f"{where}/{n.id}", symbol_scope + n.params)

        # connector wiring
        in_count: dict[tuple[str, str], int] = {}
        out_count: dict[tuple[str, str], int] = {}
        for e in df.edges:
            if e.src not in by_id or e.dst not in by_id:
                add(Diagnostic("UnknownNode", f"edge references '{e.src}'->'{e.dst}'", where))
                continue
            src, dst = by_id[e.src], by_id[e.dst]
            if isinstance(src, AccessNode) == isinstance(dst, AccessNode):
                add(Diagnostic("AccessEdge", f"edge '{e.src}'->'{e.dst}' must join access and compute", where))
                continue
            acc = src if isinstance(src, AccessNode) else dst
            if e.data != acc.data:
                add(Diagnostic("UnknownData", f"edge data '{e.data}' != access '{acc.data}'", where))
            desc = program.descriptors.get(e.data)
            if desc is not None and e.subset is not None and len(e.subset) != desc.rank:
                add(Diagnostic("BadSubset", f"subset arity {len(e.subset)} != rank {desc.rank} for '{e.data}'", where))
            if e.subset is not None:
                for part in e.subset:
                    check_scope(part, scope, where, f"subset of '{e.data}'")
            if e.wcr not in (None, "sum"):
                add(Diagnostic("BadSubset", f"unknown wcr '{e.wcr}'", where))
            comp, conn, is_in = (dst, e.dst_conn, True) if isinstance(src, AccessNode) else (src, e.src_conn, False)
            if isinstance(comp, MapNode):
                # map edges declare whole-array dependencies; elements move
                # via the body's own access nodes
                if conn is not None:
                    add(Diagnostic("UnknownConnector", f"map '{comp.id}' takes no connectors", where))
                if e.subset is not None:
                    add(Diagnostic("BadSubset", f"map edge on '{comp.id}' must cover the whole array", where))
                continue
            declared = _connectors(comp)
            if declared is not None:
                pool = declared[0] if is_in else declared[1]
                if conn not in pool:
                    add(Diagnostic("UnknownConnector", f"'{comp.id}' has no connector '{conn}'", where))
                else:
                    (in_count if is_in else out_count)[(comp.id, conn)] = (
                        (in_count if is_in else out_count).get((comp.id, conn), 0) + 1
                    )
            if isinstance(comp, Tasklet) and e.subset is None:
                add(Diagnostic("BadSubset", f"tasklet edge on '{comp.id}' needs an element subset", where))

        for n in df.nodes:
            if isinstance(n, MapNode):
                ins_have = {e.data for e in df.in_edges(n.id)}
                outs_have = {e.data for e in df.out_edges(n.id)}
                if ins_have != data_read(n.body):
                    add(Diagnostic("ArityMismatch", f"map '{n.id}' in-edges {sorted(ins_have)} != body reads {sorted(data_read(n.body))}", where))
                if outs_have != data_written(n.body):
                    add(Diagnostic("ArityMismatch", f"map '{n.id}' out-edges {sorted(outs_have)} != body writes {sorted(data_written(n.body))}", where))
                continue
            decl = _connectors(n)
            if decl is None:
                continue
            ins, outs = decl
            for c in ins:
                if in_count.get((n.id, c), 0) != 1:
                    add(Diagnostic("ArityMismatch", f"'{n.id}' input '{c}' has {in_count.get((n.id, c), 0)} edges", where))
            for c in outs:
                if out_count.get((n.id, c), 0) != 1:
                    add(Diagnostic("ArityMismatch", f"'{n.id}' output '{c}' has {out_count.get((n.id, c), 0)} edges", where))

        try:
            schedule(df)
        except ValueError:
            add(Diagnostic("CycleInState", "dataflow graph has a cycle", where))

    check_region(program.region, ())
    return diags


def _connectors(n: Node) -> tuple[tuple[str, ...], tuple[str, ...]] | None:
    if isinstance(n, Tasklet):
        return n.ins, n.outs
    if isinstance(n, LibraryNode):
        return LIB_CONNECTORS.get(n.kind, ((), ()))
    if isinstance(n, MapNode):
        return (), ()
    return None


def _only_scalar_reads(expr: Expr) -> bool:
    from .symexpr import Index, Unary

    if isinstance(expr, Index):
        return True
    if isinstance(expr, Unary):
        return _only_scalar_reads(expr.x)
    if isinstance(expr, Binary):
        if expr.op in ("lt", "gt", "le", "ge"):
            return False
        return _only_scalar_reads(expr.x) and _only_scalar_reads(expr.y)
    return True


def _check_condition_indices(cond: Expr, program: Program, add, where: str):
    from .symexpr import Index, Unary

    def walk(e: Expr):
        if isinstance(e, Index):
            desc = program.descriptors.get(e.base)
            if desc is None:
                add(Diagnostic("UnknownData", f"condition indexes unknown '{e.base}'", where))
            elif desc.rank != len(e.indices):
                add(Diagnostic("BadSubset", f"condition index arity for '{e.base}'", where))
        elif isinstance(e, Unary):
            walk(e.x)
        elif isinstance(e, Binary):
            walk(e.x)
            walk(e.y)

    walk(cond)


def data_written(df: Dataflow) -> set[str]:
    """Arrays written by this graph (edges into access nodes)."""
    by_id = {n.id: n for n in df.nodes}
    out: set[str] = set()
    for e in df.edges:
        dst = by_id.get(e.dst)
        if isinstance(dst, AccessNode):
            out.add(e.data)
    return out


def data_read(df: Dataflow) -> set[str]:
    """Arrays read by this graph (edges out of access nodes)."""
    by_id = {n.id: n for n in df.nodes}
    out: set[str] = set()
    for e in df.edges:
        src = by_id.get(e.src)
        if isinstance(src, AccessNode):
            out.add(e.data)
    return out


def validate_or_raise(program: Program) -> None:
    diags = validate(program)
    if diags:
        raise ValidationFailed(diags)


def written_descriptors(program: Program) -> set[str]:
    """Names of all descriptors written anywhere in the program."""
    out: set[str] = set()
    for _, block in walk_blocks(program.region):
        if isinstance(block, State):
            out |= data_written(block.graph)
    return out


def pristine_inputs(program: Program) -> set[str]:
    """Input-role descriptors never written: always readable, even backward."""
    written = written_descriptors(program)
    return {
        d.name
        for d in program.descriptors.values()
        if d.role == "input" and d.name not in written
    }


def shape_str(desc: DataDescriptor) -> str:
    return "[" + ", ".join(to_sexpr(s) for s in desc.shape) + "]"


def copy_program(program: Program) -> Program:
    """Structural deep copy (expressions are immutable and shared)."""
    import copy as _copy

    return _copy.deepcopy(program)
