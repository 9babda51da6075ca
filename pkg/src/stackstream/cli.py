"""Command-line front end: parse pipeline spec files, plan, run, explain.

Spec files are line oriented. A pipeline starts with a memory budget and
an input, chains stages top to bottom, optionally fans out through a
tee/join block, and ends at a sink:

    source 1 GiB
    read volume_in
    gaussian sigma=1.5
    write volume_out
    sink

Branches:

    tee
    gaussian sigma=1.0
    ---
    median r=1
    join add

Exit codes: 0 planned/ran fine, 1 spec syntax error, 2 planning error or
infeasible budget, 3 runtime I/O failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import tempfile
from pathlib import Path

from . import io as sio
from . import ops
from .core import (Budget, EngineError, PipelineGraph, PlanningError,
                   StageError, VolumeMeta, dtype_by_kind)
from .costmodel import layout_report
from .io import ChunkGrid
from .planner import plan as make_plan
from .runtime import execute_plan

TMPDIR_ENV = "STACKSTREAM_TMPDIR"

UNIT_BYTES = {"B": 1, "KiB": 1024, "MiB": 1024**2, "GiB": 1024**3,
              "TiB": 1024**4}


class SpecSyntaxError(Exception):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line} col {col}: {msg}")
        self.line = line
        self.col = col


def parse_bytes(text: str, line: int = 0, col: int = 1) -> int:
    m = re.fullmatch(r"\s*([0-9]+(?:\.[0-9]+)?)\s*(B|KiB|MiB|GiB|TiB)\s*", text)
    if not m:
        raise SpecSyntaxError(line, col,
                              f"expected '<number> <B|KiB|MiB|GiB|TiB>', got {text!r}")
    return int(float(m.group(1)) * UNIT_BYTES[m.group(2)])


def format_bytes(n: int) -> str:
    return f"{n} B"


def _kv(tokens, line, allowed, required=()):
    out = {}
    col = 1
    for tok in tokens:
        col += 1
        if "=" not in tok:
            raise SpecSyntaxError(line, col, f"expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        if key not in allowed:
            raise SpecSyntaxError(line, col, f"unknown key {key!r}")
        out[key] = val
    for key in required:
        if key not in out:
            raise SpecSyntaxError(line, 1, f"missing required key {key!r}")
    return out


def _num(val, line, integer=False):
    try:
        return int(val) if integer else float(val)
    except ValueError:
        raise SpecSyntaxError(line, 1, f"bad number {val!r}")


def parse(text: str):
    """Parse a pipeline spec; returns (PipelineGraph, Budget).

    Syntax errors carry line and column; everything about volumes,
    budgets fitting, and window validity is left to the planner.
    """
    budget_cap = None
    pre = []
    branches = None
    cur_branch = None
    join_stage = None
    post = []
    seen_sink = False
    idx = 0

    def target_list():
        if branches is not None and join_stage is None:
            return cur_branch
        if join_stage is not None:
            return post
        return pre

    def mk_name(op):
        nonlocal idx
        idx += 1
        return f"{op}{idx}"

    lines = text.splitlines()
    for ln, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if seen_sink:
            raise SpecSyntaxError(ln, 1, "content after sink")
        tokens = line.split()
        cmd, args = tokens[0], tokens[1:]
        if cmd == "source":
            if budget_cap is not None:
                raise SpecSyntaxError(ln, 1, "duplicate source line")
            budget_cap = parse_bytes(" ".join(args), ln)
            continue
        if budget_cap is None:
            raise SpecSyntaxError(ln, 1, "pipeline must start with 'source <bytes>'")
        if cmd == "sink":
            seen_sink = True
            continue
        if cmd == "tee":
            if branches is not None:
                raise SpecSyntaxError(ln, 1, "nested tee unsupported")
            branches = []
            cur_branch = []
            branches.append(cur_branch)
            continue
        if cmd == "---":
            if branches is None or join_stage is not None:
                raise SpecSyntaxError(ln, 1, "'---' outside tee block")
            cur_branch = []
            branches.append(cur_branch)
            continue
        if cmd == "join":
            if branches is None or join_stage is not None:
                raise SpecSyntaxError(ln, 1, "'join' without open tee block")
            if args != ["add"]:
                raise SpecSyntaxError(ln, len(cmd) + 2,
                                      f"unknown join function {args!r} (expected add)")
            join_stage = ops.add_join(name=mk_name("add"))
            continue
        stage = _parse_stage(cmd, args, ln, mk_name)
        target_list().append(stage)

    if budget_cap is None:
        raise SpecSyntaxError(1, 1, "missing 'source <bytes>' line")
    if not seen_sink:
        raise SpecSyntaxError(len(lines) or 1, 1, "missing 'sink' line")
    if branches is not None and join_stage is None:
        raise SpecSyntaxError(len(lines) or 1, 1, "tee block never joined")
    if not pre:
        raise SpecSyntaxError(1, 1, "pipeline has no input stage")

    if branches is None:
        graph = _chain_graph(pre)
    else:
        if len(branches) != 2 or any(not b for b in branches):
            raise SpecSyntaxError(1, 1, "tee needs exactly two non-empty branches")
        tee = ops.tee(name=f"tee0")
        from .core import tee_graph
        graph = tee_graph(pre + [tee], branches, join_stage, post)
    return graph, Budget(cap=budget_cap)


def _chain_graph(stages) -> PipelineGraph:
    from .core import chain
    return chain(*stages)


def _parse_stage(cmd, args, ln, mk_name):
    if cmd == "read":
        if len(args) != 1:
            raise SpecSyntaxError(ln, len(cmd) + 2, "read takes one directory")
        return sio.read_stage(args[0], name=mk_name("read"))
    if cmd == "readInChunks":
        if len(args) != 1:
            raise SpecSyntaxError(ln, len(cmd) + 2, "readInChunks takes one directory")
        return sio.read_chunks_stage(args[0], name=mk_name("readInChunks"))
    if cmd == "write":
        if len(args) != 1:
            raise SpecSyntaxError(ln, len(cmd) + 2, "write takes one directory")
        return sio.write_stage(args[0], name=mk_name("write"))
    if cmd == "writeInChunks":
        if not args:
            raise SpecSyntaxError(ln, len(cmd) + 2, "writeInChunks takes a directory")
        kv = _kv(args[1:], ln, {"chunks"})
        chunks = (16, 16, 16)
        if "chunks" in kv:
            chunks = tuple(int(v) for v in kv["chunks"].split(","))
        return sio.write_chunks_stage(args[0], chunks=chunks,
                                      name=mk_name("writeInChunks"))
    if cmd == "threshold":
        kv = _kv(args, ln, {"t", "w"}, required=("t",))
        return ops.threshold(_num(kv["t"], ln), w=int(kv.get("w", 1)),
                             name=mk_name("threshold"))
    if cmd == "square":
        kv = _kv(args, ln, {"w"})
        return ops.square(w=int(kv.get("w", 1)), name=mk_name("square"))
    if cmd == "gaussian":
        kv = _kv(args, ln, {"sigma", "w"}, required=("sigma",))
        w = int(kv["w"]) if "w" in kv else None
        return ops.discrete_gaussian(_num(kv["sigma"], ln), w=w,
                                     name=mk_name("gaussian"))
    if cmd == "median":
        kv = _kv(args, ln, {"r", "w"})
        w = int(kv["w"]) if "w" in kv else None
        return ops.median_filter(int(kv.get("r", 1)), w=w, name=mk_name("median"))
    if cmd in ("erode", "dilate"):
        kv = _kv(args, ln, {"r", "w"})
        w = int(kv["w"]) if "w" in kv else None
        fn = ops.erode if cmd == "erode" else ops.dilate
        return fn(int(kv.get("r", 1)), w=w, name=mk_name(cmd))
    if cmd == "convolve":
        kv = _kv(args, ln, {"kernel", "w"}, required=("kernel",))
        kern = ops.Kernel3D.load(kv["kernel"])
        w = int(kv["w"]) if "w" in kv else None
        stage = ops.convolve(kern, w=w, name=mk_name("convolve"))
        stage.params["file"] = kv["kernel"]
        return stage
    if cmd == "crop":
        if len(args) != 1:
            raise SpecSyntaxError(ln, len(cmd) + 2, "crop takes x0,y0,z0,x1,y1,z1")
        try:
            box = tuple(int(v) for v in args[0].split(","))
        except ValueError:
            raise SpecSyntaxError(ln, len(cmd) + 2, f"bad crop box {args[0]!r}")
        if len(box) != 6:
            raise SpecSyntaxError(ln, len(cmd) + 2, "crop box needs six integers")
        return ops.crop(box, name=mk_name("crop"))
    if cmd == "pad":
        kv = _kv(args, ln, {"x", "y", "z", "mode"})
        amounts = []
        for axis in ("x", "y", "z"):
            spec = kv.get(axis, "0,0")
            parts = spec.split(",")
            if len(parts) != 2:
                raise SpecSyntaxError(ln, 1, f"pad {axis} needs lo,hi")
            amounts.extend(int(p) for p in parts)
        return ops.pad(tuple(amounts), mode=kv.get("mode", "clamp"),
                       name=mk_name("pad"))
    if cmd == "permute":
        if len(args) != 1:
            raise SpecSyntaxError(ln, len(cmd) + 2, "permute takes an axis order")
        if args[0] not in ops.PERMUTE_ORDERS:
            raise SpecSyntaxError(ln, len(cmd) + 2,
                                  f"bad axis order {args[0]!r}")
        return ops.permute_axes(args[0], name=mk_name("permute"))
    if cmd == "histogram":
        kv = _kv(args, ln, {"out", "w", "range"})
        rng = None
        if "range" in kv:
            lo, hi = kv["range"].split(",")
            rng = (float(lo), float(hi))
        return ops.histogram_op(w=int(kv.get("w", 1)), value_range=rng,
                                out=kv.get("out"), name=mk_name("histogram"))
    raise SpecSyntaxError(ln, 1, f"unknown stage {cmd!r}")


# ---------------------------------------------------------------------------
# pretty printing (canonical spec text)
# ---------------------------------------------------------------------------

def _stage_line(st) -> str:
    p = st.params
    k = st.op_kind
    if k == "read":
        return f"read {p['dir']}"
    if k == "read_chunks":
        return f"readInChunks {p['dir']}"
    if k == "write":
        return f"write {p['dir']}"
    if k == "write_chunks":
        return f"writeInChunks {p['dir']} chunks={','.join(str(c) for c in p['chunks'])}"
    if k == "pointwise":
        if p.get("fn_name") == "threshold":
            return f"threshold t={p['t']} w={st.w}"
        if p.get("fn_name") == "square":
            return f"square w={st.w}"
        raise PlanningError(f"stage {st.name!r}: custom pointwise has no spec syntax")
    if k == "gaussian":
        return f"gaussian sigma={p['sigma']} w={st.w}"
    if k == "median":
        r = p["se"].mask.shape[0] // 2
        return f"median r={r} w={st.w}"
    if k in ("erode", "dilate"):
        r = p["se"].mask.shape[0] // 2
        return f"{k} r={r} w={st.w}"
    if k == "convolve":
        return f"convolve kernel={p['file']} w={st.w}"
    if k == "crop":
        return "crop " + ",".join(str(v) for v in p["box"])
    if k == "pad":
        a = p["amounts"]
        return (f"pad x={a[0]},{a[1]} y={a[2]},{a[3]} z={a[4]},{a[5]} "
                f"mode={p['mode']}")
    if k == "permute":
        return f"permute {p['order']}"
    if k == "histogram":
        parts = ["histogram"]
        if p.get("out"):
            parts.append(f"out={p['out']}")
        parts.append(f"w={st.w}")
        if p.get("value_range"):
            lo, hi = p["value_range"]
            parts.append(f"range={lo},{hi}")
        return " ".join(parts)
    raise PlanningError(f"stage {st.name!r} ({k}) has no spec syntax")


def pretty_print(graph: PipelineGraph, budget: Budget) -> str:
    """Canonical spec text; parse(pretty_print(parse(s))) is a fixpoint."""
    lines = [f"source {format_bytes(budget.cap)}"]
    src = graph.source()
    node = src
    while True:
        succs = graph.successors(node.name)
        if node.op_kind == "tee":
            branches = []
            join_name = None
            for head in succs:
                branch = []
                cur = head
                while True:
                    stg = graph.node(cur)
                    if stg.op_kind == "zip_add":
                        join_name = cur
                        break
                    branch.append(stg)
                    nxt = graph.successors(cur)
                    if not nxt:
                        break
                    cur = nxt[0]
                branches.append(branch)
            lines.append("tee")
            for i, br in enumerate(branches):
                if i:
                    lines.append("---")
                lines.extend(_stage_line(s) for s in br)
            lines.append("join add")
            if join_name is None:
                break
            node = graph.node(join_name)
            succs = graph.successors(join_name)
        else:
            lines.append(_stage_line(node))
        if not succs:
            break
        node = graph.node(succs[0])
    lines.append("sink")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_spec(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        raise SystemExit(1)
    return parse(text)


def _tmpdir(args) -> str:
    if getattr(args, "tmpdir", None):
        return args.tmpdir
    return os.environ.get(TMPDIR_ENV, tempfile.gettempdir())


def _kernel_dims_of(graph) -> tuple:
    dims = (1, 1, 1)
    for stg in graph.nodes:
        if stg.op_kind == "convolve":
            kd = stg.params["kernel"].dims
        elif stg.op_kind in ("gaussian",):
            kd = (stg.k_z, stg.k_z, stg.k_z)
        elif stg.op_kind in ("median", "erode", "dilate"):
            kz, ky, kx = stg.params["se"].mask.shape
            kd = (kx, ky, kz)
        else:
            continue
        dims = tuple(max(a, b) for a, b in zip(dims, kd))
    return dims


def _io_report(graph, seed) -> str:
    src = graph.source()
    meta = src.params["meta"]
    if src.op_kind == "read_chunks":
        cx, cy, cz = src.params["chunks"]
    else:
        cx = cy = cz = max(1, min(16, meta.nx, meta.ny, meta.depth))
    grid = ChunkGrid(meta, cx, cy, cz)
    kd = _kernel_dims_of(graph)
    # halo analysis needs odd kernel edges no larger than a chunk
    kd = tuple(k if k <= c else (c if c % 2 else c - 1)
               for k, c in zip(kd, (cx, cy, cz)))
    return layout_report(meta, grid, kd, seed=seed)


def cmd_plan(args) -> int:
    graph, budget = _load_spec(args.spec)
    if args.epsilon is not None:
        budget = Budget(budget.cap, args.epsilon)
    p = make_plan(graph, budget, tmpdir=_tmpdir(args),
                  grow_windows=not args.force_exact_windows,
                  concurrent=args.threads > 1)
    print(p.render())
    if args.io:
        print(_io_report(graph, args.seed))
    return 0 if p.verdict in ("fits", "repaired") else 2


def cmd_run(args) -> int:
    graph, budget = _load_spec(args.spec)
    if args.epsilon is not None:
        budget = Budget(budget.cap, args.epsilon)
    p = make_plan(graph, budget, tmpdir=_tmpdir(args),
                  grow_windows=not args.force_exact_windows,
                  concurrent=args.threads > 1)
    if p.verdict == "infeasible":
        print(p.render())
        return 2
    try:
        report = execute_plan(p, threads=args.threads, tmpdir=_tmpdir(args),
                              seed=args.seed)
    except StageError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except (IOError, OSError) as exc:
        print(f"runtime I/O failure: {exc}", file=sys.stderr)
        return 3
    print(p.render())
    print(report.render())
    if report.leaked_slices:
        print("error: slice leak detected", file=sys.stderr)
        return 3
    return 0


def cmd_explain(args) -> int:
    graph, _ = _load_spec(args.spec)
    if not args.io:
        print("nothing to explain (use --io)", file=sys.stderr)
        return 1
    print(_io_report(graph, args.seed))
    return 0


def cmd_gen(args) -> int:
    dims = tuple(int(v) for v in args.dims.split(","))
    if len(dims) != 3:
        print("error: --dims needs nx,ny,nz", file=sys.stderr)
        return 1
    meta = VolumeMeta(dims[0], dims[1], dims[2], dtype_by_kind(args.dtype))
    vol = sio.synth_volume(meta, args.kind, value=args.value, seed=args.seed)
    chunks = None
    if args.chunks:
        chunks = tuple(int(v) for v in args.chunks.split(","))
    sio.write_volume(args.out, vol, meta.dtype, chunks=chunks)
    print(f"wrote {meta} ({args.kind}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stackstream",
                                 description="memory-budgeted slice streaming")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("spec", help="pipeline spec file")
        p.add_argument("--threads", type=int, default=1,
                       help="1 = reference in-order mode, >1 = pipelined stages")
        p.add_argument("--tmpdir", default=None,
                       help=f"midwrite scratch dir (or ${TMPDIR_ENV})")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epsilon", type=int, default=None,
                       help="per-stage overhead allowance in bytes")
        p.add_argument("--force-exact-windows", action="store_true",
                       help="keep declared window sizes (debugging)")

    pp = sub.add_parser("plan", help="estimate memory and print the ledger")
    common(pp)
    pp.add_argument("--io", action="store_true", help="append the I/O cost table")
    pp.set_defaults(fn=cmd_plan)

    pr = sub.add_parser("run", help="plan, execute and report")
    common(pr)
    pr.set_defaults(fn=cmd_run)

    pe = sub.add_parser("explain", help="I/O layout cost table")
    pe.add_argument("spec")
    pe.add_argument("--io", action="store_true")
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(fn=cmd_explain)

    pg = sub.add_parser("gen", help="generate a synthetic test volume")
    pg.add_argument("--kind", choices=sio.GEN_KINDS, default="random")
    pg.add_argument("--dims", required=True, help="nx,ny,nz")
    pg.add_argument("--dtype", choices=("u8", "u16", "f32"), default="u8")
    pg.add_argument("--value", type=float, default=0)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--chunks", default=None, help="cx,cy,cz for a chunk store")
    pg.add_argument("--out", required=True)
    pg.set_defaults(fn=cmd_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SpecSyntaxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PlanningError as exc:
        print(f"planning error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
