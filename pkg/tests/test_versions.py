"""Write-version bookkeeping: the reachable-version sets that decide what the
reverse pass may need forwarded."""

import gradflow.examples as examples
from gradflow import analyze_versions


def test_straight_line_chain_single_candidates():
    vi = analyze_versions(examples.build("scaled_product_chain"))
    for name in ("A0", "A1", "A2", "sin0", "O"):
        assert vi.n_versions[name] == 1
    assert vi.n_versions["C"] == 0  # inputs are version 0, never written
    assert not any(vi.write_loops.values())
    for rs in vi.reads.values():
        assert len(rs.candidates) == 1
        assert not rs.branch_merged


def test_overwrite_creates_second_version_and_kills_first():
    vi = analyze_versions(examples.build("overwrite_chain"))
    assert vi.n_versions["B"] == 2
    killed_in_second = [
        rs for (state, _), rs in vi.killed.items()
        if state == "second" and rs.candidates
    ]
    assert len(killed_in_second) == 1
    (cand,) = killed_in_second[0].candidates
    assert cand.version == 1  # the overwrite buries version 1 of B


def test_branch_arms_merge():
    vi = analyze_versions(examples.build("branchy_scale"))
    assert vi.n_versions["Y"] == 2  # one version per arm
    merged = [rs for rs in vi.reads.values() if rs.branch_merged]
    assert len(merged) == 1
    assert sorted(c.version for c in merged[0].candidates) == [1, 2]


def test_loop_carried_writes_are_tagged():
    vi = analyze_versions(examples.build("two_array_pingpong"))
    assert vi.write_loops[("A", 1)] == ("swap",)
    assert vi.write_loops[("B", 1)] == ("swap",)
    # reading A inside the body may see last iteration's write or the input
    in_loop = [
        rs for (state, _), rs in vi.reads.items()
        if state == "step" and len(rs.candidates) == 2
    ]
    assert in_loop, "expected a two-candidate read inside the loop body"
    versions = sorted(c.version for c in in_loop[0].candidates)
    assert versions == [0, 1]
    directives = {c.version: c.directives for c in in_loop[0].candidates}
    assert directives[1] == (("swap", "prev"),)
    assert directives[0] == ()


def test_deep_stencil_nest():
    vi = analyze_versions(examples.build("seidel_stencil"))
    assert vi.write_loops[("A", 1)] == ("time", "rows", "cols")
    stencil_reads = [
        rs for (state, _), rs in vi.reads.items()
        if state == "point" and len(rs.candidates) > 1
    ]
    assert len(stencil_reads) == 1
    cands = stencil_reads[0].candidates
    # same-sweep neighbours, previous-row, previous-sweep, and the input
    assert len(cands) == 4
    assert cands[-1].version == 0
    # after the nest, the reduction reads the final iteration's write
    collect = [rs for (state, _), rs in vi.reads.items() if state == "collect"]
    assert any(
        c.version == 1 and all(d == "last" for _, d in c.directives)
        for rs in collect for c in rs.candidates
    )
