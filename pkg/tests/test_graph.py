import numpy as np
import pytest

from twograph import build_backprop, build_dac, build_gan, build_kickback, build_vae
from twograph.errors import MissingValueError, NonFiniteError, ShapeError, ValidationError
from twograph.graph import (
    CHAIN,
    NATURE,
    OPERATOR,
    ORACLE,
    PLAYER,
    Node,
    PlayerSpec,
    Protocol,
    QueryGraph,
    ResponseGraph,
    derive_chain_rule_response,
    export_dot,
    objective_value,
    query_sweep,
    response_sweep,
    structural_diff,
    topological_order,
    validate,
)
from twograph.verify import central_diff


def tiny_query(objective=("loss", 0)):
    nodes = (
        Node("theta", PLAYER, attrs={"shape": (1, 2)}),
        Node("nature", NATURE, attrs={"ports": [("x", ("B", 2)), ("y", ("B", 1))]}),
        Node("S", OPERATOR, "affine", (("theta", 0), ("nature", 0))),
        Node("loss", OPERATOR, "mse_loss", (("S", 0), ("nature", 1)), {"reduce": "mean"}),
    )
    return QueryGraph(nodes, objective)


def tiny_protocol(query=None, response=None, players=None):
    query = query or tiny_query()
    response = response or derive_chain_rule_response(query)
    players = players or (PlayerSpec("theta", (1, 2)),)
    return Protocol("tiny", query, response, tuple(players))


def tiny_batch():
    x = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 1.0]])
    y = np.array([[1.0], [0.0], [2.0]])
    return {"nature": (x, y)}


# --------------------------------------------------------------------------
# ordering and validation


def test_topological_order_is_stable_and_detects_cycles():
    a = Node("a", PLAYER, attrs={"shape": (1,)})
    b = Node("b", OPERATOR, "identity", (("a", 0),))
    c = Node("c", OPERATOR, "identity", (("a", 0),))
    assert topological_order([c, b, a]) == ["a", "c", "b"]
    loop = [Node("p", OPERATOR, "identity", (("q", 0),)), Node("q", OPERATOR, "identity", (("p", 0),))]
    with pytest.raises(ValueError, match="cycle"):
        topological_order(loop)


def test_valid_protocol_reports_ok():
    assert validate(tiny_protocol()).ok


def test_validate_reports_dangling_input():
    q = tiny_query()
    nodes = q.nodes[:2] + (Node("S", OPERATOR, "affine", (("theta", 0), ("ghost", 0))),) + q.nodes[3:]
    report = validate(tiny_protocol(QueryGraph(nodes, ("loss", 0)), response=ResponseGraph((), {})))
    assert "dangling" in report.kinds()


def test_validate_reports_cycle():
    nodes = (
        Node("theta", PLAYER, attrs={"shape": (1,)}),
        Node("u", OPERATOR, "add", (("theta", 0), ("v", 0))),
        Node("v", OPERATOR, "identity", (("u", 0),)),
    )
    report = validate(tiny_protocol(QueryGraph(nodes, ("v", 0)), ResponseGraph((), {}), (PlayerSpec("theta", (1,)),)))
    assert "cycle" in report.kinds()


def test_validate_reports_shape_mismatch():
    q = tiny_query()
    bad = (Node("theta", PLAYER, attrs={"shape": (1, 3)}),) + q.nodes[1:]
    report = validate(tiny_protocol(QueryGraph(bad, ("loss", 0)), ResponseGraph((), {}), (PlayerSpec("theta", (1, 3)),)))
    assert "shape" in report.kinds()


def test_validate_reports_non_scalar_objective():
    q = tiny_query(objective=("S", 0))
    report = validate(tiny_protocol(q, ResponseGraph((), {"theta": ("missing", 0)})))
    assert "objective" in report.kinds()


def test_validate_reports_unbound_player():
    report = validate(tiny_protocol(response=ResponseGraph((), {})))
    assert "unbound" in report.kinds()


def test_validate_reports_oracle_on_missing_operator():
    r = derive_chain_rule_response(tiny_query())
    r = r.with_changes(add=[Node("oracle[ghost]", ORACLE, attrs={"target": "ghost"})])
    assert "dangling" in validate(tiny_protocol(response=r)).kinds()


def test_validate_reports_player_binding_mismatch():
    report = validate(tiny_protocol(players=(PlayerSpec("other", (1, 2)),)))
    assert "binding" in report.kinds()


def test_validate_reports_duplicate_ids():
    q = tiny_query()
    r = derive_chain_rule_response(q)
    report = validate(tiny_protocol(QueryGraph(q.nodes + (q.nodes[2],), ("loss", 0)), r))
    assert "duplicate" in report.kinds()


def test_require_valid_raises_with_report():
    p = tiny_protocol(response=ResponseGraph((), {}))
    with pytest.raises(ValidationError, match="unbound"):
        p.require_valid()


@pytest.mark.parametrize(
    "protocol",
    [
        build_backprop([2, 3, 1]),
        build_vae([2, 2], [1, 2], 1),
        build_gan([1, 4, 1], [1, 4, 1], 1),
        build_dac([2, 2], [4, 8, 1], [4, 2]),
        build_kickback([4, 4, 1], input_dim=3),
    ],
    ids=lambda p: p.name,
)
def test_builders_produce_valid_protocols(protocol):
    assert protocol.report.ok, str(protocol.report)


# --------------------------------------------------------------------------
# sweeps


def test_query_sweep_values():
    p = tiny_protocol()
    theta = np.array([[1.0, -1.0]])
    batch = tiny_batch()
    trace = query_sweep(p, {"theta": theta}, batch)
    x, y = batch["nature"]
    want = np.mean((x @ theta.T - y) ** 2)
    assert trace.objective(p) == pytest.approx(want)
    assert objective_value(p, {"theta": theta}, batch) == pytest.approx(want)


def test_query_sweep_accepts_ports_by_name():
    p = tiny_protocol()
    x, y = tiny_batch()["nature"]
    a = query_sweep(p, {"theta": np.ones((1, 2))}, {"nature": {"x": x, "y": y}})
    b = query_sweep(p, {"theta": np.ones((1, 2))}, {"nature": (x, y)})
    assert a.objective(p) == b.objective(p)


def test_query_sweep_missing_inputs():
    p = tiny_protocol()
    with pytest.raises(MissingValueError, match="nature"):
        query_sweep(p, {"theta": np.ones((1, 2))}, {})
    with pytest.raises(MissingValueError, match="theta"):
        query_sweep(p, {}, tiny_batch())


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_query_sweep_names_non_finite_node():
    p = tiny_protocol()
    x, y = tiny_batch()["nature"]
    with pytest.raises(NonFiniteError) as info:
        # finite parameters, but the squared error overflows
        query_sweep(p, {"theta": np.array([[1e200, 0.0]])}, {"nature": (x, y)})
    assert info.value.node == "loss"


def test_query_sweep_rejects_wrong_parameter_shape():
    with pytest.raises(ShapeError):
        query_sweep(tiny_protocol(), {"theta": np.ones(2)}, tiny_batch())


def test_response_sweep_matches_finite_differences():
    p = tiny_protocol()
    theta = np.array([[0.3, -0.7]])
    batch = tiny_batch()
    delta = response_sweep(p, query_sweep(p, {"theta": theta}, batch))["theta"]
    num = central_diff(lambda t: objective_value(p, {"theta": t}, batch), theta)
    assert np.allclose(delta, num, atol=1e-8)


def test_sweeps_are_deterministic():
    p = build_backprop([2, 3, 1])
    rng = np.random.default_rng(0)
    params = {s.name: rng.normal(size=s.shape) for s in p.players}
    batch = {"nature": (rng.normal(size=(4, 2)), rng.normal(size=(4, 1)))}
    d1 = response_sweep(p, query_sweep(p, params, batch))
    d2 = response_sweep(p, query_sweep(p, params, batch))
    for k in d1:
        assert np.array_equal(d1[k], d2[k])


# --------------------------------------------------------------------------
# chain-rule derivation


def test_derived_response_has_one_oracle_per_relevant_operator():
    r = derive_chain_rule_response(tiny_query())
    assert sorted(r.oracle_targets()) == ["S", "loss"]
    assert set(r.outputs) == {"theta"}
    assert len(r.of_kind(CHAIN)) == 2


def test_derive_skips_operators_off_the_player_paths():
    q = build_dac([2, 2], [4, 8, 1], [4, 2]).query
    r = derive_chain_rule_response(q)
    # the cloned bootstrap target carries no gradient back to any player
    assert "Q_next" not in r.oracle_targets()


def test_derive_rejects_vector_objective():
    with pytest.raises(ShapeError):
        derive_chain_rule_response(tiny_query(objective=("S", 0)))


def test_structural_diff_of_identical_graphs_is_empty():
    r = derive_chain_rule_response(tiny_query())
    d = structural_diff(r, r)
    assert d == {"added": [], "removed": [], "changed": [], "rewired_outputs": []}


# --------------------------------------------------------------------------
# DOT export


def test_dot_export_backprop_node_count():
    text = export_dot(build_backprop([2, 3, 1]), "query")
    node_lines = [ln for ln in text.splitlines() if "[label=" in ln and "->" not in ln]
    assert len(node_lines) == 8
    assert text.startswith("digraph")
    assert "fillcolor=red" in text and "fillcolor=yellow" in text


def test_dot_export_is_byte_stable():
    a = export_dot(build_gan([1, 4, 1], [1, 4, 1], 1), "response")
    b = export_dot(build_gan([1, 4, 1], [1, 4, 1], 1), "response")
    assert a == b
    assert "fillcolor=green" in a


def test_dot_export_rejects_unknown_graph():
    with pytest.raises(ValueError):
        export_dot(build_backprop([2, 1]), "other")
