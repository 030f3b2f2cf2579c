"""Tests for transporter construction and evidence propagation."""

import numpy as np
import pytest
from scipy import stats

from ctdceg_core.dynamic import DcegModel, unroll
from ctdceg_core.errors import (
    ContradictionError,
    NonIntrinsicEvidenceError,
    StructuralError,
    ZeroSupportError,
)
from ctdceg_core.models import Evidence, StagePartition
from ctdceg_core.propagation import (
    arrival_time_path_posterior,
    build_transporter,
    path_posteriors,
    propagate,
    resolve_edge_ids,
    vertex_depths,
)
from ctdceg_core.staging import compile_ceg, compute_positions


def _at(slice_index: int, *ids: str) -> tuple[str, ...]:
    return tuple(f"{i}@{slice_index}" for i in ids)


LAMBDA = [
    _at(3, "w0.strain_1", "w1.treatment_1", "w3.recovered"),
    _at(3, "w0.strain_1", "w1.treatment_2", "w4.recovered"),
    _at(3, "w0.strain_2", "w1.treatment_1", "w3.recovered"),
    _at(3, "w0.strain_2", "w1.treatment_2", "w4.recovered"),
]


@pytest.fixture
def present_run(example2_injected, present_evidence):
    transporter = build_transporter(example2_injected, present_evidence)
    return propagate(example2_injected, transporter, present_evidence)


class TestTransporter:
    """Pruning the graph to the evidence."""

    def test_template_ids_resolve_to_slice_copies(self, example2_present):
        assert resolve_edge_ids(example2_present, ["w0.strain_1"]) == {"w0.strain_1@3"}

    def test_unknown_edge_is_not_intrinsic(self, example2_present):
        with pytest.raises(NonIntrinsicEvidenceError, match="unknown edges"):
            build_transporter(example2_present, Evidence(retained_edges=frozenset({"w9.x"})))

    def test_present_transporter(self, example2_present, present_evidence):
        transporter = build_transporter(example2_present, present_evidence)
        assert set(transporter.positions) == set(_at(3, "w0", "w1", "w3", "w4"))
        assert len(transporter.edges) == 6
        assert set(transporter.paths()) == set(LAMBDA)

    def test_contradiction(self, example2_present):
        evidence = Evidence(retained_edges=frozenset({"w0.strain_3", "w3.died"}))
        with pytest.raises(ContradictionError):
            build_transporter(example2_present, evidence)

    def test_cyclic_graph_must_be_unrolled(self, example2_template):
        with pytest.raises(StructuralError, match="unroll"):
            build_transporter(example2_template, Evidence())

    def test_retained_paths(self, example2_present):
        evidence = Evidence(retained_paths=(LAMBDA[1],))
        transporter = build_transporter(example2_present, evidence)
        assert list(transporter.paths()) == [LAMBDA[1]]

    def test_retained_paths_must_be_intrinsic(self, example2_present):
        evidence = Evidence(retained_paths=(LAMBDA[0], LAMBDA[3], LAMBDA[1]))
        with pytest.raises(NonIntrinsicEvidenceError, match="induce 4 paths"):
            build_transporter(example2_present, evidence)

    def test_mixed_lengths_with_times(self, example3_graph):
        with pytest.raises(NonIntrinsicEvidenceError):
            build_transporter(example3_graph, Evidence(times=(1.0, 2.0, 5.0, 11.0)))

    def test_depths_are_unique(self, example3_graph, example3_evidence):
        transporter = build_transporter(example3_graph, example3_evidence)
        depths = vertex_depths(transporter)
        assert depths["w4"] == 2
        assert depths["w5"] == 3
        assert depths["w6"] == 3
        assert not transporter.has_edge("w6.serious")


class TestPresentPropagation:
    """Messages of the three-transition present model."""

    def test_h_potentials(self, present_run):
        state, _ = present_run
        expected = {
            "w0.strain_1": 0.01348,
            "w0.strain_2": 0.00255,
            "w1.treatment_1": 0.00443,
            "w1.treatment_2": 0.17603,
            "w3.recovered": 0.17826,
            "w4.recovered": 0.91921,
        }
        for eid, value in expected.items():
            assert state.h_potential[f"{eid}@3"] == pytest.approx(value, abs=1e-5)

    def test_t_potentials(self, present_run):
        state, _ = present_run
        expected = {
            "w0.strain_1": 0.3074,
            "w0.strain_2": 0.23055,
            "w1.treatment_1": 0.3285,
            "w1.treatment_2": 0.44,
            "w3.recovered": 0.73,
            "w4.recovered": 0.80,
        }
        for eid, value in expected.items():
            assert state.t_potential[f"{eid}@3"] == pytest.approx(value, abs=1e-9)

    def test_emphases(self, present_run):
        state, _ = present_run
        assert state.t_emphasis["w3@3"] == pytest.approx(0.73)
        assert state.t_emphasis["w4@3"] == pytest.approx(0.80)
        assert state.t_emphasis["w1@3"] == pytest.approx(0.7685)
        assert state.t_emphasis["w0@3"] == pytest.approx(0.5380, abs=1e-4)
        assert state.h_emphasis["w3@3"] == pytest.approx(0.13013, abs=1e-5)
        assert state.h_emphasis["w4@3"] == pytest.approx(0.73537, abs=1e-5)
        assert state.h_emphasis["w1@3"] == pytest.approx(0.07891, abs=1e-5)
        assert state.h_emphasis["w0@3"] == pytest.approx(0.00473, abs=1e-5)

    def test_operation_count(self, present_run):
        state, _ = present_run
        assert state.ops.total == 32
        assert state.ops.summary() == "ops=32 (8+8+5+5+6)"

    def test_path_posteriors(self, present_run):
        _, revised = present_run
        posteriors = path_posteriors(revised)
        expected = [0.01615, 0.85944, 0.00230, 0.12211]
        for path, value in zip(LAMBDA, expected):
            assert posteriors[path] == pytest.approx(value, abs=1e-4)
        assert sum(posteriors.values()) == pytest.approx(1.0)

    def test_path_posteriors_do_not_need_recovery_densities(
        self, example2_present, present_evidence, present_run
    ):
        transporter = build_transporter(example2_present, present_evidence)
        _, revised = propagate(example2_present, transporter, present_evidence)
        _, injected = present_run
        plain = path_posteriors(revised)
        for path, value in path_posteriors(injected).items():
            assert plain[path] == pytest.approx(value, abs=1e-12)

    def test_untimed_path_posteriors(self, example2_present, present_evidence):
        untimed = present_evidence.without_times()
        transporter = build_transporter(example2_present, untimed)
        _, revised = propagate(example2_present, transporter, untimed)
        posteriors = path_posteriors(revised)
        expected = [0.24426, 0.32717, 0.18320, 0.24537]
        for path, value in zip(LAMBDA, expected):
            assert posteriors[path] == pytest.approx(value, abs=1e-5)

    def test_revised_graph_keeps_holdings(self, present_run):
        _, revised = present_run
        graph = revised.graph()
        edge = graph.edge("w1.treatment_2@3")
        assert float(edge.prob) == pytest.approx(revised.prob("w1.treatment_2@3"))
        assert edge.holding.family.value == "normal"
        assert revised.prob("w3.died@3") == 0.0

    def test_zero_support(self, example2_injected):
        evidence = Evidence(
            retained_edges=frozenset(
                {"w0.strain_1", "w1.treatment_1", "w3.recovered"}
            ),
            times=(2.5, 6.5, 30.0),
        )
        transporter = build_transporter(example2_injected, evidence)
        with pytest.raises(ZeroSupportError):
            propagate(example2_injected, transporter, evidence)


class TestVacuousEvidence:
    """No evidence leaves the prior untouched."""

    def test_revised_equals_prior(self, example2_present):
        transporter = build_transporter(example2_present, Evidence())
        _, revised = propagate(example2_present, transporter, Evidence())
        for e in example2_present.edges:
            assert revised.prob(e.id) == pytest.approx(e.probability)

    def test_prior_paths_sum_to_one(self, example2_present):
        transporter = build_transporter(example2_present, Evidence())
        _, revised = propagate(example2_present, transporter, Evidence())
        posteriors = path_posteriors(revised)
        assert len(posteriors) == 10
        assert sum(posteriors.values()) == pytest.approx(1.0)



class TestMinimizedTransporter:
    """Propagation over a transporter whose isomorphic vertices were merged."""

    @pytest.fixture
    def unstaged_graph(self, make_binary_tree):
        tree = make_binary_tree(2, probs=("0.3", "0.7"))
        return compile_ceg(tree, compute_positions(tree, StagePartition()))

    def test_vacuous_evidence_keeps_priors(self, unstaged_graph):
        transporter = build_transporter(unstaged_graph, Evidence(), minimize=True)
        assert len(transporter.positions) == 2
        _, revised = propagate(unstaged_graph, transporter, Evidence())
        for e in transporter.edges:
            assert revised.prob(e.id) == pytest.approx(e.probability)
        assert sorted(path_posteriors(revised).values()) == pytest.approx(
            [0.09, 0.21, 0.21, 0.49]
        )

    def test_pruned_evidence_matches_unminimized_run(self, unstaged_graph):
        evidence = Evidence(
            retained_edges=frozenset({"w0.a", "w0.b", "w1.a", "w2.a"})
        )
        plain = build_transporter(unstaged_graph, evidence)
        merged = build_transporter(unstaged_graph, evidence, minimize=True)
        assert len(merged.positions) < len(plain.positions)

        _, expected = propagate(unstaged_graph, plain, evidence)
        state, revised = propagate(unstaged_graph, merged, evidence)
        assert sorted(path_posteriors(revised).values()) == pytest.approx(
            sorted(path_posteriors(expected).values())
        )
        assert revised.prob("w0.b") == pytest.approx(0.7)
        assert state.t_potential["w1.b"] == 0.0

class TestMixedModel:
    """Untimed vertices revise like a plain chain event graph."""

    def test_untimed_vertices_ignore_times(self, example3_graph, example3_evidence):
        transporter = build_transporter(example3_graph, example3_evidence)
        _, timed = propagate(example3_graph, transporter, example3_evidence)
        _, plain = propagate(example3_graph, transporter, example3_evidence.without_times())
        for e in transporter.edges:
            if not example3_graph.is_timed(e.source):
                assert timed.prob(e.id) == pytest.approx(plain.prob(e.id), abs=1e-12)

    def test_timed_vertex_uses_holding_density(self, example3_graph, example3_evidence):
        transporter = build_transporter(example3_graph, example3_evidence)
        _, revised = propagate(example3_graph, transporter, example3_evidence)
        complete = 0.75 * stats.truncnorm.pdf(6.0, -4.0, np.inf, loc=6.0, scale=1.5)
        withdrawn = 0.1 * stats.expon.pdf(6.0, scale=3.0)
        assert revised.prob("w5.complete") == pytest.approx(
            complete / (complete + withdrawn)
        )
        assert revised.prob("w4.fall") == pytest.approx(1.0)


class TestArrivalTime:
    """Posterior over routes given only an arrival time."""

    def test_routes_to_recovery_vertex(self, example2_dynamic):
        graph = unroll(example2_dynamic, 1, 0)
        evidence = Evidence(
            retained_edges=frozenset(
                {
                    "w0.strain_1",
                    "w0.strain_2",
                    "w1.treatment_1",
                    "w1.treatment_2",
                    "w3.recovered",
                    "w4.recovered",
                }
            ),
            arrival_query={"vertex": "w3@1", "t_star": 9.0},
        )
        posterior = arrival_time_path_posterior(graph, evidence, dt=0.01, tmax=60.0)
        assert len(posterior) == 2

        def emg(rate):
            return stats.exponnorm.pdf(9.0, 1.0 / rate, loc=7.0, scale=1.0)

        w1, w2 = 4 / 7 * emg(2.0), 3 / 7 * emg(2.8)
        route = _at(1, "w0.strain_1", "w1.treatment_1")
        assert posterior[route] == pytest.approx(w1 / (w1 + w2), abs=1e-3)
        assert sum(posterior.values()) == pytest.approx(1.0)

    def test_symmetric_routes_split_evenly(self, example2_template):
        fast = example2_template.edge("w0.strain_1").holding
        edges = tuple(
            e.model_copy(update={"prob": "0.35", "holding": fast})
            if e.id in {"w0.strain_1", "w0.strain_2"}
            else e
            for e in example2_template.edges
        )
        template = example2_template.model_copy(update={"edges": edges}).rebuilt()
        graph = unroll(DcegModel(template=template), 1, 0)
        evidence = Evidence(arrival_query={"vertex": "w3@1", "t_star": 9.0})
        posterior = arrival_time_path_posterior(graph, evidence, dt=0.01, tmax=60.0)
        assert sorted(posterior.values()) == pytest.approx([0.5, 0.5])

    def test_single_route_has_posterior_one(self, example2_dynamic):
        graph = unroll(example2_dynamic, 1, 0)
        evidence = Evidence(
            retained_edges=frozenset(
                {"w0.strain_1", "w1.treatment_1", "w1.treatment_2", "w3.recovered", "w4.recovered"}
            ),
            arrival_query={"vertex": "w3@1", "t_star": 9.0},
        )
        posterior = arrival_time_path_posterior(graph, evidence, dt=0.01, tmax=60.0)
        assert posterior == {_at(1, "w0.strain_1", "w1.treatment_1"): pytest.approx(1.0)}

    def test_unreachable_vertex(self, example2_dynamic):
        graph = unroll(example2_dynamic, 1, 0)
        evidence = Evidence(
            retained_edges=frozenset({"w0.strain_3", "w2.died"}),
            arrival_query={"vertex": "w3@1", "t_star": 9.0},
        )
        with pytest.raises(ContradictionError):
            arrival_time_path_posterior(graph, evidence)

    def test_unknown_arrival_query(self, example2_present):
        with pytest.raises(ValueError, match="arrival query"):
            arrival_time_path_posterior(example2_present, Evidence())

    def test_example2_template_in_one_slice(self, example2_template):
        graph = unroll(DcegModel(template=example2_template), 1, 0)
        assert len(list(graph.paths())) == 10
