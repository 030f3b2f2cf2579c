"""Tests for unrolling, the past/present/future split and forecasting."""

import numpy as np
import pytest
from scipy import linalg

from ctdceg_core.dynamic import (
    DcegModel,
    ForecastQuery,
    extend_present_with_past,
    forecast,
    revise_future,
    slice_index,
    split,
    template_id,
    unroll,
)
from ctdceg_core.errors import NonIntrinsicEvidenceError, StructuralError, ZeroSupportError
from ctdceg_core.models import SINK, Evidence
from ctdceg_core.propagation import build_transporter, propagate


class TestUnroll:
    """Passage-slice unrolling."""

    def test_slice_ids(self):
        assert template_id("w3.recovered@2") == "w3.recovered"
        assert slice_index("w3@2") == 2
        assert slice_index("w3") is None

    def test_entry_vertex(self, example2_dynamic):
        assert example2_dynamic.entry_vertex == "w0"

    def test_single_slice(self, example2_dynamic):
        graph = unroll(example2_dynamic, 1, 0)
        assert graph.root == "w0@1"
        assert len(graph.positions) == 5
        assert graph.cyclic_edges == ()
        assert graph.edge("w3.recovered@1").target == SINK
        assert len(list(graph.paths())) == 10

    def test_two_slices(self, example2_dynamic):
        graph = unroll(example2_dynamic, 1, 1)
        assert len(graph.positions) == 10
        assert graph.edge("w3.recovered@1").target == "w0@2"
        assert graph.edge("w3.recovered@2").target == SINK
        assert graph.slice_of["w4@2"] == 2
        # five deaths in slice 1 plus five re-entries times ten slice-2 paths
        assert len(list(graph.paths())) == 55

    def test_later_slice_starts_at_entry(self, example2_dynamic):
        graph = unroll(example2_dynamic, 3, 0)
        assert graph.root == "w0@3"
        assert graph.members["w1@3"] == ("w1",)

    def test_bad_window(self, example2_dynamic):
        with pytest.raises(ValueError):
            unroll(example2_dynamic, 0, 1)

    def test_acyclic_template_has_one_slice(self, example3_graph):
        model = DcegModel(template=example3_graph)
        assert unroll(model, 1, 0) is example3_graph
        with pytest.raises(StructuralError):
            unroll(model, 2, 0)


class TestReviseFuture:
    """Future semi-Markov model."""

    def test_parallel_edges_become_mixture(self, example2_dynamic):
        smp = revise_future(example2_dynamic, Evidence())
        (tr,) = [t for t in smp.out_transitions("w0") if t.target == "w1"]
        assert tr.prob == pytest.approx(0.7)
        assert tr.holding.weights == pytest.approx([4 / 7, 3 / 7])
        assert set(tr.edges) == {"w0.strain_1", "w0.strain_2"}
        assert smp.absorbing_states == (SINK,)

    def test_exclusion_renormalises(self, example2_dynamic):
        smp = revise_future(
            example2_dynamic, Evidence(future_excluded=frozenset({"w0.strain_3"}))
        )
        assert "w2" not in smp.states
        (tr,) = smp.out_transitions("w0")
        assert tr.prob == pytest.approx(1.0)
        assert smp.graph.edge("w0.strain_1").probability == pytest.approx(4 / 7)
        assert smp.graph.edge("w0.strain_2").probability == pytest.approx(3 / 7)

    def test_matrix_rows_are_stochastic(self, example2_dynamic):
        P = revise_future(example2_dynamic, Evidence()).matrix()
        assert P.sum(axis=1) == pytest.approx(np.ones(len(P)))

    def test_excluding_every_exit(self, example2_dynamic):
        evidence = Evidence(future_excluded=frozenset({"w2.recovered", "w2.died"}))
        with pytest.raises(StructuralError, match="w2"):
            revise_future(example2_dynamic, evidence)

    def test_unknown_exclusion(self, example2_dynamic):
        with pytest.raises(NonIntrinsicEvidenceError):
            revise_future(example2_dynamic, Evidence(future_excluded=frozenset({"w9.x"})))


class TestSplit:
    """Past, present and future around the evidence window."""

    def test_split_at_third_slice(self, example2_dynamic, present_evidence):
        result = split(example2_dynamic, present_evidence, 3, 0)
        assert len(list(result.past.paths())) == 55
        assert len(list(result.present.paths())) == 10
        assert len(list(result.transporter.paths())) == 4
        assert result.state.ops.total == 32
        assert len(result.future.states) == 6

    def test_first_slice_has_no_past(self, example2_dynamic):
        assert split(example2_dynamic, Evidence(), 1, 0).past is None


class TestExtendPresent:
    """Grafting past evidence in front of the present."""

    @pytest.fixture
    def present_split(self, example2_dynamic, present_evidence):
        return split(example2_dynamic, present_evidence, 3, 0)

    def test_same_slice_is_noop(self, present_split):
        assert extend_present_with_past(present_split, Evidence(), 3) is present_split

    def test_matches_full_propagation(self, present_split):
        past = Evidence(
            retained_edges=frozenset({"w0.strain_3@2", "w2.recovered@2"}),
            times=(1.0, 2.5),
        )
        extended = extend_present_with_past(present_split, past, 2)
        assert extended.k == 2
        assert extended.l == 1
        assert extended.evidence.holding_times() == pytest.approx(
            [1.0, 1.5, 2.5, 4.0, 4.5]
        )

        window = extended.present
        transporter = build_transporter(window, extended.evidence)
        full_state, full = propagate(window, transporter, extended.evidence)
        for eid, p in full.revised_probs.items():
            assert extended.revised.prob(eid) == pytest.approx(p, abs=1e-12)
        for v, phi in full_state.h_emphasis.items():
            assert extended.state.h_emphasis[v] == pytest.approx(phi, abs=1e-12)
        assert extended.state.ops.total < full_state.ops.total

    def test_present_revision_unchanged(self, present_split):
        past = Evidence(
            retained_edges=frozenset({"w0.strain_3@2", "w2.recovered@2"}),
            times=(1.0, 2.5),
        )
        extended = extend_present_with_past(present_split, past, 2)
        for eid, p in present_split.revised.revised_probs.items():
            assert extended.revised.prob(eid) == pytest.approx(p, abs=1e-12)

    def test_untimed_past_keeps_present_holds(self, present_split):
        past = Evidence(retained_edges=frozenset({"w0.strain_3@2", "w2.recovered@2"}))
        extended = extend_present_with_past(present_split, past, 2)
        assert extended.evidence.holding_times() == [None, None, 2.5, 4.0, 4.5]
        assert extended.state.holding_time["w1@3"] == pytest.approx(4.0)

    def test_past_times_need_present_times(self, example2_dynamic):
        untimed = split(
            example2_dynamic,
            Evidence(retained_edges=frozenset({"w0.strain_3", "w2.died"})),
            3,
            0,
        )
        past = Evidence(
            retained_edges=frozenset({"w0.strain_3@2", "w2.recovered@2"}),
            times=(1.0, 2.5),
        )
        with pytest.raises(NonIntrinsicEvidenceError):
            extend_present_with_past(untimed, past, 2)

    def test_impossible_past_has_zero_support(self, present_split):
        past = Evidence(retained_edges=frozenset({"w0.strain_3@2", "w3.died@2"}))
        with pytest.raises(ZeroSupportError, match="slices 2..2"):
            extend_present_with_past(present_split, past, 2)


def _expected_absorption_time(smp) -> float:
    """Mean time to the sink from the initial state, solved exactly."""
    transient = [s for s in smp.states if s not in smp.absorbing_states]
    idx = {s: i for i, s in enumerate(transient)}
    A = np.eye(len(transient))
    c = np.zeros(len(transient))
    for tr in smp.transitions:
        i = idx[tr.source]
        c[i] += tr.prob * tr.holding.mean()
        if tr.target in idx:
            A[i, idx[tr.target]] -= tr.prob
    return float(linalg.solve(A, c)[idx[smp.initial]])


class TestForecast:
    """Queries on the future model."""

    @pytest.fixture
    def smp(self, example2_dynamic):
        return revise_future(example2_dynamic, Evidence())

    def test_two_steps(self, smp):
        result = forecast(smp, ForecastQuery(kind="n_step", steps=2))
        dist = result.distribution
        assert dist["w3"] == pytest.approx(0.315)
        assert dist["w4"] == pytest.approx(0.385)
        assert dist["w0"] == pytest.approx(0.27)
        assert dist[SINK] == pytest.approx(0.03)
        assert sum(dist.values()) == pytest.approx(1.0)

    def test_death_is_certain(self, smp):
        result = forecast(smp, ForecastQuery(kind="absorption", target=SINK))
        assert result.probability == pytest.approx(1.0)

    def test_reaching_severe_treatment(self, smp):
        result = forecast(smp, ForecastQuery(kind="absorption", target="w3"))
        assert result.probability == pytest.approx(0.315 / 0.422)

    def test_unreachable_target_warns(self, smp):
        result = forecast(smp, ForecastQuery(kind="absorption", start=SINK, target="w0"))
        assert result.probability == 0.0
        assert "unreachable" in result.warning

    def test_unknown_state(self, smp):
        with pytest.raises(StructuralError):
            forecast(smp, ForecastQuery(kind="n_step", start="w9"))

    @pytest.mark.slow
    def test_first_passage_mean(self, smp):
        result = forecast(
            smp, ForecastQuery(kind="first_passage", target=SINK), samples=20_000, seed=11
        )
        assert result.probability == pytest.approx(1.0)
        exact = _expected_absorption_time(smp)
        assert abs(result.mean - exact) < 4 * result.std_error
        q = result.quantiles
        assert q["q05"] <= q["q50"] <= q["q95"]

    def test_first_passage_is_reproducible(self, smp):
        query = ForecastQuery(kind="first_passage", target=SINK)
        a = forecast(smp, query, samples=500, seed=5, workers=2)
        b = forecast(smp, query, samples=500, seed=5, workers=2)
        assert a.mean == b.mean
        assert a.quantiles == b.quantiles
