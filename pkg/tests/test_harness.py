import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from citilab.errors import ContractError
from citilab.harness import (
    ERROR_TYPES,
    EvalReport,
    ExperimentParams,
    ExperimentSpec,
    evaluate_general,
    evaluate_model,
    evaluate_toolcalls,
    export_router_traces,
    gate0_separation,
    rouge_l,
    run_experiment,
)
from citilab.model import ComponentId, ModelConfig, build_model, save_checkpoint
from citilab.molora import attach_adapters
from citilab.tasks import GENERAL_TASKS, VOCAB, TaskKind, generate_dataset, parse_tool_call, render_tool_call

from oracles import brute_lcs, brute_rouge

CFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(VOCAB), max_seq_len=48)


def test_rouge_examples():
    assert rouge_l("abcde", "ace") == pytest.approx(0.75)
    assert brute_lcs("abcde", "ace") == 3
    assert rouge_l([1, 2, 3], [1, 2, 3]) == 1.0
    assert rouge_l([1, 2], [3, 4]) == 0.0
    assert rouge_l([], [3, 4]) == 0.0
    with pytest.raises(ContractError):
        rouge_l([1], [])


tokens = st.lists(st.integers(0, 4), max_size=9)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens.filter(bool))
def test_rouge_matches_brute_force_and_is_bounded(cand, ref):
    assert rouge_l(cand, ref) == brute_rouge(cand, ref)
    assert 0 <= rouge_l(cand, ref) <= 1
    if cand:
        assert rouge_l(cand, ref) == pytest.approx(rouge_l(ref, cand), abs=1e-15)


def stub(mapping):
    """Decoder that answers each prompt from a lookup table."""
    return lambda model, prompts, max_new: [list(mapping[tuple(p)]) for p in prompts]


@pytest.fixture(scope="module")
def tool_set():
    return generate_dataset(TaskKind.TOOLCALL, 8, 0)


def gold_ids(ex):
    return list(ex.target[:-1])


def test_echoing_gold_gives_full_correctness(tool_set):
    res = evaluate_toolcalls(None, tool_set, stub({ex.prompt: gold_ids(ex) for ex in tool_set}))
    assert res.correctness == 1.0 and res.rouge_l == 1.0
    assert sum(res.taxonomy.values()) == 0


def test_letters_only_output_is_no_api_call(tool_set):
    res = evaluate_toolcalls(None, tool_set, stub({ex.prompt: VOCAB.encode("abc") for ex in tool_set}))
    assert res.correctness == 0 and res.taxonomy["NO_API_CALL"] == len(tool_set)


def test_one_of_each_failure_type(tool_set):
    outputs = {}
    for ex, kind in zip(tool_set[:4], ERROR_TYPES):
        call = parse_tool_call(gold_ids(ex))
        if kind == "NO_API_CALL":
            outputs[ex.prompt] = VOCAB.encode("xyz")
        elif kind == "API_NAME_MISMATCH":
            outputs[ex.prompt] = render_tool_call(type(call)(call.name + "q", call.args))
        elif kind == "INPUT_MISMATCH":
            k, v = call.args[0]
            bad = ((k, "0" if v != "0" else "1"),) + call.args[1:]
            outputs[ex.prompt] = render_tool_call(type(call)(call.name, bad))
        else:
            outputs[ex.prompt] = gold_ids(ex) + VOCAB.encode("ab")
    res = evaluate_toolcalls(None, tool_set[:4], stub(outputs))
    assert tuple(res.taxonomy[t] for t in ERROR_TYPES) == (1, 1, 1, 1)
    assert res.correctness == 0


def test_argument_order_is_insignificant(tool_set):
    ex = next(e for e in tool_set if len(parse_tool_call(gold_ids(e)).args) > 1)
    call = parse_tool_call(gold_ids(ex))
    swapped = render_tool_call(type(call)(call.name, call.args[::-1]))
    assert evaluate_toolcalls(None, [ex], stub({ex.prompt: swapped})).correctness == 1.0


def test_toolcall_eval_preconditions(tool_set):
    with pytest.raises(ContractError):
        evaluate_toolcalls(None, [], stub({}))
    with pytest.raises(ContractError):
        evaluate_toolcalls(None, generate_dataset(TaskKind.COPY, 2, 0), stub({}))


def test_oracle_decoder_gives_perfect_general_accuracy():
    tests = {k: generate_dataset(k, 10, 1) for k in GENERAL_TASKS}
    dec = stub({ex.prompt: gold_ids(ex) for v in tests.values() for ex in v})
    assert set(evaluate_general(None, tests, dec).values()) == {1.0}
    with pytest.raises(ContractError):
        evaluate_general(None, {TaskKind.COPY: []}, dec)


def test_fresh_model_scores_near_zero_on_arith():
    assert evaluate_general(build_model(CFG), {TaskKind.ARITH: generate_dataset(TaskKind.ARITH, 30, 0)})["ARITH"] <= 0.1


def test_eval_report_invariants_and_retention():
    tests = {k: generate_dataset(k, 6, 2) for k in TaskKind}
    dec = stub({ex.prompt: gold_ids(ex) for v in tests.values() for ex in v})
    rep = evaluate_model(build_model(CFG), tests, {k.value: 0.5 for k in GENERAL_TASKS}, {"seed": 2}, dec)
    assert rep.retention == {k.value: 0.5 for k in GENERAL_TASKS}
    assert rep.metadata["seed"] == 2 and len(rep.metadata["checkpoint"]) == 16
    with pytest.raises(ContractError):
        EvalReport({"ARITH": 1.5}, 1.0, 1.0, {t: 0 for t in ERROR_TYPES}, 4)
    with pytest.raises(ContractError):
        EvalReport({"ARITH": 1.0}, 0.5, 1.0, {t: 0 for t in ERROR_TYPES}, 4)


def test_router_traces_shape_and_gate_sums(tmp_path):
    model = build_model(CFG)
    ids = [ComponentId(0, "attn_q"), ComponentId(1, "ffn_up")]
    attach_adapters(model, ids)
    for ad in model.adapters.values():
        ad.router.weight.data[...] = np.random.default_rng(0).standard_normal(ad.router.weight.shape)
    inputs = generate_dataset(TaskKind.TOOLCALL, 2, 0) + generate_dataset(TaskKind.COPY, 2, 0)
    rows = export_router_traces(model, inputs, path=tmp_path / "r.csv")
    for n, ex in enumerate(inputs):
        assert sum(r["input"] == n for r in rows) == (len(ex.prompt) + len(ex.target) - 1) * len(ids)
    assert all(abs(sum(r["gate"]) - 1) < 1e-6 for r in rows)
    assert len(list(csv.reader(open(tmp_path / "r.csv")))) == len(rows) + 1
    g_tool, g_other = gate0_separation(rows)
    assert 0 <= g_tool <= 1 and 0 <= g_other <= 1
    with pytest.raises(ContractError):
        export_router_traces(build_model(CFG), inputs)


def test_experiment_spec_validation(tmp_path):
    with pytest.raises(ContractError):
        ExperimentSpec("jaccard", {"vanilla": str(tmp_path / "none")}).validate()
    with pytest.raises(ContractError):
        ExperimentSpec("unknown", {}).validate()
    with pytest.raises(ContractError):
        ExperimentSpec("icc", {"vanilla": str(tmp_path)}).validate()
    with pytest.raises(ContractError):
        ExperimentParams.from_mapping({"bogus": 1})


def test_jaccard_experiment_writes_reports(tmp_path):
    save_checkpoint(build_model(CFG), tmp_path / "v")
    params = ExperimentParams(tool_train=40, general_train=20, test_per_task=4, importance_samples=16)
    paths = run_experiment(ExperimentSpec("jaccard", {"vanilla": str(tmp_path / "v")}, params), tmp_path / "out")
    rows = list(csv.DictReader(open(paths[0])))
    assert {r["group"] for r in rows} == {"high", "moderate", "low"}
    assert all(0 <= float(r["jaccard"]) <= 1 for r in rows)
    again = run_experiment(ExperimentSpec("jaccard", {"vanilla": str(tmp_path / "v")}, params), tmp_path / "out2")
    assert again[0].read_bytes() == paths[0].read_bytes()
