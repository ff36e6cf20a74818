import inspect

import numpy as np
import pytest

from modcontrib import (
    AnalysisError,
    ArrayDataset,
    BuiltinModel,
    CallableModel,
    KahanSum,
    ModalitySpec,
    NondeterministicModelError,
    build_planners,
    detect_collapse,
    modality_contribution,
    output_distance,
    parse_fill,
    patch_importance,
    per_class_scores,
    per_sample_patch_importance,
    plan_tabular,
    plan_text,
    reduce_class_scores,
    run_analysis,
    summarize,
    weighted_patch_importance,
)

ZERO = parse_fill("zero")


def tabular_dataset(samples, names=None):
    names = names or sorted(samples[0])
    specs = [ModalitySpec(name=n, kind="tabular",
                          shape=[len(np.ravel(samples[0][n]))])
             for n in names]
    data = [{n: np.asarray(s[n], dtype=np.float32) for n in names}
            for s in samples]
    return ArrayDataset(specs, data)


def analyze(dataset, model, **kwargs):
    plans = build_planners(dataset.modalities)
    fills = kwargs.pop("fills", [ZERO] * len(plans))
    return run_analysis(dataset, model, plans, fills, **kwargs)


def counting(model):
    counter = {"n": 0}

    def fn(inputs):
        counter["n"] += 1
        return model.predict(inputs)

    return CallableModel(fn, identity=model.identity), counter


def test_kahan_recovers_tiny_increments():
    acc = KahanSum(())
    acc.add(1.0)
    for _ in range(10000):
        acc.add(1e-16)
    naive = 1.0
    for _ in range(10000):
        naive += 1e-16
    assert naive == 1.0
    assert abs(float(acc.total) - (1.0 + 1e-12)) < 1e-15


def test_kahan_is_elementwise():
    acc = KahanSum(3)
    acc.add([1.0, 2.0, 3.0])
    acc.add([0.5, 0.5, 0.5])
    assert acc.total.tolist() == [1.5, 2.5, 3.5]


def test_output_distance():
    d = output_distance([1.0, 2.0], [3.0, -1.0])
    assert d.tolist() == [2.0, 3.0]
    with pytest.raises(AnalysisError, match="patch 2"):
        output_distance([1.0], [1.0, 2.0], context="patch 2")


def test_hand_example_exact():
    dataset = tabular_dataset([{"x1": [1.0, 2.0], "x2": [3.0]}])
    model = BuiltinModel({"kind": "linear",
                          "weights": {"x1": [1.0, 1.0], "x2": [1.0]}})
    table = analyze(dataset, model)
    assert table.model_calls == 4
    assert [d.tolist() for d in table.per_modality] == [[3.0], [3.0]]
    m, degenerate = modality_contribution(table)
    assert m.tolist() == [0.5, 0.5]
    assert not degenerate
    mp, flat = patch_importance(table, 0)
    assert mp.tolist() == [1.0 / 3.0, 2.0 / 3.0]
    assert not flat
    assert patch_importance(table, 1)[0].tolist() == [1.0]
    table.check()


def test_call_count_formula():
    rng = np.random.default_rng(7)
    samples = [{"a": rng.normal(size=4), "b": rng.normal(size=2)}
               for _ in range(3)]
    dataset = tabular_dataset(samples)
    model, counter = counting(BuiltinModel(
        {"kind": "linear",
         "weights": {"a": rng.normal(size=4).tolist(),
                     "b": rng.normal(size=2).tolist()}}))
    table = analyze(dataset, model)
    expected = 3 * (1 + 4 + 2)
    assert counter["n"] == expected
    assert table.model_calls == expected


def test_ignored_modality_scores_exactly_zero():
    dataset = tabular_dataset([{"a": [1.0, 2.0], "b": [5.0]},
                               {"a": [3.0, 4.0], "b": [6.0]}])
    model = BuiltinModel({"kind": "single", "modality": "a",
                          "inner": {"kind": "linear",
                                    "weights": {"a": [1.0, 2.0]}}})
    table = analyze(dataset, model)
    m, degenerate = modality_contribution(table)
    assert m[1] == 0.0
    assert m[0] == 1.0
    assert not degenerate
    assert detect_collapse(m) == [1]


def test_unresponsive_model_degenerates_to_uniform():
    dataset = tabular_dataset([{"a": [1.0], "b": [2.0, 3.0]}])
    table = analyze(dataset, BuiltinModel({"kind": "constant",
                                           "output": [0.5, 0.5]}))
    m, degenerate = modality_contribution(table)
    assert degenerate
    assert m.tolist() == [0.5, 0.5]
    mp, flat = patch_importance(table, 1)
    assert flat
    assert mp.tolist() == [0.5, 0.5]


def test_zero_modality_gets_uniform_patch_importance():
    dataset = tabular_dataset([{"a": [1.0, 1.0], "b": [1.0, 1.0, 1.0]}])
    model = BuiltinModel({"kind": "single", "modality": "a",
                          "inner": {"kind": "linear",
                                    "weights": {"a": [2.0, 3.0]}}})
    table = analyze(dataset, model)
    mp, flat = patch_importance(table, 1)
    assert flat
    assert np.allclose(mp, [1 / 3, 1 / 3, 1 / 3])
    mp0, flat0 = patch_importance(table, 0)
    assert not flat0
    assert mp0.tolist() == [0.4, 0.6]


def test_weighted_importance_sums_to_contribution():
    rng = np.random.default_rng(3)
    samples = [{"a": rng.normal(size=5), "b": rng.normal(size=3)}
               for _ in range(4)]
    dataset = tabular_dataset(samples)
    model = BuiltinModel(
        {"kind": "linear",
         "weights": {"a": rng.normal(size=(2, 5)).tolist(),
                     "b": rng.normal(size=(2, 3)).tolist()}})
    table = analyze(dataset, model)
    m, _ = modality_contribution(table)
    grand = 0.0
    for i in range(2):
        mp, _ = patch_importance(table, i)
        weighted = weighted_patch_importance(mp, m[i])
        assert abs(weighted.sum() - m[i]) < 1e-12
        grand += weighted.sum()
    assert abs(grand - 1.0) < 1e-9


def test_class_reductions():
    matrix = np.array([[1.0, 3.0], [4.0, 2.0], [5.0, 5.0]])
    mean, none = reduce_class_scores(matrix, "mean")
    assert mean.tolist() == [2.0, 3.0, 5.0]
    assert none is None
    top, classes = reduce_class_scores(matrix, "max")
    assert top.tolist() == [3.0, 4.0, 5.0]
    # tie in the last row resolves to the lowest class index
    assert classes.tolist() == [1, 0, 0]
    with pytest.raises(AnalysisError, match="mean or max"):
        reduce_class_scores(matrix, "median")


def test_per_class_scores_from_table():
    dataset = tabular_dataset([{"a": [1.0, 2.0]}])
    model = BuiltinModel({"kind": "linear",
                          "weights": {"a": [[1.0, 0.0], [0.0, 2.0]]}})
    table = analyze(dataset, model)
    # occluding a[0] moves class 0 by 1; a[1] moves class 1 by 4
    mean, _ = per_class_scores(table, 0, "mean")
    assert mean.tolist() == [0.5, 2.0]
    top, classes = per_class_scores(table, 0, "max")
    assert top.tolist() == [1.0, 4.0]
    assert classes.tolist() == [0, 1]


def test_collapse_threshold_is_inclusive():
    assert detect_collapse([0.02, 0.5, 0.48], threshold=0.02) == [0]
    assert detect_collapse([0.020000001, 0.98], threshold=0.02) == []
    assert detect_collapse([0.0, 1.0]) == [0]


def test_sample_order_does_not_matter():
    rng = np.random.default_rng(11)
    samples = [{"a": rng.normal(size=6), "b": rng.normal(size=3)}
               for _ in range(5)]
    model = BuiltinModel(
        {"kind": "linear",
         "weights": {"a": rng.normal(size=(3, 6)).tolist(),
                     "b": rng.normal(size=(3, 3)).tolist()}})
    forward = analyze(tabular_dataset(samples), model)
    backward = analyze(tabular_dataset(samples[::-1]), model)
    m_fwd, _ = modality_contribution(forward)
    m_bwd, _ = modality_contribution(backward)
    assert np.abs(m_fwd - m_bwd).max() <= 1e-9
    for i in range(2):
        gap = np.abs(patch_importance(forward, i)[0]
                     - patch_importance(backward, i)[0]).max()
        assert gap <= 1e-9


def test_output_scaling_does_not_change_contributions():
    rng = np.random.default_rng(13)
    samples = [{"a": rng.normal(size=4), "b": rng.normal(size=4)}
               for _ in range(3)]
    dataset = tabular_dataset(samples)
    base = BuiltinModel(
        {"kind": "linear",
         "weights": {"a": rng.normal(size=4).tolist(),
                     "b": rng.normal(size=4).tolist()}})
    scaled = CallableModel(lambda inputs: 3.0 * base.predict(inputs))
    m_base, _ = modality_contribution(analyze(dataset, base))
    m_scaled, _ = modality_contribution(analyze(dataset, scaled))
    assert np.abs(m_base - m_scaled).max() < 1e-9


def text_dataset():
    specs = [ModalitySpec(name="note", kind="text", fill="token:[MASK]"),
             ModalitySpec(name="vitals", kind="tabular", shape=[2])]
    samples = [
        {"note": ["no", "acute", "disease"],
         "vitals": np.array([1.0, 2.0], dtype=np.float32)},
        {"note": ["all", "clear"],
         "vitals": np.array([3.0, 4.0], dtype=np.float32)},
    ]
    return ArrayDataset(specs, samples)


def token_model():
    def fn(inputs):
        score = sum(len(t) for t in inputs["note"] if t != "[MASK]")
        return [score + float(inputs["vitals"].sum())]

    return CallableModel(fn, identity="token-scorer")


def test_text_modality_has_per_sample_patches():
    dataset = text_dataset()
    table = analyze(dataset, token_model(),
                    fills=[parse_fill("token:[MASK]"), ZERO])
    assert table.per_patch[0] is None
    assert table.per_patch[1] is not None
    # h follows each sample's token count
    shapes = [m.shape for m in table.per_sample_patch[0]]
    assert shapes == [(3, 1), (2, 1)]
    assert table.tokens[0] == [["no", "acute", "disease"], ["all", "clear"]]
    assert table.model_calls == 2 * 1 + (3 + 2) + 2 * 2
    pairs = per_sample_patch_importance(table, 0)
    for mp, flat in pairs:
        assert not flat
        assert abs(mp.sum() - 1.0) <= 1e-9
    # token removal distances are the token lengths
    assert np.allclose(pairs[0][0], np.array([2, 5, 7]) / 14)
    with pytest.raises(AnalysisError, match="per-sample"):
        patch_importance(table, 0)
    with pytest.raises(AnalysisError, match="fixed"):
        per_sample_patch_importance(table, 1)
    table.check()


def test_summarize_covers_text_and_fixed():
    dataset = text_dataset()
    table = analyze(dataset, token_model(),
                    fills=[parse_fill("token:[MASK]"), ZERO])
    report = summarize(table)
    assert abs(report.contributions.sum() - 1.0) <= 1e-9
    assert report.patch_importance[0] is None
    assert report.patch_importance[1] is not None
    assert len(report.per_sample_importance[0]) == 2
    # weighted importance counts each text modality's contribution once
    total = sum(w.sum() for w in report.weighted_importance if w is not None)
    total += sum(report.contributions[i] for i in report.per_sample_importance)
    assert abs(total - 1.0) <= 1e-9


def test_analysis_takes_no_labels():
    params = inspect.signature(run_analysis).parameters
    for banned in ("labels", "label", "targets", "target", "y", "metric",
                   "score_fn"):
        assert banned not in params


def test_post_transform_changes_distances():
    dataset = tabular_dataset([{"a": [1.0, -2.0, 0.5]}])
    weights = {"a": [[1.0, 0.2, -0.3], [0.4, -0.5, 0.6]]}
    plain = BuiltinModel({"kind": "linear", "weights": weights})
    soft = BuiltinModel({"kind": "softmax_linear", "weights": weights})
    raw = analyze(dataset, plain)
    transformed = analyze(dataset, plain, post_transform="softmax")
    builtin_soft = analyze(dataset, soft)
    assert not np.allclose(raw.per_modality[0], transformed.per_modality[0])
    assert np.allclose(transformed.per_modality[0],
                       builtin_soft.per_modality[0], atol=1e-12)
    sig = analyze(dataset, plain, post_transform="sigmoid")
    assert float(sig.per_modality[0].max()) < 1.0
    with pytest.raises(AnalysisError, match="post transform"):
        analyze(dataset, plain, post_transform="probit")


def test_recheck_accepts_deterministic_models():
    dataset = tabular_dataset([{"a": [1.0, 2.0]}, {"a": [3.0, 4.0]}])
    model, counter = counting(BuiltinModel(
        {"kind": "linear", "weights": {"a": [1.0, 1.0]}}))
    table = analyze(dataset, model, recheck=True)
    # one extra baseline call per sample
    assert counter["n"] == 2 * (1 + 2) + 2
    assert table.model_calls == counter["n"]


def test_recheck_flags_flaky_models():
    state = {"n": 0}

    def fn(inputs):
        state["n"] += 1
        return [float(inputs["a"].sum()) + (1e-3 if state["n"] > 2 else 0.0)]

    dataset = tabular_dataset([{"a": [1.0, 2.0]}])
    with pytest.raises(NondeterministicModelError, match="drifted"):
        analyze(dataset, CallableModel(fn), recheck=True)


def test_parallel_run_is_bit_identical():
    rng = np.random.default_rng(21)
    samples = [{"a": rng.normal(size=8), "b": rng.normal(size=4)}
               for _ in range(3)]
    model = BuiltinModel(
        {"kind": "linear",
         "weights": {"a": rng.normal(size=(2, 8)).tolist(),
                     "b": rng.normal(size=(2, 4)).tolist()}})
    serial = analyze(tabular_dataset(samples), model, jobs=1)
    parallel = analyze(tabular_dataset(samples), model, jobs=4)
    for i in range(2):
        assert np.array_equal(serial.per_modality[i],
                              parallel.per_modality[i])
        assert np.array_equal(serial.per_patch[i], parallel.per_patch[i])
    assert serial.model_calls == parallel.model_calls


def test_table_check_catches_tampering():
    dataset = tabular_dataset([{"a": [1.0, 2.0]}])
    table = analyze(dataset, BuiltinModel({"kind": "linear",
                                           "weights": {"a": [1.0, 1.0]}}))
    table.check()
    table.per_modality[0] = table.per_modality[0] + 1.0
    with pytest.raises(AnalysisError, match="inconsistent"):
        table.check()


def test_run_validation_errors():
    dataset = tabular_dataset([{"a": [1.0]}])
    model = BuiltinModel({"kind": "linear", "weights": {"a": [1.0]}})
    plans = build_planners(dataset.modalities)
    with pytest.raises(AnalysisError, match="plans"):
        run_analysis(dataset, model, [], [ZERO])
    with pytest.raises(AnalysisError, match="fills"):
        run_analysis(dataset, model, plans, [])
    with pytest.raises(AnalysisError, match="jobs"):
        run_analysis(dataset, model, plans, [ZERO], jobs=0)
    empty = ArrayDataset(dataset.modalities, [])
    with pytest.raises(AnalysisError, match="no samples"):
        run_analysis(empty, model, plans, [ZERO])


def test_model_failure_names_the_call_site():
    def fn(inputs):
        if inputs["a"][1] == 0.0:  # the second patch of "a" masked away
            raise ValueError("boom")
        return [float(inputs["a"].sum() + inputs["b"].sum())]

    dataset = tabular_dataset([{"a": [1.0, 2.0], "b": [3.0]}])
    with pytest.raises(AnalysisError) as err:
        analyze(dataset, CallableModel(fn))
    message = str(err.value)
    assert "sample 's0'" in message
    assert "modality 'a'" in message
    assert "patch 1" in message
    assert "boom" in message


def test_baseline_failure_names_the_sample():
    def fn(inputs):
        raise RuntimeError("dead on arrival")

    dataset = tabular_dataset([{"a": [1.0]}])
    with pytest.raises(AnalysisError, match="baseline of sample 's0'"):
        analyze(dataset, CallableModel(fn))


def test_output_length_drift_across_samples():
    def fn(inputs):
        return [1.0, 2.0] if inputs["a"][0] > 1.5 else [1.0]

    dataset = tabular_dataset([{"a": [1.0]}, {"a": [2.0]}])
    with pytest.raises(AnalysisError, match="length (changed|drifted)"):
        analyze(dataset, CallableModel(fn))
