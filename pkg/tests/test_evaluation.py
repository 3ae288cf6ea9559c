import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from choicegate.backend import MockBackend
from choicegate.evaluation import (
    EvalError,
    LabelRecord,
    accuracy_over_variations,
    average_precision,
    extraction_agreement,
    genus_accuracy,
    map_one_vs_rest,
    question_level_diff_stats,
    subset_choice_eval,
)
from choicegate.pipeline import RunRecord
from choicegate.prompts import DatasetProfile
from choicegate.trie import ChoiceSet

from conftest import brute_force_average_precision, single_char_vocab


def record(example_id, prompt_id, prediction, labels=("A", "B", "C"), **kwargs):
    return RunRecord(
        example_id=example_id,
        prompt_id=prompt_id,
        method="nlg2choice",
        prediction=prediction,
        prediction_label=labels[prediction],
        **kwargs,
    )


class TestAccuracyOverVariations:
    def test_all_correct(self):
        records = [record(f"e{i}", "t01", 0) for i in range(4)]
        truth = {f"e{i}": 0 for i in range(4)}
        result = accuracy_over_variations(records, truth)
        assert result.mean == 100.0
        assert result.per_prompt == {"t01": 100.0}

    def test_mean_of_two_prompts(self):
        # t01: 2/5 correct = 40, t02: 3/5 = 60 -> mean 50
        records = []
        truth = {f"e{i}": 0 for i in range(5)}
        for i in range(5):
            records.append(record(f"e{i}", "t01", 0 if i < 2 else 1))
            records.append(record(f"e{i}", "t02", 0 if i < 3 else 1))
        result = accuracy_over_variations(records, truth)
        assert result.per_prompt == {"t01": 40.0, "t02": 60.0}
        assert result.mean == 50.0

    def test_engineered_spread_matches_hand_mean(self):
        # per-prompt corrects over 25 examples, chosen to look like a
        # realistic spread; the oracle is the spreadsheet formula
        corrects = [10, 11, 9, 12, 10, 8, 13, 10, 9, 11, 10, 12, 9, 10, 11]
        truth = {f"e{i:02d}": 0 for i in range(25)}
        records = []
        for t, c in enumerate(corrects):
            for i in range(25):
                records.append(record(f"e{i:02d}", f"t{t:02d}", 0 if i < c else 2))
        result = accuracy_over_variations(records, truth)
        expected = sum(c / 25 * 100 for c in corrects) / 15
        assert result.mean == pytest.approx(expected, abs=1e-12)

    def test_mismatched_coverage_rejected(self):
        records = [record("e1", "t01", 0), record("e1", "t02", 0), record("e2", "t02", 0)]
        with pytest.raises(EvalError, match="different example set"):
            accuracy_over_variations(records, {"e1": 0, "e2": 0})

    def test_permutation_invariance(self):
        rng = random.Random(7)
        records = []
        truth = {}
        for i in range(10):
            truth[f"e{i}"] = rng.randrange(3)
            for pid in ("t01", "t02", "t03"):
                records.append(record(f"e{i}", pid, rng.randrange(3)))
        base = accuracy_over_variations(records, truth)
        rng.shuffle(records)
        assert accuracy_over_variations(records, truth) == base


class TestAveragePrecision:
    def test_hand_computed_example(self):
        # class A positives end up at ranks 1 and 3
        scores = [0.9, 0.8, 0.7, 0.1]
        positives = [True, False, True, False]
        assert average_precision(scores, positives) == pytest.approx(
            (1 / 1 + 2 / 3) / 2, abs=1e-12
        )

    def test_matches_pr_curve_oracle_on_small_instances(self):
        rng = random.Random(3)
        for _ in range(200):
            n = rng.randint(2, 20)
            scores = [rng.random() for _ in range(n)]
            positives = [rng.random() < 0.4 for _ in range(n)]
            if not any(positives):
                positives[rng.randrange(n)] = True
            got = average_precision(scores, positives)
            expected = brute_force_average_precision(scores, positives)
            assert got == pytest.approx(expected, abs=1e-12)

    def test_tie_break_by_example_index(self):
        scores = [0.5, 0.5]
        assert average_precision(scores, [True, False]) == 1.0
        assert average_precision(scores, [False, True]) == 0.5


class TestMapOneVsRest:
    def test_perfect_scores(self):
        matrix = [
            [0.9, 0.1, 0.0],
            [0.1, 0.9, 0.0],
            [0.0, 0.1, 0.9],
        ]
        result = map_one_vs_rest(matrix, [0, 1, 2])
        assert result.map_percent == 100.0

    def test_zero_positive_class_excluded_and_reported(self):
        matrix = [[0.9, 0.5], [0.2, 0.6]]
        result = map_one_vs_rest(matrix, [0, 0])
        assert result.excluded_classes == (1,)
        assert set(result.per_class_ap) == {0}

    def test_monotone_transform_invariance(self):
        rng = random.Random(11)
        matrix = [[rng.random() for _ in range(4)] for _ in range(12)]
        truth = [rng.randrange(4) for _ in range(12)]
        base = map_one_vs_rest(matrix, truth)
        transformed = [[math.log(s + 1.0) * 3 - 2 for s in row] for row in matrix]
        again = map_one_vs_rest(transformed, truth)
        assert again.map_percent == pytest.approx(base.map_percent, abs=1e-9)

    def test_random_scores_sit_near_class_prior(self):
        """Random rankings land near the positive-rate prior for each class
        (the one-vs-rest floor), well within 3 standard errors."""
        rng = np.random.default_rng(0)
        n_classes, per_class = 10, 100
        truth = [c for c in range(n_classes) for _ in range(per_class)]
        matrix = rng.random((len(truth), n_classes))
        result = map_one_vs_rest(matrix, truth)
        prior = per_class / len(truth)
        aps = list(result.per_class_ap.values())
        se = float(np.std(aps, ddof=1) / math.sqrt(len(aps)))
        assert abs(result.map_percent / 100.0 - prior) <= 3 * se


class TestGenusAccuracy:
    GENUS = {"Ivory Gull": "Gull", "Herring Gull": "Gull", "Crested Auklet": "Auklet"}
    LABELS = ("Ivory Gull", "Herring Gull", "Crested Auklet")

    def test_same_bucket_counts_as_match(self):
        records = [record("e1", "t01", 1, labels=self.LABELS)]
        truth_labels = {"e1": "Ivory Gull"}
        result = genus_accuracy(records, truth_labels, self.GENUS)
        assert result.match_rate == 100.0
        assert result.pct_misclassified == 100.0

    def test_zero_misclassified(self):
        records = [record("e1", "t01", 0, labels=self.LABELS)]
        result = genus_accuracy(records, {"e1": "Ivory Gull"}, self.GENUS)
        assert result.match_rate is None
        assert result.pct_misclassified == 0.0

    def test_rates(self):
        # 10 misclassified, 4 in the right genus
        records = []
        truth_labels = {}
        for i in range(10):
            pred = 1 if i < 4 else 2  # Herring Gull matches, Auklet does not
            records.append(record(f"e{i}", "t01", pred, labels=self.LABELS))
            truth_labels[f"e{i}"] = "Ivory Gull"
        result = genus_accuracy(records, truth_labels, self.GENUS)
        assert result.match_rate == pytest.approx(40.0, abs=1e-12)

    def test_missing_genus_entry(self):
        records = [record("e1", "t01", 1, labels=self.LABELS)]
        with pytest.raises(EvalError, match="no entry"):
            genus_accuracy(records, {"e1": "Ivory Gull"}, {"Ivory Gull": "Gull"})

    def test_pct_plus_accuracy_is_total(self):
        rng = random.Random(5)
        records = []
        truth = {}
        truth_labels = {}
        for i in range(40):
            gt = rng.randrange(3)
            pred = rng.randrange(3)
            truth[f"e{i}"] = gt
            truth_labels[f"e{i}"] = self.LABELS[gt]
            records.append(record(f"e{i}", "t01", pred, labels=self.LABELS))
        acc = accuracy_over_variations(records, truth).mean
        genus = genus_accuracy(records, truth_labels, self.GENUS)
        assert acc + genus.pct_misclassified == pytest.approx(100.0, abs=1e-9)


class TestDiffStats:
    def test_identical_vectors(self):
        acc = {f"t{i}": 50.0 for i in range(15)}
        stats = question_level_diff_stats(acc, dict(acc))
        assert stats.mu == 0.0 and stats.sigma == 0.0

    def test_hand_arithmetic(self):
        stats = question_level_diff_stats({"a": 0.0, "b": 0.0}, {"a": 1.0, "b": 3.0})
        assert stats.mu == 2.0
        assert stats.sigma == 1.0  # population sigma over {1, 3}

    def test_recovers_constructed_mu_sigma(self):
        """Vectors constructed to mu=22.06, sigma=1.92 come back within 1e-9."""
        mu, sigma = 22.06, 1.92
        base = [1.0] * 7 + [-1.0] * 7 + [0.0]
        scale = sigma / math.sqrt(sum(v * v for v in base) / len(base))
        acc_a = {f"t{i:02d}": 0.0 for i in range(15)}
        acc_b = {f"t{i:02d}": mu + scale * base[i] for i in range(15)}
        stats = question_level_diff_stats(acc_a, acc_b)
        assert stats.mu == pytest.approx(mu, abs=1e-9)
        assert stats.sigma == pytest.approx(sigma, abs=1e-9)
        half = 1.96 * stats.sigma / math.sqrt(15)
        assert stats.ci_low == pytest.approx(stats.mu - half, abs=1e-12)
        assert stats.ci_high == pytest.approx(stats.mu + half, abs=1e-12)

    def test_prompt_mismatch(self):
        with pytest.raises(EvalError, match="prompt ids differ"):
            question_level_diff_stats({"a": 1.0}, {"b": 1.0})

    def test_sample_sigma_mode(self):
        stats = question_level_diff_stats(
            {"a": 0.0, "b": 0.0}, {"a": 1.0, "b": 3.0}, sigma_mode="sample"
        )
        assert stats.sigma == pytest.approx(math.sqrt(2.0), abs=1e-12)


class TestExtractionAgreement:
    CHOICES = ChoiceSet(("Ivory Gull", "Scarlet Tanager", "Painted Bunting"))

    def label(self, example_id, kind, answer=None, nlg="some response text"):
        return LabelRecord(example_id=example_id, nlg=nlg, kind=kind, answer=answer)

    def test_full_agreement(self):
        labels = [self.label(f"e{i}", "answer", "Ivory Gull") for i in range(3)]
        predictions = {f"e{i}": "Ivory Gull" for i in range(3)}
        result = extraction_agreement(predictions, labels, self.CHOICES)
        assert result.agreement == 100.0

    def test_out_of_schema_breakdown_rate(self):
        # 3464 out-of-schema labels out of 10000
        labels = []
        predictions = {}
        for i in range(10000):
            kind_answer = "Glaucous Gull" if i < 3464 else "Ivory Gull"
            labels.append(self.label(f"e{i}", "answer", kind_answer))
            predictions[f"e{i}"] = "Ivory Gull"
        result = extraction_agreement(predictions, labels, self.CHOICES)
        assert result.breakdown["out_of_schema"] == pytest.approx(34.64, abs=1e-9)

    def test_extraction_mistake_is_disagreement(self):
        labels = [self.label("e1", "answer", "Painted Bunting")]
        predictions = {"e1": "Scarlet Tanager"}
        result = extraction_agreement(predictions, labels, self.CHOICES)
        assert result.agreement == 0.0

    def test_category_breakdown(self):
        labels = [
            self.label("e1", "answer", "Ivory Gull"),
            self.label("e2", "schema_failure"),
            self.label("e3", "no_species"),
            self.label("e4", "refused"),
            self.label("e5", "no_information"),
        ]
        predictions = {f"e{i}": "Ivory Gull" for i in range(1, 6)}
        result = extraction_agreement(predictions, labels, self.CHOICES)
        assert result.breakdown["schema_failure"] == 20.0
        assert result.breakdown["answer_in_schema"] == 20.0

    def test_dangling_example(self):
        labels = [self.label("ghost", "answer", "Ivory Gull")]
        with pytest.raises(EvalError, match="no prediction"):
            extraction_agreement({}, labels, self.CHOICES)

    def test_span_must_be_first_incidence(self):
        LabelRecord(example_id="e", nlg="a gull, a gull", kind="answer",
                    answer="Ivory Gull", span=(2, 6))
        with pytest.raises(EvalError, match="first incidence"):
            LabelRecord(example_id="e", nlg="a gull, a gull", kind="answer",
                        answer="Ivory Gull", span=(10, 14))
        with pytest.raises(EvalError, match="outside"):
            LabelRecord(example_id="e", nlg="short", kind="answer",
                        answer="Ivory Gull", span=(2, 99))


class TestSubsetChoiceEval:
    LABELS = ("Arctic Fox", "Bobcat", "Coyote", "Deer", "Elk")

    def make_backend(self, prefer: str):
        vocab = single_char_vocab("abcdefghijklmnopqrstuvwxyzABCDEF ")
        return MockBackend(
            {
                "vocab": vocab.to_file_dict(),
                "fallback_uniform": True,
                "distributions": [
                    {"when_contains": "Response:", "probs": {prefer: 0.9}, "other_mass": 0.1}
                ],
            }
        )

    def profile(self, labels):
        return DatasetProfile(
            name="animals", type="species", domain="animal", choices=ChoiceSet(labels)
        )

    def stage1_record(self, example_id, text="I saw something furry."):
        return RunRecord(
            example_id=example_id, prompt_id="t01", method="nlg2choice", stage1_text=text
        )

    def test_singleton_subsets_always_correct(self):
        backend = self.make_backend("B")
        records = [self.stage1_record("e1"), self.stage1_record("e2")]
        subsets = {"e1": ["Deer"], "e2": ["Elk"]}
        truth = {"e1": "Deer", "e2": "Elk"}
        acc = subset_choice_eval(records, subsets, truth, backend, self.profile(self.LABELS))
        assert acc == 100.0

    def test_subset_missing_truth_rejected(self):
        backend = self.make_backend("B")
        records = [self.stage1_record("e1")]
        with pytest.raises(EvalError, match="missing the ground truth"):
            subset_choice_eval(
                records, {"e1": ["Bobcat"]}, {"e1": "Deer"}, backend, self.profile(self.LABELS)
            )

    def test_subset_beats_full_way_when_confuser_removed(self):
        """The globally dominant wrong label is out of the 4-way subset, so
        the subset run recovers the truth; exhaustively checked both ways."""
        vocab = single_char_vocab("abcdefghijklmnopqrstuvwxyzABCDEF ")
        backend = MockBackend(
            {
                "vocab": vocab.to_file_dict(),
                "fallback_uniform": True,
                "distributions": [
                    # "Bobcat" dominates both, but the runner-up is right
                    {"when_contains": "grazer", "probs": {"B": 0.5, "D": 0.3, "E": 0.1},
                     "other_mass": 0.1},
                    {"when_contains": "antlers", "probs": {"B": 0.5, "E": 0.3, "D": 0.1},
                     "other_mass": 0.1},
                ],
            }
        )
        full_profile = self.profile(self.LABELS)
        records = [
            self.stage1_record("e1", "a long-muzzled grazer"),
            self.stage1_record("e2", "bugling with big antlers"),
        ]
        truth = {"e1": "Deer", "e2": "Elk"}
        full_way = subset_choice_eval(
            records, {eid: list(self.LABELS) for eid in truth}, truth, backend, full_profile
        )
        subset = ["Arctic Fox", "Coyote", "Deer", "Elk"]
        four_way = subset_choice_eval(
            records, {"e1": subset, "e2": subset}, truth, backend, full_profile
        )
        assert full_way == 0.0
        assert four_way == 100.0
        assert four_way >= full_way


accuracies = st.dictionaries(
    st.sampled_from([f"t{i:02d}" for i in range(15)]),
    st.floats(min_value=0, max_value=100, allow_nan=False),
    min_size=2,
    max_size=15,
)


@settings(max_examples=50, deadline=None)
@given(acc=accuracies)
def test_diff_stats_of_self_is_zero(acc):
    stats = question_level_diff_stats(acc, dict(acc))
    assert stats.mu == 0.0
    assert stats.sigma == 0.0
    assert stats.ci_low == 0.0 and stats.ci_high == 0.0
