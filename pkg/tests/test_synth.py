import numpy as np
import pytest

from centermix.clinical import psa_cluster, risk_group
from centermix.exceptions import ContractError
from centermix.metrics import gpr
from centermix.synth import (
    CenterPolicy,
    build_default_policies,
    generate_case,
    generate_dataset,
    is_bimodal,
    sample_fewshot,
    sample_record,
    two_means_split,
)


@pytest.fixture(scope="module")
def policies():
    return build_default_policies()


class TestPolicies:
    def test_center_a_t_distribution(self, policies):
        t = policies["A"].t_dist
        assert t[0] == pytest.approx(0.041, abs=0.002)
        assert t[1] == pytest.approx(0.306, abs=0.002)
        assert t[2] == pytest.approx(0.577, abs=0.002)
        assert t[3] == pytest.approx(0.076, abs=0.002)

    def test_center_d_definitive_dominant(self, policies):
        # prostatectomy rate 13.8% -> definitive intent dominates
        d = policies["D"]
        assert d.intent_dist[0] > 0.8
        surgery_rate = d.intent_dist[1] + d.intent_dist[2]
        assert surgery_rate == pytest.approx(0.138, abs=0.01)

    def test_probabilities_and_margins_valid(self, policies):
        for policy in policies.values():
            assert all(0.0 <= p <= 1.0 for p in policy.pni_rule.values())
            assert policy.ptv_margin_voxels >= 0

    def test_ab_aggressive_c_conservative(self, policies):
        assert policies["A"].pni_rule["intermediate"] == 0.7
        assert policies["C"].pni_rule["intermediate"] == 0.15
        assert policies["A"].ptv_margin_voxels == 3
        assert policies["C"].ptv_margin_voxels == 1

    def test_policy_serializable(self, policies):
        import json
        json.dumps(policies["A"].to_dict())


class TestRecordSampling:
    def test_frequencies_match_within_three_se(self, policies):
        rng = np.random.default_rng(42)
        policy = policies["A"]
        n = 2000
        records = [sample_record(policy, rng) for _ in range(n)]
        t_counts = np.zeros(4)
        for r in records:
            t_counts[("T1", "T2", "T3", "T4").index(r.t_stage)] += 1
        for i, p in enumerate(policy.t_dist):
            se = np.sqrt(p * (1 - p) / n)
            assert abs(t_counts[i] / n - p) < 3 * se + 1e-9
        surgery = sum(r.prostatectomy for r in records) / n
        p_surgery = policy.intent_dist[1] + policy.intent_dist[2]
        assert abs(surgery - p_surgery) < 3 * np.sqrt(p_surgery * (1 - p_surgery) / n)

    def test_intent_consistent_with_surgery(self, policies):
        rng = np.random.default_rng(3)
        for _ in range(200):
            r = sample_record(policies["C"], rng)
            assert r.prostatectomy == (r.therapy_intent != "definitive")


class TestGenerateCase:
    def test_margin_zero_pni_off_gpr_hundred(self, policies):
        policy = CenterPolicy(**{**policies["C"].to_dict(), "ptv_margin_voxels": 0})
        case = generate_case(policy, np.random.default_rng(1), force_pni=False)
        np.testing.assert_array_equal(case["ptv"], case["gtv"])
        assert gpr(case["gtv"], case["ptv"]) == 100.0

    def test_pni_twin_strictly_lower_gpr(self, policies):
        for seed in range(5):
            on = generate_case(policies["A"], np.random.default_rng(seed), force_pni=True)
            off = generate_case(policies["A"], np.random.default_rng(seed), force_pni=False)
            np.testing.assert_array_equal(on["gtv"], off["gtv"])
            assert gpr(on["gtv"], on["ptv"]) < gpr(off["gtv"], off["ptv"])

    def test_determinism_bitwise(self, policies):
        a = generate_case(policies["B"], np.random.default_rng(7))
        b = generate_case(policies["B"], np.random.default_rng(7))
        np.testing.assert_array_equal(a["image"], b["image"])
        np.testing.assert_array_equal(a["ptv"], b["ptv"])
        assert a["record"] == b["record"]
        assert a["pni_applied"] == b["pni_applied"]

    def test_gtv_subset_of_ptv(self, policies):
        rng = np.random.default_rng(11)
        for _ in range(20):
            case = generate_case(policies["A"], rng)
            assert not (case["gtv"].astype(bool) & ~case["ptv"].astype(bool)).any()

    def test_organ_gtv_overlap_for_definitive(self, policies):
        rng = np.random.default_rng(13)
        seen = 0
        while seen < 10:
            case = generate_case(policies["D"], rng)
            if case["record"].therapy_intent == "definitive":
                seen += 1
                assert (case["organ"].astype(bool) & case["gtv"].astype(bool)).any()

    def test_n1_always_includes_nodes(self, policies):
        rng = np.random.default_rng(17)
        found = 0
        while found < 5:
            case = generate_case(policies["C"], rng)
            if case["record"].n_stage == "N1":
                found += 1
                assert case["pni_applied"]

    def test_intensities_are_hu_like(self, policies):
        case = generate_case(policies["A"], np.random.default_rng(19))
        assert case["image"].dtype == np.float32
        assert case["image"].min() < -40 and case["image"].max() > 40


class TestDatasetLevel:
    def test_dataset_determinism_and_ids(self, policies):
        d1 = generate_dataset(policies["C"], 4, seed=5)
        d2 = generate_dataset(policies["C"], 4, seed=5)
        assert [c["case_id"] for c in d1] == ["C0000", "C0001", "C0002", "C0003"]
        for a, b in zip(d1, d2):
            np.testing.assert_array_equal(a["image"], b["image"])

    def test_median_gpr_a_below_c(self, policies):
        n = 400
        a_vals = [gpr(c["gtv"], c["ptv"]) for c in generate_dataset(policies["A"], n, seed=21)]
        c_vals = [gpr(c["gtv"], c["ptv"]) for c in generate_dataset(policies["C"], n, seed=22)]
        assert np.median(a_vals) < np.median(c_vals)

    def test_ab_gpr_bimodal(self, policies):
        cases = generate_dataset(policies["A"], 300, seed=31) + \
                generate_dataset(policies["B"], 300, seed=32)
        values = [gpr(c["gtv"], c["ptv"]) for c in cases]
        assert is_bimodal(values)
        split = two_means_split(values)
        assert split["mu_low"] < 30.0  # nodal mode sits low

    @pytest.mark.parametrize("seed", range(4))
    def test_unimodal_rejected_by_heuristic(self, seed):
        rng = np.random.default_rng(seed)
        assert not is_bimodal(rng.normal(50.0, rng.uniform(3, 18), size=600))
        assert not is_bimodal(np.random.default_rng(seed).uniform(0, 100, size=600))


class TestFewshot:
    def _cases_with_psa(self, psas, policies):
        rng = np.random.default_rng(0)
        cases = []
        for i, psa in enumerate(psas):
            case = dict(generate_case(policies["C"], np.random.default_rng(100 + i)))
            rec = case["record"]
            case["record"] = type(rec)(
                gleason_grade=rec.gleason_grade, t_stage=rec.t_stage, t_sub=rec.t_sub,
                n_stage=rec.n_stage, metastasis=rec.metastasis, age=rec.age,
                psa=psa, prostatectomy=rec.prostatectomy, therapy_intent=rec.therapy_intent)
            case["case_id"] = f"t{i}"
            cases.append(case)
        return cases

    def test_one_shot_five_plus_one(self, policies):
        psas = [2.0, 3.0, 7.0, 8.0, 15.0, 16.0, 25.0, 26.0, 40.0, 50.0]
        cases = self._cases_with_psa(psas, policies)
        train, val = sample_fewshot(cases, 1, np.random.default_rng(5))
        assert len(train) == 5
        clusters = sorted(psa_cluster(c["record"].psa) for c in train)
        assert clusters == [0, 1, 2, 3, 4]
        assert val["case_id"] not in {c["case_id"] for c in train}

    def test_seed_determinism(self, policies):
        psas = [2.0, 3.0, 4.0, 7.0, 8.0, 9.0, 15.0, 16.0, 17.0,
                25.0, 26.0, 27.0, 40.0, 50.0, 60.0]
        cases = self._cases_with_psa(psas, policies)
        t1, v1 = sample_fewshot(cases, 2, np.random.default_rng(9))
        t2, v2 = sample_fewshot(cases, 2, np.random.default_rng(9))
        assert [c["case_id"] for c in t1] == [c["case_id"] for c in t2]
        assert v1["case_id"] == v2["case_id"]

    def test_empty_cluster_fallback(self, policies):
        # cluster 4 (psa >= 30) absent: 4 populated clusters x 2 shots = 8
        psas = [2.0, 3.0, 4.0, 7.0, 8.0, 9.0, 15.0, 16.0, 17.0, 25.0, 26.0, 27.0]
        cases = self._cases_with_psa(psas, policies)
        with pytest.warns(UserWarning, match="cluster 4"):
            train, val = sample_fewshot(cases, 2, np.random.default_rng(1))
        assert len(train) == 8

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractError):
            sample_fewshot([], 1, np.random.default_rng(0))
