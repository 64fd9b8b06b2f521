import io

import numpy as np
import pytest

from strat_tte.data import (SchemaConfig, assign_folds, expand_long, parse_dataset)
from strat_tte.errors import DataValidationError, PositivityError, SchemaError


class TestParse:
    def test_empty_file_is_schema_error(self):
        with pytest.raises(SchemaError):
            parse_dataset(b"")
        with pytest.raises(SchemaError):
            parse_dataset(b"\n  \n")

    def test_header_only_is_schema_error(self):
        with pytest.raises(SchemaError):
            parse_dataset(b"id,w,a,u,delta,x1\n")

    def test_four_row_file_field_by_field(self, toy_csv):
        ds = parse_dataset(toy_csv)
        assert ds.n == 4
        assert ds.horizon == 3
        assert ds.covariate_names == ["x1", "x2"]
        assert ds.stratum_levels == ["lo", "hi"]
        assert list(ds.ids) == ["s1", "s2", "s3", "s4"]
        assert ds.arm.tolist() == [0, 1, 0, 1]
        assert ds.time.tolist() == [1, 3, 2, 3]
        assert ds.event.tolist() == [1, 0, 0, 1]
        assert ds.stratum_idx.tolist() == [0, 0, 1, 1]
        np.testing.assert_array_equal(ds.x[:, 0], [0.5, 1.25, -0.75, 0.0])
        np.testing.assert_array_equal(ds.x[:, 1], [-1.0, 0.0, 2.0, 1.0])
        subj = ds.subjects[1]
        assert (subj.id, subj.w, subj.a, subj.u, subj.delta) == ("s2", "lo", 1, 3, 0)

    def test_missing_column_is_schema_error(self):
        with pytest.raises(SchemaError, match="delta"):
            parse_dataset(b"id,w,a,u,x1\ns1,lo,0,1,0.5\n")

    def test_non_binary_arm_is_value_error(self):
        csv = b"id,w,a,u,delta,x1\ns1,lo,2,1,1,0.5\ns2,lo,0,1,0,0.1\n"
        with pytest.raises(DataValidationError, match="'a'"):
            parse_dataset(csv)

    def test_missing_covariate_lists_row(self):
        csv = b"id,w,a,u,delta,x1\ns1,lo,0,1,1,0.5\ns2,lo,1,2,0,\ns3,lo,0,1,1,0.3\n"
        with pytest.raises(DataValidationError, match=r"x1.*3"):
            parse_dataset(csv)

    def test_stratum_with_empty_arm_is_positivity_error(self):
        csv = b"id,w,a,u,delta,x1\ns1,lo,0,1,1,0.5\ns2,lo,0,2,0,0.1\ns3,hi,1,1,1,0.0\ns4,hi,0,2,1,0.2\n"
        with pytest.raises(PositivityError, match="lo"):
            parse_dataset(csv)

    def test_horizon_override_administratively_censors(self, toy_csv):
        ds = parse_dataset(toy_csv, SchemaConfig(horizon=2))
        assert ds.horizon == 2
        # subjects s2 and s4 had u=3: clamped to 2 with delta forced to 0
        assert ds.time.tolist() == [1, 2, 2, 2]
        assert ds.event.tolist() == [1, 0, 0, 0]

    def test_schema_remap(self):
        csv = (b"pid,stratum,treat,weeks,failed,age\n"
               b"a,1,0,2,1,31\nb,1,1,2,0,45\nc,2,0,1,0,52\nd,2,1,1,1,28\n")
        schema = SchemaConfig(id="pid", stratum="stratum", arm="treat",
                              time="weeks", event="failed", covariates=["age"])
        ds = parse_dataset(csv, schema)
        assert ds.covariate_names == ["age"]
        assert ds.horizon == 2

    def test_trial_shaped_schema_with_many_covariates(self):
        # schema shape of a real trial export: a treatment flag, a discrete
        # time-to-improvement outcome, one stratification column, and a block
        # of baseline clinical covariates
        rng = np.random.default_rng(5)
        cov_names = [
            "age", "sex", "race", "hispanic", "employment", "living_situation",
            "tobacco_use", "alcohol_use", "drug_use", "sud_diagnosis",
            "n_prior_hospitalizations", "suicidal_ideation", "legal_issues",
            "med_adherence_month", "suicide_attempt_hosp", "dup_weeks",
            "qol_baseline", "bprs_total", "sans_total", "cdrs_total",
            "cgi_severity", "mars_score", "antipsychotic_pills_daily",
        ]
        n = 50
        buf = io.StringIO()
        buf.write("subject_id,site,citalopram,weeks_to_improvement,improved," + ",".join(cov_names) + "\n")
        for i in range(n):
            vals = rng.normal(size=len(cov_names)).round(3)
            buf.write(f"p{i},site{i % 2},{(i // 2) % 2},{1 + i % 52},{i % 3 == 0:d},"
                      + ",".join(str(v) for v in vals) + "\n")
        schema = SchemaConfig(id="subject_id", stratum="site", arm="citalopram",
                              time="weeks_to_improvement", event="improved",
                              covariates=cov_names)
        ds = parse_dataset(buf.getvalue().encode(), schema)
        assert ds.n == n
        assert len(ds.covariate_names) == len(cov_names)
        assert len(ds.stratum_levels) == 2

    def test_round_trip_is_bit_exact(self, dataset_factory):
        rng = np.random.default_rng(42)
        ds = dataset_factory(rng, n=25)
        blob = ds.to_csv_bytes()
        ds2 = parse_dataset(blob, SchemaConfig(covariates=ds.covariate_names))
        np.testing.assert_array_equal(ds.x, ds2.x)
        assert ds.time.tolist() == ds2.time.tolist()
        assert ds.event.tolist() == ds2.event.tolist()
        assert ds.arm.tolist() == ds2.arm.tolist()
        assert ds2.to_csv_bytes() == blob

    def test_unknown_schema_key_rejected(self):
        with pytest.raises(SchemaError):
            SchemaConfig.from_json('{"arm": "a", "bogus": 1}')


class TestExpandLong:
    def test_event_at_one(self, toy_csv):
        ds = parse_dataset(toy_csv)
        pt = expand_long(ds)
        rows = pt.subject == 0  # s1: u=1, delta=1
        assert rows.sum() == 1
        assert pt.event[rows].tolist() == [1]
        assert pt.at_risk[rows].tolist() == [1]
        assert pt.censor[rows].tolist() == [0]

    def test_censor_at_three_horizon_five(self):
        csv = (b"id,w,a,u,delta,x1\n"
               b"s1,lo,0,3,0,0.5\ns2,lo,1,5,1,0.1\ns3,lo,0,5,0,0.0\ns4,lo,1,2,1,0.3\n")
        ds = parse_dataset(csv)
        pt = expand_long(ds)
        rows = np.flatnonzero(pt.subject == 0)
        assert len(rows) == 3
        assert pt.t[rows].tolist() == [1, 2, 3]
        assert pt.censor[rows].tolist() == [0, 0, 1]
        assert pt.event[rows].tolist() == [0, 0, 0]

    def test_row_count_matches_enumeration(self, toy_csv):
        ds = parse_dataset(toy_csv)
        pt = expand_long(ds)
        # hand enumeration: u = 1, 3, 2, 3 with T = 3 -> 1 + 3 + 2 + 3 rows
        assert len(pt) == 9
        assert len(pt) == int(np.minimum(ds.time, ds.horizon).sum())

    def test_event_sum_property(self, dataset_factory):
        rng = np.random.default_rng(7)
        for _ in range(20):
            ds = dataset_factory(rng, n=rng.integers(8, 40), horizon=int(rng.integers(2, 6)))
            pt = expand_long(ds)
            assert len(pt) == int(np.minimum(ds.time, ds.horizon).sum())
            per_subject_events = np.bincount(pt.subject, weights=pt.event, minlength=ds.n)
            expected = ds.event * (ds.time <= ds.horizon)
            np.testing.assert_array_equal(per_subject_events, expected.astype(float))
            # at most one terminal row per subject
            terminal = np.bincount(pt.subject, weights=pt.event + pt.censor, minlength=ds.n)
            assert (terminal <= 1).all()


class TestFolds:
    def test_single_fold(self, dataset_factory):
        rng = np.random.default_rng(0)
        ds = dataset_factory(rng, n=12)
        fa = assign_folds(ds, 1, seed=3)
        assert set(fa.fold_of.values()) == {0}

    def test_forced_balance_two_by_two(self):
        csv = b"id,w,a,u,delta,x1\n" + b"".join(
            f"s{i},{'lo' if i < 4 else 'hi'},{i % 2},1,1,0.0\n".encode() for i in range(8)
        )
        ds = parse_dataset(csv)
        fa = assign_folds(ds, 2, seed=11)
        idx = fa.fold_index(ds)
        for k in range(2):
            for a in (0, 1):
                cell = idx[(ds.stratum_idx == k) & (ds.arm == a)]
                assert sorted(cell.tolist()) == [0, 1]

    def test_balance_invariant_j5_n100(self, dataset_factory):
        rng = np.random.default_rng(21)
        ds = dataset_factory(rng, n=100, n_strata=3)
        fa = assign_folds(ds, 5, seed=9)
        idx = fa.fold_index(ds)
        for k in range(ds.n_strata):
            for a in (0, 1):
                cell = idx[(ds.stratum_idx == k) & (ds.arm == a)]
                counts = np.bincount(cell, minlength=5)
                assert counts.max() - counts.min() <= 1

    def test_deterministic_in_seed(self, dataset_factory):
        rng = np.random.default_rng(2)
        ds = dataset_factory(rng, n=40)
        a = assign_folds(ds, 4, seed=5).fold_of
        b = assign_folds(ds, 4, seed=5).fold_of
        c = assign_folds(ds, 4, seed=6).fold_of
        assert a == b
        assert a != c

    def test_bad_fold_count(self, dataset_factory):
        rng = np.random.default_rng(3)
        ds = dataset_factory(rng, n=10)
        with pytest.raises(ValueError):
            assign_folds(ds, 0, seed=1)

    def test_small_cell_warns_and_caps(self, dataset_factory):
        rng = np.random.default_rng(4)
        ds = dataset_factory(rng, n=10, n_strata=2)
        with pytest.warns(UserWarning, match="capping"):
            fa = assign_folds(ds, 8, seed=1)
        idx = fa.fold_index(ds)
        for k in range(2):
            for a in (0, 1):
                counts = np.bincount(idx[(ds.stratum_idx == k) & (ds.arm == a)], minlength=8)
                assert counts.max() - counts.min() <= 1
