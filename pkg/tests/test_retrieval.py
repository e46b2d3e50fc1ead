import math

import numpy as np
import pytest

from faircap.caselib import SCHEMA_VERSION, CaseRecord, Repository
from faircap.cohort import CLINICAL_FEATURES, synth_cohort
from faircap.errors import ValidationError
from faircap.retrieval import (
    RetrievalConfig,
    Standardization,
    demo_matches,
    fit_standardization,
    normalize,
    retrieve,
    similarity,
)
from conftest import make_patient


def _flat_standardization():
    n = len(CLINICAL_FEATURES)
    return Standardization(
        features=CLINICAL_FEATURES,
        means=np.zeros(n),
        sds=np.ones(n),
        log_features=(),
    )


def _case(case_id, vector, sex="male", band="60+", race="white",
          clinical=None, bias="sex_based_assumption", prob=0.2, outcome=True):
    return CaseRecord(
        id=case_id,
        sex=sex,
        age_band=band,
        race=race,
        clinical=clinical or {f: 1.0 for f in CLINICAL_FEATURES},
        true_outcome=outcome,
        predicted_probability=prob,
        error_type="false_negative" if outcome else "false_positive",
        bias_type=bias,
        judge_rationale="",
        normalized_vector=tuple(vector),
    )


def _repo(cases, standardization=None):
    return Repository(
        schema_version=SCHEMA_VERSION,
        standardization=standardization or _flat_standardization(),
        threshold=0.5,
        seed=0,
        cases=cases,
    )


class TestConfig:
    def test_bad_rho(self):
        with pytest.raises(ValidationError):
            RetrievalConfig(penalty_rho=0.0)

    def test_negative_weight(self):
        with pytest.raises(ValidationError):
            RetrievalConfig(weights={"sofa_24h": -1.0})

    def test_unknown_feature_weight(self):
        with pytest.raises(ValidationError):
            RetrievalConfig(weights={"bmi": 1.0})

    def test_descending_breakpoints(self):
        with pytest.raises(ValidationError, match="ascending"):
            RetrievalConfig(intervals={"lactate_max": (4.0, 2.0)})

    def test_all_zero_weights(self):
        with pytest.raises(ValidationError, match="positive"):
            RetrievalConfig(weights={f: 0.0 for f in CLINICAL_FEATURES})


class TestNormalize:
    def test_mean_maps_to_zero_and_unit_sd_to_one(self):
        cohort = synth_cohort(300, seed=21)
        config = RetrievalConfig()
        std = fit_standardization(cohort, config)
        i = CLINICAL_FEATURES.index("heart_rate")
        # heart_rate is not log transformed
        patient = make_patient(heart_rate=float(std.means[i]))
        assert normalize(patient, std, config)[i] == pytest.approx(0.0, abs=1e-12)
        patient = make_patient(heart_rate=float(std.means[i] + std.sds[i]))
        assert normalize(patient, std, config)[i] == pytest.approx(1.0, abs=1e-12)

    def test_log1p_applied_before_zscore(self):
        config = RetrievalConfig()
        std = _flat_standardization()
        std = Standardization(
            features=std.features,
            means=std.means,
            sds=std.sds,
            log_features=("urine_24h",),
        )
        patient = make_patient(urine_24h=100.0)
        i = CLINICAL_FEATURES.index("urine_24h")
        assert normalize(patient, std, config)[i] == pytest.approx(math.log(101.0), abs=1e-9)

    def test_zero_variance_rejected_at_fit(self):
        cohort = [make_patient(id=f"p{i}") for i in range(10)]
        with pytest.raises(ValidationError, match="zero-variance"):
            fit_standardization(cohort, RetrievalConfig())


class TestSimilarity:
    def _raw(self, **overrides):
        raw = {f: 1.0 for f in CLINICAL_FEATURES}
        raw.update(overrides)
        return raw

    def test_identical_vectors(self):
        v = np.arange(1.0, 16.0)
        res = similarity(v, v, self._raw(), self._raw(), RetrievalConfig())
        assert res.similarity == pytest.approx(1.0, abs=1e-12)
        assert res.crossed == ()

    def test_orthogonal_vectors(self):
        a = np.zeros(15)
        b = np.zeros(15)
        a[0], b[1] = 1.0, 1.0
        res = similarity(a, b, self._raw(), self._raw(), RetrievalConfig())
        assert res.similarity == pytest.approx(0.0, abs=1e-12)

    def test_penalty_multiplies_base(self):
        config = RetrievalConfig(penalty_rho=0.9)
        a = np.ones(15)
        b = np.ones(15)
        b[0] = 0.5  # base cosine just under 1
        clean = similarity(a, b, self._raw(), self._raw(), config)
        crossed = similarity(
            a, b, self._raw(lactate_max=1.5), self._raw(lactate_max=2.5), config
        )
        assert crossed.crossed == ("lactate_max",)
        assert crossed.similarity == pytest.approx(clean.similarity * 0.9, abs=1e-12)

    def test_explicit_penalty_value(self):
        # base 0.95 with one crossing at rho 0.9 -> 0.855
        config = RetrievalConfig(penalty_rho=0.9)
        theta = math.acos(0.95)
        a = np.zeros(15)
        b = np.zeros(15)
        a[0] = 1.0
        b[0], b[1] = math.cos(theta), math.sin(theta)
        res = similarity(a, b, self._raw(sofa_24h=1.0), self._raw(sofa_24h=3.0), config)
        assert res.similarity == pytest.approx(0.855, abs=1e-12)

    def test_zero_norm_gives_zero_similarity(self):
        res = similarity(np.zeros(15), np.ones(15), self._raw(), self._raw(), RetrievalConfig())
        assert res.similarity == 0.0
        assert res.crossed == ()

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="mismatch"):
            similarity(np.ones(3), np.ones(15), self._raw(), self._raw(), RetrievalConfig())

    def test_weighted_cosine_formula(self):
        config = RetrievalConfig(weights={"gcs": 2.0}, intervals={})
        a = np.zeros(15)
        b = np.zeros(15)
        a[0], a[1] = 1.0, 1.0  # gcs, apache_iii
        b[0], b[1] = 1.0, -1.0
        # w = (2,1,...): cos = (2*1*1 + 1*1*-1) / (sqrt(3) * sqrt(3)) = 1/3
        res = similarity(a, b, self._raw(), self._raw(), config)
        assert res.similarity == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_symmetry(self, rng):
        config = RetrievalConfig()
        for _ in range(10):
            a, b = rng.normal(size=15), rng.normal(size=15)
            ra = {f: float(rng.uniform(0, 5)) for f in CLINICAL_FEATURES}
            rb = {f: float(rng.uniform(0, 5)) for f in CLINICAL_FEATURES}
            s1 = similarity(a, b, ra, rb, config)
            s2 = similarity(b, a, rb, ra, config)
            assert s1.similarity == pytest.approx(s2.similarity, abs=1e-12)
            assert set(s1.crossed) == set(s2.crossed)

    def test_penalty_never_increases(self, rng):
        config = RetrievalConfig(penalty_rho=0.9)
        no_pen = RetrievalConfig(penalty_rho=1.0, intervals={})
        for _ in range(10):
            a, b = rng.normal(size=15), rng.normal(size=15)
            ra = {f: float(rng.uniform(0, 12)) for f in CLINICAL_FEATURES}
            rb = {f: float(rng.uniform(0, 12)) for f in CLINICAL_FEATURES}
            with_pen = similarity(a, b, ra, rb, config).similarity
            base = similarity(a, b, ra, rb, no_pen).similarity
            if base >= 0:
                assert with_pen <= base + 1e-15


class TestDemoMatches:
    def test_counts(self):
        q = make_patient(age=70, sex="male", race="white")
        assert demo_matches(q, "male", "60+", "white") == 3
        assert demo_matches(q, "female", "60+", "white") == 2
        assert demo_matches(q, "female", "18-59", "black") == 0


class TestRetrieve:
    def _query(self):
        return make_patient(id="q", age=70, sex="male", race="white")

    def _vec(self, patient, config=None):
        return normalize(patient, _flat_standardization(), config or RetrievalConfig())

    def test_gate_boundaries(self):
        config = RetrievalConfig(intervals={}, penalty_rho=1.0)
        query = self._query()
        qv = self._vec(query, config)
        unit = qv / np.linalg.norm(qv)

        def case_at(sim_value, case_id, **demo):
            # vector at exact cosine sim_value from the query
            perp = np.zeros_like(qv)
            perp[0] = 1.0
            perp = perp - np.dot(perp, unit) * unit
            perp /= np.linalg.norm(perp)
            v = sim_value * unit + math.sqrt(1 - sim_value**2) * perp
            return _case(case_id, v, **demo)

        eligible = case_at(0.85, "a", sex="male", band="60+", race="black")  # 2 matches
        repo = _repo([eligible])
        res = retrieve(query, repo, config)
        assert res is not None and res.case.id == "a"
        assert res.similarity >= 0.8 and res.demo_matches >= 2

        at_gate = _repo([case_at(0.80, "b", sex="male", band="60+", race="black")])
        res = retrieve(query, at_gate, config)
        assert res is not None  # >= 0.8 is eligible

        below = _repo([case_at(0.79999, "c", sex="male", band="60+", race="black")])
        assert retrieve(query, below, config) is None

        one_match = _repo([case_at(0.99, "d", sex="male", band="18-59", race="black")])
        assert retrieve(query, one_match, config) is None

    def test_tie_breaks(self):
        config = RetrievalConfig(intervals={}, penalty_rho=1.0)
        query = self._query()
        qv = self._vec(query, config)
        same_vec = tuple(qv)  # similarity exactly 1.0 for all
        c1 = _case("m", same_vec, sex="male", band="60+", race="black")    # 2 matches
        c2 = _case("z", same_vec, sex="male", band="60+", race="white")   # 3 matches
        c3 = _case("a", same_vec, sex="male", band="60+", race="white")   # 3 matches
        res = retrieve(query, _repo([c1, c2, c3]), config)
        assert res.case.id == "a"  # more demo matches first, then lexicographic id

    def test_empty_repository_returns_none(self):
        assert retrieve(self._query(), _repo([]), RetrievalConfig()) is None

    def test_schema_version_mismatch(self):
        repo = _repo([])
        repo.schema_version = 99
        with pytest.raises(ValidationError, match="schema version"):
            retrieve(self._query(), repo, RetrievalConfig())

    def test_exhaustive_oracle_agreement(self):
        """From-scratch scan over random repositories must pick the same case."""
        config = RetrievalConfig()
        weight = np.array([config.weight_of(f) for f in CLINICAL_FEATURES])

        def oracle(query, repo):
            qv = normalize(query, repo.standardization, config)
            qraw = {f: float(getattr(query, f)) for f in CLINICAL_FEATURES}
            best = None
            for case in repo.cases:
                matches = (
                    (query.sex == case.sex)
                    + (("18-59" if query.age <= 59 else "60+") == case.age_band)
                    + (query.race == case.race)
                )
                if matches < config.min_demo_matches:
                    continue
                cv = np.asarray(case.normalized_vector)
                qn = math.sqrt(float(np.sum(weight * qv * qv)))
                cn = math.sqrt(float(np.sum(weight * cv * cv)))
                if qn == 0.0 or cn == 0.0:
                    sim = 0.0
                else:
                    sim = float(np.sum(weight * qv * cv)) / (qn * cn)
                    crossings = 0
                    for name, breaks in config.intervals.items():
                        qi = sum(1 for b in breaks if qraw[name] > b)
                        ci = sum(1 for b in breaks if case.clinical[name] > b)
                        crossings += qi != ci
                    sim = max(min(sim * config.penalty_rho**crossings, 1.0), -1.0)
                if sim < config.min_similarity:
                    continue
                key = (-sim, -matches, case.id)
                if best is None or key < best[0]:
                    best = (key, case.id)
            return None if best is None else best[1]

        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            cohort = synth_cohort(60, seed=2000 + seed)
            std = fit_standardization(cohort[:50], config)
            n_cases = int(rng.integers(1, 51))
            cases = []
            for j in range(n_cases):
                source = cohort[int(rng.integers(0, 50))]
                vec = normalize(source, std, config)
                if rng.random() < 0.2 and cases:
                    vec = np.asarray(cases[-1].normalized_vector)  # force exact ties
                cases.append(
                    _case(
                        f"c{j:03d}",
                        tuple(vec),
                        sex=source.sex,
                        band=source.age_band,
                        race=source.race,
                        clinical={f: float(getattr(source, f)) for f in CLINICAL_FEATURES},
                    )
                )
            query = cohort[50 + int(rng.integers(0, 10))]
            if rng.random() < 0.4:
                # plant a clinical near-duplicate of the query so the success
                # path (gates passed) is exercised, not only the no-candidate one
                qvec = normalize(query, std, config)
                cases.append(
                    _case(
                        "dup",
                        tuple(qvec),
                        sex=query.sex,
                        band=query.age_band,
                        race=query.race,
                        clinical={f: float(getattr(query, f)) for f in CLINICAL_FEATURES},
                    )
                )
            repo = Repository(
                schema_version=SCHEMA_VERSION,
                standardization=std,
                threshold=0.5,
                seed=0,
                cases=cases,
            )
            result = retrieve(query, repo, config)
            expected = oracle(query, repo)
            got = None if result is None else result.case.id
            assert got == expected, f"seed {seed}: {got} != {expected}"
            hits += result is not None
        assert hits > 0  # the gate must pass at least sometimes across 100 draws

    def test_result_respects_gates_always(self):
        config = RetrievalConfig()
        for seed in range(20):
            cohort = synth_cohort(40, seed=3000 + seed)
            std = fit_standardization(cohort[:30], config)
            cases = [
                _case(
                    f"c{j}",
                    tuple(normalize(r, std, config)),
                    sex=r.sex,
                    band=r.age_band,
                    race=r.race,
                    clinical={f: float(getattr(r, f)) for f in CLINICAL_FEATURES},
                )
                for j, r in enumerate(cohort[:30])
            ]
            repo = Repository(SCHEMA_VERSION, std, 0.5, 0, cases)
            for query in cohort[30:]:
                res = retrieve(query, repo, config)
                if res is not None:
                    assert res.similarity >= config.min_similarity
                    assert res.demo_matches >= config.min_demo_matches

    def test_deterministic(self):
        config = RetrievalConfig()
        cohort = synth_cohort(40, seed=77)
        std = fit_standardization(cohort[:30], config)
        cases = [
            _case(f"c{j}", tuple(normalize(r, std, config)), sex=r.sex,
                  band=r.age_band, race=r.race,
                  clinical={f: float(getattr(r, f)) for f in CLINICAL_FEATURES})
            for j, r in enumerate(cohort[:30])
        ]
        repo = Repository(SCHEMA_VERSION, std, 0.5, 0, cases)
        for query in cohort[30:]:
            r1 = retrieve(query, repo, config)
            r2 = retrieve(query, repo, config)
            assert (r1 is None) == (r2 is None)
            if r1 is not None:
                assert r1.case.id == r2.case.id
                assert r1.similarity == r2.similarity
