"""Patient data model, cohort CSV ingestion, synthetic cohort generation,
stratified splitting and split-balance diagnostics.

The synthetic generator draws every feature from published ICU population
statistics and produces the outcome from a fixed logistic model of severity,
so cohorts are reproducible from (n, seed) alone. An optional BiasInjection
adds per-demographic offsets to the outcome logit to create a controllably
biased ground process.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _sstats

from .errors import SchemaError, ValidationError

SEXES = ("male", "female")
RACES = ("white", "black", "asian", "other")
AGE_BANDS = ("18-59", "60+")

# Numeric clinical features, in canonical order. Demographics (age, sex,
# race) and the two constant intervention booleans are excluded: retrieval
# and model vectors are built over these 15 fields only.
CLINICAL_FEATURES = (
    "gcs",
    "apache_iii",
    "sofa_24h",
    "charlson",
    "spo2_min",
    "heart_rate",
    "resp_rate",
    "map_mean",
    "creatinine_max",
    "lactate_max",
    "troponin_max",
    "platelet_min",
    "bilirubin_max",
    "wbc_max",
    "urine_24h",
)

CSV_HEADER = (
    "id,age,sex,race,gcs,apache_iii,sofa_24h,charlson,spo2_min,heart_rate,"
    "resp_rate,map_mean,creatinine_max,lactate_max,troponin_max,platelet_min,"
    "bilirubin_max,wbc_max,urine_24h,mech_vent,code_status,died_in_hospital"
).split(",")

# Physical ranges: (low, high, inclusive_low). None = unbounded.
_RANGES = {
    "age": (18, None, True),
    "gcs": (3, 15, True),
    "apache_iii": (0, None, True),
    "sofa_24h": (0, 24, True),
    "charlson": (0, None, True),
    "spo2_min": (0.0, 100.0, True),
    "heart_rate": (0.0, None, False),
    "resp_rate": (0.0, None, False),
    "map_mean": (0.0, None, False),
    "creatinine_max": (0.0, None, True),
    "lactate_max": (0.0, None, True),
    "troponin_max": (0.0, None, True),
    "platelet_min": (0.0, None, True),
    "bilirubin_max": (0.0, None, True),
    "wbc_max": (0.0, None, True),
    "urine_24h": (0.0, None, True),
}

_INT_FIELDS = ("age", "gcs", "apache_iii", "sofa_24h", "charlson")
_BOOL_FIELDS = ("mech_vent", "code_status", "died_in_hospital")
_MISSING_TOKENS = ("", "NA")


def age_band(age: int) -> str:
    """Age band with the 59/60 boundary."""
    return "18-59" if age <= 59 else "60+"


@dataclass(frozen=True)
class SubgroupKey:
    """Full or marginal coordinate in the sex x age-band x race lattice.

    None in a dimension means "any" (marginal key).
    """

    sex: str | None = None
    age_band: str | None = None
    race: str | None = None

    def __post_init__(self):
        if self.sex is not None and self.sex not in SEXES:
            raise ValidationError(f"unknown sex {self.sex!r}")
        if self.age_band is not None and self.age_band not in AGE_BANDS:
            raise ValidationError(f"unknown age band {self.age_band!r}")
        if self.race is not None and self.race not in RACES:
            raise ValidationError(f"unknown race {self.race!r}")

    def matches(self, patient: "PatientRecord") -> bool:
        if self.sex is not None and patient.sex != self.sex:
            return False
        if self.age_band is not None and age_band(patient.age) != self.age_band:
            return False
        if self.race is not None and patient.race != self.race:
            return False
        return True

    def label(self) -> str:
        parts = [p for p in (self.sex, self.age_band, self.race) if p is not None]
        return "/".join(parts) if parts else "all"


def full_lattice() -> list[SubgroupKey]:
    """All 16 full subgroup keys."""
    return [
        SubgroupKey(sex=s, age_band=a, race=r)
        for s in SEXES
        for a in AGE_BANDS
        for r in RACES
    ]


@dataclass(frozen=True)
class PatientRecord:
    id: str
    age: int
    sex: str
    race: str
    gcs: int
    apache_iii: int
    sofa_24h: int
    charlson: int
    spo2_min: float
    heart_rate: float
    resp_rate: float
    map_mean: float
    creatinine_max: float
    lactate_max: float
    troponin_max: float
    platelet_min: float
    bilirubin_max: float
    wbc_max: float
    urine_24h: float
    mech_vent: bool
    code_status: bool
    died_in_hospital: bool

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValidationError(f"patient {self.id}: unknown sex {self.sex!r}")
        if self.race not in RACES:
            raise ValidationError(f"patient {self.id}: unknown race {self.race!r}")
        for name in _RANGES:
            _check_range(name, getattr(self, name), context=f"patient {self.id}")

    @property
    def age_band(self) -> str:
        return age_band(self.age)

    def subgroup(self) -> SubgroupKey:
        return SubgroupKey(sex=self.sex, age_band=self.age_band, race=self.race)

    def clinical_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, f)) for f in CLINICAL_FEATURES])


def _check_range(name: str, value, context: str = ""):
    low, high, inclusive_low = _RANGES[name]
    prefix = f"{context}: " if context else ""
    if not math.isfinite(float(value)):
        raise ValidationError(f"{prefix}{name} is not finite")
    if inclusive_low:
        if value < low:
            raise ValidationError(f"{prefix}{name}={value} below minimum {low}")
    else:
        if value <= low:
            raise ValidationError(f"{prefix}{name}={value} must be > {low}")
    if high is not None and value > high:
        raise ValidationError(f"{prefix}{name}={value} above maximum {high}")


# ---------------------------------------------------------------------------
# Synthetic cohort generation
# ---------------------------------------------------------------------------

# Population reference statistics (mean, sd) used both to draw features and
# to standardize them inside the outcome model.
GENERATOR_MARGINALS = {
    "age": (66.1, 16.2),
    "gcs": (8.0, 4.6),
    "apache_iii": (29.3, 19.5),
    "sofa_24h": (3.9, 2.4),
    "charlson": (5.1, 3.0),
    "spo2_min": (87.0, 4.4),
    "heart_rate": (87.8, 17.4),
    "resp_rate": (19.3, 0.6),
    "map_mean": (84.8, 2.9),
    "creatinine_max": (3.2, 1.0),
    "lactate_max": (1.9, 0.4),
    "troponin_max": (0.8, 0.3),
    "platelet_min": (167.7, 10.1),
    "bilirubin_max": (1.9, 0.8),
    "wbc_max": (17.2, 2.1),
    "urine_24h": (1680.8, 1223.2),
}

FEMALE_FRACTION = 0.446
RACE_MIX = {"white": 0.541, "black": 0.156, "asian": 0.011, "other": 0.292}

# Outcome model: logit(p) = intercept + sum(coef * z) over standardized
# severity features. Intercept calibrated by simulation so overall mortality
# prevalence lands at 14.4%.
OUTCOME_COEFS = {
    "sofa_24h": 0.9,
    "apache_iii": 0.7,
    "lactate_max": 0.5,
    "age": 0.6,
    "charlson": 0.4,
}
OUTCOME_INTERCEPT = -2.4083


@dataclass(frozen=True)
class BiasInjection:
    """Per-demographic logit offsets applied to the generating process."""

    sex: dict[str, float] = field(default_factory=dict)
    age_band: dict[str, float] = field(default_factory=dict)
    race: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        _check_offset_keys("sex", self.sex, SEXES)
        _check_offset_keys("age_band", self.age_band, AGE_BANDS)
        _check_offset_keys("race", self.race, RACES)

    def offset_for(self, sex: str, band: str, race: str) -> float:
        return (
            self.sex.get(sex, 0.0)
            + self.age_band.get(band, 0.0)
            + self.race.get(race, 0.0)
        )


def _check_offset_keys(attr: str, mapping: dict, domain: tuple):
    for key in mapping:
        if key not in domain:
            raise ValidationError(f"bias injection: unknown {attr} value {key!r}")


def sigmoid(x: float) -> float:
    """Numerically safe logistic, clipped into the open interval (0, 1)."""
    if x >= 0:
        p = 1.0 / (1.0 + math.exp(-x))
    else:
        e = math.exp(x)
        p = e / (1.0 + e)
    # float rounding can hit exactly 0.0 or 1.0 at |x| > ~37
    return min(max(p, 5e-324), float(np.nextafter(1.0, 0.0)))


def outcome_logit(record: PatientRecord, bias_spec: BiasInjection | None = None) -> float:
    """Logit of the generating process for a record's stored feature values."""
    z = 0.0
    for name, coef in OUTCOME_COEFS.items():
        mean, sd = GENERATOR_MARGINALS[name]
        z += coef * (float(getattr(record, name)) - mean) / sd
    logit = OUTCOME_INTERCEPT + z
    if bias_spec is not None:
        logit += bias_spec.offset_for(record.sex, record.age_band, record.race)
    return logit


def generating_probability(record: PatientRecord, bias_spec: BiasInjection | None = None) -> float:
    """Oracle mortality probability the generator used for this record."""
    return sigmoid(outcome_logit(record, bias_spec))


def synth_cohort(
    n: int,
    seed: int,
    bias_spec: BiasInjection | None = None,
) -> list[PatientRecord]:
    """Generate a deterministic synthetic cohort of n adult ICU stays."""
    if n < 1:
        raise ValidationError("synth_cohort requires n >= 1")
    rng = np.random.default_rng(seed)

    def draw(name: str) -> np.ndarray:
        mean, sd = GENERATOR_MARGINALS[name]
        return rng.normal(mean, sd, size=n)

    age = np.maximum(np.rint(draw("age")), 18).astype(int)
    sex_draw = rng.random(n)
    race_draw = rng.choice(list(RACE_MIX), size=n, p=list(RACE_MIX.values()))

    gcs = np.clip(np.rint(draw("gcs")), 3, 15).astype(int)
    apache = np.maximum(np.rint(draw("apache_iii")), 0).astype(int)
    sofa = np.clip(np.rint(draw("sofa_24h")), 0, 24).astype(int)
    charlson = np.maximum(np.rint(draw("charlson")), 0).astype(int)
    spo2 = np.round(np.clip(draw("spo2_min"), 0.0, 100.0), 1)
    hr = np.round(np.maximum(draw("heart_rate"), 20.0), 1)
    rr = np.round(np.maximum(draw("resp_rate"), 4.0), 1)
    mapm = np.round(np.maximum(draw("map_mean"), 20.0), 1)
    creat = np.round(np.maximum(draw("creatinine_max"), 0.0), 2)
    lact = np.round(np.maximum(draw("lactate_max"), 0.0), 2)
    trop = np.round(np.maximum(draw("troponin_max"), 0.0), 2)
    plt_ = np.round(np.maximum(draw("platelet_min"), 0.0), 2)
    bili = np.round(np.maximum(draw("bilirubin_max"), 0.0), 2)
    wbc = np.round(np.maximum(draw("wbc_max"), 0.0), 2)
    urine = np.round(np.maximum(draw("urine_24h"), 0.0), 1)

    outcome_draw = rng.random(n)

    records = []
    for i in range(n):
        rec = PatientRecord(
            id=f"p{i:06d}",
            age=int(age[i]),
            sex="female" if sex_draw[i] < FEMALE_FRACTION else "male",
            race=str(race_draw[i]),
            gcs=int(gcs[i]),
            apache_iii=int(apache[i]),
            sofa_24h=int(sofa[i]),
            charlson=int(charlson[i]),
            spo2_min=float(spo2[i]),
            heart_rate=float(hr[i]),
            resp_rate=float(rr[i]),
            map_mean=float(mapm[i]),
            creatinine_max=float(creat[i]),
            lactate_max=float(lact[i]),
            troponin_max=float(trop[i]),
            platelet_min=float(plt_[i]),
            bilirubin_max=float(bili[i]),
            wbc_max=float(wbc[i]),
            urine_24h=float(urine[i]),
            mech_vent=False,
            code_status=False,
            died_in_hospital=False,
        )
        p = generating_probability(rec, bias_spec)
        if outcome_draw[i] < p:
            rec = replace(rec, died_in_hospital=True)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# CSV ingestion / writing
# ---------------------------------------------------------------------------

@dataclass
class RejectedRow:
    row: int  # 1-based data row index (header not counted)
    reason: str


@dataclass
class IngestResult:
    records: list[PatientRecord]
    rejected: list[RejectedRow]


def _is_missing(cell: str) -> bool:
    return cell.strip() in _MISSING_TOKENS


def _parse_bool(cell: str, row: int, col: str) -> bool:
    if cell == "1":
        return True
    if cell == "0":
        return False
    raise ValidationError(f"row {row}, column {col}: boolean must be 0 or 1, got {cell!r}")


def ingest_csv(path: str, impute: bool = True) -> IngestResult:
    """Load a cohort CSV.

    Missing cells are empty or the literal "NA". Rows missing demographics,
    outcome or (when impute is off) any non-imputable cell are rejected and
    reported by row index; out-of-range or unparsable values raise.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header != CSV_HEADER:
            for i, expected in enumerate(CSV_HEADER):
                got = header[i] if i < len(header) else "<missing>"
                if got != expected:
                    raise SchemaError(
                        f"{path}: header mismatch at column {i + 1}: "
                        f"expected {expected!r}, got {got!r}"
                    )
            raise SchemaError(f"{path}: header has {len(header)} columns, expected {len(CSV_HEADER)}")
        rows = list(reader)

    rejected: list[RejectedRow] = []
    parsed: list[dict | None] = []
    for idx, cells in enumerate(rows, start=1):
        if len(cells) != len(CSV_HEADER):
            raise ValidationError(f"row {idx}: expected {len(CSV_HEADER)} cells, got {len(cells)}")
        vals = dict(zip(CSV_HEADER, cells))
        missing_required = [
            c for c in ("id", "age", "sex", "race", "died_in_hospital") if _is_missing(vals[c])
        ]
        if missing_required:
            rejected.append(RejectedRow(idx, f"missing required field(s): {', '.join(missing_required)}"))
            parsed.append(None)
            continue
        bool_missing = [c for c in ("mech_vent", "code_status") if _is_missing(vals[c])]
        if bool_missing:
            rejected.append(RejectedRow(idx, f"missing non-imputable field(s): {', '.join(bool_missing)}"))
            parsed.append(None)
            continue
        if not impute:
            numeric_missing = [c for c in CLINICAL_FEATURES if _is_missing(vals[c])]
            if numeric_missing:
                rejected.append(
                    RejectedRow(idx, f"missing value(s) with imputation off: {', '.join(numeric_missing)}")
                )
                parsed.append(None)
                continue
        parsed.append(vals)

    # column means over non-missing cells of accepted rows
    col_means: dict[str, float] = {}
    if impute:
        for col in CLINICAL_FEATURES:
            observed = []
            for idx, vals in enumerate(parsed, start=1):
                if vals is None or _is_missing(vals[col]):
                    continue
                try:
                    observed.append(float(vals[col]))
                except ValueError:
                    raise ValidationError(f"row {idx}, column {col}: not a number: {vals[col]!r}") from None
            if observed:
                col_means[col] = float(np.mean(observed))

    records: list[PatientRecord] = []
    for idx, vals in enumerate(parsed, start=1):
        if vals is None:
            continue
        kwargs: dict = {"id": vals["id"]}
        try:
            kwargs["age"] = int(vals["age"])
        except ValueError:
            raise ValidationError(f"row {idx}, column age: not an integer: {vals['age']!r}") from None
        kwargs["sex"] = vals["sex"]
        kwargs["race"] = vals["race"]
        for col in CLINICAL_FEATURES:
            cell = vals[col]
            if _is_missing(cell):
                if col not in col_means:
                    raise ValidationError(f"column {col}: no observed values to impute from")
                value = col_means[col]
            else:
                try:
                    value = float(cell)
                except ValueError:
                    raise ValidationError(f"row {idx}, column {col}: not a number: {cell!r}") from None
            kwargs[col] = int(round(value)) if col in _INT_FIELDS else value
        for col in _BOOL_FIELDS:
            kwargs[col] = _parse_bool(vals[col], idx, col)
        try:
            records.append(PatientRecord(**kwargs))
        except ValidationError as exc:
            raise ValidationError(f"row {idx}: {exc}") from None

    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate patient id(s): {', '.join(dupes[:5])}")
    return IngestResult(records=records, rejected=rejected)


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(records: list[PatientRecord], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for rec in records:
            fh.write(",".join(_format_cell(getattr(rec, col)) for col in CSV_HEADER) + "\n")


# ---------------------------------------------------------------------------
# Stratified split and balance diagnostics
# ---------------------------------------------------------------------------

@dataclass
class CohortSplit:
    train: list[PatientRecord]
    test: list[PatientRecord]
    seed: int
    ratio: float


def split(cohort: list[PatientRecord], ratio: float, seed: int) -> CohortSplit:
    """Outcome-stratified split, deterministic per seed."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    died = [r for r in cohort if r.died_in_hospital]
    survived = [r for r in cohort if not r.died_in_hospital]
    if len(died) < 2 or len(survived) < 2:
        raise ValidationError(
            "stratified split needs at least 2 records of each outcome class "
            f"(got {len(died)} died, {len(survived)} survived)"
        )
    rng = np.random.default_rng(seed)
    n_train_total = math.floor(ratio * len(cohort) + 0.5)

    # per-class targets: floors, then remainders by largest fractional part
    # (positive class first on ties)
    classes = [("died", died), ("survived", survived)]
    base = {name: math.floor(ratio * len(recs)) for name, recs in classes}
    rem = {name: ratio * len(recs) - base[name] for name, recs in classes}
    extra = n_train_total - sum(base.values())
    order = sorted(classes, key=lambda kv: (-rem[kv[0]], kv[0] != "died"))
    take = dict(base)
    for name, _ in order:
        if extra <= 0:
            break
        take[name] += 1
        extra -= 1

    train: list[PatientRecord] = []
    test: list[PatientRecord] = []
    for name, recs in classes:
        perm = rng.permutation(len(recs))
        chosen = set(perm[: take[name]].tolist())
        for i, rec in enumerate(recs):
            (train if i in chosen else test).append(rec)
    return CohortSplit(train=train, test=test, seed=seed, ratio=ratio)


CATEGORICAL_FEATURES = ("sex", "race", "mech_vent", "code_status", "died_in_hospital")
CONTINUOUS_FEATURES = ("age",) + CLINICAL_FEATURES


@dataclass
class BalanceResult:
    feature: str
    statistic: float
    p_value: float
    kind: str  # "welch_t" or "chi_square"


def balance_test(split_: CohortSplit, feature: str) -> BalanceResult:
    """Train-vs-test balance diagnostic for one schema feature."""
    if feature in CONTINUOUS_FEATURES:
        a = np.array([float(getattr(r, feature)) for r in split_.train])
        b = np.array([float(getattr(r, feature)) for r in split_.test])
        if a.std() == 0.0 and b.std() == 0.0:
            raise ValidationError(f"feature {feature}: zero variance in both splits")
        t, p = _sstats.ttest_ind(a, b, equal_var=False)
        return BalanceResult(feature, float(t), float(p), "welch_t")
    if feature in CATEGORICAL_FEATURES:
        cats = sorted(
            {str(getattr(r, feature)) for r in split_.train}
            | {str(getattr(r, feature)) for r in split_.test}
        )
        table = np.array(
            [
                [sum(1 for r in recs if str(getattr(r, feature)) == c) for c in cats]
                for recs in (split_.train, split_.test)
            ]
        )
        table = table[:, table.sum(axis=0) > 0]
        if table.shape[1] < 2:
            return BalanceResult(feature, 0.0, 1.0, "chi_square")
        chi2, p, _, _ = _sstats.chi2_contingency(table, correction=False)
        return BalanceResult(feature, float(chi2), float(p), "chi_square")
    raise ValidationError(f"unknown feature {feature!r}")
