"""Simulated ICU-mortality cohort shaped like an eICU extract.

The feature list is a plausible 83-column layout (demographics, day-one
vitals, first/last early labs, comorbidity flags). It is not the exact
feature set of any published study; it exists so the harness can be run
end to end without restricted data.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .schema import DataTable, FeatureSpec, TableSchema

N_LATENT = 4  # acuity, renal, hepatic, inflammation

# name: (mean, sd, lo, hi, log-scale?, latent loadings, unit)
_VITALS = {
    "heartrate": (88.0, 17.0, 20, 250, False, (0.5, 0.0, 0.0, 0.3), "bpm"),
    "sysbp": (122.0, 22.0, 40, 260, False, (-0.5, 0.0, 0.0, -0.2), "mmHg"),
    "diasbp": (65.0, 14.0, 20, 180, False, (-0.4, 0.0, 0.0, -0.2), "mmHg"),
    "meanbp": (82.0, 15.0, 30, 200, False, (-0.5, 0.0, 0.0, -0.2), "mmHg"),
    "resprate": (19.0, 5.0, 4, 60, False, (0.5, 0.0, 0.0, 0.2), "/min"),
    "tempc": (36.9, 0.7, 32, 42, False, (0.0, 0.0, 0.0, 0.6), "C"),
    "spo2": (96.5, 2.5, 50, 100, False, (-0.5, 0.0, 0.0, 0.0), "%"),
}
_LABS = {
    "albumin": (3.1, 0.6, 0.5, 6.5, False, (-0.4, 0.0, -0.4, -0.2), "g/dL"),
    "bilirubin": (0.9, 0.8, 0.05, 40, True, (0.1, 0.0, 0.8, 0.0), "mg/dL"),
    "bun": (24.0, 0.65, 1, 250, True, (0.3, 0.8, 0.0, 0.0), "mg/dL"),
    "calcium": (8.6, 0.7, 4, 14, False, (-0.3, -0.2, 0.0, 0.0), "mg/dL"),
    "creatinine": (1.2, 0.7, 0.1, 20, True, (0.2, 0.9, 0.0, 0.0), "mg/dL"),
    "glucose": (140.0, 0.4, 20, 1500, True, (0.3, 0.0, 0.0, 0.2), "mg/dL"),
    "bicarbonate": (24.0, 4.5, 3, 50, False, (-0.5, -0.3, 0.0, 0.0), "mEq/L"),
    "hematocrit": (34.0, 6.0, 10, 65, False, (-0.3, -0.2, 0.0, 0.0), "%"),
    "hemoglobin": (11.2, 2.1, 3, 22, False, (-0.3, -0.2, 0.0, 0.0), "g/dL"),
    "inr": (1.3, 0.3, 0.5, 15, True, (0.2, 0.0, 0.6, 0.0), ""),
    "lactate": (2.0, 0.6, 0.2, 30, True, (0.7, 0.0, 0.2, 0.2), "mmol/L"),
    "platelets": (210.0, 0.45, 5, 1500, True, (-0.2, 0.0, -0.4, 0.3), "K/uL"),
    "potassium": (4.1, 0.6, 1.5, 9, False, (0.1, 0.5, 0.0, 0.0), "mEq/L"),
    "ptt": (33.0, 0.3, 15, 150, True, (0.2, 0.0, 0.5, 0.0), "s"),
    "sodium": (138.0, 4.5, 110, 175, False, (0.1, 0.2, 0.0, 0.0), "mEq/L"),
    "wbc": (11.0, 0.45, 0.1, 150, True, (0.3, 0.0, 0.0, 0.8), "K/uL"),
    "chloride": (104.0, 5.5, 70, 140, False, (0.0, 0.2, 0.0, 0.0), "mEq/L"),
    "magnesium": (1.9, 0.3, 0.5, 5, False, (0.0, 0.3, 0.0, 0.0), "mg/dL"),
    "phosphate": (3.6, 1.1, 0.5, 15, False, (0.2, 0.6, 0.0, 0.0), "mg/dL"),
    "ph": (7.37, 0.08, 6.7, 7.8, False, (-0.6, -0.2, 0.0, 0.0), ""),
    "pao2": (110.0, 0.45, 20, 600, True, (-0.3, 0.0, 0.0, 0.0), "mmHg"),
    "paco2": (41.0, 9.0, 10, 130, False, (0.2, 0.0, 0.0, 0.0), "mmHg"),
    "alt": (35.0, 0.9, 2, 5000, True, (0.2, 0.0, 0.7, 0.0), "U/L"),
    "ast": (45.0, 0.9, 2, 8000, True, (0.3, 0.0, 0.7, 0.0), "U/L"),
    "alkphos": (95.0, 0.5, 10, 2000, True, (0.0, 0.0, 0.6, 0.0), "U/L"),
}
_LAB_MISSING = {
    "albumin": 0.4, "bilirubin": 0.4, "inr": 0.35, "lactate": 0.5, "ptt": 0.45,
    "ph": 0.55, "pao2": 0.55, "paco2": 0.55, "alt": 0.4, "ast": 0.4, "alkphos": 0.4,
    "magnesium": 0.25, "phosphate": 0.3,
}
_COMORBIDITIES = {
    # name: (base log-odds, acuity loading)
    "elective_surgery": (-1.6, -0.6),
    "ventilated_day1": (-1.0, 0.9),
    "vasopressor_day1": (-2.0, 1.0),
    "diabetes": (-1.2, 0.1),
    "chf": (-2.0, 0.3),
    "copd": (-2.2, 0.2),
    "immunosuppression": (-3.0, 0.2),
    "cirrhosis": (-3.5, 0.3),
    "metastatic_cancer": (-3.3, 0.3),
}
_ETHNICITY = ("caucasian", "black", "hispanic", "asian", "other")
_ETHNICITY_P = (0.74, 0.12, 0.06, 0.03, 0.05)


def eicu_shaped_schema() -> TableSchema:
    """The 83-feature fixture schema (82 covariates + ``death`` label)."""
    f = [
        FeatureSpec("is_female", "binary", "group", ("0", "1")),
        FeatureSpec("ethnicity", "categorical", "group", _ETHNICITY),
        FeatureSpec("age", "continuous", range=(16, 100), unit="years"),
        FeatureSpec("bmi", "continuous", range=(10, 80), unit="kg/m2"),
        FeatureSpec("hosp_los", "continuous", range=(0, 365), unit="days"),
        FeatureSpec("gcs_min", "continuous", range=(3, 15)),
        FeatureSpec("urine_output", "continuous", range=(0, 15000), unit="mL"),
        FeatureSpec("admit_source", "categorical",
                    allowed_values=("emergency", "floor", "operating_room", "other")),
        FeatureSpec("unit_type", "categorical", allowed_values=("med_surg", "cardiac", "neuro", "trauma")),
    ]
    f += [FeatureSpec(name, "binary", allowed_values=("0", "1")) for name in _COMORBIDITIES]
    for name, (_, _, lo, hi, _, _, unit) in _VITALS.items():
        for stat in ("min", "max"):
            f.append(FeatureSpec(f"{name}_{stat}", "continuous", range=(lo, hi), unit=unit or None))
    for name, (_, _, lo, hi, _, _, unit) in _LABS.items():
        for when in ("first", "last"):
            f.append(FeatureSpec(f"{name}_{when}_early", "continuous", range=(lo, hi), unit=unit or None))
    f.append(FeatureSpec("death", "binary", "label", ("0", "1")))
    return TableSchema(tuple(f), version="eicu-shaped-v1")


def _clip(x, lo, hi):
    return np.clip(x, lo, hi)


def simulate_cohort(n_rows: int, seed: int = 0, prevalence: float = 0.0867,
                    missing_scale: float = 1.0) -> DataTable:
    """Draw a cohort from a latent-factor ground truth.

    Covariates share four latent severity factors, first/last lab pairs are
    correlated (rho = 0.8), and death follows a logistic model driven mostly
    by a dozen observed features, with a small weight on latent acuity. The intercept is solved so
    the expected death rate on the drawn sample equals ``prevalence``.
    ``missing_scale`` scales the per-lab MCAR rates (0 disables missingness).
    """
    rng = np.random.default_rng(seed)
    schema = eicu_shaped_schema()
    n = n_rows
    z = rng.standard_normal((n, N_LATENT))
    female = rng.random(n) < 0.455
    eth = rng.choice(len(_ETHNICITY), size=n, p=_ETHNICITY_P)
    age = _clip(63 + 16 * (0.4 * z[:, 0] + 0.9 * rng.standard_normal(n)), 16, 100)
    age_s = (age - 63) / 16
    cols: dict[str, np.ndarray] = {
        "is_female": np.where(female, "1", "0").astype(object),
        "ethnicity": np.array([_ETHNICITY[i] for i in eth], dtype=object),
        "age": np.round(age, 0),
    }
    cols["bmi"] = np.round(_clip(28.5 + 6.5 * rng.standard_normal(n) - 1.0 * female, 10, 80), 1)
    cols["hosp_los"] = np.round(_clip(np.exp(np.log(6.5) + 0.7 * (0.5 * z[:, 0] + 0.85 * rng.standard_normal(n))),
                                      0, 365), 2)
    gcs = 14 - 3.0 * np.maximum(0, 0.8 * z[:, 0] + 0.6 * rng.standard_normal(n))
    cols["gcs_min"] = np.round(_clip(gcs, 3, 15), 0)
    cols["urine_output"] = np.round(_clip(np.exp(np.log(1700) + 0.5 * (-0.4 * z[:, 0] - 0.4 * z[:, 1]
                                                                     + 0.8 * rng.standard_normal(n))), 0, 15000), 0)
    src = rng.choice(4, size=n, p=(0.55, 0.2, 0.18, 0.07))
    cols["admit_source"] = np.array([schema["admit_source"].allowed_values[i] for i in src], dtype=object)
    typ = rng.choice(4, size=n, p=(0.6, 0.2, 0.12, 0.08))
    cols["unit_type"] = np.array([schema["unit_type"].allowed_values[i] for i in typ], dtype=object)
    for name, (b0, load) in _COMORBIDITIES.items():
        p = expit(b0 + load * z[:, 0] + 0.2 * age_s)
        cols[name] = np.where(rng.random(n) < p, "1", "0").astype(object)

    def draw(mean, sd, lo, hi, log, loads, sex_shift=0.0):
        base = z @ np.asarray(loads)
        resid = np.sqrt(max(1e-6, 1 - float(np.dot(loads, loads))))
        s1 = base + resid * rng.standard_normal(n) + sex_shift * female
        s2 = 0.8 * s1 + 0.6 * (base + resid * rng.standard_normal(n) + sex_shift * female) - 0.4 * base
        out = []
        for s in (s1, s2):
            x = np.exp(np.log(mean) + sd * s) if log else mean + sd * s
            out.append(_clip(x, lo, hi))
        return out

    for name, (mean, sd, lo, hi, log, loads, _) in _VITALS.items():
        center, spread = draw(mean, sd, lo, hi, log, loads)
        width = np.abs(spread - center) * 0.5 + 0.25 * sd
        cols[f"{name}_min"] = np.round(_clip(center - width, lo, hi), 1)
        cols[f"{name}_max"] = np.round(_clip(center + width, lo, hi), 1)
    for name, (mean, sd, lo, hi, log, loads, _) in _LABS.items():
        shift = -0.6 if name in ("hemoglobin", "hematocrit") else 0.0
        first, last = draw(mean, sd, lo, hi, log, loads, sex_shift=shift)
        cols[f"{name}_first_early"] = np.round(first, 3)
        cols[f"{name}_last_early"] = np.round(last, 3)

    def std(name):
        x = cols[name].astype(float)
        if _LABS.get(name.split("_")[0], (0, 0, 0, 0, False))[4]:
            x = np.log(x)
        return (x - x.mean()) / x.std()

    lin = (0.4 * z[:, 0] + 0.7 * age_s - 0.7 * std("gcs_min") + 0.6 * std("lactate_last_early")
           + 0.5 * std("bun_first_early") - 0.45 * std("albumin_first_early")
           + 0.4 * std("bilirubin_last_early") - 0.45 * std("sysbp_min") + 0.35 * std("heartrate_max")
           + 0.3 * std("resprate_max") + 0.8 * (cols["vasopressor_day1"] == "1")
           + 0.6 * (cols["metastatic_cancer"] == "1") - 0.6 * (cols["elective_surgery"] == "1"))
    b0 = brentq(lambda b: expit(b + lin).mean() - prevalence, -20, 10)
    death = rng.random(n) < expit(b0 + lin)
    cols["death"] = np.where(death, "1", "0").astype(object)

    if missing_scale > 0:
        for name, rate in _LAB_MISSING.items():
            for when in ("first", "last"):
                key = f"{name}_{when}_early"
                miss = rng.random(n) < min(0.95, rate * missing_scale)
                cols[key] = cols[key].astype(float)
                cols[key][miss] = np.nan
    return DataTable.from_columns(schema, cols)
