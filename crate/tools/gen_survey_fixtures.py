#!/usr/bin/env python3
"""Regenerates the synthetic survey and population fixtures.

The survey encodes a known ground-truth willingness model so the
regression stage has something recoverable to find:

    w = 1.2 + 0.018*age + 0.25*sex + 0.006*income_k + 0.15*education + N(0, 0.4)

clamped to the 1..5 response scale. The population file draws zip-specific
demographic mixes so the predicted participation rates differ by zip.
Both files are seeded and byte-stable.
"""

import csv
import pathlib
import random

HERE = pathlib.Path(__file__).resolve().parent
FIXTURES = HERE.parent / "crates" / "v2gsim" / "fixtures" / "travis"

TRUTH = dict(intercept=1.2, age=0.018, sex=0.25, income_k=0.006, education=0.15)
NOISE_SD = 0.4

# zip -> (age mean/sd, income mean/sd in $, education mean/sd)
ZIP_MIX = {
    "78617": ((41, 12), (65_000, 20_000), (2.7, 0.8)),
    "78645": ((52, 12), (90_000, 25_000), (3.2, 0.9)),
    "78660": ((40, 11), (85_000, 22_000), (3.3, 0.8)),
    "78701": ((38, 10), (110_000, 30_000), (3.8, 0.8)),
}
RESIDENTS_PER_ZIP = 300
SURVEY_N = 400


def draw_person(rng, age_ms, inc_ms, edu_ms):
    age = max(18, min(85, round(rng.gauss(*age_ms))))
    sex = rng.choice(["male", "female"])
    income = max(20_000, min(250_000, 5_000 * round(rng.gauss(*inc_ms) / 5_000)))
    education = max(1, min(5, round(rng.gauss(*edu_ms))))
    return age, sex, income, education


def willingness(rng, age, sex, income, education):
    w = (
        TRUTH["intercept"]
        + TRUTH["age"] * age
        + TRUTH["sex"] * (1.0 if sex == "female" else 0.0)
        + TRUTH["income_k"] * income / 1000.0
        + TRUTH["education"] * education
        + rng.gauss(0.0, NOISE_SD)
    )
    return max(1, min(5, round(w)))


def write_survey():
    rng = random.Random(20240917)
    pooled = [spec for spec in ZIP_MIX.values() for _ in range(SURVEY_N // len(ZIP_MIX))]
    with open(FIXTURES / "survey.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["age", "sex", "income_bracket_midpoint", "education_level", "willingness"])
        for age_ms, inc_ms, edu_ms in pooled:
            age, sex, income, education = draw_person(rng, age_ms, inc_ms, edu_ms)
            out.writerow([age, sex, income, education, willingness(rng, age, sex, income, education)])


def write_population():
    rng = random.Random(20240918)
    with open(FIXTURES / "population.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["zip", "age", "sex", "income_bracket_midpoint", "education_level"])
        for zip_code, (age_ms, inc_ms, edu_ms) in sorted(ZIP_MIX.items()):
            for _ in range(RESIDENTS_PER_ZIP):
                age, sex, income, education = draw_person(rng, age_ms, inc_ms, edu_ms)
                out.writerow([zip_code, age, sex, income, education])


if __name__ == "__main__":
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write_survey()
    write_population()
    print(f"wrote survey.csv and population.csv under {FIXTURES}")
