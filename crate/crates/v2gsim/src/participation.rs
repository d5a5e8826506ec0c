//! Willingness-to-participate scoring: fits an ordinary least squares
//! model on survey responses (1-5 willingness over age, sex, income, and
//! education), scores a synthetic population, and converts predicted
//! categories into per-zip participation rates.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Category -> participation rate mapping: "definitely would not" through
/// "definitely would".
pub const CATEGORY_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub const FEATURE_NAMES: [&str; 4] = ["age", "sex", "income", "education"];

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 20 survey responses, got {0}")]
    TooFewResponses(usize),
    #[error("holdout split leaves fewer than 5 rows in one part ({train} train / {holdout} holdout)")]
    DegenerateSplit { train: usize, holdout: usize },
    #[error("holdout fraction must be in (0, 1), got {0}")]
    BadHoldoutFraction(f64),
    #[error("collinear features")]
    CollinearFeatures,
    #[error("missing feature: {0}")]
    MissingFeature(&'static str),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("willingness must be 1-5, got {0}")]
    BadWillingness(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// A demographic record as read from CSV; absent cells stay `None` and are
/// reported by name when encoding.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DemographicRecord {
    pub age: Option<f64>,
    pub sex: Option<Sex>,
    /// Income bracket midpoint, $/yr.
    #[serde(rename = "income_bracket_midpoint")]
    pub income: Option<f64>,
    /// Ordinal education level 1-5.
    #[serde(rename = "education_level")]
    pub education: Option<f64>,
}

impl DemographicRecord {
    pub fn new(age: f64, sex: Sex, income: f64, education: f64) -> Self {
        DemographicRecord {
            age: Some(age),
            sex: Some(sex),
            income: Some(income),
            education: Some(education),
        }
    }

    /// Raw numeric feature vector: age in years, sex as {male 0, female 1},
    /// income in $1000s, education as its ordinal level.
    pub fn raw_features(&self) -> Result<[f64; 4], FitError> {
        Ok([
            self.age.ok_or(FitError::MissingFeature("age"))?,
            match self.sex.ok_or(FitError::MissingFeature("sex"))? {
                Sex::Male => 0.0,
                Sex::Female => 1.0,
            },
            self.income.ok_or(FitError::MissingFeature("income"))? / 1000.0,
            self.education.ok_or(FitError::MissingFeature("education"))?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyResponse {
    pub demographics: DemographicRecord,
    pub willingness: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub intercept: f64,
    /// Coefficients over standardized features, ordered as FEATURE_NAMES.
    pub coefficients: [f64; 4],
    pub feature_means: [f64; 4],
    pub feature_sds: [f64; 4],
    /// Fit quality on the held-out split.
    pub r_squared: f64,
    pub mean_absolute_error: f64,
}

impl RegressionModel {
    /// Standardized feature vector under the model's stored parameters.
    pub fn encode_features(&self, record: &DemographicRecord) -> Result<[f64; 4], FitError> {
        let raw = record.raw_features()?;
        let mut z = [0.0; 4];
        for k in 0..4 {
            z[k] = (raw[k] - self.feature_means[k]) / self.feature_sds[k];
        }
        Ok(z)
    }

    pub fn predict_raw(&self, record: &DemographicRecord) -> Result<f64, FitError> {
        let z = self.encode_features(record)?;
        Ok(self.intercept + z.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Clamp to the 1-5 scale, then round half-up.
    pub fn predict_category(&self, record: &DemographicRecord) -> Result<u8, FitError> {
        let raw = self.predict_raw(record)?;
        Ok(round_category(raw))
    }
}

pub fn round_category(raw: f64) -> u8 {
    let clamped = raw.clamp(1.0, 5.0);
    ((clamped + 0.5).floor() as u8).clamp(1, 5)
}

/// Fits OLS on standardized features with a seeded holdout split.
///
/// The split is a seed-deterministic uniform shuffle; fit metrics
/// (r_squared, mean absolute error) are reported on the holdout part.
pub fn fit(
    training: &[SurveyResponse],
    holdout_fraction: f64,
    seed: u64,
) -> Result<RegressionModel, FitError> {
    let n = training.len();
    if n < 20 {
        return Err(FitError::TooFewResponses(n));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(FitError::BadHoldoutFraction(holdout_fraction));
    }
    for r in training {
        if !(1..=5).contains(&r.willingness) {
            return Err(FitError::BadWillingness(r.willingness));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let holdout_len = ((n as f64) * holdout_fraction).round() as usize;
    let train_len = n - holdout_len;
    if holdout_len < 5 || train_len < 5 {
        return Err(FitError::DegenerateSplit {
            train: train_len,
            holdout: holdout_len,
        });
    }
    let holdout_idx = &order[..holdout_len];
    let train_idx = &order[holdout_len..];

    let raw: Vec<[f64; 4]> = training
        .iter()
        .map(|r| r.demographics.raw_features())
        .collect::<Result<_, _>>()?;

    let mut means = [0.0; 4];
    let mut sds = [0.0; 4];
    for k in 0..4 {
        let vals: Vec<f64> = train_idx.iter().map(|&i| raw[i][k]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        means[k] = mean;
        sds[k] = var.sqrt();
        if sds[k] <= 0.0 {
            // a constant feature carries no information and breaks
            // standardization; treat it like a collinear column
            return Err(FitError::CollinearFeatures);
        }
    }

    let design = |rows: &[usize]| -> (DMatrix<f64>, DVector<f64>) {
        let mut x = DMatrix::<f64>::zeros(rows.len(), 5);
        let mut y = DVector::<f64>::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            x[(r, 0)] = 1.0;
            for k in 0..4 {
                x[(r, k + 1)] = (raw[i][k] - means[k]) / sds[k];
            }
            y[r] = training[i].willingness as f64;
        }
        (x, y)
    };
    let (x_train, y_train) = design(train_idx);

    // normal equations on the standardized design
    let xtx = x_train.transpose() * &x_train;
    let xty = x_train.transpose() * &y_train;
    let svd = xtx.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    if svd.singular_values.iter().any(|&s| s < max_sv * 1e-10) {
        return Err(FitError::CollinearFeatures);
    }
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or(FitError::CollinearFeatures)?;

    let model = RegressionModel {
        intercept: beta[0],
        coefficients: [beta[1], beta[2], beta[3], beta[4]],
        feature_means: means,
        feature_sds: sds,
        r_squared: 0.0,
        mean_absolute_error: 0.0,
    };

    let (x_hold, y_hold) = design(holdout_idx);
    let pred = &x_hold * &beta;
    let mean_y = y_hold.iter().sum::<f64>() / y_hold.len() as f64;
    let sse: f64 = (0..y_hold.len()).map(|i| (y_hold[i] - pred[i]).powi(2)).sum();
    let sst: f64 = y_hold.iter().map(|y| (y - mean_y).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    let mae: f64 =
        (0..y_hold.len()).map(|i| (y_hold[i] - pred[i]).abs()).sum::<f64>() / y_hold.len() as f64;

    Ok(RegressionModel {
        r_squared,
        mean_absolute_error: mae,
        ..model
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipParticipation {
    pub zip: String,
    /// Fraction of residents predicted in each willingness category.
    pub shares: [f64; 5],
    pub participation_rate: f64,
}

/// Per-zip predicted category shares and the Table-style weighted
/// participation rate, over all provided synthetic residents.
pub fn zip_rates(
    model: &RegressionModel,
    population: &[(String, DemographicRecord)],
) -> Result<Vec<ZipParticipation>, FitError> {
    let mut counts: BTreeMap<&str, [u64; 5]> = BTreeMap::new();
    for (zip, record) in population {
        let category = model.predict_category(record)?;
        counts.entry(zip.as_str()).or_default()[(category - 1) as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(zip, c)| {
            let total: u64 = c.iter().sum();
            let shares = std::array::from_fn(|k| c[k] as f64 / total as f64);
            let participation_rate = shares
                .iter()
                .zip(&CATEGORY_RATES)
                .map(|(s, r)| s * r)
                .sum();
            ZipParticipation {
                zip: zip.to_string(),
                shares,
                participation_rate,
            }
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct SurveyRow {
    age: Option<f64>,
    sex: Option<Sex>,
    income_bracket_midpoint: Option<f64>,
    education_level: Option<f64>,
    willingness: i64,
}

impl SurveyRow {
    fn into_record(self) -> (DemographicRecord, i64) {
        (
            DemographicRecord {
                age: self.age,
                sex: self.sex,
                income: self.income_bracket_midpoint,
                education: self.education_level,
            },
            self.willingness,
        )
    }
}

/// Survey CSV: age,sex,income_bracket_midpoint,education_level,willingness.
pub fn load_survey_csv<R: Read>(reader: R) -> Result<Vec<SurveyResponse>, FitError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: SurveyRow = row?;
        let (demographics, willingness) = row.into_record();
        out.push(SurveyResponse {
            demographics,
            willingness,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    zip: String,
    age: Option<f64>,
    sex: Option<Sex>,
    income_bracket_midpoint: Option<f64>,
    education_level: Option<f64>,
}

/// Population CSV: zip,age,sex,income_bracket_midpoint,education_level.
pub fn load_population_csv<R: Read>(
    reader: R,
) -> Result<Vec<(String, DemographicRecord)>, FitError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: PopulationRow = row?;
        out.push((
            row.zip,
            DemographicRecord {
                age: row.age,
                sex: row.sex,
                income: row.income_bracket_midpoint,
                education: row.education_level,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic_survey(n: usize, seed: u64) -> Vec<SurveyResponse> {
        // willingness raw signal over standardized-ish demographics
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let age: f64 = rng.gen_range(18.0..80.0);
                let sex = if rng.gen_bool(0.5) { Sex::Male } else { Sex::Female };
                let income: f64 = rng.gen_range(20_000.0..200_000.0);
                let education: f64 = rng.gen_range(1..=5) as f64;
                let z_age = (age - 49.0) / 17.9;
                let z_inc = (income / 1000.0 - 110.0) / 52.0;
                let noise: f64 = rng.gen_range(-0.5..0.5);
                let y = 3.0 + 0.5 * z_age - 0.3 * z_inc + noise;
                SurveyResponse {
                    demographics: DemographicRecord::new(age, sex, income, education),
                    willingness: (y.clamp(1.0, 5.0) + 0.5).floor() as i64,
                }
            })
            .collect()
    }

    #[test]
    fn encoding_is_standardization() {
        let model = RegressionModel {
            intercept: 3.0,
            coefficients: [0.0; 4],
            feature_means: [45.0, 0.5, 80.0, 3.0],
            feature_sds: [15.0, 0.5, 30.0, 1.2],
            r_squared: 0.0,
            mean_absolute_error: 0.0,
        };
        let at_means = DemographicRecord::new(45.0, Sex::Female, 80_000.0, 3.0);
        // sex female encodes to 1.0, i.e. one sd above the 0.5 mean
        let z = model.encode_features(&at_means).unwrap();
        assert_eq!(z, [0.0, 1.0, 0.0, 0.0]);
        let one_up = DemographicRecord::new(60.0, Sex::Male, 80_000.0, 3.0);
        let z = model.encode_features(&one_up).unwrap();
        assert_eq!(z, [1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn missing_feature_is_named() {
        let mut record = DemographicRecord::new(40.0, Sex::Male, 50_000.0, 2.0);
        record.income = None;
        let err = record.raw_features().unwrap_err();
        assert_eq!(err.to_string(), "missing feature: income");
    }

    #[test]
    fn rounding_rule_is_half_up_with_clamp() {
        assert_eq!(round_category(3.49), 3);
        assert_eq!(round_category(3.50), 4);
        assert_eq!(round_category(7.2), 5);
        assert_eq!(round_category(-1.0), 1);
        assert_eq!(round_category(5.0), 5);
        assert_eq!(round_category(f64::NAN), 1); // non-finite saturates into range
    }

    #[test]
    fn fit_recovers_known_coefficients() {
        let survey = synthetic_survey(800, 7);
        let model = fit(&survey, 0.2, 42).unwrap();
        // rounding to the likert scale attenuates but the signs and rough
        // magnitudes must come back
        assert!((model.coefficients[0] - 0.5).abs() < 0.1, "{:?}", model.coefficients);
        assert!((model.coefficients[1]).abs() < 0.1);
        assert!((model.coefficients[2] + 0.3).abs() < 0.1);
        assert!(model.r_squared > 0.4);
    }

    #[test]
    fn residual_orthogonality_on_training_data() {
        let survey = synthetic_survey(200, 3);
        let model = fit(&survey, 0.2, 1).unwrap();
        // Xᵀ(y - ŷ) = 0 over the full standardized design is only exact on
        // the rows the normal equations saw; rebuild that split here
        let mut order: Vec<usize> = (0..survey.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        order.shuffle(&mut rng);
        let holdout_len = (survey.len() as f64 * 0.2).round() as usize;
        let train_idx = &order[holdout_len..];
        let mut residual_dot = [0.0_f64; 5];
        for &i in train_idx {
            let z = model.encode_features(&survey[i].demographics).unwrap();
            let pred = model.predict_raw(&survey[i].demographics).unwrap();
            let resid = survey[i].willingness as f64 - pred;
            residual_dot[0] += resid;
            for k in 0..4 {
                residual_dot[k + 1] += z[k] * resid;
            }
        }
        for d in residual_dot {
            assert!(d.abs() < 1e-7, "residual dot {d}");
        }
    }

    #[test]
    fn constant_target_fits_flat_model() {
        let mut survey = synthetic_survey(100, 11);
        for r in &mut survey {
            r.willingness = 3;
        }
        let model = fit(&survey, 0.2, 5).unwrap();
        for c in model.coefficients {
            assert!(c.abs() < 1e-8);
        }
        assert_eq!(model.r_squared, 0.0);
    }

    #[test]
    fn duplicated_feature_is_collinear() {
        let mut survey = synthetic_survey(100, 13);
        for r in &mut survey {
            // education mirrors age exactly
            r.demographics.education = Some(r.demographics.age.unwrap());
        }
        assert!(matches!(
            fit(&survey, 0.2, 5),
            Err(FitError::CollinearFeatures)
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let survey = synthetic_survey(120, 17);
        let a = fit(&survey, 0.2, 9).unwrap();
        let b = fit(&survey, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = fit(&survey, 0.2, 10).unwrap();
        assert!(a.r_squared != c.r_squared || a.mean_absolute_error != c.mean_absolute_error);
    }

    #[test]
    fn zip_rates_follow_category_weighting() {
        let model = RegressionModel {
            intercept: 5.0, // always predicts category 5
            coefficients: [0.0; 4],
            feature_means: [45.0, 0.5, 80.0, 3.0],
            feature_sds: [15.0, 0.5, 30.0, 1.2],
            r_squared: 0.0,
            mean_absolute_error: 0.0,
        };
        let population = vec![
            ("78701".to_string(), DemographicRecord::new(40.0, Sex::Male, 60_000.0, 3.0)),
            ("78701".to_string(), DemographicRecord::new(50.0, Sex::Female, 90_000.0, 4.0)),
        ];
        let rates = zip_rates(&model, &population).unwrap();
        assert_eq!(rates.len(), 1);
        assert_eq!(rates[0].shares, [0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(rates[0].participation_rate, 1.0);

        let unsure = RegressionModel { intercept: 3.0, ..model };
        let rates = zip_rates(&unsure, &population).unwrap();
        assert_eq!(rates[0].participation_rate, 0.5);
    }

    #[test]
    fn mixed_extremes_average_out() {
        let model = RegressionModel {
            intercept: 3.0,
            coefficients: [2.0, 0.0, 0.0, 0.0], // age one sd up -> 5, one down -> 1
            feature_means: [45.0, 0.5, 80.0, 3.0],
            feature_sds: [15.0, 0.5, 30.0, 1.2],
            r_squared: 0.0,
            mean_absolute_error: 0.0,
        };
        let population = vec![
            ("78702".to_string(), DemographicRecord::new(60.0, Sex::Male, 80_000.0, 3.0)),
            ("78702".to_string(), DemographicRecord::new(30.0, Sex::Male, 80_000.0, 3.0)),
        ];
        let rates = zip_rates(&model, &population).unwrap();
        assert_eq!(rates[0].shares, [0.5, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(rates[0].participation_rate, 0.5);
    }

    #[test]
    fn csv_loaders_roundtrip_headers() {
        let survey = "age,sex,income_bracket_midpoint,education_level,willingness\n\
                      44,female,85000,4,4\n35,male,45000,2,3\n";
        let rows = load_survey_csv(survey.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].willingness, 4);
        assert_eq!(rows[0].demographics.sex, Some(Sex::Female));

        let population = "zip,age,sex,income_bracket_midpoint,education_level\n\
                          78701,44,female,85000,4\n";
        let rows = load_population_csv(population.as_bytes()).unwrap();
        assert_eq!(rows[0].0, "78701");
        assert_eq!(rows[0].1.age, Some(44.0));
    }
}
