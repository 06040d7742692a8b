use std::fmt;

use super::Corpus;

/// Mean, standard deviation, median and inter-quartile range of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub iqr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary { mean, sd, median: quantile(&sorted, 0.5), iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25) }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Descriptive profile of a corpus in the shape of a cohort summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub n_patients: usize,
    pub n_visits: usize,
    pub visits_per_patient: Summary,
    pub n_codes: usize,
    pub codes_per_visit: Summary,
}

impl CorpusStats {
    pub fn of(corpus: &Corpus) -> Self {
        let visits: Vec<f64> = corpus.patients().iter().map(|p| p.visits.len() as f64).collect();
        let codes: Vec<f64> =
            corpus.patients().iter().flat_map(|p| p.visits.iter().map(|v| v.codes.len() as f64)).collect();
        CorpusStats {
            n_patients: corpus.len(),
            n_visits: codes.len(),
            visits_per_patient: Summary::of(&visits),
            n_codes: corpus.vocabulary().len(),
            codes_per_visit: Summary::of(&codes),
        }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = &self.visits_per_patient;
        let c = &self.codes_per_visit;
        writeln!(f, "{:<44}{}", "Number of patients", self.n_patients)?;
        writeln!(f, "{:<44}{}", "Number of visits", self.n_visits)?;
        writeln!(f, "{:<44}{:.2} ({:.2})", "Number of visits per patient, Mean (SD)", v.mean, v.sd)?;
        writeln!(f, "{:<44}{} ({})", "Number of visits per patient, Median (IQR)", v.median, v.iqr)?;
        writeln!(f, "{:<44}{}", "Number of disease codes", self.n_codes)?;
        writeln!(f, "{:<44}{:.2} ({:.2})", "Number of codes in a visit, Mean (SD)", c.mean, c.sd)?;
        writeln!(f, "{:<44}{} ({})", "Number of codes in a visit, Median (IQR)", c.median, c.iqr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_small_sample() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.iqr, 1.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
