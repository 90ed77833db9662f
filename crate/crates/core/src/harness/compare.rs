//! Per-round accuracy comparison of two metric files.

use std::fmt;

use super::runner::CSV_HEADER;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// `(round, accuracy_a - accuracy_b)` for every global row.
    pub gaps: Vec<(u32, f64)>,
    pub max_abs_gap: f64,
}

impl GapReport {
    pub fn final_gap(&self) -> Option<f64> {
        self.gaps.last().map(|&(_, g)| g)
    }
}

impl fmt::Display for GapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "round,accuracy_gap")?;
        for (r, g) in &self.gaps {
            writeln!(f, "{r},{g}")?;
        }
        write!(f, "max_abs_gap,{}", self.max_abs_gap)
    }
}

/// Global `(round, accuracy)` series of a metrics CSV.
pub fn global_accuracy(csv_text: &str) -> Result<Vec<(u32, f64)>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(csv_text.as_bytes());
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(HarnessError::Schema(format!("unexpected header `{header}`")));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.get(1) != Some("global") {
            continue;
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let round = field(0)
            .parse()
            .map_err(|_| HarnessError::Schema(format!("bad round `{}`", field(0))))?;
        let acc = field(2)
            .parse()
            .map_err(|_| HarnessError::Schema(format!("bad accuracy `{}`", field(2))))?;
        out.push((round, acc));
    }
    Ok(out)
}

pub fn compare(a: &str, b: &str) -> Result<GapReport, HarnessError> {
    let sa = global_accuracy(a)?;
    let sb = global_accuracy(b)?;
    if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.0 != y.0) {
        return Err(HarnessError::Schema(format!(
            "round counts differ: {} vs {}",
            sa.len(),
            sb.len()
        )));
    }
    let gaps: Vec<(u32, f64)> = sa.iter().zip(&sb).map(|(x, y)| (x.0, x.1 - y.1)).collect();
    let max_abs_gap = gaps.iter().map(|(_, g)| g.abs()).fold(0.0, f64::max);
    Ok(GapReport { gaps, max_abs_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: &str = "round,agent_id,accuracy,loss,bytes_sent,bytes_received,epsilon_mean,event\n\
        0,global,0.1,2,0,0,,init\n0,1,0.3,2,0,0,,init\n1,global,0.5,1,5,5,0.5,\n";
    const B: &str = "round,agent_id,accuracy,loss,bytes_sent,bytes_received,epsilon_mean,event\n\
        0,global,0.1,2,0,0,,init\n1,global,0.75,1,0,0,,\n";

    #[test]
    fn identical_files_have_zero_gap() {
        let r = compare(A, A).unwrap();
        assert_eq!(r.max_abs_gap, 0.0);
        assert_eq!(r.gaps.len(), 2);
    }

    #[test]
    fn gap_series() {
        let r = compare(A, B).unwrap();
        assert_eq!(r.gaps, vec![(0, 0.0), (1, -0.25)]);
        assert_eq!(r.max_abs_gap, 0.25);
        assert!(r.to_string().ends_with("max_abs_gap,0.25"));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(compare("a,b\n1,2\n", A), Err(HarnessError::Schema(_))));
        let short = "round,agent_id,accuracy,loss,bytes_sent,bytes_received,epsilon_mean,event\n0,global,0.1,2,0,0,,\n";
        assert!(matches!(compare(A, short), Err(HarnessError::Schema(_))));
    }
}
