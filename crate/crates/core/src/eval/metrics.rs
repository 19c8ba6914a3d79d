use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Thresholds of the accuracy curve.
pub const CURVE_THRESHOLDS: std::ops::RangeInclusive<u32> = 1..=30;

/// Result of transferring one trajectory to one test instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub task: String,
    pub manual: String,
    pub chosen: Option<String>,
    /// loss between the expert demo and the chosen trajectory; `None` when
    /// inference failed
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub instructions: usize,
    pub failures: usize,
    pub dtw_per_instruction: f64,
    pub dtw_per_manual: f64,
    pub accuracy: f64,
    /// (threshold, accuracy) pairs
    pub curve: Vec<(f64, f64)>,
    pub outcomes: Vec<Outcome>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregates outcomes. Failed inferences count as misses and are left out
/// of the loss means. The per-manual value averages each manual's steps
/// first.
pub fn summarize(outcomes: Vec<Outcome>, threshold: f64) -> MetricsReport {
    let n = outcomes.len();
    let hits = |t: f64| outcomes.iter().filter(|o| o.loss.is_some_and(|l| l < t)).count() as f64 / n.max(1) as f64;
    let mut by_manual: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for o in &outcomes {
        if let Some(l) = o.loss {
            by_manual.entry(o.manual.as_str()).or_default().push(l);
        }
    }
    MetricsReport {
        threshold,
        instructions: n,
        failures: outcomes.iter().filter(|o| o.loss.is_none()).count(),
        dtw_per_instruction: mean(outcomes.iter().filter_map(|o| o.loss)),
        dtw_per_manual: mean(by_manual.values().map(|v| mean(v.iter().copied()))),
        accuracy: hits(threshold),
        curve: CURVE_THRESHOLDS.map(|t| (t as f64, hits(t as f64))).collect(),
        outcomes,
    }
}

impl MetricsReport {
    pub fn outcomes_tsv(&self) -> String {
        let mut s = String::from("task\tmanual\tchosen\tdtw_mt\n");
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                o.task,
                o.manual,
                o.chosen.as_deref().unwrap_or("-"),
                o.loss.map_or_else(|| "-".into(), |l| l.to_string())
            );
        }
        s
    }
}

/// Per-fold reports with mean and standard deviation of the fold values.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub label: String,
    pub folds: Vec<(usize, MetricsReport)>,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v.iter().copied());
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

impl CvReport {
    fn column(&self, f: impl Fn(&MetricsReport) -> f64) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())
    }

    pub fn accuracy(&self) -> (f64, f64) {
        self.column(|r| r.accuracy)
    }

    pub fn to_tsv(&self) -> String {
        let thr = self.folds.first().map_or(10.0, |f| f.1.threshold);
        let mut s = format!("method\tfold\tdtw_mt_per_manual\tdtw_mt_per_instruction\taccuracy_dtw_mt_below_{thr}\n");
        for (k, r) in &self.folds {
            let _ = writeln!(s, "{}\t{k}\t{:.4}\t{:.4}\t{:.4}", self.label, r.dtw_per_manual, r.dtw_per_instruction, r.accuracy);
        }
        let (m1, s1) = self.column(|r| r.dtw_per_manual);
        let (m2, s2) = self.column(|r| r.dtw_per_instruction);
        let (m3, s3) = self.accuracy();
        let _ = writeln!(s, "{}\tmean\t{m1:.4}\t{m2:.4}\t{m3:.4}", self.label);
        let _ = writeln!(s, "{}\tstd\t{s1:.4}\t{s2:.4}\t{s3:.4}", self.label);
        s
    }

    /// Accuracy at each curve threshold, averaged over folds.
    pub fn curve_tsv(&self) -> String {
        let mut s = String::from("threshold\taccuracy\n");
        for (i, t) in CURVE_THRESHOLDS.enumerate() {
            let (m, _) = self.column(|r| r.curve[i].1);
            let _ = writeln!(s, "{t}\t{m:.4}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(manual: &str, loss: Option<f64>) -> Outcome {
        Outcome {
            task: "k".into(),
            manual: manual.into(),
            chosen: loss.map(|_| "t".into()),
            loss,
        }
    }

    #[test]
    fn two_steps_of_one_manual() {
        let r = summarize(vec![outcome("m", Some(5.0)), outcome("m", Some(15.0))], 10.0);
        assert_eq!(r.dtw_per_instruction, 10.0);
        assert_eq!(r.dtw_per_manual, 10.0);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn failures_count_as_misses() {
        let r = summarize(vec![outcome("m", Some(1.0)), outcome("m", None)], 10.0);
        assert_eq!(r.failures, 1);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.dtw_per_instruction, 1.0);
    }

    #[test]
    fn manual_mean_weights_manuals_equally() {
        let r = summarize(vec![outcome("a", Some(2.0)), outcome("a", Some(4.0)), outcome("b", Some(9.0))], 10.0);
        assert_eq!(r.dtw_per_manual, (3.0 + 9.0) / 2.0);
        assert_eq!(r.dtw_per_instruction, 5.0);
    }

    #[test]
    fn mean_std_of_known_values() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn curve_is_monotone(losses in proptest::collection::vec(proptest::option::of(0.0f64..40.0), 1..40)) {
            let outs: Vec<Outcome> = losses.iter().enumerate().map(|(i, l)| outcome(&format!("m{}", i % 3), *l)).collect();
            let r = summarize(outs, 10.0);
            prop_assert!(r.curve.windows(2).all(|w| w[0].1 <= w[1].1));
            let last = losses.iter().filter(|l| l.is_some_and(|x| x < 30.0)).count() as f64 / losses.len() as f64;
            prop_assert_eq!(r.curve.last().unwrap().1, last);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
        }

        #[test]
        fn manual_mean_matches_direct_recomputation(losses in proptest::collection::vec(0.0f64..40.0, 1..30), groups in 1usize..5) {
            let outs: Vec<Outcome> = losses.iter().enumerate().map(|(i, l)| outcome(&format!("m{}", i % groups), Some(*l))).collect();
            let r = summarize(outs, 10.0);
            let mut direct = 0.0;
            let mut used = 0;
            for g in 0..groups {
                let v: Vec<f64> = losses.iter().enumerate().filter(|(i, _)| i % groups == g).map(|(_, l)| *l).collect();
                if !v.is_empty() {
                    direct += v.iter().sum::<f64>() / v.len() as f64;
                    used += 1;
                }
            }
            prop_assert!((r.dtw_per_manual - direct / used as f64).abs() < 1e-9);
        }
    }
}
