//! Run reports: a TOML document and a CSV metrics table, both starting
//! with the `#nextloc-report v1` line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::backbone::EpochMetrics;

pub const REPORT_HEADER: &str = "#nextloc-report v1";
pub const REPORT_FILE: &str = "report.toml";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitAtK {
    pub k: usize,
    pub hit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub queries: usize,
    pub hits: Vec<HitAtK>,
    /// Mean distance from predicted coordinates to the true location
    /// center (geodesic for geographic cities, planar otherwise).
    pub mean_distance_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityReport {
    pub name: String,
    pub locations_digest: String,
    /// Records the coordinate normalization was fitted on.
    pub norm_source: String,
    pub duration_source: String,
    pub retrieval_space: String,
    pub distance: String,
    pub splits: Vec<SplitMetrics>,
    /// Hit@k of always predicting the corpus-wide most visited locations,
    /// on the test split.
    pub baseline: Vec<HitAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    /// `supervised`, `evaluate`, `zero-shot` or `ablation:<name>`.
    pub mode: String,
    pub config_digest: String,
    pub model_config_digest: String,
    pub weights_digest: String,
    pub seed: u64,
    /// `single-city`, `joint:<n>` over several cities, or `none`.
    pub training: String,
    pub train_cities: Vec<String>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub loss_curve: Vec<EpochMetrics>,
    pub cities: Vec<CityReport>,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Checks Hit@k is non-decreasing in k everywhere.
    pub fn validate(&self) -> Result<(), HarnessError> {
        for c in &self.cities {
            let lists = c.splits.iter().map(|s| (s.split.as_str(), &s.hits)).chain([("baseline", &c.baseline)]);
            for (name, hits) in lists {
                for w in hits.windows(2) {
                    if w[0].k >= w[1].k || w[0].hit > w[1].hit {
                        return Err(HarnessError::Report(format!(
                            "{}/{name}: Hit@{} = {} exceeds Hit@{} = {}",
                            c.name, w[0].k, w[0].hit, w[1].k, w[1].hit
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn city(&self, name: &str) -> Option<&CityReport> {
        self.cities.iter().find(|c| c.name == name)
    }

    /// Hit@k on `split` of the first city.
    pub fn hit(&self, split: &str, k: usize) -> Option<f64> {
        let s = self.cities.first()?.splits.iter().find(|s| s.split == split)?;
        s.hits.iter().find(|h| h.k == k).map(|h| h.hit)
    }

    pub fn baseline_hit(&self, k: usize) -> Option<f64> {
        self.cities.first()?.baseline.iter().find(|h| h.k == k).map(|h| h.hit)
    }

    /// The report with the wall time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_time_s: 0.0, ..self.clone() }
    }

    pub fn render(&self) -> String {
        let body = toml::to_string(self).expect("report serializes");
        format!("{REPORT_HEADER}\n{body}")
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let body = text
            .strip_prefix(REPORT_HEADER)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| HarnessError::Report(format!("missing `{REPORT_HEADER}` header")))?;
        let r: Self = toml::from_str(body).map_err(|e| HarnessError::Report(e.to_string()))?;
        if r.format_version != 1 {
            return Err(HarnessError::Report(format!("unsupported format version {}", r.format_version)));
        }
        Ok(r)
    }

    /// One row per metric: `city,split,metric,k,value`.
    pub fn table(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\ncity,split,metric,k,value\n");
        for c in &self.cities {
            for s in &c.splits {
                for h in &s.hits {
                    out += &format!("{},{},hit,{},{}\n", c.name, s.split, h.k, h.hit);
                }
                out += &format!("{},{},mean_distance_m,,{}\n", c.name, s.split, s.mean_distance_m);
            }
            for h in &c.baseline {
                out += &format!("{},baseline,hit,{},{}\n", c.name, h.k, h.hit);
            }
        }
        out
    }

    /// Writes `report.toml` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| HarnessError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let p = dir.join(REPORT_FILE);
        fs::write(&p, self.render()).map_err(io(&p))?;
        let p = dir.join(METRICS_FILE);
        fs::write(&p, self.table()).map_err(io(&p))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text =
            fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> RunReport {
        let hits = |a: f64, b: f64, c: f64| vec![HitAtK { k: 1, hit: a }, HitAtK { k: 5, hit: b }, HitAtK { k: 10, hit: c }];
        RunReport {
            format_version: 1,
            mode: "supervised".into(),
            config_digest: "ab".into(),
            model_config_digest: "cd".into(),
            weights_digest: "ef".into(),
            seed: 7,
            training: "single-city".into(),
            train_cities: vec!["toybench".into()],
            steps: 12,
            best_epoch: Some(1),
            loss_curve: vec![EpochMetrics { epoch: 0, steps: 6, train_loss: 1234.5678901234, val_loss: 0.1 + 0.2 }],
            cities: vec![CityReport {
                name: "toybench".into(),
                locations_digest: "00".into(),
                norm_source: "toybench:train".into(),
                duration_source: "toybench:train".into(),
                retrieval_space: "mercator".into(),
                distance: "planar".into(),
                splits: vec![SplitMetrics {
                    split: "test".into(),
                    queries: 3,
                    hits: hits(1.0 / 3.0, 2.0 / 3.0, 1.0),
                    mean_distance_m: 123.456_789_012_345_67,
                }],
                baseline: hits(0.0, 1.0 / 3.0, 1.0 / 3.0),
            }],
            wall_time_s: 1.5,
        }
    }

    #[test]
    fn render_parse_is_lossless() {
        let r = sample();
        let text = r.render();
        assert!(text.starts_with("#nextloc-report v1\n"));
        assert_eq!(RunReport::parse(&text).unwrap(), r);
        let none = RunReport { best_epoch: None, ..r };
        assert_eq!(RunReport::parse(&none.render()).unwrap(), none);
    }

    #[test]
    fn header_is_required() {
        let text = sample().render();
        assert!(RunReport::parse(text.trim_start_matches(REPORT_HEADER)).is_err());
    }

    #[test]
    fn nesting_is_checked() {
        assert!(sample().validate().is_ok());
        let mut r = sample();
        r.cities[0].splits[0].hits[1].hit = 0.2;
        assert!(matches!(r.validate(), Err(HarnessError::Report(_))));
    }

    #[test]
    fn table_lists_every_metric() {
        let t = sample().table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "city,split,metric,k,value");
        assert_eq!(lines.len(), 2 + 4 + 3);
        assert!(lines.contains(&"toybench,test,hit,10,1"));
    }
}
