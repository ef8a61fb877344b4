use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};

use fsml_core::metrics::{mean_std, MetricsReport};

/// Reports keyed by (init label, k), each with its seed.
pub type ReportGrid = BTreeMap<(String, usize), Vec<(u64, MetricsReport)>>;

pub fn cell(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.4} ± {s:.4}")
}

/// Results table: one row per (init, metric), one column per k, cells
/// holding `mean ± std` over seeds.
pub fn results_csv(hash: &str, order: &[String], k_shots: &[usize], grid: &ReportGrid) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config_hash".to_string(), "algorithm".into(), "metric".into(), "seeds".into()];
    header.extend(k_shots.iter().map(|k| format!("k={k}")));
    w.write_record(&header)?;
    for label in order {
        let mut metrics: Vec<String> = Vec::new();
        for k in k_shots {
            if let Some(r) = grid.get(&(label.clone(), *k)) {
                for m in r[0].1.scalars().into_keys() {
                    if !metrics.contains(&m) {
                        metrics.push(m);
                    }
                }
            }
        }
        for m in metrics {
            let mut row = vec![hash.to_string(), label.clone(), m.clone()];
            let mut seeds = String::new();
            let mut cells = Vec::new();
            for k in k_shots {
                match grid.get(&(label.clone(), *k)) {
                    Some(r) => {
                        let v: Vec<f64> = r.iter().filter_map(|(_, rep)| rep.scalars().get(&m).copied()).collect();
                        if seeds.is_empty() {
                            seeds = r.iter().map(|(s, _)| s.to_string()).collect::<Vec<_>>().join(" ");
                        }
                        cells.push(if v.is_empty() { String::new() } else { cell(&v) });
                    }
                    None => cells.push(String::new()),
                }
            }
            row.push(seeds);
            row.extend(cells);
            w.write_record(&row)?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Splits a `mean ± std` cell into its two printed numbers.
fn split_cell(c: &str) -> Option<(&str, &str)> {
    let (m, s) = c.split_once(" ± ")?;
    m.parse::<f64>().ok()?;
    s.parse::<f64>().ok()?;
    Some((m, s))
}

/// Writes one `<metric>.csv` per metric under `dir`, each listing
/// `config_hash,algorithm,k,mean,std` points. Returns the written files.
pub fn emit_plots(results: &Path, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut r = csv::Reader::from_path(results).with_context(|| format!("reading {}", results.display()))?;
    let header = r.headers()?.clone();
    let ks: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("k=").map(|k| (i, k.to_string())))
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| anyhow!("results header lacks column {name}"));
    let (hi, ai, mi) = (col("config_hash")?, col("algorithm")?, col("metric")?);
    let mut series: BTreeMap<String, Vec<[String; 5]>> = BTreeMap::new();
    for (row_no, rec) in r.records().enumerate() {
        let line = row_no + 2;
        let rec = rec.with_context(|| format!("results row {line}"))?;
        for (i, k) in &ks {
            let c = rec.get(*i).unwrap_or("");
            if c.is_empty() {
                continue;
            }
            let Some((m, s)) = split_cell(c) else {
                bail!("results row {line}: malformed cell {c:?} in column k={k}");
            };
            series
                .entry(rec[mi].to_string())
                .or_default()
                .push([rec[hi].to_string(), rec[ai].to_string(), k.clone(), m.to_string(), s.to_string()]);
        }
    }
    if series.is_empty() {
        log::warn!("no results to plot in {}", results.display());
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (metric, rows) in series {
        let path = dir.join(format!("{metric}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["config_hash", "algorithm", "k", "mean", "std"])?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn results(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("results.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_results_give_no_plots() {
        let d = tempfile::tempdir().unwrap();
        let p = results(d.path(), "config_hash,algorithm,metric,seeds,k=1\n");
        assert!(emit_plots(&p, &d.path().join("plots")).unwrap().is_empty());
    }

    #[test]
    fn two_algorithms_seven_ks() {
        let d = tempfile::tempdir().unwrap();
        let ks = [1, 2, 5, 10, 20, 100, 200];
        let mut body = String::from("config_hash,algorithm,metric,seeds");
        for k in ks {
            body.push_str(&format!(",k={k}"));
        }
        body.push('\n');
        for (a, base) in [("maml", 0.5), ("random", 0.25)] {
            body.push_str(&format!("h,{a},oa,0 1"));
            for (i, _) in ks.iter().enumerate() {
                body.push_str(&format!(",{}", cell(&[base + i as f64 * 0.01, base + i as f64 * 0.03])));
            }
            body.push('\n');
        }
        let p = results(d.path(), &body);
        let files = emit_plots(&p, &d.path().join("plots")).unwrap();
        assert_eq!(files.len(), 1);
        let mut r = csv::Reader::from_path(&files[0]).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 14);
        for a in ["maml", "random"] {
            assert_eq!(rows.iter().filter(|x| &x[1] == a).count(), 7);
        }
        // Means are copied from the source cells.
        let src = csv::Reader::from_path(&p).unwrap().into_records().next().unwrap().unwrap();
        assert_eq!(&rows[0][3], src[4].split(" ± ").next().unwrap());
        assert_eq!(&rows[6][2], "200");
    }

    #[test]
    fn malformed_cell_reports_row() {
        let d = tempfile::tempdir().unwrap();
        let p = results(d.path(), "config_hash,algorithm,metric,seeds,k=1\nh,a,oa,0,0.5 ± 0.1\nh,b,oa,0,abc\n");
        let e = emit_plots(&p, &d.path().join("plots")).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
    }

    #[test]
    fn cell_formats_mean_and_std() {
        assert_eq!(cell(&[0.5]), "0.5000 ± 0.0000");
        let (m, s) = mean_std(&[0.2, 0.4]);
        assert_eq!(cell(&[0.2, 0.4]), format!("{m:.4} ± {s:.4}"));
    }
}
