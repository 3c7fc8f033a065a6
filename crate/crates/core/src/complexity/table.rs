use serde::{Deserialize, Serialize};

use crate::blocks::{ModelConfig, Variant};
use crate::error::{Error, Result};

use super::count::count_weights;

/// One row of the weight table. Hierarchy columns are empty for models without one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    #[serde(rename = "c_K")]
    pub c_k: Option<usize>,
    pub g_s: Option<usize>,
    pub lambda: usize,
    pub weights: u64,
}

/// Short label such as `mgiad`, `mgnet-AB` or `resnet`.
pub fn model_label(config: &ModelConfig) -> String {
    match config.variant {
        Variant::Mgnet => {
            let s = config.sharing;
            let tag = match (s.share_a, s.share_b) {
                (true, true) => "-AB",
                (true, false) => "-A",
                (false, true) => "-B",
                (false, false) => "",
            };
            format!("mgnet{tag}")
        }
        v => v.to_string(),
    }
}

impl TableRow {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(TableRow {
            model: model_label(config),
            c_k: config.coarsest_channels,
            g_s: config.group_size,
            lambda: config.lambda,
            weights: count_weights(config)?.total(),
        })
    }
}

/// CSV with header `model,c_K,g_s,lambda,weights`.
pub fn emit_table(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["model", "c_K", "g_s", "lambda", "weights"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Rows for a sweep over `c_K` and `g_s` at fixed `lambda`, skipping invalid combinations.
pub fn sweep_rows(base: &ModelConfig, coarsest: &[usize], group_sizes: &[usize]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for &ck in coarsest {
        for &gs in group_sizes {
            let cfg = ModelConfig {
                coarsest_channels: Some(ck),
                group_size: Some(gs),
                ..base.clone()
            };
            if let Ok(row) = TableRow::from_config(&cfg) {
                rows.push(row);
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_empty_cells() {
        let rows = vec![
            TableRow::from_config(&ModelConfig::mgiad(64, 4, 1)).unwrap(),
            TableRow::from_config(&ModelConfig::resnet20()).unwrap(),
            TableRow::from_config(&ModelConfig::mgnet3()).unwrap(),
        ];
        let text = emit_table(&rows).unwrap();
        assert!(text.starts_with("model,c_K,g_s,lambda,weights\n"));
        assert!(text.contains("resnet,,,1,"));
        assert_eq!(parse_table(&text).unwrap(), rows);
    }

    #[test]
    fn empty_table_has_header() {
        assert_eq!(emit_table(&[]).unwrap(), "model,c_K,g_s,lambda,weights\n");
        assert!(parse_table("model,c_K,g_s,lambda,weights\n").unwrap().is_empty());
    }

    #[test]
    fn sweep_skips_invalid() {
        let rows = sweep_rows(&ModelConfig::mgiad(64, 4, 1), &[4, 64, 1000], &[4]);
        assert_eq!(rows.len(), 2);
    }
}
