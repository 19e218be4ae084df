use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::plp::PlanResult;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableMeta {
    pub scenario_digest: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Switch count or added DER MW.
    pub key: f64,
    pub served: f64,
    pub price: f64,
    pub energy: f64,
    pub total_cost: f64,
    pub welfare: f64,
    pub locations: String,
}

impl ResultRow {
    pub fn from_plan(key: f64, r: &PlanResult) -> Self {
        let locations = if r.plan.der_capacity.is_empty() {
            r.plan.locations()
        } else {
            r.plan.der_capacity.keys().cloned().collect::<Vec<_>>().join("")
        };
        ResultRow {
            key,
            served: r.served,
            price: r.unit_price,
            energy: r.energy,
            total_cost: r.total_cost,
            welfare: r.welfare,
            locations,
        }
    }
}

/// Rows sorted by key, with provenance carried in a leading comment line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Header of the key column: `k` or `K`.
    pub key_name: String,
    pub meta: TableMeta,
    pub rows: Vec<ResultRow>,
}

const COLUMNS: [&str; 6] = ["served", "price", "energy", "total_cost", "welfare", "locations"];

impl ResultTable {
    pub fn new(key_name: &str, meta: TableMeta, mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| a.key.total_cmp(&b.key));
        ResultTable { key_name: key_name.into(), meta, rows }
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut out = format!(
            "# scenario_digest={} seed={} version={}\n",
            self.meta.scenario_digest, self.meta.seed, self.meta.version
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.key_name.as_str()];
        header.extend(COLUMNS);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            if r.locations.contains([',', '"', '\n']) {
                return Err(HarnessError::Validation(format!("location label `{}` needs quoting", r.locations)));
            }
            w.write_record([
                format!("{}", r.key),
                format!("{}", r.served),
                format!("{}", r.price),
                format!("{}", r.energy),
                format!("{}", r.total_cost),
                format!("{}", r.welfare),
                r.locations.clone(),
            ])
            .map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let bad = |m: &str| HarnessError::Parse(format!("result table: {m}"));
        let (first, body) = text.split_once('\n').ok_or_else(|| bad("missing metadata line"))?;
        let meta_text = first.strip_prefix("# ").ok_or_else(|| bad("metadata line must start with `# `"))?;
        let mut digest = None;
        let mut seed = None;
        let mut version = None;
        for kv in meta_text.split_whitespace() {
            match kv.split_once('=') {
                Some(("scenario_digest", v)) => digest = Some(v.to_string()),
                Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
                Some(("version", v)) => version = Some(v.to_string()),
                _ => return Err(bad(&format!("unknown metadata `{kv}`"))),
            }
        }
        let meta = TableMeta {
            scenario_digest: digest.ok_or_else(|| bad("scenario_digest"))?,
            seed: seed.ok_or_else(|| bad("seed"))?,
            version: version.ok_or_else(|| bad("version"))?,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() != COLUMNS.len() + 1 || header.iter().skip(1).ne(COLUMNS) {
            return Err(bad("unexpected header"));
        }
        let key_name = header[0].to_string();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64, HarnessError> {
                rec[i].parse::<f64>().map_err(|_| bad(&format!("`{}` is not a number", &rec[i])))
            };
            rows.push(ResultRow {
                key: num(0)?,
                served: num(1)?,
                price: num(2)?,
                energy: num(3)?,
                total_cost: num(4)?,
                welfare: num(5)?,
                locations: rec[6].to_string(),
            });
        }
        if rows.windows(2).any(|w| w[1].key < w[0].key) {
            return Err(bad("rows are not sorted by key"));
        }
        Ok(ResultTable { key_name, meta, rows })
    }
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Parse(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultTable {
        let meta = TableMeta { scenario_digest: "ab12".into(), seed: 3, version: "0.1.0".into() };
        let row = |k: f64, loc: &str| ResultRow {
            key: k,
            served: 1330.25,
            price: 10.6023 + k * 0.1,
            energy: 7492.000000001,
            total_cost: 1.0 / 3.0,
            welfare: -2.5e-7,
            locations: loc.into(),
        };
        ResultTable::new("k", meta, vec![row(5.0, "ABCKM"), row(4.0, "ABKM"), row(0.0, "")])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = table();
        assert_eq!(t.rows[0].key, 0.0);
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("# scenario_digest=ab12 seed=3 version=0.1.0\nk,served,price"));
        assert_eq!(ResultTable::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(ResultTable::from_csv("k,served\n").is_err());
        let text = table().to_csv().unwrap().replace("seed=3", "seed=x");
        assert!(ResultTable::from_csv(&text).is_err());
    }
}
