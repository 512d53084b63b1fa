use std::path::Path;

use super::check_data;
use crate::model::{ModelConfig, Network};
use crate::numerics::{ParamStore, Tape};
use crate::pipeline::Dataset;
use crate::{Error, Result};

/// `(record id, [CLS] output)` of the full encoding of every record.
pub fn export_embeddings(cfg: &ModelConfig, params: &ParamStore, data: &Dataset) -> Result<Vec<(String, Vec<f64>)>> {
    check_data(cfg, data)?;
    let net = Network::new(cfg, params);
    let mut tape = Tape::no_grad();
    data.records
        .iter()
        .map(|r| {
            let (text, frames) = r.inputs(cfg)?;
            let cls = net.forward(&mut tape, &text, &frames)?.cls;
            let row = tape.value(cls).data().to_vec();
            tape.clear();
            Ok((r.id.clone(), row))
        })
        .collect()
}

/// Write embeddings as TSV: a header `id e0 e1 ..`, then one row per
/// record. Values use the shortest representation that parses back exactly.
pub fn write_embeddings(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("id");
    for j in 0..dim {
        out.push_str(&format!("\te{j}"));
    }
    out.push('\n');
    for (id, v) in rows {
        if id.contains(['\t', '\n']) {
            return Err(Error::Input(format!("record id {id:?} cannot be written to TSV")));
        }
        out.push_str(id);
        for x in v {
            out.push('\t');
            out.push_str(&x.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::pipeline::{generate_synthetic, SyntheticSpec};

    #[test]
    fn tsv_round_trips_values() {
        let cfg = ModelConfig {
            hidden: 8,
            enc_blocks: 1,
            heads: 2,
            max_text: 12,
            max_frames: 6,
            vocab_size: 64,
            frame_dim: 32,
            ff_mult: 2,
            ..ModelConfig::default()
        };
        let data = generate_synthetic(&SyntheticSpec {
            records: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let params = init_params(&cfg).unwrap();
        let rows = export_embeddings(&cfg, &params, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        write_embeddings(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split('\t').count(), 9);
        for (line, (id, v)) in lines.zip(&rows) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols[0], id);
            let back: Vec<f64> = cols[1..].iter().map(|c| c.parse().unwrap()).collect();
            assert_eq!(&back, v);
        }
    }
}
