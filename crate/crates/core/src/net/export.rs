use std::fmt::Write as _;

use super::{AttentionMap, AttentionStage, Provenance};

/// One CSV table for batch item `b` of `map`: a header naming every key
/// token by provenance, then one row per query.
pub fn attention_table_csv(map: &AttentionMap, b: usize) -> String {
    let mut out = String::from("query");
    for (i, p) in map.key_provenance.iter().enumerate() {
        let _ = write!(out, ",{p}#{i}");
    }
    out.push('\n');
    for q in 0..map.weights.queries {
        let _ = write!(out, "{q}");
        for w in map.weights.row(b, q) {
            let _ = write!(out, ",{w}");
        }
        out.push('\n');
    }
    out
}

/// Share of decoder attention landing on each token family at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRow {
    pub iteration: usize,
    pub audio_mass: f64,
    pub visual_mass: f64,
    pub decoded_mass: f64,
}

/// Mean attention mass from decoder queries onto audio, visual and decoded
/// keys, per iteration, averaged over heads, queries and batch items of all
/// given maps. Rows are sorted by iteration.
pub fn attention_mass_summary<'a>(maps: impl IntoIterator<Item = &'a AttentionMap>) -> Vec<MassRow> {
    // iteration -> (audio, visual, decoded, rows)
    let mut acc: std::collections::BTreeMap<usize, [f64; 4]> = Default::default();
    for m in maps {
        let AttentionStage::Decoder { iteration } = m.stage else { continue };
        let e = acc.entry(iteration).or_default();
        let w = &m.weights;
        for b in 0..w.batch {
            for q in 0..w.queries {
                for (p, &a) in m.key_provenance.iter().zip(w.row(b, q)) {
                    let slot = match p {
                        Provenance::Audio => 0,
                        Provenance::Visual => 1,
                        Provenance::Decoded(_) => 2,
                    };
                    e[slot] += f64::from(a);
                }
                e[3] += 1.0;
            }
        }
    }
    acc.into_iter()
        .map(|(iteration, [a, v, d, n])| MassRow {
            iteration,
            audio_mass: a / n,
            visual_mass: v / n,
            decoded_mass: d / n,
        })
        .collect()
}

pub fn mass_summary_csv(rows: &[MassRow]) -> String {
    let mut out = String::from("iteration,audio_mass,visual_mass,decoded_mass\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.audio_mass, r.visual_mass, r.decoded_mass);
    }
    out
}
