//! Markov-model JSON files and the built-in seeded bigram pair.
//!
//! File format: `{"vocab": V, "order": 0 | 1, "table": [[..], ..], "initial": [..]}`.
//! Order 0 uses `table[0]` for every position; order 1 uses `initial` for the
//! first token and `table[prev]` afterwards.

use std::path::Path;

use minima_core::rng::{derive_seed, gaussian, seeded, StreamRng};
use minima_core::specdec::MarkovLM;

use crate::container::{read_input, write_atomic};
use crate::error::Result;

pub fn read_markov(path: &Path) -> Result<MarkovLM> {
    let lm: MarkovLM = serde_json::from_slice(&read_input(path)?)?;
    lm.validate()?;
    Ok(lm)
}

pub fn write_markov(lm: &MarkovLM, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(lm)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn random_law(rng: &mut StreamRng, vocab: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..vocab).map(|_| (1.5 * gaussian(rng)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn mix(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

/// A random bigram target and a draft that mixes each target row with an
/// independent random law at weight `noise`.
pub fn builtin_pair(vocab: usize, noise: f64, seed: u64) -> Result<(MarkovLM, MarkovLM)> {
    let mut rt = seeded(derive_seed(seed, 1));
    let mut rd = seeded(derive_seed(seed, 2));
    let initial = random_law(&mut rt, vocab);
    let table: Vec<Vec<f64>> = (0..vocab).map(|_| random_law(&mut rt, vocab)).collect();
    let d_initial = mix(&initial, &random_law(&mut rd, vocab), noise);
    let d_table = table.iter().map(|row| mix(row, &random_law(&mut rd, vocab), noise)).collect();
    Ok((MarkovLM::bigram(initial, table)?, MarkovLM::bigram(d_initial, d_table)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_pair_is_valid_and_seeded() {
        let (t, d) = builtin_pair(5, 0.3, 11).unwrap();
        t.validate().unwrap();
        d.validate().unwrap();
        assert_ne!(t, d);
        assert_eq!(builtin_pair(5, 0.3, 11).unwrap(), (t.clone(), d));
        let (t0, d0) = builtin_pair(5, 0.0, 11).unwrap();
        assert_eq!(t0, t);
        for (a, b) in t0.table.iter().flatten().zip(d0.table.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        let (t, _) = builtin_pair(4, 0.0, 3).unwrap();
        write_markov(&t, &p).unwrap();
        assert_eq!(read_markov(&p).unwrap(), t);

        std::fs::write(&p, r#"{"vocab": 2, "order": 0, "table": [[0.5, 0.6]], "initial": []}"#).unwrap();
        assert!(read_markov(&p).is_err());
        std::fs::write(&p, r#"{"vocab": 2, "order": 0, "table": [[0.5, 0.5]], "initial": [], "extra": 1}"#).unwrap();
        assert!(read_markov(&p).is_err());
        std::fs::write(&p, r#"{"vocab": 2, "order": 0, "table": [[0.25, 0.75]], "initial": [0.25, 0.75]}"#).unwrap();
        assert_eq!(read_markov(&p).unwrap().table[0], vec![0.25, 0.75]);
    }
}
