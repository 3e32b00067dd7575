//! Oracles shared by integration test targets.

use causalvqa::mnse::{BankEntry, Metric};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize, with_duplicates: bool) -> Vec<BankEntry> {
    let mut out: Vec<BankEntry> = Vec::with_capacity(n);
    for i in 0..n {
        let vector = if with_duplicates && i > 0 && rng.random_bool(0.1) {
            out[rng.random_range(0..i)].vector.clone()
        } else {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        out.push(BankEntry::new(vector, format!("vid{:05}", rng.random_range(0..n.div_ceil(4))), i % 7));
    }
    out
}

/// Full scan: score every eligible entry, sort everything, keep the head.
pub fn brute_force(entries: &[BankEntry], metric: Metric, query: &[f64], k: usize, exclude: Option<&str>) -> Vec<usize> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| exclude != Some(e.video_id.as_str()))
        .map(|(i, e)| {
            let s = match metric {
                Metric::Cosine => {
                    let en = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let d: f64 = query.iter().zip(&e.vector).map(|(a, b)| a * b).sum();
                    if qn * en == 0.0 {
                        0.0
                    } else {
                        (d / (qn * en)).clamp(-1.0, 1.0)
                    }
                }
                Metric::L2 => query.iter().zip(&e.vector).map(|(a, b)| (a - b) * (a - b)).sum(),
            };
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| {
        let primary = match metric {
            Metric::Cosine => b.1.total_cmp(&a.1),
            Metric::L2 => a.1.total_cmp(&b.1),
        };
        primary.then_with(|| {
            let (ea, eb) = (&entries[a.0], &entries[b.0]);
            (&ea.video_id, ea.clip_index).cmp(&(&eb.video_id, eb.clip_index))
        })
    });
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}
