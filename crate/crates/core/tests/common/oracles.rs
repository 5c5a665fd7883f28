//! Brute-force reference implementations, written independently of the
//! library's aggregation and prediction code.

use std::collections::BTreeMap;

use protofed::data::Dataset;
use protofed::nn::{embed, ModelParams};
use protofed::prototype::{GlobalPrototypeSet, LocalPrototypeSet};
use protofed::Tensor;

/// Element-by-element `sum(size_i * p_i) / sum(size_i)` in f64.
pub fn fedavg(updates: &[(&ModelParams, usize)]) -> Vec<Vec<f32>> {
    let total: usize = updates.iter().map(|(_, s)| s).sum();
    let n_tensors = updates[0].0.tensors().len();
    (0..n_tensors)
        .map(|ti| {
            let len = updates[0].0.tensors()[ti].len();
            (0..len)
                .map(|j| {
                    let mut acc = 0.0f64;
                    for (p, size) in updates {
                        acc += *size as f64 * p.tensors()[ti].data()[j] as f64;
                    }
                    (acc / total as f64) as f32
                })
                .collect()
        })
        .collect()
}

/// Embeds samples one at a time and averages per class.
pub fn local_prototypes(params: &ModelParams, data: &Dataset) -> BTreeMap<usize, (Vec<f32>, usize)> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..data.len() {
        let e = embed(params, &data.images().gather_rows(&[i]).unwrap()).unwrap();
        let slot = sums
            .entry(data.labels()[i])
            .or_insert_with(|| (vec![0.0; e.len()], 0));
        for (s, &v) in slot.0.iter_mut().zip(e.data()) {
            *s += v as f64;
        }
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, (s.iter().map(|v| (v / n as f64) as f32).collect(), n)))
        .collect()
}

/// Per class: collect the clients holding it, average their vectors.
pub fn global_prototypes(locals: &[LocalPrototypeSet]) -> BTreeMap<usize, (Vec<f32>, usize)> {
    let classes: std::collections::BTreeSet<usize> = locals.iter().flat_map(|l| l.set.classes()).collect();
    classes
        .into_iter()
        .map(|c| {
            let present: Vec<&Vec<f32>> = locals
                .iter()
                .filter_map(|l| l.set.get(c).map(|e| &e.vector))
                .collect();
            let mut ids: Vec<(usize, &Vec<f32>)> = locals
                .iter()
                .filter_map(|l| l.set.get(c).map(|e| (l.client_id, &e.vector)))
                .collect();
            ids.sort_by_key(|(id, _)| *id);
            let dim = present[0].len();
            let mean = (0..dim)
                .map(|k| {
                    let s: f64 = ids.iter().map(|(_, v)| v[k] as f64).sum();
                    (s / ids.len() as f64) as f32
                })
                .collect();
            (c, (mean, present.len()))
        })
        .collect()
}

/// Full distance table, row-wise argmin with lowest-class tie-break.
pub fn nearest(globals: &GlobalPrototypeSet, queries: &Tensor) -> Vec<usize> {
    let protos: Vec<(usize, Vec<f64>)> = globals
        .set
        .iter()
        .map(|(c, e)| (c, e.vector.iter().map(|&v| v as f64).collect()))
        .collect();
    let table: Vec<Vec<f64>> = (0..queries.rows())
        .map(|r| {
            protos
                .iter()
                .map(|(_, p)| {
                    queries
                        .row(r)
                        .iter()
                        .zip(p)
                        .map(|(&q, &v)| (q as f64 - v) * (q as f64 - v))
                        .sum()
                })
                .collect()
        })
        .collect();
    table
        .iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] < row[best] {
                    best = j;
                }
            }
            protos[best].0
        })
        .collect()
}
