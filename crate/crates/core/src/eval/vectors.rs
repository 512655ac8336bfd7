use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prn::AttentiveVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVectorStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Mean cosine over distinct pairs; `None` for a singleton class.
    pub intra_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorReport {
    pub per_class: BTreeMap<usize, ClassVectorStats>,
    /// Mean of the defined per-class intra-class cosines.
    pub intra_class_cosine: Option<f64>,
    /// Mean cosine over all pairs of vectors from different classes.
    pub inter_class_cosine: f64,
    /// Fraction of vectors whose most similar class mean is their own.
    pub nearest_class_accuracy: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Clustering statistics of object vectors grouped by class.
pub fn attentive_vector_report(vectors: &[AttentiveVector]) -> Result<VectorReport> {
    let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for v in vectors {
        groups
            .entry(v.class_id)
            .or_default()
            .push(v.values.data().iter().map(|&x| x as f64).collect());
    }
    if groups.len() < 2 {
        return Err(Error::Config(format!("vector report needs at least 2 classes, got {}", groups.len())));
    }
    let dim = vectors[0].values.len();
    if vectors.iter().any(|v| v.values.len() != dim) {
        return Err(Error::Dimension("attentive vectors differ in length".into()));
    }
    let mut per_class = BTreeMap::new();
    for (&c, vs) in &groups {
        let n = vs.len();
        let mean: Vec<f64> = (0..dim).map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / n as f64).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(cosine(&vs[i], &vs[j]));
            }
        }
        let intra = (!pairs.is_empty()).then(|| pairs.iter().sum::<f64>() / pairs.len() as f64);
        per_class.insert(
            c,
            ClassVectorStats {
                count: n,
                mean,
                intra_cosine: intra,
            },
        );
    }
    let defined: Vec<f64> = per_class.values().filter_map(|s| s.intra_cosine).collect();
    let intra_class_cosine = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    let flat: Vec<(usize, &Vec<f64>)> = groups.iter().flat_map(|(&c, vs)| vs.iter().map(move |v| (c, v))).collect();
    let (mut inter, mut count) = (0.0, 0usize);
    for i in 0..flat.len() {
        for j in i + 1..flat.len() {
            if flat[i].0 != flat[j].0 {
                inter += cosine(flat[i].1, flat[j].1);
                count += 1;
            }
        }
    }
    let mut correct = 0;
    for (c, v) in &flat {
        let mut best: Option<(usize, f64)> = None;
        for (&k, s) in &per_class {
            let cs = cosine(v, &s.mean);
            if best.is_none_or(|b| cs > b.1) {
                best = Some((k, cs));
            }
        }
        correct += (best.map(|b| b.0) == Some(*c)) as usize;
    }
    Ok(VectorReport {
        per_class,
        intra_class_cosine,
        inter_class_cosine: inter / count as f64,
        nearest_class_accuracy: correct as f64 / flat.len() as f64,
    })
}

/// Writes the raw vectors as JSON for external embedding plots.
pub fn export_vectors(vectors: &[AttentiveVector], path: &Path) -> Result<()> {
    let rows: Vec<serde_json::Value> = vectors
        .iter()
        .map(|v| serde_json::json!({"class": v.class_id, "source": v.source, "values": v.values.data()}))
        .collect();
    let text = serde_json::to_string(&rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn av(c: usize, v: &[f32]) -> AttentiveVector {
        AttentiveVector {
            values: Tensor::from_vec(&[v.len(), 1], v.to_vec()),
            class_id: c,
            source: String::new(),
        }
    }

    #[test]
    fn identical_within_orthogonal_across() {
        let vs = [av(0, &[1.0, 0.0]), av(0, &[1.0, 0.0]), av(1, &[0.0, 2.0]), av(1, &[0.0, 2.0])];
        let r = attentive_vector_report(&vs).unwrap();
        assert_eq!(r.intra_class_cosine, Some(1.0));
        assert_eq!(r.inter_class_cosine, 0.0);
        assert_eq!(r.nearest_class_accuracy, 1.0);
    }

    #[test]
    fn singleton_intra_is_undefined() {
        let vs = [av(0, &[1.0, 0.0]), av(1, &[0.0, 1.0]), av(1, &[0.0, 1.0])];
        let r = attentive_vector_report(&vs).unwrap();
        assert_eq!(r.per_class[&0].intra_cosine, None);
        assert_eq!(r.per_class[&1].intra_cosine, Some(1.0));
        assert!(attentive_vector_report(&vs[..1]).is_err());
    }
}
