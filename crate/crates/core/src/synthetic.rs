//! Synthetic encoded datasets with a planted drug × disease interaction.
//!
//! Every sample draws a drug cluster and a disease cluster (two each,
//! independent, uniform). The label is their XOR, so neither the drug-side
//! nor the disease-side modalities carry information on their own. The
//! remaining modalities are pure noise.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::smoe::Modality;
use crate::training::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub samples: usize,
    pub embed_dim: usize,
    /// Per-coordinate noise around a unit-norm cluster center, in units of 1/sqrt(dim).
    pub noise: f64,
    /// Probability of flipping a label.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            samples: 500,
            embed_dim: 16,
            noise: 0.5,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub struct Planted {
    pub data: Dataset,
    pub drug_cluster: Vec<u8>,
    pub disease_cluster: Vec<u8>,
}

pub fn planted_interaction(cfg: &PlantedConfig) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.embed_dim;
    let centers = |rng: &mut ChaCha8Rng| [unit(gaussian(rng, e)), unit(gaussian(rng, e))];
    let smiles_c = centers(&mut rng);
    let drugs_c = centers(&mut rng);
    let disease_c = centers(&mut rng);
    let scale = cfg.noise / (e as f64).sqrt();
    let mut inputs: Vec<Array2<f64>> = Modality::ALL
        .iter()
        .map(|m| Array2::zeros((cfg.samples, m.input_dim(e))))
        .collect();
    let mut labels = Vec::with_capacity(cfg.samples);
    let (mut dc, mut oc) = (Vec::new(), Vec::new());
    for i in 0..cfg.samples {
        let d = rng.random_range(0..2u8);
        let o = rng.random_range(0..2u8);
        let flip = rng.random::<f64>() < cfg.label_noise;
        labels.push(((d ^ o) ^ flip as u8) as f64);
        dc.push(d);
        oc.push(o);
        for (slot, m) in Modality::ALL.iter().enumerate() {
            let w = m.input_dim(e);
            let noise: Vec<f64> = gaussian(&mut rng, w)
                .into_iter()
                .map(|x| x * scale)
                .collect();
            let v = match m {
                Modality::Smiles => smiles_c[d as usize]
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + n)
                    .collect(),
                Modality::Drugs => drugs_c[d as usize]
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + n)
                    .collect(),
                Modality::Diseases => disease_c[o as usize]
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + n)
                    .collect(),
                _ => gaussian(&mut rng, w),
            };
            inputs[slot].row_mut(i).assign(&Array1::from(unit(v)));
        }
    }
    Planted {
        data: Dataset {
            modalities: Modality::ALL.to_vec(),
            inputs,
            labels: Array1::from(labels),
        },
        drug_cluster: dc,
        disease_cluster: oc,
    }
}
