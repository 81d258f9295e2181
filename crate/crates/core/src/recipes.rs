//! Training setups shared by the command-line tool and the acceptance tests.

use serde::Serialize;

use crate::datagen::{gen_gaussians, Arrangement, GaussianMixtureSpec, Samples};
use crate::error::{config, Error, Result};
use crate::head::{HeadConfig, Instantiation};
use crate::stats::spearman;
use crate::trainer::{train, TrainConfig, TrainLog, TrainedModel};

/// Cosine preset on the 2-D nine-Gaussian toys.
pub fn toy_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(HeadConfig::preset(Instantiation::Cosine, 9, 9));
    cfg.batch_size = 64;
    cfg.hidden = vec![32, 32];
    cfg.seed = seed;
    cfg
}

/// Cosine preset on the four-class sketch corpus (68 handcrafted features).
pub fn sketch_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(HeadConfig::preset(Instantiation::Cosine, 4, 64));
    cfg.epochs = 60;
    cfg.batch_size = 32;
    cfg.unit_norm_inputs = true;
    cfg.seed = seed;
    cfg
}

/// The pseudo-label toy: a four-layer perceptron re-clustered every two epochs.
pub fn pseudo_label_config(seed: u64) -> TrainConfig {
    let mut cfg = toy_config(seed);
    cfg.hidden = vec![32, 32, 32];
    cfg.pseudo_label_period = 2;
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyRow {
    pub x: f64,
    pub y: f64,
    /// Generating Gaussian.
    pub component: usize,
    /// Final pseudo-label.
    pub cluster: usize,
    pub q_norm: f64,
    pub magnitude: f64,
    pub theta: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub arrangement: Arrangement,
    pub seed: u64,
    /// Share of samples whose cluster's majority component is their own.
    pub purity: f64,
    /// Spearman(‖f‖, top-2 cosine margin) within each pseudo-label cluster;
    /// `None` when a cluster is too small or constant.
    pub cluster_spearman: Vec<Option<f64>>,
    pub rows: Vec<ToyRow>,
}

impl ToyReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("x,y,component,cluster,q_norm,magnitude,theta,margin\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.x, r.y, r.component, r.cluster, r.q_norm, r.magnitude, r.theta, r.margin
            ));
        }
        out
    }
}

/// Trains on the unlabelled nine-Gaussian set with pseudo-labels and scores
/// every point against its final cluster. The magnitude is used for the
/// correlation because it keeps the order the normalised q clamps away.
pub fn pseudo_label_toy(
    arrangement: Arrangement,
    samples_per_component: usize,
    cfg: &TrainConfig,
) -> Result<(ToyReport, TrainedModel, TrainLog)> {
    if cfg.pseudo_label_period == 0 {
        return Err(config("the toy needs pseudo_label_period > 0"));
    }
    let data = gen_gaussians(&GaussianMixtureSpec::nine(arrangement, samples_per_component, cfg.seed))?;
    let (model, log) = train(cfg, &data)?;
    let ev = model.evaluate(&data.with_labels(log.final_labels.clone())?)?;
    let truth = data.truth_labels.clone().unwrap_or_else(|| data.labels.clone());
    let k = cfg.head.class_count;
    let mut counts = vec![vec![0usize; k]; k];
    for (&c, &t) in log.final_labels.iter().zip(&truth) {
        counts[c][t] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    let cluster_spearman = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..data.len()).filter(|&i| log.final_labels[i] == c).collect();
            let q: Vec<f64> = idx.iter().map(|&i| ev.magnitude[i]).collect();
            let m: Vec<f64> = idx.iter().map(|&i| ev.margin[i]).collect();
            spearman(&q, &m).ok()
        })
        .collect();
    let Samples::Points(pts) = &data.samples else {
        return Err(Error::State("toy data must be points".into()));
    };
    let rows = (0..data.len())
        .map(|i| ToyRow {
            x: pts.get(i, 0),
            y: pts.get(i, 1),
            component: truth[i],
            cluster: log.final_labels[i],
            q_norm: ev.q_norm[i],
            magnitude: ev.magnitude[i],
            theta: ev.theta[i],
            margin: ev.margin[i],
        })
        .collect();
    let report = ToyReport {
        arrangement,
        seed: cfg.seed,
        purity: majority as f64 / data.len() as f64,
        cluster_spearman,
        rows,
    };
    Ok((report, model, log))
}
