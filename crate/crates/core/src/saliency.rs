//! Monte-Carlo-dropout gradient saliency over input channels.
//!
//! For each subject `s`, dropout realisation `m` and class `c` the network
//! output probabilities are summed over voxels and backpropagated to the
//! input. The channel's contribution is the L1 norm of its gradient volume.
//! The Overall Importance Score of channel `i` is the sum of contributions
//! over classes, subjects and runs divided by `S * M`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, GradTargets, Graph, Mode, NodeId, Tensor};
use crate::relaxometry::ChannelMeta;
use crate::rng::{derive, hash_str, purpose};
use crate::segnet::unet::INPUT_IMAGE;
use crate::segnet::{Sample, SegError, SegModel};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("invalid OIS configuration: {0}")]
    Config(String),
    #[error("class index {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },
    #[error("channel order of subject {subject} differs from {reference}")]
    ChannelMismatch { subject: String, reference: String },
    #[error("non-finite gradient value")]
    NonFinite,
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

type Result<T> = std::result::Result<T, SaliencyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OISConfig {
    pub mc_runs: usize,
    pub dropout_p: f64,
    /// Must match the model's output class count.
    pub classes: usize,
    pub seed: u64,
    /// Keep every per-(subject, run, class, channel) contribution.
    pub keep_raw: bool,
}

impl Default for OISConfig {
    fn default() -> Self {
        Self {
            mc_runs: 100,
            dropout_p: 0.1,
            classes: 14,
            seed: 0,
            keep_raw: false,
        }
    }
}

impl OISConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_runs == 0 {
            return Err(SaliencyError::Config("mc_runs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(SaliencyError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.classes == 0 {
            return Err(SaliencyError::Config("classes must be positive".into()));
        }
        Ok(())
    }
}

/// One subject to score, with the index of the model that scores it
/// (in cross-validation, the fold whose test set holds the subject).
#[derive(Debug, Clone, Copy)]
pub struct OISSubject<'a> {
    pub id: &'a str,
    pub sample: &'a Sample,
    pub channels: &'a [ChannelMeta],
    pub model: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel_index: usize,
    pub meta: ChannelMeta,
    pub score: f64,
    /// 1 is the most important channel.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawContribution {
    pub subject: String,
    pub run: usize,
    pub class: usize,
    pub channel: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OISReport {
    /// In channel-index order.
    pub channels: Vec<ChannelScore>,
    pub subjects: Vec<String>,
    pub mc_runs: usize,
    pub dropout_p: f64,
    pub classes: usize,
    pub seed: u64,
    pub model_checksums: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<RawContribution>>,
}

impl OISReport {
    pub fn scores(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.score).collect()
    }

    /// Channel indices from most to least important.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<&ChannelScore> = self.channels.iter().collect();
        order.sort_by_key(|c| c.rank);
        order.iter().map(|c| c.channel_index).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel_index,kind,ti_ms,score,rank\n");
        for c in &self.channels {
            let ti = c.meta.ti_ms.map(|t| t.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.17e},{}\n",
                c.channel_index,
                c.meta.kind.tag(),
                ti,
                c.score,
                c.rank
            ));
        }
        s
    }

    /// Run metadata for the JSON sidecar next to the CSV.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "mc_runs": self.mc_runs,
            "dropout_p": self.dropout_p,
            "subjects": self.subjects.len(),
            "subject_ids": self.subjects,
            "classes": self.classes,
            "model_checksums": self.model_checksums,
        })
    }
}

/// Ranks by descending score; equal scores rank the lower index first.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// Sum of absolute values over voxels.
pub fn channel_score(gradient: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &g in gradient {
        if !g.is_finite() {
            return Err(SaliencyError::NonFinite);
        }
        s += g.abs();
    }
    Ok(s)
}

/// Backpropagates `sum_v probs[class, v]` through an already evaluated graph
/// to the named input. An input with no path to `probs` gets zeros.
pub fn graph_class_sum_gradient(graph: &Graph, probs: NodeId, input: &str, class: usize) -> Result<Tensor> {
    let shape = graph.value(probs)?.shape();
    if class >= shape[1] {
        return Err(SaliencyError::ClassIndex {
            class,
            classes: shape[1],
        });
    }
    let mut cot = Tensor::zeros(shape);
    cot.slab_mut(0, class).fill(1.0);
    let mut grads = graph.backward(probs, &cot, GradTargets::Inputs)?;
    grads
        .inputs
        .remove(input)
        .ok_or_else(|| SaliencyError::Config(format!("graph has no input named {input}")))
}

fn backward_class(model: &SegModel, class: usize) -> Result<Tensor> {
    graph_class_sum_gradient(model.graph(), model.probs_node(), INPUT_IMAGE, class)
}

/// Gradient of `sum_v p[class, v]` with respect to the input image, under one
/// dropout realisation selected by `key`.
pub fn class_sum_gradient(model: &mut SegModel, image: &Tensor, class: usize, mode: Mode, key: u64) -> Result<Tensor> {
    let classes = model.config.num_classes;
    if class >= classes {
        return Err(SaliencyError::ClassIndex { class, classes });
    }
    model.forward_probs(image, mode, key)?;
    backward_class(model, class)
}

/// Channel scores `[class][channel]` for one forward pass and one backward
/// pass per class.
fn run_scores(model: &mut SegModel, image: &Tensor, key: u64) -> Result<Vec<Vec<f64>>> {
    model.forward_probs(image, Mode::McDropout, key)?;
    (0..model.config.num_classes)
        .map(|c| {
            let g = backward_class(model, c)?;
            (0..g.channels()).map(|i| channel_score(g.slab(0, i))).collect()
        })
        .collect()
}

/// Dropout key of one (subject, run) pair. Depends on the subject id rather
/// than its position, so reordering the subject list changes nothing.
pub fn run_key(seed: u64, subject: &str, run: usize) -> u64 {
    derive(
        derive(seed, purpose::MC_RUN, hash_str(subject)),
        purpose::MC_RUN,
        run as u64,
    )
}

/// Overall Importance Score of every input channel.
///
/// Runs for a subject execute in parallel on private model copies; the
/// reduction is serial in (subject id, run, class) order, so results do not
/// depend on thread count or on the order of `subjects`.
pub fn compute_ois(models: &[SegModel], subjects: &[OISSubject], cfg: &OISConfig) -> Result<OISReport> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(SaliencyError::Config("no subjects to score".into()));
    }
    for (k, m) in models.iter().enumerate() {
        if m.config.num_classes != cfg.classes {
            return Err(SaliencyError::Config(format!(
                "model {k} has {} classes, configuration says {}",
                m.config.num_classes, cfg.classes
            )));
        }
    }
    let mut order: Vec<&OISSubject> = subjects.iter().collect();
    order.sort_by(|a, b| a.id.cmp(b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(SaliencyError::Config(format!("duplicate subject id {}", w[0].id)));
    }
    let reference = order[0];
    let n_channels = reference.channels.len();
    for s in &order {
        if s.channels != reference.channels || s.sample.num_channels() != n_channels {
            return Err(SaliencyError::ChannelMismatch {
                subject: s.id.to_string(),
                reference: reference.id.to_string(),
            });
        }
        if s.model >= models.len() {
            return Err(SaliencyError::Config(format!(
                "subject {} refers to model {} of {}",
                s.id,
                s.model,
                models.len()
            )));
        }
    }

    let mut totals = vec![0.0; n_channels];
    let mut raw = cfg.keep_raw.then(Vec::new);
    for s in &order {
        let mut model = models[s.model].clone();
        model.set_dropout_p(cfg.dropout_p)?;
        let image = s.sample.to_tensor();
        let runs: Vec<Vec<Vec<f64>>> = (0..cfg.mc_runs)
            .into_par_iter()
            .map_init(
                || model.clone(),
                |m, run| run_scores(m, &image, run_key(cfg.seed, s.id, run)),
            )
            .collect::<Result<_>>()?;
        for (run, per_class) in runs.iter().enumerate() {
            for (class, per_channel) in per_class.iter().enumerate() {
                for (i, &v) in per_channel.iter().enumerate() {
                    totals[i] += v;
                    if let Some(r) = raw.as_mut() {
                        r.push(RawContribution {
                            subject: s.id.to_string(),
                            run,
                            class,
                            channel: i,
                            score: v,
                        });
                    }
                }
            }
        }
    }
    let norm = (order.len() * cfg.mc_runs) as f64;
    let scores: Vec<f64> = totals.iter().map(|t| t / norm).collect();
    let ranks = rank_scores(&scores);
    Ok(OISReport {
        channels: (0..n_channels)
            .map(|i| ChannelScore {
                channel_index: i,
                meta: reference.channels[i].clone(),
                score: scores[i],
                rank: ranks[i],
            })
            .collect(),
        subjects: order.iter().map(|s| s.id.to_string()).collect(),
        mc_runs: cfg.mc_runs,
        dropout_p: cfg.dropout_p,
        classes: cfg.classes,
        seed: cfg.seed,
        model_checksums: models.iter().map(|m| format!("{:016x}", m.checksum())).collect(),
        raw,
    })
}

/// The `k` most important channels in rank order.
pub fn select_topk(report: &OISReport, k: usize) -> Result<Vec<usize>> {
    let n = report.channels.len();
    if k == 0 || k > n {
        return Err(SaliencyError::Config(format!("k = {k} outside 1..={n}")));
    }
    Ok(report.ranking()[..k].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::segnet::unet::{build_unet, UNetConfig};
    use crate::volume::UNLABELED;

    fn sample(c: usize, dims: [usize; 3], seed: u64) -> Sample {
        let mut rng = Stream::new(seed, purpose::TEST_DATA, 0);
        let n: usize = dims.iter().product();
        Sample::new(
            dims,
            (0..c).map(|_| (0..n).map(|_| rng.normal()).collect()).collect(),
            vec![UNLABELED; n],
        )
        .unwrap()
    }

    fn metas(c: usize) -> Vec<ChannelMeta> {
        (0..c)
            .map(|i| ChannelMeta::synthesized(400.0 + 20.0 * i as f64))
            .collect()
    }

    fn zero_channel(model: &mut SegModel, channel: usize) {
        let idx = model.graph().param_index("enc0.1.conv.w").unwrap();
        let w = &mut model.graph_mut().params_mut()[idx];
        let [co, ci, k0, k1, k2] = w.shape();
        let per = k0 * k1 * k2;
        for o in 0..co {
            let start = (o * ci + channel) * per;
            w.data_mut()[start..start + per].fill(0.0);
        }
    }

    #[test]
    fn channel_score_cases() {
        assert_eq!(channel_score(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(channel_score(&[1.0, -2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(channel_score(&[-1.0, 2.0, -3.0]).unwrap(), 6.0);
        assert!(channel_score(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ranks_and_topk() {
        assert_eq!(rank_scores(&[3.0, 1.0, 2.0]), vec![1, 3, 2]);
        assert_eq!(rank_scores(&[1.0, 2.0, 2.0]), vec![3, 1, 2]);
        let channels = [3.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| ChannelScore {
                channel_index: i,
                meta: ChannelMeta::synthesized(400.0),
                score: s,
                rank: rank_scores(&[3.0, 1.0, 2.0])[i],
            })
            .collect();
        let report = OISReport {
            channels,
            subjects: vec![],
            mc_runs: 1,
            dropout_p: 0.0,
            classes: 2,
            seed: 0,
            model_checksums: vec![],
            raw: None,
        };
        assert_eq!(select_topk(&report, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&report, 3).unwrap(), vec![0, 2, 1]);
        assert!(select_topk(&report, 0).is_err());
        assert!(select_topk(&report, 4).is_err());
    }

    #[test]
    fn class_gradients_sum_to_zero() {
        let mut m = build_unet(&UNetConfig::new(2, 3, 1, 2, 0.2), 3).unwrap();
        let s = sample(2, [4, 4, 4], 1);
        let img = s.to_tensor();
        let mut total = vec![0.0; img.len()];
        let mut scale = 0.0f64;
        for c in 0..3 {
            let g = class_sum_gradient(&mut m, &img, c, Mode::McDropout, 11).unwrap();
            for (t, v) in total.iter_mut().zip(g.data()) {
                *t += v;
                scale = scale.max(v.abs());
            }
        }
        assert!(scale > 0.0);
        assert!(
            total.iter().all(|t| t.abs() < 1e-9),
            "{:?}",
            total.iter().fold(0.0f64, |a, b| a.max(b.abs()))
        );
        assert!(matches!(
            class_sum_gradient(&mut m, &img, 3, Mode::Eval, 0),
            Err(SaliencyError::ClassIndex { .. })
        ));
    }

    #[test]
    fn softmax_jacobian_by_hand() {
        // One voxel, two input channels, 1x1x1 conv to three logits, softmax.
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param(
            "w",
            Tensor::new([3, 2, 1, 1, 1], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap(),
        );
        let b = g.param("b", Tensor::new([1, 3, 1, 1, 1], vec![0.1, 0.0, -0.2]).unwrap());
        let z = g.conv3d(x, w, b);
        let p = g.softmax(z);
        let xin = Tensor::new([1, 2, 1, 1, 1], vec![0.4, -0.9]).unwrap();
        g.forward(&[("x", &xin)], Mode::Eval, 0).unwrap();
        let wv = [[0.5, -1.0], [2.0, 0.3], [-0.7, 1.1]];
        let bv = [0.1, 0.0, -0.2];
        let logits: Vec<f64> = (0..3).map(|k| wv[k][0] * 0.4 + wv[k][1] * -0.9 + bv[k]).collect();
        let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
        let pv: Vec<f64> = logits.iter().map(|l| l.exp() / zsum).collect();
        for c in 0..3 {
            let grad = graph_class_sum_gradient(&g, p, "x", c).unwrap();
            for i in 0..2 {
                // dp_c/dx_i = p_c (W[c][i] - sum_k p_k W[k][i])
                let mean_w: f64 = (0..3).map(|k| pv[k] * wv[k][i]).sum();
                let expect = pv[c] * (wv[c][i] - mean_w);
                assert!((grad.data()[i] - expect).abs() < 1e-14, "c {c} i {i}");
            }
        }
    }

    #[test]
    fn zero_weights_mean_zero_gradient() {
        let mut m = build_unet(&UNetConfig::new(3, 3, 1, 2, 0.1), 3).unwrap();
        zero_channel(&mut m, 1);
        let s = sample(3, [4, 4, 4], 2);
        let g = class_sum_gradient(&mut m, &s.to_tensor(), 0, Mode::McDropout, 5).unwrap();
        assert!(g.slab(0, 1).iter().all(|&v| v == 0.0));
        assert!(g.slab(0, 0).iter().any(|&v| v != 0.0));
        let report = compute_ois(
            &[m],
            &[OISSubject {
                id: "a",
                sample: &s,
                channels: &metas(3),
                model: 0,
            }],
            &OISConfig {
                mc_runs: 3,
                classes: 3,
                ..OISConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.channels[1].score, 0.0);
        assert_eq!(report.channels[1].rank, 3);
    }

    #[test]
    fn no_dropout_means_run_count_is_irrelevant() {
        let m = build_unet(&UNetConfig::new(2, 3, 1, 2, 0.1), 4).unwrap();
        let s = sample(2, [4, 4, 4], 3);
        let subj = [OISSubject {
            id: "a",
            sample: &s,
            channels: &metas(2),
            model: 0,
        }];
        let cfg = |runs| OISConfig {
            mc_runs: runs,
            dropout_p: 0.0,
            classes: 3,
            ..OISConfig::default()
        };
        let one = compute_ois(std::slice::from_ref(&m), &subj, &cfg(1)).unwrap().scores();
        let many = compute_ois(std::slice::from_ref(&m), &subj, &cfg(20)).unwrap().scores();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn subject_order_is_irrelevant() {
        let models = [
            build_unet(&UNetConfig::new(2, 3, 1, 2, 0.3), 4).unwrap(),
            build_unet(&UNetConfig::new(2, 3, 1, 2, 0.3), 5).unwrap(),
        ];
        let samples: Vec<Sample> = (0..3).map(|i| sample(2, [4, 4, 4], 10 + i)).collect();
        let meta = metas(2);
        let ids = ["x", "y", "z"];
        let subjects: Vec<OISSubject> = (0..3)
            .map(|i| OISSubject {
                id: ids[i],
                sample: &samples[i],
                channels: &meta,
                model: i % 2,
            })
            .collect();
        let cfg = OISConfig {
            mc_runs: 4,
            classes: 3,
            seed: 9,
            keep_raw: true,
            ..OISConfig::default()
        };
        let a = compute_ois(&models, &subjects, &cfg).unwrap();
        let rev: Vec<OISSubject> = subjects.iter().rev().copied().collect();
        let b = compute_ois(&models, &rev, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw.as_ref().unwrap().len(), 3 * 4 * 3 * 2);
        let raw_sum: f64 = a
            .raw
            .as_ref()
            .unwrap()
            .iter()
            .filter(|r| r.channel == 0)
            .map(|r| r.score)
            .sum();
        assert!((raw_sum / 12.0 - a.channels[0].score).abs() < 1e-12 * raw_sum);
        assert!(a.channels.iter().all(|c| c.score >= 0.0));
        assert_eq!(a.to_csv().lines().count(), 3);
        assert_eq!(a.metadata()["mc_runs"], 4);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = build_unet(&UNetConfig::new(2, 3, 1, 2, 0.1), 4).unwrap();
        let s = sample(2, [4, 4, 4], 3);
        let (a, mut b) = (metas(2), metas(2));
        b.swap(0, 1);
        let subjects = [
            OISSubject {
                id: "a",
                sample: &s,
                channels: &a,
                model: 0,
            },
            OISSubject {
                id: "b",
                sample: &s,
                channels: &b,
                model: 0,
            },
        ];
        let cfg = OISConfig {
            mc_runs: 1,
            classes: 3,
            ..OISConfig::default()
        };
        assert!(matches!(
            compute_ois(&[m], &subjects, &cfg),
            Err(SaliencyError::ChannelMismatch { .. })
        ));
    }
}
