//! Training loops: contrastive pre-training (NT-Xent over paired
//! augmented views) and AP fine-tuning (quantized AP loss over labeled
//! batches, encoder only). Both are single-threaded and fully determined
//! by (seed, config, dataset).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::aggregate::AggregatorConfig;
use crate::data::{augment, AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::losses::{ntxent, quantized_ap_loss, EmbeddingBatch};
use crate::rng;

use super::{
    backward_encoder, backward_encoder_from_descriptor, backward_head, forward_encoder,
    forward_head, AdamState, EncoderParams, HeadParams, DESC_DIM, EMBED_DIM,
};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub temperature: f64,
    pub ap_bins: usize,
    pub lr: f64,
    pub aggregator: AggregatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 500,
            seed: 0,
            temperature: 0.5,
            ap_bins: 20,
            lr: 1e-3,
            aggregator: AggregatorConfig::default(),
        }
    }
}

/// Labeled training images: (image id, instance label, image).
pub type Dataset = [(String, u32, Image)];

/// SimCLR-style pre-training. Each step samples batch_size/2 images,
/// augments each twice, and minimizes NT-Xent over the 2N projected
/// views. Returns the trained parameters and the per-step loss trace.
pub fn train_contrastive(
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<(EncoderParams, HeadParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if cfg.batch_size < 2 || cfg.batch_size % 2 != 0 {
        return Err(Error::InvalidArgument(
            "contrastive batch size must be even and >= 2".into(),
        ));
    }
    if cfg.steps < 1 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }

    let mut init_rng = rng::stream(cfg.seed, "init");
    let mut params = EncoderParams::init(&mut init_rng);
    let mut head = HeadParams::init(&mut init_rng);

    let mut batch_rng = rng::stream(cfg.seed, "contrastive/batch");
    let mut aug_rng = rng::stream(cfg.seed, "contrastive/augment");
    let aug_cfg = AugmentConfig::default();

    let n_enc = params.len();
    let mut adam = AdamState::new(n_enc + head.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let n_pairs = cfg.batch_size / 2;

    for _ in 0..cfg.steps {
        // two augmented views per sampled image, adjacent rows
        let mut views = Vec::with_capacity(cfg.batch_size);
        for _ in 0..n_pairs {
            let idx = batch_rng.gen_range(0..dataset.len());
            let img = &dataset[idx].2;
            views.push(augment(img, &aug_cfg, &mut aug_rng)?);
            views.push(augment(img, &aug_cfg, &mut aug_rng)?);
        }

        let mut caches = Vec::with_capacity(cfg.batch_size);
        let mut head_caches = Vec::with_capacity(cfg.batch_size);
        let mut rows = Vec::with_capacity(cfg.batch_size * EMBED_DIM);
        for view in &views {
            let cache = forward_encoder(&params, &cfg.aggregator, view)?;
            let hc = forward_head(&head, &cache.fc_out)?;
            rows.extend_from_slice(&hc.embed);
            caches.push(cache);
            head_caches.push(hc);
        }
        let batch = EmbeddingBatch::new(
            cfg.batch_size,
            EMBED_DIM,
            rows,
            vec![0; cfg.batch_size],
        )?;
        let loss = ntxent(&batch, cfg.temperature)?;
        trace.push(loss.value);

        let mut enc_grads = EncoderParams::zeros();
        let mut head_grads = HeadParams::zeros();
        for (i, (cache, hc)) in caches.iter().zip(&head_caches).enumerate() {
            let dembed = &loss.grad[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            let dfc = backward_head(&head, hc, &cache.fc_out, dembed, &mut head_grads);
            backward_encoder(&params, &cfg.aggregator, cache, &dfc, &mut enc_grads)?;
        }

        let mut flat = params.to_flat();
        flat.extend(head.to_flat());
        let mut gflat = enc_grads.to_flat();
        gflat.extend(head_grads.to_flat());
        adam.step(&mut flat, &gflat)?;
        params = EncoderParams::from_flat(&flat[..n_enc])?;
        head = HeadParams::from_flat(&flat[n_enc..])?;
    }

    Ok((params, head, trace))
}

/// Sample batch_size/4 labels and 4 distinct views of each, so every
/// query in the batch has at least 3 positives.
fn sample_ap_batch(
    by_label: &[(u32, Vec<usize>)],
    n_labels: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut label_order: Vec<usize> = (0..by_label.len()).collect();
    label_order.shuffle(rng);
    let mut batch = Vec::with_capacity(n_labels * 4);
    for &li in label_order.iter().take(n_labels) {
        let mut views = by_label[li].1.clone();
        views.shuffle(rng);
        batch.extend(views.into_iter().take(4));
    }
    batch
}

/// AP fine-tuning on top of a pre-trained encoder. The projection head is
/// discarded; gradients flow into the encoder only. Returns the updated
/// encoder and the per-step loss trace.
pub fn finetune_ap(
    cfg: &TrainConfig,
    dataset: &Dataset,
    params: &EncoderParams,
) -> Result<(EncoderParams, Vec<f64>)> {
    if cfg.batch_size < 4 || cfg.batch_size % 4 != 0 {
        return Err(Error::InvalidArgument(
            "ap batch size must be a positive multiple of 4".into(),
        ));
    }
    if cfg.steps < 1 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let mut by_label: Vec<(u32, Vec<usize>)> = Vec::new();
    for (i, (_, label, _)) in dataset.iter().enumerate() {
        match by_label.iter_mut().find(|(l, _)| l == label) {
            Some((_, v)) => v.push(i),
            None => by_label.push((*label, vec![i])),
        }
    }
    by_label.retain(|(_, v)| v.len() >= 4);
    let n_labels = cfg.batch_size / 4;
    if by_label.len() < n_labels {
        return Err(Error::InvalidArgument(format!(
            "need {} labels with >= 4 views, found {}",
            n_labels,
            by_label.len()
        )));
    }

    let mut params = params.clone();
    let mut batch_rng = rng::stream(cfg.seed, "finetune/batch");
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let indices = sample_ap_batch(&by_label, n_labels, &mut batch_rng);
        let mut caches = Vec::with_capacity(indices.len());
        let mut rows = Vec::with_capacity(indices.len() * DESC_DIM);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in &indices {
            let cache = forward_encoder(&params, &cfg.aggregator, &dataset[i].2)?;
            rows.extend_from_slice(&cache.desc);
            labels.push(dataset[i].1);
            caches.push(cache);
        }
        let batch = EmbeddingBatch::new(indices.len(), DESC_DIM, rows, labels)?;
        let loss = quantized_ap_loss(&batch, cfg.ap_bins)?;
        trace.push(loss.value);

        let mut grads = EncoderParams::zeros();
        for (i, cache) in caches.iter().enumerate() {
            let ddesc = &loss.grad[i * DESC_DIM..(i + 1) * DESC_DIM];
            backward_encoder_from_descriptor(&params, &cfg.aggregator, cache, ddesc, &mut grads)?;
        }
        let mut flat = params.to_flat();
        adam.step(&mut flat, &grads.to_flat())?;
        params = EncoderParams::from_flat(&flat)?;
    }

    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_canonical, SynthSpec};

    fn tiny_dataset() -> Vec<(String, u32, Image)> {
        let spec = SynthSpec {
            instances: 4,
            views: 4,
            seed: 3,
            ..Default::default()
        };
        let mut out = Vec::new();
        for k in 0..4 {
            let canonical = synth_canonical(&spec, k);
            for v in 0..4 {
                let mut rng = rng::stream(3, &format!("test/{k}/{v}"));
                let img = augment(&canonical, &AugmentConfig::default(), &mut rng).unwrap();
                out.push((format!("i{k}v{v}"), k as u32, img));
            }
        }
        out
    }

    #[test]
    fn contrastive_one_step_contract() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 8,
            seed: 1,
            ..Default::default()
        };
        let (_, _, trace) = train_contrastive(&cfg, &ds).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].is_finite());
    }

    #[test]
    fn contrastive_is_seed_deterministic() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 8,
            seed: 9,
            ..Default::default()
        };
        let (p1, h1, t1) = train_contrastive(&cfg, &ds).unwrap();
        let (p2, h2, t2) = train_contrastive(&cfg, &ds).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1.to_flat(), p2.to_flat());
        assert_eq!(h1.to_flat(), h2.to_flat());
    }

    #[test]
    fn contrastive_rejects_odd_batch() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 7,
            ..Default::default()
        };
        assert!(train_contrastive(&cfg, &ds).is_err());
    }

    #[test]
    fn finetune_one_step_contract_and_determinism() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 8,
            seed: 4,
            ..Default::default()
        };
        let mut init_rng = rng::stream(4, "init");
        let params = EncoderParams::init(&mut init_rng);
        let (p1, t1) = finetune_ap(&cfg, &ds, &params).unwrap();
        let (p2, t2) = finetune_ap(&cfg, &ds, &params).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1.to_flat(), p2.to_flat());
        assert_eq!(t1.len(), 2);
    }

    #[test]
    fn finetune_needs_enough_labels() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 32, // 8 labels needed, only 4 exist
            ..Default::default()
        };
        let mut init_rng = rng::stream(5, "init");
        let params = EncoderParams::init(&mut init_rng);
        assert!(finetune_ap(&cfg, &ds, &params).is_err());
    }

    #[test]
    fn finetune_loss_drops_on_easy_batches() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 8,
            seed: 12,
            lr: 3e-3,
            ..Default::default()
        };
        let mut init_rng = rng::stream(12, "init");
        let params = EncoderParams::init(&mut init_rng);
        let (_, trace) = finetune_ap(&cfg, &ds, &params).unwrap();
        let head: f64 = trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "head={head}, tail={tail}");
    }
}
