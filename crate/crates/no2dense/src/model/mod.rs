//! Dual-head convolutional backbones.
//!
//! Two variants share one topology: a four-stage encoder (each stage two
//! conv-norm-relu layers followed by 2x2 max-pooling), a bottleneck block,
//! and a mirrored decoder of 2x2 transposed convolutions. The UNet
//! concatenates the matching encoder feature map before each decoder block;
//! the autoencoder omits the concatenations and is otherwise identical. A
//! final projection maps to the 64-channel feature map both task heads
//! consume: a regression head producing a full-resolution plane that is
//! center-cropped to the prediction area, and an 11-class segmentation head.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, LoadedCheckpoint};
pub use params::ParamStore;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{INPUT_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::sampler::{crop_start, WINDOW};
use layers::{BatchNorm2d, Conv2dLayer, ConvBlock, ConvTranspose2dLayer};

/// Channel depth of the backbone output feature map.
pub const FEATURE_CHANNELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Unet,
    Autoencoder,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::Unet => write!(f, "unet"),
            BackboneKind::Autoencoder => write!(f, "autoencoder"),
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(BackboneKind::Unet),
            "autoencoder" | "ae" => Ok(BackboneKind::Autoencoder),
            other => Err(Error::Config(format!("unknown backbone kind {other:?}"))),
        }
    }
}

fn default_encoder_channels() -> [usize; 4] {
    [32, 64, 128, 256]
}

fn default_bottleneck() -> usize {
    512
}

fn default_out_channels() -> usize {
    FEATURE_CHANNELS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Widths of the four encoder stages. Smaller widths keep desk-scale
    /// training fast; the values used are recorded in every checkpoint.
    #[serde(default = "default_encoder_channels")]
    pub encoder_channels: [usize; 4],
    #[serde(default = "default_bottleneck")]
    pub bottleneck_channels: usize,
    /// Fixed at 64: both backbones emit a 64x128x128 feature map.
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Autoencoder,
            encoder_channels: default_encoder_channels(),
            bottleneck_channels: default_bottleneck(),
            out_channels: default_out_channels(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels != FEATURE_CHANNELS {
            return Err(Error::Config(format!(
                "backbone output is fixed at {FEATURE_CHANNELS} channels, got {}",
                self.out_channels
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Output of a full forward pass.
pub struct ModelOutput {
    /// Backbone feature map, (b, 64, 128, 128).
    pub features: Tensor,
    /// Regression plane cropped to the prediction area, (b, 1, P, P),
    /// normalized target scale.
    pub no2_plane: Tensor,
    /// Land-cover logits at full resolution, (b, 11, 128, 128).
    pub lc_logits: Tensor,
}

pub struct Model {
    cfg: BackboneConfig,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    ups: Vec<ConvTranspose2dLayer>,
    dec: Vec<ConvBlock>,
    out_conv: Conv2dLayer,
    no2_conv1: Conv2dLayer,
    no2_conv2: Conv2dLayer,
    lc_conv1: Conv2dLayer,
    lc_conv2: Conv2dLayer,
    store: ParamStore,
}

impl Model {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let ch = cfg.encoder_channels;

        let mut enc = Vec::with_capacity(4);
        let mut in_ch = INPUT_CHANNELS;
        for (i, &width) in ch.iter().enumerate() {
            enc.push(ConvBlock::new(&mut store, &mut rng, &format!("enc{i}"), in_ch, width)?);
            in_ch = width;
        }
        let bottleneck = ConvBlock::new(
            &mut store,
            &mut rng,
            "bottleneck",
            ch[3],
            cfg.bottleneck_channels,
        )?;

        let mut ups = Vec::with_capacity(4);
        let mut dec = Vec::with_capacity(4);
        let mut up_in = cfg.bottleneck_channels;
        for i in 0..4 {
            let width = ch[3 - i];
            ups.push(ConvTranspose2dLayer::new(
                &mut store,
                &mut rng,
                &format!("up{i}"),
                up_in,
                width,
            )?);
            let dec_in = match cfg.kind {
                BackboneKind::Unet => width * 2, // skip concatenation
                BackboneKind::Autoencoder => width,
            };
            dec.push(ConvBlock::new(&mut store, &mut rng, &format!("dec{i}"), dec_in, width)?);
            up_in = width;
        }

        let out_conv = Conv2dLayer::new(
            &mut store,
            &mut rng,
            "out",
            ch[0],
            cfg.out_channels,
            3,
            1,
            true,
        )?;
        let no2_conv1 =
            Conv2dLayer::new(&mut store, &mut rng, "head.no2.conv1", cfg.out_channels, 32, 3, 1, true)?;
        let no2_conv2 = Conv2dLayer::new(&mut store, &mut rng, "head.no2.conv2", 32, 1, 3, 1, true)?;
        let lc_conv1 =
            Conv2dLayer::new(&mut store, &mut rng, "head.lc.conv1", cfg.out_channels, 32, 3, 1, true)?;
        let lc_conv2 =
            Conv2dLayer::new(&mut store, &mut rng, "head.lc.conv2", 32, NUM_CLASSES, 1, 0, true)?;

        Ok(Model {
            cfg: cfg.clone(),
            enc,
            bottleneck,
            ups,
            dec,
            out_conv,
            no2_conv1,
            no2_conv2,
            lc_conv1,
            lc_conv2,
            store,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4().map_err(|_| {
            Error::Shape(format!("input must be 4-d (b, c, h, w), got {:?}", x.dims()))
        })?;
        if c != INPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "input channels: expected {INPUT_CHANNELS}, got {c}"
            )));
        }
        if h != WINDOW {
            return Err(Error::Shape(format!("input height: expected {WINDOW}, got {h}")));
        }
        if w != WINDOW {
            return Err(Error::Shape(format!("input width: expected {WINDOW}, got {w}")));
        }
        Ok(())
    }

    /// Runs encoder, bottleneck and decoder, returning the last decoder
    /// activation at full resolution (before the output projection).
    fn decode_last(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(4);
        let mut cur = x.clone();
        for block in &self.enc {
            let features = block.forward(&cur, train)?;
            cur = features.max_pool2d(2)?;
            skips.push(features);
        }
        cur = self.bottleneck.forward(&cur, train)?;
        for (i, (up, dec)) in self.ups.iter().zip(&self.dec).enumerate() {
            let upsampled = up.forward(&cur)?;
            let dec_in = match self.cfg.kind {
                BackboneKind::Unet => Tensor::cat(&[&upsampled, &skips[3 - i]], 1)?,
                BackboneKind::Autoencoder => upsampled,
            };
            cur = dec.forward(&dec_in, train)?;
        }
        Ok(cur)
    }

    /// Backbone forward pass: (b, 13, 128, 128) -> (b, 64, 128, 128).
    pub fn forward_backbone(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let last = self.decode_last(x, train)?;
        Ok(self.out_conv.forward(&last)?.relu()?)
    }

    /// Full-resolution regression plane, (b, 1, 128, 128).
    pub fn forward_no2_plane_full(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.no2_conv1.forward(features)?.relu()?;
        Ok(self.no2_conv2.forward(&h)?)
    }

    /// Regression head: full plane computed then center-cropped to PxP, so
    /// the cropped output equals `center_crop` of the P=128 output exactly.
    pub fn forward_no2_head(&self, features: &Tensor, p: usize) -> Result<Tensor> {
        if p == 0 || p % 2 != 0 || p > WINDOW {
            return Err(Error::Config(format!(
                "prediction crop must be even and in [2, {WINDOW}], got {p}"
            )));
        }
        let full = self.forward_no2_plane_full(features)?;
        crop_plane(&full, p)
    }

    /// Segmentation head: full-resolution 11-class logits, no crop.
    pub fn forward_lc_head(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.lc_conv1.forward(features)?.relu()?;
        Ok(self.lc_conv2.forward(&h)?)
    }

    /// Convenience full forward pass through backbone and both heads.
    pub fn forward(&self, x: &Tensor, p: usize, train: bool) -> Result<ModelOutput> {
        let features = self.forward_backbone(x, train)?;
        let no2_plane = self.forward_no2_head(&features, p)?;
        let lc_logits = self.forward_lc_head(&features)?;
        Ok(ModelOutput {
            features,
            no2_plane,
            lc_logits,
        })
    }

    /// Training readout: regression predictions at the per-sample annotated
    /// pixels, plus full-resolution segmentation logits when requested.
    ///
    /// The plane value at an interior pixel depends only on a small
    /// neighborhood of the late activations, so the readout convolves
    /// unpadded slabs around each annotated pixel instead of materializing
    /// the full plane. Per-pixel arithmetic is identical to the head path;
    /// only the supervised pixels are computed.
    pub fn forward_pixel_readout(
        &self,
        x: &Tensor,
        gt_pixels: &[(usize, usize)],
        need_lc: bool,
        train: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let b = x.dims4()?.0;
        if gt_pixels.len() != b {
            return Err(Error::Shape(format!(
                "batch size mismatch: {b} inputs, {} gt pixels",
                gt_pixels.len()
            )));
        }
        let last = self.decode_last(x, train)?;
        if need_lc {
            let features = self.out_conv.forward(&last)?.relu()?;
            let lc = self.forward_lc_head(&features)?;
            let slab = gather_slabs(&features, gt_pixels, 2)?;
            let h = self.no2_conv1.forward_with_padding(&slab, 0)?.relu()?;
            let preds = self.no2_conv2.forward_with_padding(&h, 0)?.flatten_all()?;
            Ok((preds, Some(lc)))
        } else {
            let slab = gather_slabs(&last, gt_pixels, 3)?;
            let features = self.out_conv.forward_with_padding(&slab, 0)?.relu()?;
            let h = self.no2_conv1.forward_with_padding(&features, 0)?.relu()?;
            let preds = self.no2_conv2.forward_with_padding(&h, 0)?.flatten_all()?;
            Ok((preds, None))
        }
    }
}

/// Center-crops the spatial dims of a (b, c, 128, 128) tensor to PxP.
pub fn crop_plane(t: &Tensor, p: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if h != WINDOW || w != WINDOW {
        return Err(Error::Shape(format!(
            "crop expects {WINDOW}x{WINDOW} spatial dims, got {h}x{w}"
        )));
    }
    let start = crop_start(p);
    Ok(t.narrow(2, start, p)?.narrow(3, start, p)?)
}

/// Stacks window input planes into a (b, 13, 128, 128) model input tensor.
pub fn batch_inputs(windows: &[&crate::sampler::WindowSample]) -> Result<Tensor> {
    let b = windows.len();
    let mut flat = Vec::with_capacity(b * INPUT_CHANNELS * WINDOW * WINDOW);
    for w in windows {
        let inputs = w.inputs.as_standard_layout();
        flat.extend_from_slice(inputs.as_slice().expect("contiguous window"));
    }
    Ok(Tensor::from_vec(
        flat,
        (b, INPUT_CHANNELS, WINDOW, WINDOW),
        &Device::Cpu,
    )?)
}

/// Stacks per-sample square slabs of half-width `radius` centered on each
/// annotated pixel: (b, c, 128, 128) -> (b, c, 2r+1, 2r+1).
fn gather_slabs(t: &Tensor, gt_pixels: &[(usize, usize)], radius: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let size = 2 * radius + 1;
    let mut slabs = Vec::with_capacity(gt_pixels.len());
    for (k, &(gi, gj)) in gt_pixels.iter().enumerate() {
        if gi < radius || gj < radius || gi + radius >= h || gj + radius >= w {
            return Err(Error::Index(format!(
                "gt pixel ({gi}, {gj}) too close to the window border for readout"
            )));
        }
        slabs.push(
            t.narrow(0, k, 1)?
                .narrow(2, gi - radius, size)?
                .narrow(3, gj - radius, size)?,
        );
    }
    Ok(Tensor::cat(&slabs, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp};

    fn tiny_cfg(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            kind,
            encoder_channels: [4, 8, 16, 32],
            bottleneck_channels: 64,
            out_channels: FEATURE_CHANNELS,
        }
    }

    fn rand_input(b: usize) -> Tensor {
        Tensor::rand(-1f32, 1f32, (b, INPUT_CHANNELS, WINDOW, WINDOW), &Device::Cpu).unwrap()
    }

    #[test]
    fn backbones_emit_the_contract_shape() {
        for kind in [BackboneKind::Unet, BackboneKind::Autoencoder] {
            let model = Model::new(&tiny_cfg(kind), 1).unwrap();
            let x = rand_input(2);
            let features = model.forward_backbone(&x, false).unwrap();
            assert_eq!(features.dims(), &[2, FEATURE_CHANNELS, WINDOW, WINDOW], "{kind}");
            let finite = features
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
                .iter()
                .all(|v| v.is_finite());
            assert!(finite, "{kind} produced non-finite features");
        }
    }

    #[test]
    fn wrong_input_shapes_name_the_dim() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 1).unwrap();
        let bad_ch = Tensor::zeros((1, 12, WINDOW, WINDOW), DType::F32, &Device::Cpu).unwrap();
        let err = model.forward_backbone(&bad_ch, false).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
        let bad_h = Tensor::zeros((1, INPUT_CHANNELS, 64, WINDOW), DType::F32, &Device::Cpu).unwrap();
        let err = model.forward_backbone(&bad_h, false).unwrap_err().to_string();
        assert!(err.contains("height"), "{err}");
    }

    #[test]
    fn head_crop_commutes_exactly() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 3).unwrap();
        let features = model.forward_backbone(&rand_input(1), false).unwrap();
        let full = model.forward_no2_head(&features, 128).unwrap();
        assert_eq!(full.dims(), &[1, 1, WINDOW, WINDOW]);
        for p in [2usize, 8, 32, 128] {
            let cropped = model.forward_no2_head(&features, p).unwrap();
            assert_eq!(cropped.dims(), &[1, 1, p, p]);
            let reference = crop_plane(&full, p).unwrap();
            let a = cropped.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = reference.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "P={p} crop differs from cropping the full plane");
        }
        assert!(model.forward_no2_head(&features, 7).is_err());
        assert!(model.forward_no2_head(&features, 130).is_err());
    }

    #[test]
    fn lc_head_shape_and_probability_normalization() {
        let model = Model::new(&tiny_cfg(BackboneKind::Unet), 5).unwrap();
        let features = model.forward_backbone(&rand_input(1), false).unwrap();
        let logits = model.forward_lc_head(&features).unwrap();
        assert_eq!(logits.dims(), &[1, NUM_CLASSES, WINDOW, WINDOW]);
        let probs = candle_nn::ops::softmax(&logits, 1).unwrap();
        let sums = probs.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_features_give_constant_cropped_plane() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 7).unwrap();
        let features =
            Tensor::full(0.5f32, (1, FEATURE_CHANNELS, WINDOW, WINDOW), &Device::Cpu).unwrap();
        let plane = model.forward_no2_head(&features, 64).unwrap();
        let vals = plane.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let first = vals[0];
        assert!(vals.iter().all(|&v| v == first), "interior crop should be constant");
    }

    #[test]
    fn autoencoder_has_fewer_params_than_unet() {
        let ae = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 1).unwrap();
        let unet = Model::new(&tiny_cfg(BackboneKind::Unet), 1).unwrap();
        assert!(
            ae.num_params() < unet.num_params(),
            "AE {} vs UNet {}",
            ae.num_params(),
            unet.num_params()
        );
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 9).unwrap();
        let x = rand_input(1);
        let a = model
            .forward(&x, 8, false)
            .unwrap()
            .no2_plane
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = model
            .forward(&x, 8, false)
            .unwrap()
            .no2_plane
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let m1 = Model::new(&tiny_cfg(BackboneKind::Unet), 42).unwrap();
        let m2 = Model::new(&tiny_cfg(BackboneKind::Unet), 42).unwrap();
        let x = rand_input(1);
        let a = m1.forward_backbone(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m2.forward_backbone(&x, false).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_lc_output_channels_permutes_scores() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 11).unwrap();
        let features = model.forward_backbone(&rand_input(1), false).unwrap();
        let before = model.forward_lc_head(&features).unwrap();

        // rotate the output-channel parameters of the final 1x1 conv
        let perm: Vec<u32> = (0..NUM_CLASSES as u32).map(|i| (i + 1) % NUM_CLASSES as u32).collect();
        let idx = Tensor::from_vec(perm.clone(), perm.len(), &Device::Cpu).unwrap();
        let w = model.params().get("head.lc.conv2.weight").unwrap();
        let b = model.params().get("head.lc.conv2.bias").unwrap();
        w.set(&w.as_tensor().index_select(&idx, 0).unwrap()).unwrap();
        b.set(&b.as_tensor().index_select(&idx, 0).unwrap()).unwrap();

        let after = model.forward_lc_head(&features).unwrap();
        for class in 0..NUM_CLASSES {
            let want = before.i((0, perm[class] as usize, 0, 0)).unwrap().to_scalar::<f32>().unwrap();
            let got = after.i((0, class, 0, 0)).unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(got, want, "class {class}");
        }
    }

    #[test]
    fn train_readout_matches_head_path() {
        let model = Model::new(&tiny_cfg(BackboneKind::Autoencoder), 13).unwrap();
        let x = rand_input(3);
        let gts = [(60usize, 67usize), (64, 64), (33, 90)];
        // eval mode on both paths so batch-norm applies the same statistics
        let (preds, lc) = model.forward_pixel_readout(&x, &gts, false, false).unwrap();
        assert!(lc.is_none());
        let preds = preds.to_vec1::<f32>().unwrap();
        let features = model.forward_backbone(&x, false).unwrap();
        let plane = model.forward_no2_plane_full(&features).unwrap();
        for (k, &(gi, gj)) in gts.iter().enumerate() {
            let want = plane.i((k, 0, gi, gj)).unwrap().to_scalar::<f32>().unwrap();
            let diff = (preds[k] - want).abs();
            assert!(
                diff <= 1e-4 * want.abs().max(1.0),
                "sample {k}: readout {} vs plane {want}",
                preds[k]
            );
        }

        // with segmentation logits requested, the readout taps the shared
        // feature map instead
        let (preds2, lc2) = model.forward_pixel_readout(&x, &gts, true, false).unwrap();
        let lc2 = lc2.unwrap();
        assert_eq!(lc2.dims(), &[3, NUM_CLASSES, WINDOW, WINDOW]);
        let preds2 = preds2.to_vec1::<f32>().unwrap();
        for k in 0..3 {
            let diff = (preds2[k] - preds[k]).abs();
            assert!(diff <= 1e-4 * preds[k].abs().max(1.0));
        }
    }
}
