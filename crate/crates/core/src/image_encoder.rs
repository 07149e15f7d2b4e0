//! Region features from a convolutional backbone, pooled into `s_v` with a
//! trainable query.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPool, Pooled, Query};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, PoolGeom, Segments, Var};
use crate::params::{ParamId, ParamStore, SMALL_UNIFORM};
use crate::scalar::Scalar;

const BN_EPS: f64 = 1e-5;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Stride-2 3×3 convolution stages with ReLU.
    Tiny,
    /// Bottleneck residual network with frozen batch-norm statistics.
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output channels of each tiny stage.
    pub tiny_channels: Vec<usize>,
    pub resnet_stem: usize,
    pub resnet_widths: Vec<usize>,
    pub resnet_blocks: Vec<usize>,
    pub resnet_expansion: usize,
    /// Pretrained weights in safetensors format with torchvision names; empty for none.
    pub checkpoint: String,
    /// Exclude backbone parameters from training.
    pub freeze: bool,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            input_size: 64,
            tiny_channels: vec![32, 64, 128, 256],
            resnet_stem: 64,
            resnet_widths: vec![64, 128, 256, 512],
            resnet_blocks: vec![3, 4, 6, 3],
            resnet_expansion: 4,
            checkpoint: String::new(),
            freeze: false,
        }
    }

    /// 50-layer residual network on 224×224 input.
    pub fn resnet50() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet,
            input_size: 224,
            ..Self::tiny()
        }
    }

    /// `(G, D)`: grid cells and feature size of the final map.
    pub fn grid(&self) -> (usize, usize) {
        match self.kind {
            BackboneKind::Tiny => {
                let mut s = self.input_size;
                for _ in &self.tiny_channels {
                    s = (s + 2 - 3) / 2 + 1;
                }
                (s * s, *self.tiny_channels.last().unwrap_or(&3))
            }
            BackboneKind::Resnet => {
                let mut s = (self.input_size + 6 - 7) / 2 + 1;
                s = (s + 2 - 3) / 2 + 1;
                for _ in 1..self.resnet_widths.len() {
                    s = (s + 2 - 3) / 2 + 1;
                }
                (
                    s * s,
                    self.resnet_widths.last().copied().unwrap_or(0) * self.resnet_expansion,
                )
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.input_size < 8 {
            return bad("input_size below 8");
        }
        match self.kind {
            BackboneKind::Tiny if self.tiny_channels.is_empty() => bad("tiny_channels is empty"),
            BackboneKind::Resnet
                if self.resnet_widths.is_empty()
                    || self.resnet_widths.len() != self.resnet_blocks.len() =>
            {
                bad("resnet_widths and resnet_blocks must be non-empty and of equal length")
            }
            BackboneKind::Resnet
                if self.resnet_blocks.contains(&0) || self.resnet_expansion == 0 =>
            {
                bad("resnet blocks and expansion must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Frozen-statistics batch norm: trainable scale and shift, running
/// mean and variance stored as non-trainable buffers.
#[derive(Debug, Clone)]
struct BatchNorm {
    weight: ParamId,
    bias: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            weight: store.add(format!("{name}.weight"), Array2::ones((1, c)), true),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, c)), true),
            mean: store.add(format!("{name}.running_mean"), Array2::zeros((1, c)), false),
            var: store.add(format!("{name}.running_var"), Array2::ones((1, c)), false),
        }
    }

    /// `x` is `B × (H·W·C)`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, c: usize) -> Var {
        let (b, len) = g.shape(x);
        let inv = store
            .value(self.var)
            .mapv(|v| T::one() / (v + T::of(BN_EPS)).sqrt());
        let inv = g.constant(inv);
        let mean = g.constant(store.value(self.mean).clone());
        let gamma = g.param(store, self.weight);
        let beta = g.param(store, self.bias);
        let scale = g.mul(gamma, inv);
        let ms = g.mul(mean, scale);
        let shift = g.sub(beta, ms);
        let rows = g.reshape(x, b * len / c, c);
        let y = g.mul_row(rows, scale);
        let y = g.add_row(y, shift);
        g.reshape(y, b, len)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: Option<ParamId>,
    kernel: usize,
    stride: usize,
    pad: usize,
    in_c: usize,
    out_c: usize,
}

impl ConvLayer {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        (in_c, out_c): (usize, usize),
        (kernel, stride, pad): (usize, usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.kaiming(format!("{name}.weight"), kernel * kernel * in_c, out_c, rng);
        let b = bias.then(|| store.zeros(format!("{name}.bias"), 1, out_c));
        ConvLayer {
            w,
            b,
            kernel,
            stride,
            pad,
            in_c,
            out_c,
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        side: usize,
    ) -> (Var, usize) {
        let geom = ConvGeom::new(
            side,
            side,
            self.in_c,
            self.out_c,
            self.kernel,
            self.stride,
            self.pad,
        );
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        (g.conv2d(x, w, b, geom), geom.out_h)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvLayer,
    bn1: BatchNorm,
    conv2: ConvLayer,
    bn2: BatchNorm,
    conv3: ConvLayer,
    bn3: BatchNorm,
    downsample: Option<(ConvLayer, BatchNorm)>,
}

impl Bottleneck {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        side: usize,
    ) -> (Var, usize) {
        let (h, s1) = self.conv1.forward(g, store, x, side);
        let h = self.bn1.forward(g, store, h, self.conv1.out_c);
        let h = g.relu(h);
        let (h, s2) = self.conv2.forward(g, store, h, s1);
        let h = self.bn2.forward(g, store, h, self.conv2.out_c);
        let h = g.relu(h);
        let (h, s3) = self.conv3.forward(g, store, h, s2);
        let h = self.bn3.forward(g, store, h, self.conv3.out_c);
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let (d, _) = conv.forward(g, store, x, side);
                bn.forward(g, store, d, conv.out_c)
            }
            None => x,
        };
        let y = g.add(h, skip);
        (g.relu(y), s3)
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Tiny(Vec<ConvLayer>),
    Resnet {
        stem: ConvLayer,
        bn: BatchNorm,
        blocks: Vec<Bottleneck>,
    },
}

/// Image → `G × D` region grid, for a batch of HWC rows.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Layers,
}

pub const BACKBONE_PREFIX: &str = "image.backbone.";

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let p = BACKBONE_PREFIX;
        let layers = match config.kind {
            BackboneKind::Tiny => {
                let mut in_c = 3;
                let mut convs = Vec::new();
                for (i, &c) in config.tiny_channels.iter().enumerate() {
                    convs.push(ConvLayer::new(
                        store,
                        &format!("{p}conv{}", i + 1),
                        (in_c, c),
                        (3, 2, 1),
                        true,
                        rng,
                    ));
                    in_c = c;
                }
                Layers::Tiny(convs)
            }
            BackboneKind::Resnet => {
                let stem_c = config.resnet_stem;
                let stem = ConvLayer::new(
                    store,
                    &format!("{p}conv1"),
                    (3, stem_c),
                    (7, 2, 3),
                    false,
                    rng,
                );
                let bn = BatchNorm::new(store, &format!("{p}bn1"), stem_c);
                let mut blocks = Vec::new();
                let mut in_c = stem_c;
                for (li, (&width, &count)) in config
                    .resnet_widths
                    .iter()
                    .zip(&config.resnet_blocks)
                    .enumerate()
                {
                    let out_c = width * config.resnet_expansion;
                    for bi in 0..count {
                        let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                        let n = format!("{p}layer{}.{bi}", li + 1);
                        let downsample = (stride != 1 || in_c != out_c).then(|| {
                            (
                                ConvLayer::new(
                                    store,
                                    &format!("{n}.downsample.0"),
                                    (in_c, out_c),
                                    (1, stride, 0),
                                    false,
                                    rng,
                                ),
                                BatchNorm::new(store, &format!("{n}.downsample.1"), out_c),
                            )
                        });
                        blocks.push(Bottleneck {
                            conv1: ConvLayer::new(
                                store,
                                &format!("{n}.conv1"),
                                (in_c, width),
                                (1, 1, 0),
                                false,
                                rng,
                            ),
                            bn1: BatchNorm::new(store, &format!("{n}.bn1"), width),
                            conv2: ConvLayer::new(
                                store,
                                &format!("{n}.conv2"),
                                (width, width),
                                (3, stride, 1),
                                false,
                                rng,
                            ),
                            bn2: BatchNorm::new(store, &format!("{n}.bn2"), width),
                            conv3: ConvLayer::new(
                                store,
                                &format!("{n}.conv3"),
                                (width, out_c),
                                (1, 1, 0),
                                false,
                                rng,
                            ),
                            bn3: BatchNorm::new(store, &format!("{n}.bn3"), out_c),
                            downsample,
                        });
                        in_c = out_c;
                    }
                }
                Layers::Resnet { stem, bn, blocks }
            }
        };
        let backbone = Backbone {
            config: config.clone(),
            layers,
        };
        if !config.checkpoint.is_empty() {
            load_torchvision_weights(store, Path::new(&config.checkpoint))?;
        }
        if config.freeze {
            let ids: Vec<ParamId> = store.ids_with_prefix(BACKBONE_PREFIX).collect();
            for id in ids {
                store.set_trainable(id, false);
            }
        }
        Ok(backbone)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    /// `B × (S·S·3)` pixels in `[0, 1]` → `B × (G·D)` features.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Var> {
        let side = self.config.input_size;
        let (b, len) = g.shape(images);
        if len != side * side * 3 {
            return Err(Error::shape(
                "backbone input",
                format!("{side}x{side}x3 = {}", side * side * 3),
                format!("{len} values per image"),
            ));
        }
        match &self.layers {
            Layers::Tiny(convs) => {
                let mut x = g.add_scalar(images, T::of(-0.5));
                let mut s = side;
                for conv in convs {
                    let (y, ns) = conv.forward(g, store, x, s);
                    x = g.relu(y);
                    s = ns;
                }
                Ok(x)
            }
            Layers::Resnet { stem, bn, blocks } => {
                let rows = g.reshape(images, b * side * side, 3);
                let mean = g.constant(Array2::from_shape_fn((1, 3), |(_, c)| {
                    T::of(-IMAGENET_MEAN[c])
                }));
                let istd = g.constant(Array2::from_shape_fn((1, 3), |(_, c)| {
                    T::of(1.0 / IMAGENET_STD[c])
                }));
                let x = g.add_row(rows, mean);
                let x = g.mul_row(x, istd);
                let x = g.reshape(x, b, len);
                let (x, s) = stem.forward(g, store, x, side);
                let x = bn.forward(g, store, x, stem.out_c);
                let x = g.relu(x);
                let pool = PoolGeom::new(s, s, stem.out_c, 3, 2, 1);
                let mut x = g.max_pool2d(x, pool);
                let mut s = pool.out_h;
                for block in blocks {
                    let (y, ns) = block.forward(g, store, x, s);
                    x = y;
                    s = ns;
                }
                Ok(x)
            }
        }
    }
}

/// Copy torchvision-named tensors (`conv1.weight`, `layer1.0.bn1.running_mean`,
/// ...) into the backbone parameters. Kernels are converted from
/// `out × in × kh × kw` to `(kh·kw·in) × out`; classifier tensors are ignored.
pub fn load_torchvision_weights<T: Scalar>(
    store: &mut ParamStore<T>,
    path: &Path,
) -> Result<usize> {
    use safetensors::{Dtype, SafeTensors};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let targets: Vec<(ParamId, String)> = store
        .ids_with_prefix(BACKBONE_PREFIX)
        .map(|id| (id, store.get(id).name[BACKBONE_PREFIX.len()..].to_string()))
        .collect();
    let mut loaded = 0;
    for (id, name) in targets {
        let view = tensors
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "{name}: unsupported dtype {other:?}"
                )))
            }
        };
        let shape = view.shape().to_vec();
        let target = store.value(id).dim();
        let value = match shape.as_slice() {
            [o, i, kh, kw] => {
                if target != (kh * kw * i, *o) {
                    return Err(Error::shape(
                        &name,
                        format!("{target:?}"),
                        format!("{shape:?}"),
                    ));
                }
                let (i, kh, kw) = (*i, *kh, *kw);
                Array2::from_shape_fn(target, |(r, c)| {
                    let (ky, rem) = (r / (kw * i), r % (kw * i));
                    let (kx, ch) = (rem / i, rem % i);
                    T::of(values[((c * i + ch) * kh + ky) * kw + kx])
                })
            }
            [n] => {
                if target != (1, *n) {
                    return Err(Error::shape(
                        &name,
                        format!("{target:?}"),
                        format!("{shape:?}"),
                    ));
                }
                Array2::from_shape_fn(target, |(_, c)| T::of(values[c]))
            }
            _ => {
                return Err(Error::shape(
                    &name,
                    format!("{target:?}"),
                    format!("{shape:?}"),
                ))
            }
        };
        *store.value_mut(id) = value;
        loaded += 1;
    }
    Ok(loaded)
}

/// Grid of region vectors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures<T> {
    pub id: String,
    /// `G × D`
    pub grid: Array2<T>,
}

/// Inference-mode region extraction for a single HWC image.
pub fn extract_regions<T: Scalar>(
    id: &str,
    image: &crate::corpus::ImageTensor,
    backbone: &Backbone,
    store: &ParamStore<T>,
) -> Result<RegionFeatures<T>> {
    let side = backbone.config.input_size;
    if image.height != side || image.width != side {
        return Err(Error::shape(
            "image",
            format!("{side}x{side}x3"),
            format!("{}x{}x3", image.height, image.width),
        ));
    }
    let mut g = Graph::inference();
    let x = g.constant(Array2::from_shape_fn((1, image.len()), |(_, i)| {
        T::of(image.data[i] as f64)
    }));
    let y = backbone.forward(&mut g, store, x)?;
    let (gcells, d) = backbone.grid();
    let grid = g
        .value(y)
        .clone()
        .into_shape_with_order((gcells, d))
        .expect("grid shape");
    Ok(RegionFeatures {
        id: id.to_string(),
        grid,
    })
}

/// Backbone, trainable query `q_v` and the region pooling site.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub backbone: Backbone,
    pub query: ParamId,
    pub pool: AttentionPool,
}

/// Output of [`ImageEncoder::forward`] for a batch.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// `(B·G) × D` region rows, image-major.
    pub regions: Var,
    pub segments: Segments,
    /// `B × D`
    pub s_v: Var,
    /// `(B·G) × 1` pooling weights.
    pub weights: Var,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        attn_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, config, rng)?;
        let (_, d) = backbone.grid();
        let query = store.uniform("image.query", 1, d, SMALL_UNIFORM, rng);
        let pool = AttentionPool::new(store, "image.pool", d, d, attn_dim.unwrap_or(d), rng);
        Ok(ImageEncoder {
            backbone,
            query,
            pool,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.backbone.grid().1
    }

    /// Split backbone output into per-image region rows.
    pub fn regions<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<(Var, Segments)> {
        let feats = self.backbone.forward(g, store, images)?;
        let b = g.shape(feats).0;
        let (cells, d) = self.backbone.grid();
        let rows = g.reshape(feats, b * cells, d);
        Ok((rows, Segments::uniform(b, cells)?))
    }

    /// Pool precomputed region rows with `q_v`.
    pub fn pool_regions<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        regions: Var,
        segments: &Segments,
    ) -> Result<Pooled> {
        let q = g.param(store, self.query);
        self.pool
            .forward(g, store, Query::Shared(q), regions, segments)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<ImageEncoding> {
        let (regions, segments) = self.regions(g, store, images)?;
        let pooled = self.pool_regions(g, store, regions, &segments)?;
        Ok(ImageEncoding {
            regions,
            segments,
            s_v: pooled.pooled,
            weights: pooled.weights,
        })
    }
}

/// Pool a single region grid; returns `(s_v, weights)`.
pub fn encode_image<T: Scalar>(
    regions: &RegionFeatures<T>,
    encoder: &ImageEncoder,
    store: &ParamStore<T>,
) -> Result<(ndarray::Array1<T>, ndarray::Array1<T>)> {
    let (cells, d) = regions.grid.dim();
    if d != encoder.output_dim() {
        return Err(Error::shape("region features", encoder.output_dim(), d));
    }
    let mut g = Graph::inference();
    let r = g.constant(regions.grid.clone());
    let seg = Segments::uniform(1, cells)?;
    let out = encoder.pool_regions(&mut g, store, r, &seg)?;
    Ok((
        g.value(out.pooled).row(0).to_owned(),
        g.value(out.weights).column(0).to_owned(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
        ImageTensor {
            height: side,
            width: side,
            data: (0..side * side * 3)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        }
    }

    #[test]
    fn tiny_grid_is_16_by_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::tiny();
        assert_eq!(cfg.grid(), (16, 256));
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        let img = random_image(64, &mut rng);
        let r = extract_regions("x", &img, &bb, &store).unwrap();
        assert_eq!(r.grid.dim(), (16, 256));
        let again = extract_regions("x", &img, &bb, &store).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn wrong_image_size_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &BackboneConfig::tiny(), &mut rng).unwrap();
        let err = extract_regions("x", &random_image(32, &mut rng), &bb, &store).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64x64x3") && msg.contains("32x32x3"), "{msg}");
    }

    #[test]
    fn resnet50_grid_is_49_by_2048() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::resnet50();
        assert_eq!(cfg.grid(), (49, 2048));
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        // 25.5M weights plus the frozen statistics
        let trainable: usize = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum();
        assert_eq!(trainable, 23_508_032);
        let r = extract_regions("x", &random_image(224, &mut rng), &bb, &store).unwrap();
        assert_eq!(r.grid.dim(), (49, 2048));
        assert!(r.grid.iter().all(|v| v.is_finite()));
    }

    fn encoder(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> ImageEncoder {
        let cfg = BackboneConfig {
            input_size: 16,
            tiny_channels: vec![4, 6],
            ..BackboneConfig::tiny()
        };
        ImageEncoder::new(store, &cfg, None, rng).unwrap()
    }

    #[test]
    fn constant_grid_pools_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng);
        let c: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let grid = Array2::from_shape_fn((16, 6), |(_, j)| c[j]);
        let (s, w) = encode_image(
            &RegionFeatures {
                id: "a".into(),
                grid,
            },
            &enc,
            &store,
        )
        .unwrap();
        for j in 0..6 {
            assert!((s[j] - c[j]).abs() < 1e-12);
        }
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_attention_gives_grid_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng);
        for id in [enc.pool.w, enc.pool.u, enc.pool.v] {
            store.value_mut(id).fill(0.0);
        }
        let grid = crate::gradcheck::random_matrix(16, 6, 1.0, &mut rng);
        let mean = grid.mean_axis(ndarray::Axis(0)).unwrap();
        let (s, _) = encode_image(
            &RegionFeatures {
                id: "a".into(),
                grid,
            },
            &enc,
            &store,
        )
        .unwrap();
        for j in 0..6 {
            assert!((s[j] - mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_backbone_query_and_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng);
        let imgs = crate::gradcheck::random_matrix(2, 16 * 16 * 3, 1.0, &mut rng).mapv(|v| v.abs());
        let mut g = Graph::new();
        let x = g.constant(imgs);
        let out = enc.forward(&mut g, &store, x).unwrap();
        let proj = g.constant(crate::gradcheck::random_matrix(2, 6, 1.0, &mut rng));
        let m = g.mul(out.s_v, proj);
        let loss = g.sum_all(m);
        let grads = g.backward(loss);
        let by_id: std::collections::HashMap<_, _> = g.param_grads(&grads).into_iter().collect();
        let norm = |id: ParamId| {
            by_id
                .get(&id)
                .map(|a| a.iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0)
        };
        assert!(norm(enc.query) > 0.0);
        assert!(norm(enc.pool.u) > 0.0 && norm(enc.pool.w) > 0.0 && norm(enc.pool.v) > 0.0);
        for id in store.ids_with_prefix(BACKBONE_PREFIX) {
            assert!(norm(id) > 0.0, "{}", store.get(id).name);
        }
    }

    #[test]
    fn frozen_backbone_has_no_trainable_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig {
            freeze: true,
            ..BackboneConfig::tiny()
        };
        Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        assert!(store.iter().all(|(_, p)| !p.trainable));
    }
}
