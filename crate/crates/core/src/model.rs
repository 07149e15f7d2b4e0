//! The full cross-modal network: both encoders, the latent (or plain) heads
//! on each side, reconstruction heads and the composed training objective.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPool, Query};
use crate::corpus::{Dataset, PairBatch, TextBlock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::image_encoder::{BackboneConfig, ImageEncoder};
use crate::latent::{reparam, EmbedHead, GaussianHead, GaussianVars, NoiseSource};
use crate::nn::{Init, Linear, TanhMlp};
use crate::objectives::{
    consistency_loss, kl_loss, retrieval_loss_graph, LossBreakdown, Mining, ReconHeads,
};
use crate::params::{ParamStore, SMALL_UNIFORM};
use crate::recipe::{RecipeDims, RecipeEncoder};
use crate::scalar::Scalar;

/// Which sides carry latent variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Latent variables on both sides plus the prior consistency term.
    Both,
    Image,
    Recipe,
    /// Plain two-layer tanh maps on both sides.
    None,
}

impl Variant {
    pub fn image_latent(self) -> bool {
        matches!(self, Variant::Both | Variant::Image)
    }

    pub fn recipe_latent(self) -> bool {
        matches!(self, Variant::Both | Variant::Recipe)
    }

    pub fn consistency(self) -> bool {
        self == Variant::Both
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Both => "both",
            Variant::Image => "image",
            Variant::Recipe => "recipe",
            Variant::None => "none",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Variant::Both),
            "image" => Ok(Variant::Image),
            "recipe" => Ok(Variant::Recipe),
            "none" => Ok(Variant::None),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Recipe,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "recipe" => Ok(Modality::Recipe),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Include the cross-modal reconstruction heads and loss.
    pub reconstruction: bool,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub word_dim: usize,
    /// Hidden size of every recipe recurrent layer; `s_r` has six times this.
    pub recipe_hidden: usize,
    /// Attention scoring width; 0 uses the context width.
    pub attn_dim: usize,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    /// ResNet-50 regions, 300-wide recipe states, 1024-wide latents and embeddings.
    pub fn reference() -> Self {
        ModelConfig {
            variant: Variant::Both,
            reconstruction: true,
            embed_dim: 1024,
            latent_dim: 1024,
            word_dim: 300,
            recipe_hidden: 300,
            attn_dim: 0,
            backbone: BackboneConfig::resnet50(),
        }
    }

    /// Small widths and the tiny backbone, sized for CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            variant: Variant::Both,
            reconstruction: true,
            embed_dim: 64,
            latent_dim: 64,
            word_dim: 32,
            recipe_hidden: 32,
            attn_dim: 32,
            backbone: BackboneConfig {
                tiny_channels: vec![16, 32, 64, 64],
                ..BackboneConfig::tiny()
            },
        }
    }

    fn attn(&self) -> Option<usize> {
        (self.attn_dim > 0).then_some(self.attn_dim)
    }

    pub fn recipe_dims(&self, vocab: usize) -> RecipeDims {
        RecipeDims {
            vocab,
            word_dim: self.word_dim,
            hidden: self.recipe_hidden,
            attn_dim: self.attn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
            ("word_dim", self.word_dim),
            ("recipe_hidden", self.recipe_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{k} must be positive")));
            }
        }
        self.backbone.validate()
    }
}

/// Image-side latent: prior from `s_v`, posterior from regions pooled with a
/// query projected from `s_r`.
#[derive(Debug, Clone)]
pub struct ImageLatent {
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
    pub embed: EmbedHead,
    /// `s_r → ` region query.
    pub query: Linear,
    pub pool: AttentionPool,
}

/// Recipe-side latent: prior from `s_r`, posterior from `s_r*`, the recipe
/// pooled with a query projected from `s_v`.
#[derive(Debug, Clone)]
pub struct RecipeLatent {
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
    pub embed: EmbedHead,
    /// `s_v → ` sentence query.
    pub query: Linear,
}

#[derive(Debug, Clone)]
pub enum Head<L> {
    Latent(L),
    Plain(TanhMlp),
}

impl<L> Head<L> {
    pub fn latent(&self) -> Option<&L> {
        match self {
            Head::Latent(l) => Some(l),
            Head::Plain(_) => None,
        }
    }
}

/// Which image-side path a training step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Image latent pinned to its prior mean; no image posterior.
    RecipePhase,
    JointPhase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub mining: Mining,
}

/// Graph nodes of one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainForward {
    pub s_v: Var,
    pub s_r: Var,
    pub e_v: Var,
    pub e_r: Var,
    pub image_prior: Option<GaussianVars>,
    pub image_posterior: Option<GaussianVars>,
    pub recipe_prior: Option<GaussianVars>,
    pub recipe_posterior: Option<GaussianVars>,
    pub l_ret: Var,
    pub l_kl: Var,
    pub l_cos: Var,
    pub l_rec: Var,
    pub total: Var,
}

impl TrainForward {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let v = |x: Var| g.value(x)[[0, 0]].f64();
        LossBreakdown {
            l_ret: v(self.l_ret),
            l_kl: v(self.l_kl),
            l_cos: v(self.l_cos),
            l_rec: v(self.l_rec),
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            total: v(self.total),
        }
    }
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mcen {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub recipe: RecipeEncoder,
    pub image_head: Head<ImageLatent>,
    pub recipe_head: Head<RecipeLatent>,
    pub recon: Option<ReconHeads>,
}

impl Mcen {
    pub fn new<T: Scalar>(
        config: &ModelConfig,
        vocab: usize,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, &config.backbone, config.attn(), &mut rng)?;
        let recipe = RecipeEncoder::new(&mut store, config.recipe_dims(vocab), &mut rng);
        let d_v = image.output_dim();
        let d_r = recipe.output_dim();
        let d_s = recipe.dims.sentence_dim();
        let (dz, de) = (config.latent_dim, config.embed_dim);
        let store_ref = &mut store;
        let image_head = if config.variant.image_latent() {
            Head::Latent(ImageLatent {
                prior: GaussianHead::new(store_ref, "latent.image.prior", d_v, dz, &mut rng),
                posterior: GaussianHead::new(
                    store_ref,
                    "latent.image.posterior",
                    d_v,
                    dz,
                    &mut rng,
                ),
                embed: EmbedHead::new(store_ref, "latent.image.embed", dz, de, &mut rng),
                query: Linear::new(
                    store_ref,
                    "latent.image.query",
                    d_r,
                    d_v,
                    Init::Xavier,
                    &mut rng,
                ),
                pool: AttentionPool::new(
                    store_ref,
                    "latent.image.pool",
                    d_v,
                    d_v,
                    config.attn().unwrap_or(d_v),
                    &mut rng,
                ),
            })
        } else {
            Head::Plain(TanhMlp::new(
                store_ref,
                "plain.image",
                d_v,
                dz,
                de,
                &mut rng,
            ))
        };
        let recipe_head = if config.variant.recipe_latent() {
            Head::Latent(RecipeLatent {
                prior: GaussianHead::new(store_ref, "latent.recipe.prior", d_r, dz, &mut rng),
                posterior: GaussianHead::new(
                    store_ref,
                    "latent.recipe.posterior",
                    d_r,
                    dz,
                    &mut rng,
                ),
                embed: EmbedHead::new(store_ref, "latent.recipe.embed", dz, de, &mut rng),
                query: Linear::new(
                    store_ref,
                    "latent.recipe.query",
                    d_v,
                    d_s,
                    Init::Xavier,
                    &mut rng,
                ),
            })
        } else {
            Head::Plain(TanhMlp::new(
                store_ref,
                "plain.recipe",
                d_r,
                dz,
                de,
                &mut rng,
            ))
        };
        let recon = config
            .reconstruction
            .then(|| ReconHeads::new(store_ref, de, dz, d_r, d_v, &mut rng));
        let model = Mcen {
            config: config.clone(),
            image,
            recipe,
            image_head,
            recipe_head,
            recon,
        };
        model.start_posterior_at_prior(&mut store, &mut rng);
        Ok((model, store))
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn image_size(&self) -> usize {
        self.config.backbone.input_size
    }

    fn check_images(&self, images: &Array2<impl Scalar>) -> Result<()> {
        let s = self.image_size();
        let expect = s * s * 3;
        if images.ncols() != expect {
            return Err(Error::shape(
                "image batch",
                format!("{s}x{s}x3"),
                format!("{} values", images.ncols()),
            ));
        }
        Ok(())
    }

    /// One training forward pass; draws `B × d_z` noise per sampled latent,
    /// image side first.
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &PairBatch<T>,
        noise: &mut dyn NoiseSource<T>,
        phase: Phase,
        w: &LossWeights,
    ) -> Result<TrainForward> {
        self.check_images(&batch.images)?;
        let b = batch.len();
        let dz = self.config.latent_dim;
        let pixels = g.constant(batch.images.clone());
        let img = self.image.forward(g, store, pixels)?;
        let s_v = img.s_v;
        let (states, _) =
            self.recipe
                .sentence_states(g, store, &batch.ingredients, &batch.instructions)?;
        let (s_r, _) = self.recipe.pool_sentences(g, store, &states, None)?;

        let (e_v, image_prior, image_posterior) = match &self.image_head {
            Head::Plain(mlp) => (mlp.forward(g, store, s_v), None, None),
            Head::Latent(l) => {
                let prior = l.prior.forward(g, store, s_v)?;
                match phase {
                    Phase::RecipePhase => (l.embed.forward(g, store, prior.mu), Some(prior), None),
                    Phase::JointPhase => {
                        let q = l.query.forward(g, store, s_r);
                        let s_star = l.pool.forward(
                            g,
                            store,
                            Query::PerSegment(q),
                            img.regions,
                            &img.segments,
                        )?;
                        let post = l.posterior.forward(g, store, s_star.pooled)?;
                        let eps = g.constant(noise.draw(b, dz));
                        let z = reparam(g, post, eps);
                        (l.embed.forward(g, store, z), Some(prior), Some(post))
                    }
                }
            }
        };

        let (e_r, recipe_prior, recipe_posterior) = match &self.recipe_head {
            Head::Plain(mlp) => (mlp.forward(g, store, s_r), None, None),
            Head::Latent(l) => {
                let prior = l.prior.forward(g, store, s_r)?;
                let q = l.query.forward(g, store, s_v);
                let (s_star, _) = self.recipe.pool_sentences(g, store, &states, Some(q))?;
                let post = l.posterior.forward(g, store, s_star)?;
                let eps = g.constant(noise.draw(b, dz));
                let z = reparam(g, post, eps);
                (l.embed.forward(g, store, z), Some(prior), Some(post))
            }
        };

        let l_ret = retrieval_loss_graph(g, e_v, e_r, T::of(w.margin), w.mining)?;
        let pair = |q: Option<GaussianVars>, p: Option<GaussianVars>| q.zip(p);
        let l_kl = kl_loss(
            g,
            pair(image_posterior, image_prior),
            pair(recipe_posterior, recipe_prior),
        );
        let l_cos = match (self.variant().consistency(), image_prior, recipe_prior) {
            (true, Some(pv), Some(pr)) => consistency_loss(g, pv, pr),
            _ => g.scalar(T::zero()),
        };
        let l_rec = match &self.recon {
            Some(r) => r.loss(g, store, e_v, e_r, s_v, s_r),
            None => g.scalar(T::zero()),
        };
        let a = g.scale(l_kl, T::of(w.alpha));
        let c = g.scale(l_cos, T::of(w.beta));
        let r = g.scale(l_rec, T::of(w.gamma));
        let total = g.add(l_ret, a);
        let total = g.add(total, c);
        let total = g.add(total, r);
        Ok(TrainForward {
            s_v,
            s_r,
            e_v,
            e_r,
            image_prior,
            image_posterior,
            recipe_prior,
            recipe_posterior,
            l_ret,
            l_kl,
            l_cos,
            l_rec,
            total,
        })
    }

    fn image_output<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s_v: Var,
    ) -> Result<Var> {
        Ok(match &self.image_head {
            Head::Plain(mlp) => mlp.forward(g, store, s_v),
            Head::Latent(l) => {
                let prior = l.prior.forward(g, store, s_v)?;
                l.embed.forward(g, store, prior.mu)
            }
        })
    }

    fn recipe_output<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s_r: Var,
    ) -> Result<Var> {
        Ok(match &self.recipe_head {
            Head::Plain(mlp) => mlp.forward(g, store, s_r),
            Head::Latent(l) => {
                let prior = l.prior.forward(g, store, s_r)?;
                l.embed.forward(g, store, prior.mu)
            }
        })
    }

    /// Inference embeddings of a batch of `B × (S·S·3)` images; latents sit
    /// at their prior means.
    pub fn embed_images<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.check_images(images)?;
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let enc = self.image.forward(&mut g, store, x)?;
        let e = self.image_output(&mut g, store, enc.s_v)?;
        Ok(g.value(e).clone())
    }

    /// Inference embeddings of a batch of recipes.
    pub fn embed_recipes<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ingredients: &TextBlock,
        instructions: &TextBlock,
    ) -> Result<Array2<T>> {
        let mut g = Graph::inference();
        let enc = self
            .recipe
            .encode_recipe(&mut g, store, ingredients, instructions, None)?;
        let e = self.recipe_output(&mut g, store, enc.s_r)?;
        Ok(g.value(e).clone())
    }

    /// Region pooling weights, `B × G`.
    pub fn image_attention<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.check_images(images)?;
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let enc = self.image.forward(&mut g, store, x)?;
        let (cells, _) = self.image.backbone.grid();
        let w = g.value(enc.weights).clone();
        Ok(w.into_shape_with_order((images.nrows(), cells))
            .expect("one weight per cell"))
    }

    /// Ingredient-branch pooling weights of each recipe, in ingredient order.
    pub fn ingredient_attention<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        ingredients: &TextBlock,
        instructions: &TextBlock,
    ) -> Result<Vec<Array1<T>>> {
        let mut g = Graph::inference();
        let enc = self
            .recipe
            .encode_recipe(&mut g, store, ingredients, instructions, None)?;
        let weights = g.value(enc.parts[2].weights).column(0).to_owned();
        Ok(split_segments(&weights, &enc.states.segments[2]))
    }

    /// Overwrite the posterior path with the prior path: posterior heads get
    /// the prior heads' values, and the cross-modal queries become constants
    /// equal to the single-modality queries. With zero noise the training
    /// embeddings then equal the inference embeddings.
    pub fn tie_posterior_to_prior<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.copy_prior_into_posterior(store);
        if let Head::Latent(l) = &self.image_head {
            store.value_mut(l.query.w).fill(T::zero());
        }
        if let Head::Latent(l) = &self.recipe_head {
            let q = store.value(self.recipe.sentence_queries[0]).clone();
            for id in &self.recipe.sentence_queries[1..] {
                *store.value_mut(*id) = q.clone();
            }
            store.value_mut(l.query.w).fill(T::zero());
        }
    }

    /// Initialization: posterior heads start as copies of the prior heads and
    /// the cross-modal queries start at the single-modality queries plus a
    /// small random dependence on the other modality, so the KL term starts
    /// near zero even with small scales.
    fn start_posterior_at_prior<T: Scalar, R: rand::Rng>(
        &self,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) {
        self.copy_prior_into_posterior(store);
        for query in [
            self.image_head.latent().map(|l| &l.query),
            self.recipe_head.latent().map(|l| &l.query),
        ]
        .into_iter()
        .flatten()
        {
            store
                .value_mut(query.w)
                .mapv_inplace(|_| T::of(rng.gen_range(-SMALL_UNIFORM..=SMALL_UNIFORM)));
        }
    }

    /// Copy prior heads onto posterior heads and set each cross-modal query
    /// bias to the matching single-modality query.
    fn copy_prior_into_posterior<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let copy = |store: &mut ParamStore<T>, from: &Linear, to: &Linear| {
            *store.value_mut(to.w) = store.value(from.w).clone();
            *store.value_mut(to.b) = store.value(from.b).clone();
        };
        if let Head::Latent(l) = &self.image_head {
            copy(store, &l.prior.mu, &l.posterior.mu);
            copy(store, &l.prior.sigma, &l.posterior.sigma);
            *store.value_mut(l.query.b) = store.value(self.image.query).clone();
            for (from, to) in [
                (self.image.pool.w, l.pool.w),
                (self.image.pool.u, l.pool.u),
                (self.image.pool.v, l.pool.v),
            ] {
                *store.value_mut(to) = store.value(from).clone();
            }
        }
        if let Head::Latent(l) = &self.recipe_head {
            copy(store, &l.prior.mu, &l.posterior.mu);
            copy(store, &l.prior.sigma, &l.posterior.sigma);
            *store.value_mut(l.query.b) = store.value(self.recipe.sentence_queries[0]).clone();
        }
    }
}

pub(crate) fn split_segments<T: Scalar>(values: &Array1<T>, seg: &Segments) -> Vec<Array1<T>> {
    (0..seg.len())
        .map(|i| values.slice(ndarray::s![seg.range(i)]).to_owned())
        .collect()
}

/// Inference embeddings of a whole dataset: one recipe row per pair and one
/// row per image of every pair.
#[derive(Debug, Clone)]
pub struct DatasetEmbeddings<T> {
    pub recipes: Array2<T>,
    /// `images[i]` holds the embeddings of every image of pair `i`.
    pub images: Vec<Array2<T>>,
}

pub fn embed_dataset<T: Scalar>(
    model: &Mcen,
    store: &ParamStore<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<DatasetEmbeddings<T>> {
    let bs = batch_size.max(1);
    let n = data.len();
    let de = model.embed_dim();
    let mut recipes = Array2::zeros((n, de));
    for start in (0..n).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        let ing: Vec<&[Vec<u32>]> = idx
            .iter()
            .map(|i| data.docs[*i].ingredients.as_slice())
            .collect();
        let ins: Vec<&[Vec<u32>]> = idx
            .iter()
            .map(|i| data.docs[*i].instructions.as_slice())
            .collect();
        let e = model.embed_recipes(
            store,
            &TextBlock::from_docs(&ing),
            &TextBlock::from_docs(&ins),
        )?;
        recipes
            .slice_mut(ndarray::s![start..start + idx.len(), ..])
            .assign(&e);
    }
    let flat: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..data.images[i].len()).map(move |k| (i, k)))
        .collect();
    let mut images: Vec<Array2<T>> = (0..n)
        .map(|i| Array2::zeros((data.images[i].len(), de)))
        .collect();
    for chunk in flat.chunks(bs) {
        let first = &data.images[chunk[0].0][chunk[0].1];
        let mut px = Array2::zeros((chunk.len(), first.data.len()));
        for (r, (i, k)) in chunk.iter().enumerate() {
            let img = &data.images[*i][*k];
            if img.data.len() != first.data.len() {
                return Err(Error::shape("image size", first.data.len(), img.data.len()));
            }
            for (dst, src) in px.row_mut(r).iter_mut().zip(&img.data) {
                *dst = T::of(*src as f64);
            }
        }
        let e = model.embed_images(store, &px)?;
        for (r, (i, k)) in chunk.iter().enumerate() {
            images[*i].row_mut(*k).assign(&e.row(r));
        }
    }
    Ok(DatasetEmbeddings { recipes, images })
}
