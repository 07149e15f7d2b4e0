//! Hierarchical recipe encoder: word-level BiGRUs with attention pooling per
//! sentence, an attention decoder over instructions with ingredient contexts,
//! and three sentence-level BiGRU + pooling branches whose outputs form `s_r`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionPool, Pooled, Query};
use crate::corpus::TextBlock;
use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::nn::{BiGru, Gru, Init};
use crate::params::{ParamId, ParamStore, SMALL_UNIFORM};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeDims {
    pub vocab: usize,
    pub word_dim: usize,
    /// Recurrent state size per direction; sentence vectors are twice this.
    pub hidden: usize,
    /// Attention hidden size; defaults to the context size.
    pub attn_dim: Option<usize>,
}

impl RecipeDims {
    pub fn sentence_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn output_dim(&self) -> usize {
        3 * self.sentence_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Ingredient,
    Instruction,
}

#[derive(Debug, Clone)]
struct WordLevel {
    rnn: BiGru,
    query: ParamId,
    pool: AttentionPool,
}

/// Branch order inside `s_r`.
pub const BRANCHES: [&str; 3] = ["joint", "instructions", "ingredients"];

#[derive(Debug, Clone)]
pub struct RecipeEncoder {
    pub dims: RecipeDims,
    pub embedding: ParamId,
    ingredient_words: WordLevel,
    instruction_words: WordLevel,
    decoder: Gru,
    decoder_pool: AttentionPool,
    /// Sentence-level encoders over `H_c`, `H_ins`, `H_ing`.
    sentence_rnns: [BiGru; 3],
    pub sentence_queries: [ParamId; 3],
    pub sentence_pools: [AttentionPool; 3],
}

/// Sentence vectors of the real sentences of a block, batch-row major.
#[derive(Debug, Clone)]
pub struct SentenceReps {
    /// `K × d_s`
    pub reps: Var,
    /// Word-level pooling weights, `(Σ words) × 1`.
    pub weights: Var,
    /// Sentences per batch row.
    pub segments: Segments,
}

/// Sentence-level states of the three branches, ready to be pooled.
#[derive(Debug, Clone)]
pub struct SentenceStates {
    pub rows: [Var; 3],
    pub segments: [Segments; 3],
}

#[derive(Debug, Clone)]
pub struct RecipeEncoding {
    /// `B × 3d_s`
    pub s_r: Var,
    pub parts: [Pooled; 3],
    pub states: SentenceStates,
    /// Decoder attention over ingredients at every instruction step.
    pub decoder_weights: Vec<Var>,
}

fn step_mask<T: Scalar>(
    g: &mut Graph<T>,
    mask: impl Fn(usize) -> bool,
    rows: usize,
) -> Option<Var> {
    if (0..rows).all(&mask) {
        None
    } else {
        Some(g.constant(Array2::from_shape_fn((rows, 1), |(r, _)| {
            if mask(r) {
                T::one()
            } else {
                T::zero()
            }
        })))
    }
}

impl RecipeEncoder {
    /// All parameters uniform in `[-0.02, 0.02]`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dims: RecipeDims,
        rng: &mut R,
    ) -> Self {
        let init = Init::Uniform(SMALL_UNIFORM);
        let ds = dims.sentence_dim();
        let da = dims.attn_dim.unwrap_or(ds);
        let word_level = |store: &mut ParamStore<T>, name: &str, rng: &mut R| WordLevel {
            rnn: BiGru::new(
                store,
                &format!("recipe.{name}.rnn"),
                dims.word_dim,
                dims.hidden,
                init,
                rng,
            ),
            query: store.uniform(format!("recipe.{name}.query"), 1, ds, SMALL_UNIFORM, rng),
            pool: AttentionPool::new(store, &format!("recipe.{name}.pool"), ds, ds, da, rng),
        };
        let embedding = store.uniform(
            "recipe.embedding",
            dims.vocab,
            dims.word_dim,
            SMALL_UNIFORM,
            rng,
        );
        let ingredient_words = word_level(store, "ingredient_words", rng);
        let instruction_words = word_level(store, "instruction_words", rng);
        let decoder = Gru::new(store, "recipe.decoder", 2 * ds, ds, init, rng);
        let decoder_pool = AttentionPool::new(store, "recipe.decoder.pool", ds, ds, da, rng);
        let sentence_rnns = BRANCHES.map(|b| {
            BiGru::new(
                store,
                &format!("recipe.{b}.rnn"),
                ds,
                dims.hidden,
                init,
                rng,
            )
        });
        let sentence_queries =
            BRANCHES.map(|b| store.uniform(format!("recipe.{b}.query"), 1, ds, SMALL_UNIFORM, rng));
        let sentence_pools = BRANCHES
            .map(|b| AttentionPool::new(store, &format!("recipe.{b}.pool"), ds, ds, da, rng));
        RecipeEncoder {
            dims,
            embedding,
            ingredient_words,
            instruction_words,
            decoder,
            decoder_pool,
            sentence_rnns,
            sentence_queries,
            sentence_pools,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dims.output_dim()
    }

    /// One vector per real sentence of `block`.
    pub fn encode_sentences<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &TextBlock,
        side: Side,
    ) -> Result<SentenceReps> {
        let level = match side {
            Side::Ingredient => &self.ingredient_words,
            Side::Instruction => &self.instruction_words,
        };
        let real = block.real_sentences();
        let k = real.len();
        let steps = block.l_max;
        if k == 0 || steps == 0 {
            return Err(Error::NoAttendablePositions);
        }
        let lens: Vec<usize> = real
            .iter()
            .map(|(b, j)| block.words[b * block.n_max + j])
            .collect();
        let mut ids = Vec::with_capacity(k * steps);
        for t in 0..steps {
            for (b, j) in &real {
                ids.push(block.token(*b, *j, t) as usize);
            }
        }
        if let Some(bad) = ids.iter().find(|i| **i >= self.dims.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab
            )));
        }
        let emb = g.param(store, self.embedding);
        let x = g.gather_rows(emb, &ids);
        let masks: Vec<Option<Var>> = (0..steps)
            .map(|t| step_mask(g, |r| t < lens[r], k))
            .collect();
        let states = level.rnn.run(g, store, x, steps, k, &masks);
        let all = g.concat_rows(&states);
        let order: Vec<usize> = (0..k)
            .flat_map(|r| (0..lens[r]).map(move |t| t * k + r))
            .collect();
        let words = g.gather_rows(all, &order);
        let q = g.param(store, level.query);
        let pooled = level.pool.forward(
            g,
            store,
            Query::Shared(q),
            words,
            &Segments::from_lengths(lens)?,
        )?;
        Ok(SentenceReps {
            reps: pooled.pooled,
            weights: pooled.weights,
            segments: Segments::from_lengths(block.sentences.iter().copied())?,
        })
    }

    /// Lay sentence rows out time-major (`n_max` steps of `B` rows), zero on padding.
    fn time_major<T: Scalar>(g: &mut Graph<T>, reps: Var, block: &TextBlock) -> Var {
        let mut first = Vec::with_capacity(block.batch);
        let mut acc = 0;
        for n in &block.sentences {
            first.push(acc);
            acc += n;
        }
        let idx = (0..block.n_max)
            .flat_map(|j| (0..block.batch).map(move |b| (j, b)))
            .map(|(j, b)| (j < block.sentences[b]).then(|| first[b] + j))
            .collect();
        g.gather(reps, idx)
    }

    fn sentence_masks<T: Scalar>(g: &mut Graph<T>, block: &TextBlock) -> Vec<Option<Var>> {
        (0..block.n_max)
            .map(|j| step_mask(g, |b| j < block.sentences[b], block.batch))
            .collect()
    }

    /// Attention decoder over instruction vectors with ingredient vectors as
    /// contexts. Returns decoder states and attention weights per step, both
    /// time-major over the instruction block.
    pub fn cross_decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        instructions: &SentenceReps,
        ins_block: &TextBlock,
        ingredients: &SentenceReps,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let batch = ins_block.batch;
        if ingredients.segments.len() != batch {
            return Err(Error::shape(
                "decoder contexts",
                batch,
                ingredients.segments.len(),
            ));
        }
        let ds = self.dims.sentence_dim();
        let seq = Self::time_major(g, instructions.reps, ins_block);
        let masks = Self::sentence_masks(g, ins_block);
        let mut state = g.constant(Array2::zeros((batch, ds)));
        let mut states = Vec::with_capacity(ins_block.n_max);
        let mut weights = Vec::with_capacity(ins_block.n_max);
        for (t, mask) in masks.iter().enumerate() {
            let attended = self.decoder_pool.forward(
                g,
                store,
                Query::PerSegment(state),
                ingredients.reps,
                &ingredients.segments,
            )?;
            let input = g.slice_rows(seq, t * batch, batch);
            let input = g.concat_cols(&[input, attended.pooled]);
            let gi = self.decoder.project_input(g, store, input);
            let next = self.decoder.cell(g, store, gi, state);
            state = match mask {
                Some(m) => {
                    let delta = g.sub(next, state);
                    let delta = g.mul_col(delta, *m);
                    g.add(state, delta)
                }
                None => next,
            };
            states.push(state);
            weights.push(attended.weights);
        }
        Ok((states, weights))
    }

    /// Run one sentence-level BiGRU over a time-major sequence and return its
    /// states at real positions, batch-row major.
    fn sentence_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        branch: usize,
        seq: Var,
        block: &TextBlock,
    ) -> Result<(Var, Segments)> {
        let masks = Self::sentence_masks(g, block);
        let states =
            self.sentence_rnns[branch].run(g, store, seq, block.n_max, block.batch, &masks);
        let all = g.concat_rows(&states);
        let order: Vec<usize> = (0..block.batch)
            .flat_map(|b| (0..block.sentences[b]).map(move |j| j * block.batch + b))
            .collect();
        Ok((
            g.gather_rows(all, &order),
            Segments::from_lengths(block.sentences.iter().copied())?,
        ))
    }

    pub fn sentence_states<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ingredients: &TextBlock,
        instructions: &TextBlock,
    ) -> Result<(SentenceStates, Vec<Var>)> {
        if ingredients.batch != instructions.batch {
            return Err(Error::shape(
                "recipe batch",
                ingredients.batch,
                instructions.batch,
            ));
        }
        let ing = self.encode_sentences(g, store, ingredients, Side::Ingredient)?;
        let ins = self.encode_sentences(g, store, instructions, Side::Instruction)?;
        let (hc, dec_w) = self.cross_decode(g, store, &ins, instructions, &ing)?;
        let hc = g.concat_rows(&hc);
        let ins_seq = Self::time_major(g, ins.reps, instructions);
        let ing_seq = Self::time_major(g, ing.reps, ingredients);
        let (c_rows, c_seg) = self.sentence_level(g, store, 0, hc, instructions)?;
        let (ins_rows, ins_seg) = self.sentence_level(g, store, 1, ins_seq, instructions)?;
        let (ing_rows, ing_seg) = self.sentence_level(g, store, 2, ing_seq, ingredients)?;
        Ok((
            SentenceStates {
                rows: [c_rows, ins_rows, ing_rows],
                segments: [c_seg, ins_seg, ing_seg],
            },
            dec_w,
        ))
    }

    /// Pool the three branches, with the trainable queries or with one
    /// `B × d_s` query row per recipe replacing all three.
    pub fn pool_sentences<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        states: &SentenceStates,
        query_override: Option<Var>,
    ) -> Result<(Var, [Pooled; 3])> {
        let batch = states.segments[0].len();
        if let Some(q) = query_override {
            let shape = g.shape(q);
            if shape != (batch, self.dims.sentence_dim()) {
                return Err(Error::shape(
                    "query override",
                    format!("({batch}, {})", self.dims.sentence_dim()),
                    format!("{shape:?}"),
                ));
            }
        }
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let query = match query_override {
                Some(q) => Query::PerSegment(q),
                None => Query::Shared(g.param(store, self.sentence_queries[i])),
            };
            parts.push(self.sentence_pools[i].forward(
                g,
                store,
                query,
                states.rows[i],
                &states.segments[i],
            )?);
        }
        let s_r = g.concat_cols(&[parts[0].pooled, parts[1].pooled, parts[2].pooled]);
        Ok((s_r, [parts[0], parts[1], parts[2]]))
    }

    pub fn encode_recipe<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ingredients: &TextBlock,
        instructions: &TextBlock,
        query_override: Option<Var>,
    ) -> Result<RecipeEncoding> {
        let (states, decoder_weights) =
            self.sentence_states(g, store, ingredients, instructions)?;
        let (s_r, parts) = self.pool_sentences(g, store, &states, query_override)?;
        Ok(RecipeEncoding {
            s_r,
            parts,
            states,
            decoder_weights,
        })
    }
}
