use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{attn, embedding_init, ff, norm, AttnParams, FfParams, NormParams};
use super::{LengthDistribution, LogProbMatrix};
use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::substrate::kernels::{self, AttnLayout};
use crate::substrate::{Checkpoint, Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub attn: AttnParams,
    pub ln1: NormParams,
    pub ff: FfParams,
    pub ln2: NormParams,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub self_attn: AttnParams,
    pub ln1: NormParams,
    pub cross: AttnParams,
    pub ln2: NormParams,
    pub ff: FfParams,
    pub ln3: NormParams,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    /// Token embedding, shared by encoder input, decoder input and the
    /// output projection.
    pub embed: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub enc: Vec<EncLayer>,
    pub dec: Vec<DecLayer>,
    /// `(weight d × L_max, bias 1 × L_max)` of the NAR length classifier.
    pub length: Option<(ParamId, ParamId)>,
}

/// An AR or NAR encoder-decoder Transformer with its parameters.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) layout: Layout,
}

/// Sentences per evaluation graph in the batched scoring helpers.
const EVAL_CHUNK: usize = 64;

impl Transformer {
    /// Fresh model with parameters drawn from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, r) = (config.d_model, config.d_filter);
        let mut store = ParamStore::new();
        let embed = store.add("embed", embedding_init(config.vocab_size, d, &mut rng));
        let enc_pos = store.add("enc.pos", embedding_init(config.max_src_len, d, &mut rng));
        let dec_pos = store.add(
            "dec.pos",
            embedding_init(config.dec_positions(), d, &mut rng),
        );
        let enc = (0..config.enc_layers)
            .map(|l| EncLayer {
                attn: AttnParams::register(&mut store, &format!("enc.{l}.self"), d, &mut rng),
                ln1: NormParams::register(&mut store, &format!("enc.{l}.ln1"), d),
                ff: FfParams::register(&mut store, &format!("enc.{l}.ff"), d, r, &mut rng),
                ln2: NormParams::register(&mut store, &format!("enc.{l}.ln2"), d),
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|l| DecLayer {
                self_attn: AttnParams::register(&mut store, &format!("dec.{l}.self"), d, &mut rng),
                ln1: NormParams::register(&mut store, &format!("dec.{l}.ln1"), d),
                cross: AttnParams::register(&mut store, &format!("dec.{l}.cross"), d, &mut rng),
                ln2: NormParams::register(&mut store, &format!("dec.{l}.ln2"), d),
                ff: FfParams::register(&mut store, &format!("dec.{l}.ff"), d, r, &mut rng),
                ln3: NormParams::register(&mut store, &format!("dec.{l}.ln3"), d),
            })
            .collect();
        let length = (!config.autoregressive).then(|| {
            let w = store.add(
                "len.w",
                crate::substrate::params::xavier_uniform(d, config.max_tgt_len, &mut rng),
            );
            let b = store.add("len.b", Matrix::zeros(1, config.max_tgt_len));
            (w, b)
        });
        Ok(Transformer {
            config,
            store,
            layout: Layout {
                embed,
                enc_pos,
                dec_pos,
                enc,
                dec,
                length,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_autoregressive(&self) -> bool {
        self.config.autoregressive
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(json, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::Checkpoint {
                path: origin.to_path_buf(),
                message: format!("model config: {e}"),
            })?;
        let mut model = Transformer::new(config, 0)?;
        ck.restore_into(&mut model.store, origin)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }

    fn require(&self, autoregressive: bool, op: &str) -> Result<()> {
        if self.config.autoregressive != autoregressive {
            let kind = if autoregressive {
                "an autoregressive"
            } else {
                "a non-autoregressive"
            };
            return Err(Error::Config(format!("{op} needs {kind} model")));
        }
        Ok(())
    }

    fn check_source(&self, x: &[TokenId]) -> Result<()> {
        if x.is_empty() {
            return Err(Error::EmptyInput("source sentence"));
        }
        if x.len() > self.config.max_src_len {
            return Err(Error::Argument(format!(
                "source of length {} exceeds the model maximum {}",
                x.len(),
                self.config.max_src_len
            )));
        }
        self.check_tokens(x)
    }

    fn check_tokens(&self, x: &[TokenId]) -> Result<()> {
        match x.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(Error::Index {
                what: "vocabulary",
                index: t as usize,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(
        &self,
        g: &mut Graph,
        tokens: Vec<usize>,
        positions: Vec<usize>,
        pos_table: ParamId,
    ) -> Var {
        let table = g.param(&self.store, self.layout.embed);
        let e = g.gather_rows(table, tokens);
        let pt = g.param(&self.store, pos_table);
        let p = g.gather_rows(pt, positions);
        let x = g.add(e, p);
        g.dropout(x, self.config.dropout)
    }

    /// Encodes a batch of sources into one packed `Σ|x| × d` node.
    pub fn encode_graph(&self, g: &mut Graph, sources: &[&[TokenId]]) -> Result<Var> {
        for x in sources {
            self.check_source(x)?;
        }
        let lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
        let tokens = sources
            .iter()
            .flat_map(|x| x.iter().map(|&t| t as usize))
            .collect();
        let positions = lens.iter().flat_map(|&l| 0..l).collect();
        let mut h = self.embed(g, tokens, positions, self.layout.enc_pos);
        let layout = Rc::new(AttnLayout::self_attention(&lens, self.config.heads, false));
        let p = self.config.dropout;
        for layer in &self.layout.enc {
            let a = attn(g, &self.store, &layer.attn, h, h, layout.clone(), p);
            h = norm(g, &self.store, &layer.ln1, a);
            let f = ff(g, &self.store, &layer.ff, h, p);
            h = norm(g, &self.store, &layer.ln2, f);
        }
        Ok(h)
    }

    fn decoder_stack(
        &self,
        g: &mut Graph,
        enc: Var,
        src_lens: &[usize],
        mut h: Var,
        dec_lens: &[usize],
    ) -> Var {
        let heads = self.config.heads;
        let self_layout = Rc::new(AttnLayout::self_attention(
            dec_lens,
            heads,
            self.config.autoregressive,
        ));
        let cross_layout = Rc::new(AttnLayout::cross_attention(dec_lens, src_lens, heads));
        let p = self.config.dropout;
        for layer in &self.layout.dec {
            let a = attn(
                g,
                &self.store,
                &layer.self_attn,
                h,
                h,
                self_layout.clone(),
                p,
            );
            h = norm(g, &self.store, &layer.ln1, a);
            let c = attn(
                g,
                &self.store,
                &layer.cross,
                enc,
                h,
                cross_layout.clone(),
                p,
            );
            h = norm(g, &self.store, &layer.ln2, c);
            let f = ff(g, &self.store, &layer.ff, h, p);
            h = norm(g, &self.store, &layer.ln3, f);
        }
        let table = g.param(&self.store, self.layout.embed);
        g.matmul_t(h, table)
    }

    /// Teacher-forced AR logits for decoder inputs `prefixes` (each starting
    /// with BOS); one row per prefix position, packed.
    pub fn ar_decode_graph(
        &self,
        g: &mut Graph,
        enc: Var,
        src_lens: &[usize],
        prefixes: &[&[TokenId]],
    ) -> Result<Var> {
        self.require(true, "AR decoding")?;
        for p in prefixes {
            if p.first() != Some(&BOS) {
                return Err(Error::Argument(
                    "AR decoder input must start with BOS".into(),
                ));
            }
            if p.len() > self.config.dec_positions() {
                return Err(Error::Argument(format!(
                    "decoder prefix of length {} exceeds L_max + 1 = {}",
                    p.len(),
                    self.config.dec_positions()
                )));
            }
            self.check_tokens(p)?;
        }
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let tokens = prefixes
            .iter()
            .flat_map(|p| p.iter().map(|&t| t as usize))
            .collect();
        let positions = lens.iter().flat_map(|&l| 0..l).collect();
        let h = self.embed(g, tokens, positions, self.layout.dec_pos);
        Ok(self.decoder_stack(g, enc, src_lens, h, &lens))
    }

    /// NAR logits: the decoder reads `T'` PAD embeddings plus positions.
    pub fn nar_decode_graph(
        &self,
        g: &mut Graph,
        enc: Var,
        src_lens: &[usize],
        lengths: &[usize],
    ) -> Result<Var> {
        self.require(false, "NAR decoding")?;
        for &l in lengths {
            self.check_nar_length(l)?;
        }
        let total: usize = lengths.iter().sum();
        let positions = lengths.iter().flat_map(|&l| 0..l).collect();
        let h = self.embed(g, vec![PAD as usize; total], positions, self.layout.dec_pos);
        Ok(self.decoder_stack(g, enc, src_lens, h, lengths))
    }

    fn check_nar_length(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.config.max_tgt_len {
            return Err(Error::Argument(format!(
                "target length {l} outside 1..={}",
                self.config.max_tgt_len
            )));
        }
        Ok(())
    }

    /// Length-classifier logits, one row per source; column `j` scores
    /// length `j + 1`.
    pub fn length_graph(&self, g: &mut Graph, enc: Var, src_lens: &[usize]) -> Result<Var> {
        let (w, b) = self.layout.length.ok_or_else(|| {
            Error::Config("length prediction needs a non-autoregressive model".into())
        })?;
        let pooled = g.segment_mean(enc, src_lens.to_vec());
        let wv = g.param(&self.store, w);
        let bv = g.param(&self.store, b);
        let l = g.matmul(pooled, wv);
        Ok(g.add_row(l, bv))
    }

    /// Mean label-smoothed token cross-entropy of a batch, with EOS appended
    /// to every target.
    pub fn ar_loss(
        &self,
        g: &mut Graph,
        pairs: &[(&[TokenId], &[TokenId])],
        epsilon: f64,
    ) -> Result<Var> {
        let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.0).collect();
        let enc = self.encode_graph(g, &sources)?;
        let src_lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
        let prefixes: Vec<Vec<TokenId>> = pairs.iter().map(|(_, y)| ar_prefix(y)).collect();
        let prefix_refs: Vec<&[TokenId]> = prefixes.iter().map(Vec::as_slice).collect();
        let logits = self.ar_decode_graph(g, enc, &src_lens, &prefix_refs)?;
        let targets = pairs
            .iter()
            .flat_map(|(_, y)| {
                y.iter()
                    .map(|&t| t as usize)
                    .chain(std::iter::once(EOS as usize))
            })
            .collect();
        Ok(g.cross_entropy(logits, targets, epsilon))
    }

    /// Token cross-entropy at the reference length plus `length_weight`
    /// times the length-classifier cross-entropy.
    pub fn nar_loss(
        &self,
        g: &mut Graph,
        pairs: &[(&[TokenId], &[TokenId])],
        epsilon: f64,
        length_weight: f64,
    ) -> Result<Var> {
        let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.0).collect();
        let enc = self.encode_graph(g, &sources)?;
        let src_lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
        let lengths: Vec<usize> = pairs.iter().map(|(_, y)| y.len()).collect();
        let logits = self.nar_decode_graph(g, enc, &src_lens, &lengths)?;
        let targets = pairs
            .iter()
            .flat_map(|(_, y)| y.iter().map(|&t| t as usize))
            .collect();
        let tok = g.cross_entropy(logits, targets, epsilon);
        if length_weight == 0.0 {
            return Ok(tok);
        }
        let len_logits = self.length_graph(g, enc, &src_lens)?;
        let len_loss =
            g.cross_entropy(len_logits, lengths.iter().map(|l| l - 1).collect(), epsilon);
        let weighted = g.scale(len_loss, length_weight);
        Ok(g.add(tok, weighted))
    }

    // ---- single-sentence inference ----

    /// Encoder states of one source, `|x| × d`.
    pub fn encode(&self, x: &[TokenId]) -> Result<Matrix> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, &[x])?;
        Ok(g.value(enc).clone())
    }

    /// Teacher-forced log-distributions for every position of `prefix`
    /// (which starts with BOS): row `i` predicts the token after `prefix[i]`.
    pub fn ar_teacher_forced(&self, prefix: &[TokenId], enc: &Matrix) -> Result<LogProbMatrix> {
        let mut g = Graph::new();
        let e = g.input(enc.clone());
        let logits = self.ar_decode_graph(&mut g, e, &[enc.rows()], &[prefix])?;
        Ok(LogProbMatrix::from_logits(g.value(logits)))
    }

    /// Next-token log-distribution after `prefix`.
    pub fn decode_ar_step(&self, prefix: &[TokenId], enc: &Matrix) -> Result<Vec<f64>> {
        let lp = self.ar_teacher_forced(prefix, enc)?;
        Ok(lp.row(lp.len() - 1).to_vec())
    }

    /// Per-position log-distributions for a target of length `len`.
    pub fn decode_nar(&self, len: usize, enc: &Matrix) -> Result<LogProbMatrix> {
        let mut g = Graph::new();
        let e = g.input(enc.clone());
        let logits = self.nar_decode_graph(&mut g, e, &[enc.rows()], &[len])?;
        Ok(LogProbMatrix::from_logits(g.value(logits)))
    }

    pub fn predict_length(&self, enc: &Matrix) -> Result<LengthDistribution> {
        let mut g = Graph::new();
        let e = g.input(enc.clone());
        let logits = self.length_graph(&mut g, e, &[enc.rows()])?;
        Ok(LengthDistribution::from_logits(g.value(logits).row(0)))
    }

    /// `Σ_i log p(y_i | x, y_<i)` including the final EOS term.
    pub fn ar_log_likelihood(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.ar_log_likelihoods(&[(x, y)])?[0])
    }

    /// `log p(|y| | x) + Σ_i log p(y_i | x, |y|)`; `-inf` when `|y|` lies
    /// outside the length classifier's support.
    pub fn nar_log_likelihood(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        Ok(self.nar_log_likelihoods(&[(x, y)], true)?[0])
    }

    /// AR log-likelihoods of many pairs, evaluated in packed chunks.
    pub fn ar_log_likelihoods(&self, pairs: &[(&[TokenId], &[TokenId])]) -> Result<Vec<f64>> {
        self.require(true, "AR scoring")?;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let sources: Vec<&[TokenId]> = chunk.iter().map(|p| p.0).collect();
            let enc = self.encode_graph(&mut g, &sources)?;
            let src_lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
            let prefixes: Vec<Vec<TokenId>> = chunk.iter().map(|(_, y)| ar_prefix(y)).collect();
            let refs: Vec<&[TokenId]> = prefixes.iter().map(Vec::as_slice).collect();
            let logits = self.ar_decode_graph(&mut g, enc, &src_lens, &refs)?;
            let lv = g.value(logits);
            let mut row = 0;
            for (_, y) in chunk {
                let mut total = 0.0;
                for &t in y.iter().chain(std::iter::once(&EOS)) {
                    total += log_prob_at(lv.row(row), t as usize);
                    row += 1;
                }
                out.push(total);
            }
        }
        Ok(out)
    }

    /// NAR log-likelihoods; `with_length` adds the length-classifier term.
    pub fn nar_log_likelihoods(
        &self,
        pairs: &[(&[TokenId], &[TokenId])],
        with_length: bool,
    ) -> Result<Vec<f64>> {
        self.require(false, "NAR scoring")?;
        let mut out = vec![f64::NEG_INFINITY; pairs.len()];
        let in_range: Vec<usize> = (0..pairs.len())
            .filter(|&i| (1..=self.config.max_tgt_len).contains(&pairs[i].1.len()))
            .collect();
        for chunk in in_range.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let sources: Vec<&[TokenId]> = chunk.iter().map(|&i| pairs[i].0).collect();
            let enc = self.encode_graph(&mut g, &sources)?;
            let src_lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
            let lengths: Vec<usize> = chunk.iter().map(|&i| pairs[i].1.len()).collect();
            for &i in chunk {
                self.check_tokens(pairs[i].1)?;
            }
            let logits = self.nar_decode_graph(&mut g, enc, &src_lens, &lengths)?;
            let len_logits = if with_length {
                Some(self.length_graph(&mut g, enc, &src_lens)?)
            } else {
                None
            };
            let lv = g.value(logits);
            let mut row = 0;
            for (k, &i) in chunk.iter().enumerate() {
                let y = pairs[i].1;
                let mut total = 0.0;
                for &t in y {
                    total += log_prob_at(lv.row(row), t as usize);
                    row += 1;
                }
                if let Some(ll) = len_logits {
                    total += log_prob_at(g.value(ll).row(k), y.len() - 1);
                }
                out[i] = total;
            }
        }
        Ok(out)
    }

    /// Per-position log-distributions for many (source, length) requests.
    pub fn nar_log_probs(&self, requests: &[(&[TokenId], usize)]) -> Result<Vec<LogProbMatrix>> {
        self.require(false, "NAR decoding")?;
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let sources: Vec<&[TokenId]> = chunk.iter().map(|r| r.0).collect();
            let enc = self.encode_graph(&mut g, &sources)?;
            let src_lens: Vec<usize> = sources.iter().map(|x| x.len()).collect();
            let lengths: Vec<usize> = chunk.iter().map(|r| r.1).collect();
            let logits = self.nar_decode_graph(&mut g, enc, &src_lens, &lengths)?;
            let lv = g.value(logits);
            let mut row = 0;
            for &l in &lengths {
                out.push(LogProbMatrix::from_logits(&lv.slice_rows(row, l)));
                row += l;
            }
        }
        Ok(out)
    }

    pub fn predict_lengths(&self, sources: &[&[TokenId]]) -> Result<Vec<LengthDistribution>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let enc = self.encode_graph(&mut g, chunk)?;
            let src_lens: Vec<usize> = chunk.iter().map(|x| x.len()).collect();
            let logits = self.length_graph(&mut g, enc, &src_lens)?;
            let lv = g.value(logits);
            out.extend((0..chunk.len()).map(|r| LengthDistribution::from_logits(lv.row(r))));
        }
        Ok(out)
    }
}

/// `BOS y_1 .. y_T`, the AR decoder input for target `y`.
pub fn ar_prefix(y: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(y.len() + 1);
    p.push(BOS);
    p.extend_from_slice(y);
    p
}

fn log_prob_at(logits: &[f64], idx: usize) -> f64 {
    logits[idx] - kernels::log_sum_exp(logits)
}
