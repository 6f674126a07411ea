//! The MEMTO network: a Transformer encoder producing per-timestamp queries,
//! the gated memory module, and a weak per-timestamp MLP decoder.

pub mod memory;
mod params;

pub use memory::{GatedWrite, MemoryBank};
pub use params::{ParamId, ParamSet, ParamVars};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use params::xavier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub window_len: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub memory_items: usize,
    pub tau: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 100,
            channels: 1,
            latent_dim: 64,
            enc_layers: 3,
            enc_heads: 8,
            dec_layers: 2,
            memory_items: 10,
            tau: 0.1,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window_len == 0 || self.channels == 0 || self.latent_dim == 0 {
            return bad("window_len, channels and latent_dim must be >= 1".into());
        }
        if self.enc_layers == 0 || self.enc_heads == 0 {
            return bad("enc_layers and enc_heads must be >= 1".into());
        }
        if !self.latent_dim.is_multiple_of(self.enc_heads) {
            return bad(format!(
                "latent_dim {} is not divisible by enc_heads {}",
                self.latent_dim, self.enc_heads
            ));
        }
        if self.memory_items == 0 {
            return bad("memory_items must be >= 1".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.latent_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: ps.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out)),
            b: ps.add(format!("{name}.bias"), Mat::zeros((1, fan_out))),
        }
    }

    fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        let y = g.matmul(x, pv.var(self.w));
        g.add_row(y, pv.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: ps.add(format!("{name}.bias"), Mat::zeros((1, dim))),
        }
    }

    fn forward(&self, g: &mut Graph, pv: &ParamVars, x: Var) -> Var {
        g.layer_norm(x, pv.var(self.gain), pv.var(self.bias))
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
    gate_u: ParamId,
    gate_w: ParamId,
    decoder: Vec<Linear>,
}

impl Layout {
    fn build(cfg: &ModelConfig, ps: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let c = cfg.latent_dim;
        let embed = Linear::new(ps, rng, "encoder.embed", cfg.channels, c);
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(ps, &format!("{p}.ln_attn"), c),
                    query: Linear::new(ps, rng, &format!("{p}.attn.query"), c, c),
                    key: Linear::new(ps, rng, &format!("{p}.attn.key"), c, c),
                    value: Linear::new(ps, rng, &format!("{p}.attn.value"), c, c),
                    out: Linear::new(ps, rng, &format!("{p}.attn.out"), c, c),
                    ln_ff: LayerNorm::new(ps, &format!("{p}.ln_ff"), c),
                    ff_in: Linear::new(ps, rng, &format!("{p}.ff.in"), c, cfg.ff_dim()),
                    ff_out: Linear::new(ps, rng, &format!("{p}.ff.out"), cfg.ff_dim(), c),
                }
            })
            .collect();
        let ln_final = LayerNorm::new(ps, "encoder.ln_final", c);
        let gate_u = ps.add("memory.gate_u", xavier(rng, c, c));
        let gate_w = ps.add("memory.gate_w", xavier(rng, c, c));
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let fan_out = if i + 1 == cfg.dec_layers {
                    cfg.channels
                } else {
                    2 * c
                };
                Linear::new(ps, rng, &format!("decoder.layer{i}"), 2 * c, fan_out)
            })
            .collect();
        Self {
            embed,
            layers,
            ln_final,
            gate_u,
            gate_w,
            decoder,
        }
    }
}

/// Sinusoidal positional encoding, `len×dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Outputs of a forward pass over one window.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `L×n` reconstruction.
    pub reconstruction: Mat,
    /// `L×C` encoder queries.
    pub queries: Mat,
    /// `L×M` read attention.
    pub read_weights: Mat,
    /// `L×C` retrieved prototype blend.
    pub retrieved: Mat,
    /// `L×2C` concatenation of queries and retrieved vectors.
    pub updated_query: Mat,
}

/// Graph handles produced by [`Memto::build_forward`] over a batch of windows,
/// flattened along rows (`B·L` rows).
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub reconstruction: Var,
    pub queries: Var,
    pub read_weights: Var,
    pub retrieved: Var,
    pub updated_query: Var,
    /// Post-write memory items (train mode only).
    pub written_items: Option<Var>,
    pub gate: Option<Var>,
}

/// Dropout source for train-mode graphs; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Debug, Clone)]
pub struct Memto {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
    memory: Mat,
    pos: Mat,
}

impl Memto {
    /// Fresh model; memory items are uniform-random rows scaled to unit norm.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layout = Layout::build(&config, &mut params, &mut rng);
        let memory = random_memory(&mut rng, config.memory_items, config.latent_dim);
        let pos = positional_encoding(config.window_len, config.latent_dim);
        Ok(Self {
            config,
            params,
            layout,
            memory,
            pos,
        })
    }

    /// Rebuilds a model from named tensors and a memory matrix.
    pub fn from_parts(
        config: ModelConfig,
        tensors: Vec<(String, Mat)>,
        memory: Mat,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_named(tensors)?;
        model.set_memory(memory)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn memory(&self) -> &Mat {
        &self.memory
    }

    pub fn memory_bank(&self) -> MemoryBank {
        MemoryBank {
            items: self.memory.clone(),
            tau: self.config.tau,
        }
    }

    pub fn gate_u(&self) -> &Mat {
        self.params.get(self.layout.gate_u)
    }

    pub fn gate_w(&self) -> &Mat {
        self.params.get(self.layout.gate_w)
    }

    pub fn set_memory(&mut self, memory: Mat) -> Result<()> {
        let expected = (self.config.memory_items, self.config.latent_dim);
        if memory.dim() != expected {
            return Err(Error::shape(
                format!("{expected:?}"),
                format!("{:?}", memory.dim()),
            ));
        }
        if memory.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "memory items contain non-finite values".into(),
            ));
        }
        self.memory = memory;
        Ok(())
    }

    pub fn check_window(&self, x: &Mat) -> Result<()> {
        let expected = (self.config.window_len, self.config.channels);
        if x.dim() != expected {
            return Err(Error::shape(
                format!("window of {}×{}", expected.0, expected.1),
                format!("{}×{}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut DropoutRng<'_>) -> Var {
        let rate = self.config.dropout;
        match rng {
            Some(r) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let dist = Uniform::new(0.0, 1.0).expect("valid range");
                let dim = g.value(x).dim();
                let mask = Mat::from_shape_simple_fn(dim, || {
                    if dist.sample(*r) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }

    /// Encoder graph over `B` windows stacked along rows (`B·L×n`); returns
    /// the `B·L×C` query handle. Attention never crosses window boundaries.
    pub fn build_encoder(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        rng: &mut DropoutRng<'_>,
    ) -> Var {
        let cfg = &self.config;
        let l = cfg.window_len;
        let windows = g.value(x).nrows() / l;
        let head_dim = cfg.latent_dim / cfg.enc_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let emb = self.layout.embed.forward(g, pv, x);
        let pos = if windows == 1 {
            self.pos.clone()
        } else {
            let views = vec![self.pos.view(); windows];
            ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
        };
        let pos = g.constant(pos);
        let mut h = g.add(emb, pos);
        h = self.dropout(g, h, rng);

        for layer in &self.layout.layers {
            let normed = layer.ln_attn.forward(g, pv, h);
            let q = layer.query.forward(g, pv, normed);
            let k = layer.key.forward(g, pv, normed);
            let v = layer.value.forward(g, pv, normed);
            let merged = g.block_attention(q, k, v, cfg.enc_heads, l, scale);
            let attn_out = layer.out.forward(g, pv, merged);
            let attn_out = self.dropout(g, attn_out, rng);
            h = g.add(h, attn_out);

            let normed = layer.ln_ff.forward(g, pv, h);
            let ff = layer.ff_in.forward(g, pv, normed);
            let ff = g.gelu(ff);
            let ff = layer.ff_out.forward(g, pv, ff);
            let ff = self.dropout(g, ff, rng);
            h = g.add(h, ff);
        }
        self.layout.ln_final.forward(g, pv, h)
    }

    /// Per-timestamp MLP decoder from `rows×2C` to `rows×n`.
    pub fn build_decoder(&self, g: &mut Graph, pv: &ParamVars, updated_query: Var) -> Var {
        let mut h = updated_query;
        let last = self.layout.decoder.len() - 1;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            h = layer.forward(g, pv, h);
            if i != last {
                h = g.gelu(h);
            }
        }
        h
    }

    /// Full forward graph over a batch of windows.
    ///
    /// In train mode the memory write runs over the batch-flattened queries and
    /// the read uses the written items, so the gate projections receive
    /// gradients through the read. `memory` is the pre-step item matrix,
    /// registered as a constant.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        windows: &[Var],
        mode: Mode,
        mut rng: DropoutRng<'_>,
    ) -> ForwardVars {
        let stacked = if windows.len() == 1 {
            windows[0]
        } else {
            g.concat_rows(windows)
        };
        let queries = self.build_encoder(g, pv, stacked, &mut rng);
        let items = g.constant(self.memory.clone());
        let tau = self.config.tau;

        let (read_items, written_items, gate) = match mode {
            Mode::Train => {
                let v = memory::write_attention_var(g, items, queries, tau);
                let (new_items, gate, _) = memory::gated_write_var(
                    g,
                    items,
                    pv.var(self.layout.gate_u),
                    pv.var(self.layout.gate_w),
                    queries,
                    v,
                );
                (new_items, Some(new_items), Some(gate))
            }
            Mode::Eval => (items, None, None),
        };

        let read_weights = memory::read_attention_var(g, read_items, queries, tau);
        let retrieved = memory::retrieve_var(g, read_weights, read_items);
        let updated_query = g.concat_cols(&[queries, retrieved]);
        let reconstruction = self.build_decoder(g, pv, updated_query);
        ForwardVars {
            reconstruction,
            queries,
            read_weights,
            retrieved,
            updated_query,
            written_items,
            gate,
        }
    }

    /// Eval-mode queries for one window.
    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        self.check_window(x)?;
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let xv = g.constant(x.clone());
        let q = self.build_encoder(&mut g, &pv, xv, &mut None);
        Ok(g.value(q).clone())
    }

    /// Decoder applied to an `rows×2C` matrix.
    pub fn decode(&self, updated_query: &Mat) -> Result<Mat> {
        if updated_query.ncols() != 2 * self.config.latent_dim {
            return Err(Error::shape(
                format!("{} features", 2 * self.config.latent_dim),
                format!("{} features", updated_query.ncols()),
            ));
        }
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let u = g.constant(updated_query.clone());
        let out = self.build_decoder(&mut g, &pv, u);
        Ok(g.value(out).clone())
    }

    /// Eval-mode forward: no memory write, no dropout, memory untouched.
    pub fn forward_eval(&self, x: &Mat) -> Result<ForwardOutput> {
        self.check_window(x)?;
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let xv = g.constant(x.clone());
        let fv = self.build_forward(&mut g, &pv, &[xv], Mode::Eval, None);
        collect_output(&g, &fv)
    }

    /// Train-mode forward on one window: writes memory, then reads the
    /// written items. Optimizer parameters are not touched.
    pub fn forward_train(&mut self, x: &Mat, rng: DropoutRng<'_>) -> Result<ForwardOutput> {
        self.check_window(x)?;
        let mut g = Graph::new();
        let pv = self.params.register(&mut g, false);
        let xv = g.constant(x.clone());
        let fv = self.build_forward(&mut g, &pv, &[xv], Mode::Train, rng);
        let out = collect_output(&g, &fv)?;
        let written = fv.written_items.expect("train mode writes memory");
        self.set_memory(g.value(written).clone())?;
        Ok(out)
    }

    /// Runs `forward` in the requested mode.
    pub fn forward(&mut self, x: &Mat, mode: Mode, rng: DropoutRng<'_>) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => self.forward_train(x, rng),
            Mode::Eval => self.forward_eval(x),
        }
    }
}

fn collect_output(g: &Graph, fv: &ForwardVars) -> Result<ForwardOutput> {
    let reconstruction = g.value(fv.reconstruction).clone();
    if reconstruction.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reconstruction".into()));
    }
    Ok(ForwardOutput {
        reconstruction,
        queries: g.value(fv.queries).clone(),
        read_weights: g.value(fv.read_weights).clone(),
        retrieved: g.value(fv.retrieved).clone(),
        updated_query: g.value(fv.updated_query).clone(),
    })
}

fn random_memory(rng: &mut impl Rng, items: usize, dim: usize) -> Mat {
    let mut m = Mat::from_shape_simple_fn((items, dim), || rng.random::<f64>());
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;

    fn tiny() -> ModelConfig {
        ModelConfig {
            window_len: 8,
            channels: 3,
            latent_dim: 4,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 2,
            memory_items: 2,
            tau: 0.1,
            dropout: 0.0,
        }
    }

    fn window(cfg: &ModelConfig, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((cfg.window_len, cfg.channels), || {
            rng.random_range(-1.0..1.0)
        })
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig {
                latent_dim: 10,
                enc_heads: 3,
                ..tiny()
            },
            ModelConfig {
                memory_items: 0,
                ..tiny()
            },
            ModelConfig { tau: 0.0, ..tiny() },
            ModelConfig {
                dec_layers: 0,
                ..tiny()
            },
            ModelConfig {
                dropout: 1.0,
                ..tiny()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn shapes() {
        let cfg = tiny();
        let m = Memto::new(cfg.clone(), 1).unwrap();
        let x = window(&cfg, 2);
        let out = m.forward_eval(&x).unwrap();
        assert_eq!(out.reconstruction.dim(), (8, 3));
        assert_eq!(out.queries.dim(), (8, 4));
        assert_eq!(out.read_weights.dim(), (8, 2));
        assert_eq!(out.retrieved.dim(), (8, 4));
        assert_eq!(out.updated_query.dim(), (8, 8));
        assert!(m.forward_eval(&Mat::zeros((7, 3))).is_err());
        assert!(m.decode(&Mat::zeros((8, 5))).is_err());
    }

    #[test]
    fn updated_query_is_concatenation() {
        let cfg = tiny();
        let m = Memto::new(cfg.clone(), 1).unwrap();
        let out = m.forward_eval(&window(&cfg, 3)).unwrap();
        let cat =
            ndarray::concatenate(Axis(1), &[out.queries.view(), out.retrieved.view()]).unwrap();
        assert_eq!(out.updated_query, cat);
        assert_eq!(m.encode(&window(&cfg, 3)).unwrap(), out.queries);
        assert_eq!(m.decode(&out.updated_query).unwrap(), out.reconstruction);
    }

    #[test]
    fn eval_leaves_memory_untouched_and_is_pure() {
        let cfg = tiny();
        let m = Memto::new(cfg.clone(), 5).unwrap();
        let before = m.memory().clone();
        let x = window(&cfg, 9);
        let a = m.forward_eval(&x).unwrap();
        let b = m.forward_eval(&x).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(m.memory(), &before);
    }

    #[test]
    fn train_mode_moves_memory() {
        let cfg = tiny();
        let mut m = Memto::new(cfg.clone(), 5).unwrap();
        let x = window(&cfg, 9);
        let first = m.forward_train(&x, None).unwrap();
        let second = m.forward_train(&x, None).unwrap();
        assert_ne!(first.reconstruction, second.reconstruction);
        for out in [&first, &second] {
            for row in out.read_weights.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let cfg = tiny();
        let mut m = Memto::new(cfg.clone(), 1).unwrap();
        let names: Vec<String> = m.params().names().to_vec();
        for (name, v) in names.iter().zip(m.params_mut().values_mut()) {
            if name.starts_with("decoder.") {
                v.fill(0.0);
            }
        }
        let out = m.forward_eval(&window(&cfg, 1)).unwrap();
        assert!(out.reconstruction.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_decoder_layer_is_affine() {
        let cfg = ModelConfig {
            dec_layers: 1,
            ..tiny()
        };
        let m = Memto::new(cfg.clone(), 1).unwrap();
        let names: Vec<_> = m
            .params()
            .names()
            .iter()
            .filter(|n| n.starts_with("decoder."))
            .collect();
        assert_eq!(names.len(), 2);
        assert_eq!(
            m.forward_eval(&window(&cfg, 1))
                .unwrap()
                .reconstruction
                .dim(),
            (8, 3)
        );
    }

    #[test]
    fn from_parts_round_trips_and_rejects_mismatch() {
        let cfg = tiny();
        let m = Memto::new(cfg.clone(), 11).unwrap();
        let tensors: Vec<(String, Mat)> = m
            .params()
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let back = Memto::from_parts(cfg.clone(), tensors.clone(), m.memory().clone()).unwrap();
        assert_eq!(back.params(), m.params());
        let other = ModelConfig {
            latent_dim: 6,
            ..cfg
        };
        assert!(Memto::from_parts(other, tensors, m.memory().clone()).is_err());
    }

    #[test]
    fn random_memory_rows_have_unit_norm() {
        let m = Memto::new(tiny(), 3).unwrap();
        for row in m.memory().rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
    }
}
