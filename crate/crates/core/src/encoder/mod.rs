//! Hierarchical windowed-attention audio encoder.

mod lora;
mod patches;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use lora::{lora_forward, lora_merge, LoraAdapter};
pub(crate) use patches::frame_gather_index;
pub use patches::{patches_to_frames, patches_to_mel, reshape_to_patches, PatchSequence, PatchSequenceGeometry};

use crate::error::{Error, Result};
use crate::nn::{self, BlockSpec, TokenGrid};
use crate::scalar::Scalar;
use crate::tape::{Bind, Graph, NodeId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub mel_bins: usize,
    /// Longest input in frames; sizes the time position table.
    pub max_frames: usize,
    pub base_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub chunk_count: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        EncoderConfig {
            patch: 4,
            mel_bins: 32,
            max_frames: 128,
            base_dim: 32,
            depths: vec![1, 1, 2, 1],
            heads: vec![2, 4, 8, 16],
            window: 4,
            chunk_count: 4,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_scale: 1.0,
        }
    }

    /// Smallest consistent geometry, for gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig { base_dim: 8, depths: vec![1, 1, 1, 1], heads: vec![1, 1, 2, 2], lora_rank: 2, ..Self::toy() }
    }

    pub fn paper() -> Self {
        EncoderConfig {
            patch: 4,
            mel_bins: 64,
            max_frames: 1024,
            base_dim: 96,
            depths: vec![2, 2, 12, 2],
            heads: vec![4, 8, 16, 32],
            window: 8,
            chunk_count: 4,
            mlp_ratio: 4,
            lora_rank: 16,
            lora_scale: 1.0,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Block width of each stage: `D_f · 2^s`.
    pub fn stage_dims(&self) -> Vec<usize> {
        (0..self.stages()).map(|s| self.base_dim << s).collect()
    }

    /// Width of each feature level `h0, H^1 … H^L`.
    pub fn level_dims(&self) -> Vec<usize> {
        let dims = self.stage_dims();
        let mut out = vec![self.base_dim];
        for s in 0..self.stages() {
            out.push(if s + 1 < self.stages() { 2 * dims[s] } else { dims[s] });
        }
        out
    }

    fn ladder(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn frame_multiple(&self) -> usize {
        self.chunk_count * self.patch * self.ladder()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n != 4 {
            return Err(Error::config(format!("encoder needs 4 stages, got {n}")));
        }
        if self.heads.len() != n {
            return Err(Error::config("one head count per stage is required"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        if self.patch == 0 || self.chunk_count == 0 || self.window == 0 || self.base_dim == 0 {
            return Err(Error::config("patch, chunk count, window and width must be positive"));
        }
        for (d, h) in self.stage_dims().iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                return Err(Error::config(format!("stage width {d} is not divisible by {h} heads")));
            }
        }
        if self.mel_bins % (self.patch * self.ladder()) != 0 {
            return Err(Error::config(format!(
                "{} mel bins do not tile {}-bin patches over {} merges",
                self.mel_bins,
                self.patch,
                n - 1
            )));
        }
        if self.max_frames % self.frame_multiple() != 0 {
            return Err(Error::config(format!("max_frames must be a multiple of {}", self.frame_multiple())));
        }
        Ok(())
    }
}

/// Encoder features of a batch: `levels[0]` is the patch embedding, `levels[l]`
/// the output of stage `l` (after its patch merge, where one follows).
#[derive(Clone, Debug)]
pub struct LayerFeatures {
    pub levels: Vec<NodeId>,
    pub grids: Vec<TokenGrid>,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg, prefix: prefix.to_string() })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn block_name(&self, stage: usize, block: usize) -> String {
        self.name(&format!("s{stage}.b{block}"))
    }

    /// Creates every base tensor.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.cfg;
        let d = c.base_dim;
        nn::init_linear(store, &self.name("patch.proj"), c.patch * c.patch, d, true, rng);
        nn::init_layer_norm(store, &self.name("patch.ln"), d);
        store.normal(&self.name("pos.time"), c.max_frames / c.patch, d, 0.02, true, rng);
        store.normal(&self.name("pos.freq"), c.mel_bins / c.patch, d, 0.02, true, rng);
        for (s, &dim) in c.stage_dims().iter().enumerate() {
            let spec = BlockSpec { dim, heads: c.heads[s], mlp_ratio: c.mlp_ratio };
            for b in 0..c.depths[s] {
                nn::init_block(store, &self.block_name(s, b), spec, rng);
            }
            if s + 1 < c.stages() {
                nn::init_merge(store, &self.name(&format!("s{s}.merge")), dim, rng);
            }
        }
    }

    /// Base weights that receive LoRA adapters: all attention projections.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in 0..self.cfg.stages() {
            for b in 0..self.cfg.depths[s] {
                out.extend(nn::attention_projections(&self.block_name(s, b)));
            }
        }
        out
    }

    pub fn add_lora<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for t in self.lora_targets() {
            nn::init_lora(store, &t, self.cfg.lora_rank, rng);
        }
    }

    pub fn is_lora_tensor(name: &str) -> bool {
        name.ends_with(".lora_a") || name.ends_with(".lora_b")
    }

    /// Stacks the tokens of several sequences of identical geometry.
    pub fn stack<T: Scalar>(&self, seqs: &[PatchSequence<T>]) -> Result<(Array2<T>, TokenGrid)> {
        let first = seqs.first().ok_or_else(|| Error::domain("empty batch"))?;
        let expect = self.cfg.patch * self.cfg.patch;
        let mut views = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.grid != first.grid || s.tokens.ncols() != expect {
                return Err(Error::domain("batch sequences differ in geometry or patch size"));
            }
            views.push(s.tokens.view());
        }
        let tokens = ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths");
        Ok((tokens, TokenGrid::new(first.grid.rows, first.grid.cols, seqs.len())))
    }

    /// Linear patch projection, position embedding and normalisation.
    pub fn patch_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        tokens: NodeId,
        seq: &PatchSequence<T>,
        batch: usize,
    ) -> Result<NodeId> {
        let c = &self.cfg;
        let (rows, width) = g.shape(tokens);
        if width != c.patch * c.patch || rows != seq.grid.per_example() * batch {
            return Err(Error::domain(format!(
                "patch tokens {:?} do not match {} tokens of {} values",
                (rows, width),
                seq.grid.per_example() * batch,
                c.patch * c.patch
            )));
        }
        if seq.padded_frames > c.max_frames || seq.padded_bins != c.mel_bins {
            return Err(Error::domain(format!(
                "input geometry {}×{} exceeds encoder limits {}×{}",
                seq.padded_frames, seq.padded_bins, c.max_frames, c.mel_bins
            )));
        }
        let h = nn::linear(g, p, &self.name("patch.proj"), tokens, 0.0);
        let tidx: Vec<usize> = seq.time_patch_index().into_iter().cycle().take(rows).collect();
        let fidx: Vec<usize> = seq.freq_patch_index().into_iter().cycle().take(rows).collect();
        let pt = p.node(g, &self.name("pos.time"));
        let pf = p.node(g, &self.name("pos.freq"));
        let pt = g.gather_rows(pt, Arc::new(tidx));
        let pf = g.gather_rows(pf, Arc::new(fidx));
        let h = g.add(h, pt);
        let h = g.add(h, pf);
        Ok(nn::layer_norm(g, p, &self.name("patch.ln"), h))
    }

    /// The stage ladder on top of the patch embedding.
    pub fn encode_layers<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<T>, h0: NodeId, grid: TokenGrid) -> LayerFeatures {
        let c = &self.cfg;
        let mut levels = vec![h0];
        let mut grids = vec![grid];
        let mut dims = vec![c.base_dim];
        let mut x = h0;
        let mut grid = grid;
        for (s, &dim) in c.stage_dims().iter().enumerate() {
            for b in 0..c.depths[s] {
                let groups = Arc::new(grid.window_groups(c.window, b % 2 == 1));
                x = nn::block(g, p, &self.block_name(s, b), x, &groups, c.heads[s], c.lora_scale);
            }
            if s + 1 < c.stages() {
                let (y, next) = nn::merge(g, p, &self.name(&format!("s{s}.merge")), x, grid);
                x = y;
                grid = next;
                dims.push(2 * dim);
            } else {
                dims.push(dim);
            }
            levels.push(x);
            grids.push(grid);
        }
        LayerFeatures { levels, grids, dims }
    }

    /// Patch embedding plus stage ladder for a batch of sequences.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<T>, seqs: &[PatchSequence<T>]) -> Result<LayerFeatures> {
        let (tokens, grid) = self.stack(seqs)?;
        let t = g.input(tokens);
        let h0 = self.patch_embed(g, p, t, &seqs[0], grid.batch)?;
        Ok(self.encode_layers(g, p, h0, grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_input(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((101, 32), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn toy_shape_ladder() {
        let enc = Encoder::new(EncoderConfig::toy(), "enc").unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let seq = reshape_to_patches(&toy_input(1), &enc.cfg).unwrap();
        let mut g = Graph::new();
        let f = enc.forward(&mut g, &Bind::frozen(&store), &[seq.clone(), seq]).unwrap();
        assert_eq!(enc.cfg.stage_dims(), vec![32, 64, 128, 256]);
        let shapes: Vec<_> = f.levels.iter().map(|&l| g.shape(l)).collect();
        assert_eq!(shapes, vec![(512, 32), (128, 64), (32, 128), (8, 256), (8, 256)]);
        assert_eq!(f.dims, enc.cfg.level_dims());
    }

    #[test]
    fn zero_lora_is_bit_identical_and_deterministic() {
        let enc = Encoder::new(EncoderConfig::toy(), "enc").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, &mut rng);
        let seq = reshape_to_patches(&toy_input(2), &enc.cfg).unwrap();
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let f = enc.forward(&mut g, &Bind::frozen(s), std::slice::from_ref(&seq)).unwrap();
            f.levels.iter().map(|&l| g.value(l).clone()).collect::<Vec<_>>()
        };
        let base = run(&store);
        assert_eq!(run(&store), base);
        enc.add_lora(&mut store, &mut rng);
        assert_eq!(run(&store), base);
    }

    #[test]
    fn patch_embed_rejects_wrong_width() {
        let enc = Encoder::new(EncoderConfig::toy(), "enc").unwrap();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let seq = reshape_to_patches(&toy_input(3), &enc.cfg).unwrap();
        let mut g = Graph::new();
        let t = g.input(Array2::zeros((seq.token_count(), 9)));
        assert!(enc.patch_embed(&mut g, &Bind::frozen(&store), t, &seq, 1).is_err());
    }

    #[test]
    fn paper_profile_is_consistent() {
        EncoderConfig::paper().validate().unwrap();
        assert_eq!(EncoderConfig::paper().frame_multiple(), 128);
    }
}
