//! Separation decoder: modulation, hierarchical aggregation and mask estimation.

mod engine;
mod film;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use engine::{
    segmented_inference, separate, EngineConfig, IdentitySeparator, MixtureFeatures, SeparationEngine, Separator,
    DECODER_PREFIX, ENCODER_PREFIX,
};
pub use film::{film, film_node, FilmLayer};

use crate::encoder::{frame_gather_index, EncoderConfig, LayerFeatures, PatchSequenceGeometry};
use crate::error::{Error, Result};
use crate::nn::{self, BlockSpec};
use crate::scalar::Scalar;
use crate::tape::{Bind, Graph, NodeId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Blocks per aggregator layer, deepest first.
    pub depths: Vec<usize>,
    pub head_dim: usize,
    /// Channels per mel bin produced by the inverse patch embedding.
    pub out_channels: usize,
    pub masknet_dim: usize,
    pub masknet_heads: usize,
    pub masknet_layers: usize,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        DecoderConfig {
            depths: vec![1, 1, 1, 1],
            head_dim: 16,
            out_channels: 2,
            masknet_dim: 64,
            masknet_heads: 4,
            masknet_layers: 3,
            mlp_ratio: 4,
        }
    }

    pub fn tiny() -> Self {
        DecoderConfig { head_dim: 8, masknet_dim: 16, masknet_heads: 2, masknet_layers: 1, mlp_ratio: 2, ..Self::toy() }
    }

    pub fn paper() -> Self {
        DecoderConfig {
            depths: vec![1, 1, 1, 1],
            head_dim: 32,
            out_channels: 2,
            masknet_dim: 256,
            masknet_heads: 8,
            masknet_layers: 3,
            mlp_ratio: 4,
        }
    }
}

/// A spectrogram mask with every value strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask<T: Scalar>(Array2<T>);

impl<T: Scalar> Mask<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().all(|&v| v > T::zero() && v < T::one()) {
            Ok(Mask(values))
        } else {
            Err(Error::domain("mask values must lie strictly inside (0, 1)"))
        }
    }

    pub fn values(&self) -> &Array2<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub enc: EncoderConfig,
    pub cond_dim: usize,
    pub bins: usize,
    pub prefix: String,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, enc: EncoderConfig, cond_dim: usize, bins: usize, prefix: &str) -> Result<Self> {
        if cfg.depths.len() != enc.stages() {
            return Err(Error::config("aggregator needs one layer per encoder stage"));
        }
        for d in enc.level_dims() {
            if d % cfg.head_dim != 0 {
                return Err(Error::config(format!("width {d} is not a multiple of head_dim {}", cfg.head_dim)));
            }
        }
        if cfg.masknet_dim % cfg.masknet_heads != 0 {
            return Err(Error::config("MaskNet width must be divisible by its heads"));
        }
        Ok(Decoder { cfg, enc, cond_dim, bins, prefix: prefix.to_string() })
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn levels(&self) -> usize {
        self.enc.stages()
    }

    /// Width of the features entering aggregator layer `l` (1-based).
    fn aggr_dim(&self, l: usize) -> usize {
        self.enc.level_dims()[self.levels() + 1 - l]
    }

    fn hd_width(&self) -> usize {
        self.enc.mel_bins * self.cfg.out_channels
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = &self.cfg;
        for (i, &dim) in self.enc.level_dims().iter().enumerate() {
            let f = self.name(&format!("film{i}"));
            nn::init_linear(store, &format!("{f}.gamma"), self.cond_dim, dim, true, rng);
            store.filled(&format!("{f}.gamma.b"), 1, dim, T::one(), true);
            nn::init_linear(store, &format!("{f}.beta"), self.cond_dim, dim, true, rng);
        }
        for l in 1..=self.levels() {
            let dim = self.aggr_dim(l);
            let spec = BlockSpec { dim, heads: dim / c.head_dim, mlp_ratio: c.mlp_ratio };
            for b in 0..c.depths[l - 1] {
                nn::init_block(store, &self.name(&format!("aggr{l}.b{b}")), spec, rng);
            }
            if l >= 2 {
                nn::init_expand(store, &self.name(&format!("aggr{l}.expand")), dim, rng);
            }
        }
        let p2 = self.enc.patch * self.enc.patch;
        nn::init_linear(store, &self.name("ipe"), self.enc.base_dim, p2 * c.out_channels, true, rng);
        nn::init_linear(store, &self.name("mask.in"), self.hd_width() + self.bins, c.masknet_dim, true, rng);
        let spec = BlockSpec { dim: c.masknet_dim, heads: c.masknet_heads, mlp_ratio: c.mlp_ratio };
        for i in 0..c.masknet_layers {
            nn::init_block(store, &self.name(&format!("mask.l{i}")), spec, rng);
        }
        nn::init_layer_norm(store, &self.name("mask.ln"), c.masknet_dim);
        nn::init_linear(store, &self.name("mask.head"), c.masknet_dim, self.bins, true, rng);
    }

    /// Modulates every level and aggregates them into per-frame features
    /// `H_d` of shape `(batch · frames) × (mel_bins · out_channels)`.
    pub fn aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        feats: &LayerFeatures,
        cond: NodeId,
        geom: &PatchSequenceGeometry,
        frames: usize,
    ) -> Result<NodeId> {
        let levels = self.levels();
        if feats.levels.len() != levels + 1 || feats.dims != self.enc.level_dims() {
            return Err(Error::domain("encoder features do not match the decoder geometry"));
        }
        let batch = g.shape(cond).0;
        if g.shape(cond).1 != self.cond_dim || feats.grids[0].batch != batch {
            return Err(Error::domain(format!(
                "condition {:?} does not match batch {} × {}",
                g.shape(cond),
                feats.grids[0].batch,
                self.cond_dim
            )));
        }
        let hc: Vec<NodeId> = (0..=levels)
            .map(|i| {
                let per = feats.grids[i].per_example();
                film_node(g, p, &self.name(&format!("film{i}")), feats.levels[i], cond, per)
            })
            .collect();
        let mut x = hc[levels];
        let mut grid = feats.grids[levels];
        for l in 1..=levels {
            let dim = self.aggr_dim(l);
            for b in 0..self.cfg.depths[l - 1] {
                let groups = Arc::new(grid.window_groups(self.enc.window, b % 2 == 1));
                x = nn::block(g, p, &self.name(&format!("aggr{l}.b{b}")), x, &groups, dim / self.cfg.head_dim, 0.0);
            }
            if l >= 2 {
                let (y, next) = nn::expand(g, p, &self.name(&format!("aggr{l}.expand")), x, grid);
                x = y;
                grid = next;
            }
            let skip = hc[levels - l];
            if g.shape(x) != g.shape(skip) {
                return Err(Error::domain("aggregator and skip features disagree in shape"));
            }
            x = g.add(x, skip);
        }
        let y = nn::linear(g, p, &self.name("ipe"), x, 0.0);
        let ch = self.cfg.out_channels;
        let rows = g.shape(y).0 * self.enc.patch * self.enc.patch;
        let y = g.reshape(y, rows, ch);
        let base = frame_gather_index(grid, geom);
        let per_frame = geom.bins;
        let mut idx = Vec::with_capacity(batch * frames * per_frame);
        for b in 0..batch {
            for t in 0..frames {
                let src = b * geom.frames + t.min(geom.frames - 1);
                idx.extend_from_slice(&base[src * per_frame..(src + 1) * per_frame]);
            }
        }
        let y = g.gather_rows(y, Arc::new(idx));
        Ok(g.reshape(y, batch * frames, per_frame * ch))
    }

    /// Transformer layers over frames, a linear head and a sigmoid.
    pub fn masknet<T: Scalar>(&self, g: &mut Graph<T>, p: &Bind<T>, hd: NodeId, log_mag: NodeId, batch: usize) -> Result<NodeId> {
        let (rows, bins) = g.shape(log_mag);
        if g.shape(hd).0 != rows || bins != self.bins || rows % batch != 0 {
            return Err(Error::domain(format!(
                "aggregated features {:?} and magnitude {:?} are not frame-aligned",
                g.shape(hd),
                (rows, bins)
            )));
        }
        let frames = rows / batch;
        let groups: Arc<Vec<Vec<usize>>> =
            Arc::new((0..batch).map(|b| (b * frames..(b + 1) * frames).collect()).collect());
        let z = g.concat_cols(&[hd, log_mag]);
        let mut z = nn::linear(g, p, &self.name("mask.in"), z, 0.0);
        for i in 0..self.cfg.masknet_layers {
            z = nn::block(g, p, &self.name(&format!("mask.l{i}")), z, &groups, self.cfg.masknet_heads, 0.0);
        }
        let z = nn::layer_norm(g, p, &self.name("mask.ln"), z);
        let z = nn::linear(g, p, &self.name("mask.head"), z, 0.0);
        Ok(g.sigmoid(z))
    }
}
