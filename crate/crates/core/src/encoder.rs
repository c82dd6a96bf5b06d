//! History-frame encoders producing the per-point latent condition.
//!
//! Both encoder kinds share the same output layout. For an N-point history
//! the latent is an N×C matrix whose first `local_channels()` columns are
//! per-point features of the most recent frame, and whose remaining
//! `context_channels()` columns repeat one permutation-invariant context
//! vector pooled over every history frame.
//!
//! Layer widths (H = `hidden`, k = `history_frames`, C = `channels`):
//!
//! | layer      | kind          | in → out                                   |
//! |------------|---------------|--------------------------------------------|
//! | `point1`   | both          | 3 → H, SiLU                                |
//! | `point2`   | both          | H → H, SiLU, max-pooled per frame          |
//! | `group`    | hierarchical  | 3 → H on centroid-relative coords, SiLU    |
//! | `local`    | per-point     | 3 + H (+H hierarchical) → C/2              |
//! | `action`   | `use_actions` | k·A → E, SiLU                              |
//! | `context`  | both          | k·H (·2 hierarchical) (+E) → C − local     |
//!
//! With the default mlp_pool configuration (C = 64, H = 64, k = 1) that is
//! 256 + 4160 + 2176 + 2080 = 8672 parameters.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cloud::{farthest_point_indices, sq_dist, PointCloud};
use crate::error::{Error, Result};
use crate::nn::{self, Grads, Linear, ParamStore};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    MlpPool,
    #[default]
    Hierarchical,
}

/// How the latent channels split between per-point and pooled content.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentLayout {
    PerPoint,
    /// Every channel is the pooled context broadcast to all rows.
    #[default]
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub channels: usize,
    pub hidden: usize,
    pub history_frames: usize,
    pub use_actions: bool,
    pub action_dim: usize,
    pub action_embed: usize,
    pub layout: LatentLayout,
    /// Set-abstraction centroids (hierarchical only).
    pub groups: usize,
    /// Neighbors per centroid (hierarchical only).
    pub group_size: usize,
    /// Fixed multiplier on input coordinates.
    pub coord_scale: f64,
    /// Extra multiplier on neighbor offsets inside a group.
    pub group_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Hierarchical,
            channels: 64,
            hidden: 64,
            history_frames: 1,
            use_actions: false,
            action_dim: 3,
            action_embed: 16,
            layout: LatentLayout::Global,
            groups: 16,
            group_size: 8,
            coord_scale: 6.0,
            group_scale: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.history_frames == 0 {
            return Err(Error::invalid("encoder channels, hidden and history_frames must be >= 1"));
        }
        if self.use_actions && (self.action_dim == 0 || self.action_embed == 0) {
            return Err(Error::invalid("action conditioning needs action_dim >= 1 and action_embed >= 1"));
        }
        if self.kind == EncoderKind::Hierarchical && (self.groups == 0 || self.group_size == 0) {
            return Err(Error::invalid("hierarchical encoder needs groups >= 1 and group_size >= 1"));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite() && self.group_scale > 0.0 && self.group_scale.is_finite()) {
            return Err(Error::invalid("coord_scale and group_scale must be positive"));
        }
        Ok(())
    }

    pub fn local_channels(&self) -> usize {
        match self.layout {
            LatentLayout::PerPoint => self.channels / 2,
            LatentLayout::Global => 0,
        }
    }

    pub fn context_channels(&self) -> usize {
        self.channels - self.local_channels()
    }

    fn pooled_width(&self) -> usize {
        match self.kind {
            EncoderKind::MlpPool => self.hidden,
            EncoderKind::Hierarchical => 2 * self.hidden,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    point1: Linear,
    point2: Linear,
    group: Option<Linear>,
    local: Option<Linear>,
    action: Option<Linear>,
    context: Linear,
}

impl Layers {
    fn build(config: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let h = config.hidden;
        let point1 = Linear::new(store, "encoder.point1", 3, h, rng);
        let point2 = Linear::new(store, "encoder.point2", h, h, rng);
        let group = (config.kind == EncoderKind::Hierarchical).then(|| Linear::new(store, "encoder.group", 6, h, rng));
        let local = (config.local_channels() > 0).then(|| {
            let extra = if group.is_some() { h } else { 0 };
            Linear::new(store, "encoder.local", 3 + h + extra, config.local_channels(), rng)
        });
        let action = config.use_actions.then(|| {
            Linear::new(
                store,
                "encoder.action",
                config.history_frames * config.action_dim,
                config.action_embed,
                rng,
            )
        });
        let ctx_in = config.history_frames * config.pooled_width() + action.map_or(0, |a| a.out_dim);
        let context = Linear::new(store, "encoder.context", ctx_in, config.context_channels(), rng);
        Layers {
            point1,
            point2,
            group,
            local,
            action,
            context,
        }
    }
}

/// Output of one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRepresentation {
    /// N×C latent, local columns first.
    pub features: Array2<f64>,
    /// The pooled context vector (also broadcast into the trailing columns).
    pub context: Array1<f64>,
    pub local_channels: usize,
}

impl LatentRepresentation {
    pub fn n_points(&self) -> usize {
        self.features.nrows()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn pooled_columns(&self) -> ArrayView2<'_, f64> {
        self.features.slice(s![.., self.local_channels..])
    }
}

/// Centroid groups for one frame of the hierarchical encoder.
#[derive(Clone, Debug)]
struct Grouping {
    centroids: Vec<usize>,
    // group_size neighbor indices per centroid, row-major
    neighbors: Vec<usize>,
    group_size: usize,
    // nearest centroid slot per point
    assign: Vec<usize>,
}

fn build_grouping(points: ArrayView2<'_, f64>, groups: usize, group_size: usize) -> Result<Grouping> {
    let n = points.nrows();
    let p = |i: usize| [points[[i, 0]], points[[i, 1]], points[[i, 2]]];
    // Start at the point farthest from the centroid so the grouping does not
    // depend on row order.
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let c = [mean[0], mean[1], mean[2]];
    let mut start = 0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        let d = sq_dist(p(i), c);
        if d > best {
            best = d;
            start = i;
        }
    }
    let centroids = farthest_point_indices(points, groups.min(n), start)?;
    let k = group_size.min(n);
    let mut neighbors = Vec::with_capacity(centroids.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &ci in &centroids {
        order.clear();
        order.extend((0..n).map(|j| (sq_dist(p(ci), p(j)), j)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.extend(order.iter().take(k).map(|&(_, j)| j));
    }
    let assign = (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for (m, &ci) in centroids.iter().enumerate() {
                let d = sq_dist(p(i), p(ci));
                if d < best.0 {
                    best = (d, m);
                }
            }
            best.1
        })
        .collect();
    Ok(Grouping {
        centroids,
        neighbors,
        group_size: k,
        assign,
    })
}

#[derive(Clone, Debug)]
struct GroupCache {
    grouping: Grouping,
    rel: Array2<f64>,
    pre: Array2<f64>,
    // per-group max over neighbors: M×H, with the winning row of `pre`
    pooled: Array2<f64>,
    pooled_arg: Vec<usize>,
    frame_arg: Vec<usize>,
}

#[derive(Clone, Debug)]
struct FrameCache {
    points: Array2<f64>,
    pre1: Array2<f64>,
    h1: Array2<f64>,
    pre2: Array2<f64>,
    feat: Array2<f64>,
    feat_arg: Vec<usize>,
    group: Option<GroupCache>,
}

/// Intermediate values retained for [`Encoder::backward`].
#[derive(Clone, Debug)]
pub struct EncoderCache {
    frames: Vec<FrameCache>,
    local_in: Option<Array2<f64>>,
    action_in: Option<Array2<f64>>,
    action_pre: Option<Array2<f64>>,
    context_in: Array2<f64>,
    n_points: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    layers: Layers,
}

// The layer layout is a pure function of the config.
impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Encoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_from(seed, &[rng::stream::ENCODER_INIT]);
        let mut params = ParamStore::new();
        let layers = Layers::build(config, &mut params, &mut rng);
        Ok(Encoder {
            config: config.clone(),
            params,
            layers,
        })
    }

    /// Rebuilds an encoder around previously trained parameters.
    pub fn with_params(config: &EncoderConfig, params: &ParamStore) -> Result<Self> {
        let mut enc = Self::init(config, 0)?;
        enc.params.load_from(params)?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn layers(&self) -> &Layers {
        &self.layers
    }

    pub fn encode(&self, history: &[PointCloud], actions: Option<&[Vec<f64>]>) -> Result<LatentRepresentation> {
        let views: Vec<ArrayView2<'_, f64>> = history.iter().map(|c| c.view()).collect();
        Ok(self.forward(&views, actions)?.0)
    }

    fn check_inputs(&self, history: &[ArrayView2<'_, f64>], actions: Option<&[Vec<f64>]>) -> Result<usize> {
        let k = self.config.history_frames;
        if history.len() != k {
            return Err(Error::invalid(format!(
                "encoder expects {k} history frames, got {}",
                history.len()
            )));
        }
        let n = history[0].nrows();
        if n == 0 {
            return Err(Error::invalid("empty history frame"));
        }
        for (i, f) in history.iter().enumerate() {
            if f.nrows() != n || f.ncols() != 3 {
                return Err(Error::invalid(format!(
                    "history frame {i} has shape {:?}, expected ({n}, 3)",
                    f.dim()
                )));
            }
        }
        if let Some(a) = actions {
            if a.len() != k {
                return Err(Error::invalid(format!(
                    "expected {k} history actions, got {}",
                    a.len()
                )));
            }
            if self.config.use_actions && a.iter().any(|v| v.len() != self.config.action_dim) {
                return Err(Error::invalid(format!(
                    "history actions must have dimension {}",
                    self.config.action_dim
                )));
            }
        } else if self.config.use_actions {
            return Err(Error::invalid("encoder is action-conditioned but no actions were given"));
        }
        Ok(n)
    }

    fn frame_forward(&self, raw: ArrayView2<'_, f64>) -> Result<FrameCache> {
        let l = self.layers();
        let scaled = &raw * self.config.coord_scale;
        let points = scaled.view();
        let pre1 = l.point1.forward(&self.params, points);
        let h1 = nn::silu(pre1.view());
        let pre2 = l.point2.forward(&self.params, h1.view());
        let feat = nn::silu(pre2.view());
        let (_, feat_arg) = nn::column_max(feat.view());
        let group = match l.group {
            None => None,
            Some(glin) => {
                let grouping = build_grouping(points, self.config.groups, self.config.group_size)?;
                let k = grouping.group_size;
                let m = grouping.centroids.len();
                // Rows are (scaled neighbor offset, centroid position).
                let gs = self.config.group_scale;
                let mut rel = Array2::zeros((m * k, 6));
                for (gi, &ci) in grouping.centroids.iter().enumerate() {
                    for r in 0..k {
                        let j = grouping.neighbors[gi * k + r];
                        for d in 0..3 {
                            rel[[gi * k + r, d]] = gs * (points[[j, d]] - points[[ci, d]]);
                            rel[[gi * k + r, 3 + d]] = points[[ci, d]];
                        }
                    }
                }
                let pre = glin.forward(&self.params, rel.view());
                let u = nn::silu(pre.view());
                let h = self.config.hidden;
                let mut pooled = Array2::zeros((m, h));
                let mut pooled_arg = vec![0usize; m * h];
                for gi in 0..m {
                    let (vals, arg) = nn::column_max(u.slice(s![gi * k..(gi + 1) * k, ..]));
                    pooled.row_mut(gi).assign(&vals);
                    for (c, a) in arg.into_iter().enumerate() {
                        pooled_arg[gi * h + c] = gi * k + a;
                    }
                }
                let (_, frame_arg) = nn::column_max(pooled.view());
                Some(GroupCache {
                    grouping,
                    rel,
                    pre,
                    pooled,
                    pooled_arg,
                    frame_arg,
                })
            }
        };
        Ok(FrameCache {
            points: points.to_owned(),
            pre1,
            h1,
            pre2,
            feat,
            feat_arg,
            group,
        })
    }

    fn pooled_vector(fc: &FrameCache) -> Array1<f64> {
        let mut v: Vec<f64> = fc
            .feat_arg
            .iter()
            .enumerate()
            .map(|(c, &i)| fc.feat[[i, c]])
            .collect();
        if let Some(g) = &fc.group {
            v.extend(g.frame_arg.iter().enumerate().map(|(c, &i)| g.pooled[[i, c]]));
        }
        Array1::from(v)
    }

    /// Encoder pass retaining what [`Encoder::backward`] needs.
    pub fn forward(
        &self,
        history: &[ArrayView2<'_, f64>],
        actions: Option<&[Vec<f64>]>,
    ) -> Result<(LatentRepresentation, EncoderCache)> {
        let n = self.check_inputs(history, actions)?;
        let l = self.layers();
        let frames = history
            .iter()
            .map(|f| self.frame_forward(*f))
            .collect::<Result<Vec<_>>>()?;

        let mut ctx_parts: Vec<f64> = Vec::new();
        for fc in &frames {
            ctx_parts.extend(Self::pooled_vector(fc).iter());
        }
        let (action_in, action_pre) = match (l.action, actions) {
            (Some(alin), Some(acts)) => {
                let flat: Vec<f64> = acts.iter().flatten().copied().collect();
                let a_in = Array2::from_shape_vec((1, flat.len()), flat).expect("flat actions");
                let pre = alin.forward(&self.params, a_in.view());
                ctx_parts.extend(nn::silu(pre.view()).iter());
                (Some(a_in), Some(pre))
            }
            _ => (None, None),
        };
        let context_in = Array2::from_shape_vec((1, ctx_parts.len()), ctx_parts).expect("context row");
        let context = l.context.forward(&self.params, context_in.view()).row(0).to_owned();

        let last = frames.last().expect("k >= 1");
        let local_in = l.local.map(|_| {
            let mut blocks = vec![last.points.view(), last.feat.view()];
            let gathered;
            if let Some(g) = &last.group {
                gathered = g.pooled.select(Axis(0), &g.grouping.assign);
                blocks.push(gathered.view());
            }
            nn::hcat(&blocks)
        });
        let ctx_block = nn::broadcast_rows(context.view(), n);
        let features = match (&l.local, &local_in) {
            (Some(llin), Some(x)) => {
                let local = llin.forward(&self.params, x.view());
                nn::hcat(&[local.view(), ctx_block.view()])
            }
            _ => ctx_block,
        };
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("encoder produced non-finite features".into()));
        }
        let latent = LatentRepresentation {
            features,
            context,
            local_channels: self.config.local_channels(),
        };
        let cache = EncoderCache {
            frames,
            local_in,
            action_in,
            action_pre,
            context_in,
            n_points: n,
        };
        Ok((latent, cache))
    }

    /// Backpropagates gradients w.r.t. the latent matrix and/or directly
    /// w.r.t. the context vector, accumulating into `grads`.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        d_latent: Option<ArrayView2<'_, f64>>,
        d_context: Option<ArrayView1<'_, f64>>,
        grads: &mut Grads,
    ) {
        let l = self.layers();
        let p = &self.params;
        let h = self.config.hidden;
        let lc = self.config.local_channels();
        let n = cache.n_points;

        let mut d_ctx = Array1::<f64>::zeros(self.config.context_channels());
        if let Some(dz) = d_latent {
            d_ctx += &dz.slice(s![.., lc..]).sum_axis(Axis(0));
        }
        if let Some(dc) = d_context {
            d_ctx += &dc;
        }
        let d_ctx_row = d_ctx.insert_axis(Axis(0));
        let d_ctx_in = l.context.backward(p, cache.context_in.view(), d_ctx_row.view(), grads);
        let d_ctx_in = d_ctx_in.row(0);

        let k = cache.frames.len();
        let pw = self.config.pooled_width();
        if let (Some(alin), Some(a_in), Some(pre)) = (l.action, &cache.action_in, &cache.action_pre) {
            let d_emb = d_ctx_in.slice(s![k * pw..]).to_owned().insert_axis(Axis(0));
            let d_pre = nn::silu_backward(pre.view(), d_emb.view());
            alin.accumulate(a_in.view(), d_pre.view(), grads);
        }

        // Gradients flowing into the last frame's per-point features.
        let mut d_feat_last = Array2::<f64>::zeros((n, h));
        let mut d_group_last: Option<Array2<f64>> = None;
        if let (Some(llin), Some(x), Some(dz)) = (l.local, &cache.local_in, d_latent) {
            let d_in = llin.backward(p, x.view(), dz.slice(s![.., ..lc]), grads);
            d_feat_last += &d_in.slice(s![.., 3..3 + h]);
            if l.group.is_some() {
                d_group_last = Some(d_in.slice(s![.., 3 + h..]).to_owned());
            }
        }

        for (fi, fc) in cache.frames.iter().enumerate() {
            let d_pool = d_ctx_in.slice(s![fi * pw..(fi + 1) * pw]);
            let mut d_feat = if fi == k - 1 {
                std::mem::replace(&mut d_feat_last, Array2::zeros((0, 0)))
            } else {
                Array2::zeros((n, h))
            };
            nn::column_max_backward(d_pool.slice(s![..h]), &fc.feat_arg, &mut d_feat);

            if let (Some(glin), Some(g)) = (l.group, &fc.group) {
                let m = g.grouping.centroids.len();
                let mut d_pooled = Array2::<f64>::zeros((m, h));
                nn::column_max_backward(d_pool.slice(s![h..]), &g.frame_arg, &mut d_pooled);
                if fi == k - 1 {
                    if let Some(dg) = &d_group_last {
                        for (i, &mi) in g.grouping.assign.iter().enumerate() {
                            let mut row = d_pooled.row_mut(mi);
                            row += &dg.row(i);
                        }
                    }
                }
                let mut d_u = Array2::<f64>::zeros(g.pre.raw_dim());
                for gi in 0..m {
                    for c in 0..h {
                        d_u[[g.pooled_arg[gi * h + c], c]] += d_pooled[[gi, c]];
                    }
                }
                let d_pre = nn::silu_backward(g.pre.view(), d_u.view());
                glin.accumulate(g.rel.view(), d_pre.view(), grads);
            }

            let d_pre2 = nn::silu_backward(fc.pre2.view(), d_feat.view());
            let d_h1 = l.point2.backward(p, fc.h1.view(), d_pre2.view(), grads);
            let d_pre1 = nn::silu_backward(fc.pre1.view(), d_h1.view());
            l.point1.accumulate(fc.points.view(), d_pre1.view(), grads);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random_cloud(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng::rng_from(seed, &[]);
        Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0))
    }

    fn small(kind: EncoderKind, k: usize, actions: bool) -> EncoderConfig {
        EncoderConfig {
            kind,
            channels: 6,
            hidden: 5,
            history_frames: k,
            use_actions: actions,
            action_dim: 3,
            action_embed: 4,
            layout: LatentLayout::PerPoint,
            groups: 4,
            group_size: 3,
            coord_scale: 3.0,
            group_scale: 4.0,
        }
    }

    #[test]
    fn default_parameter_count_matches_table() {
        let enc = Encoder::init(&EncoderConfig::default(), 1).unwrap();
        // point1 3*64+64, point2 64*64+64, group 6*64+64, context 128*64+64
        assert_eq!(enc.num_parameters(), 256 + 4160 + 448 + 8256);
        let flat = EncoderConfig {
            kind: EncoderKind::MlpPool,
            layout: LatentLayout::PerPoint,
            ..EncoderConfig::default()
        };
        // point1, point2, local 67*32+32, context 64*32+32
        assert_eq!(Encoder::init(&flat, 1).unwrap().num_parameters(), 256 + 4160 + 2176 + 2080);
    }

    #[test]
    fn init_is_seeded() {
        let c = EncoderConfig::default();
        assert_eq!(Encoder::init(&c, 3).unwrap().params(), Encoder::init(&c, 3).unwrap().params());
        assert_ne!(Encoder::init(&c, 3).unwrap().params(), Encoder::init(&c, 4).unwrap().params());
    }

    #[test]
    fn output_shape_and_global_layout() {
        let x = random_cloud(20, 1);
        for layout in [LatentLayout::PerPoint, LatentLayout::Global] {
            let cfg = EncoderConfig { layout, ..EncoderConfig::default() };
            let enc = Encoder::init(&cfg, 2).unwrap();
            let (z, _) = enc.forward(&[x.view()], None).unwrap();
            assert_eq!(z.features.dim(), (20, 64));
            assert_eq!(z.context.len(), cfg.context_channels());
        }
    }

    #[test]
    fn rejects_mismatched_history() {
        let enc = Encoder::init(&small(EncoderKind::MlpPool, 2, true), 1).unwrap();
        let a = random_cloud(8, 1);
        let b = random_cloud(9, 2);
        let acts = vec![vec![0.0; 3]; 2];
        assert!(enc.forward(&[a.view(), b.view()], Some(&acts)).is_err());
        assert!(enc.forward(&[a.view(), a.view()], Some(&acts[..1])).is_err());
        assert!(enc.forward(&[a.view(), a.view()], None).is_err());
        assert!(enc.forward(&[a.view()], Some(&acts)).is_err());
        assert!(enc.forward(&[a.view(), a.view()], Some(&acts)).is_ok());
    }

    #[test]
    fn permutation_moves_rows_and_keeps_context() {
        for kind in [EncoderKind::MlpPool, EncoderKind::Hierarchical] {
            let cfg = small(kind, 2, false);
            let enc = Encoder::init(&cfg, 5).unwrap();
            let f0 = random_cloud(30, 10);
            let f1 = random_cloud(30, 11);
            let (z, _) = enc.forward(&[f0.view(), f1.view()], None).unwrap();
            let mut rng = rng::rng_from(99, &[]);
            let mut perm: Vec<usize> = (0..30).collect();
            perm.shuffle(&mut rng);
            let p0 = f0.select(Axis(0), &perm);
            let p1 = f1.select(Axis(0), &perm);
            let (zp, _) = enc.forward(&[p0.view(), p1.view()], None).unwrap();
            let expect = z.features.select(Axis(0), &perm);
            for (a, b) in zp.features.iter().zip(expect.iter()) {
                assert!((a - b).abs() <= 1e-12, "{kind:?}");
            }
            for (a, b) in zp.context.iter().zip(z.context.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn finite_on_box_inputs() {
        let cfg = small(EncoderKind::Hierarchical, 1, false);
        let enc = Encoder::init(&cfg, 8).unwrap();
        let x = random_cloud(40, 3).mapv(|v| v * 10.0);
        let (z, _) = enc.forward(&[x.view()], None).unwrap();
        assert!(z.features.iter().all(|v| v.is_finite()));
    }

    // Gradient of sum(W ⊙ z) + sum(V ⊙ context) against central differences.
    fn check_gradients(cfg: EncoderConfig) {
        let enc = Encoder::init(&cfg, 21).unwrap();
        let k = cfg.history_frames;
        let frames: Vec<Array2<f64>> = (0..k).map(|i| random_cloud(12, 40 + i as u64)).collect();
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let acts: Vec<Vec<f64>> = (0..k).map(|i| vec![0.1 * i as f64, -0.2, 0.3]).collect();
        let acts_opt = cfg.use_actions.then_some(acts.as_slice());
        let w = random_cloud(12 * cfg.channels / 3, 77).into_shape_with_order((12, cfg.channels)).unwrap();
        let v = Array1::from_iter((0..cfg.context_channels()).map(|i| 0.3 - 0.1 * i as f64));
        let objective = |e: &Encoder| {
            let (z, _) = e.forward(&views, acts_opt).unwrap();
            (&z.features * &w).sum() + (&z.context * &v).sum()
        };
        let (_, cache) = enc.forward(&views, acts_opt).unwrap();
        let mut g = enc.params().zero_grads();
        enc.backward(&cache, Some(w.view()), Some(v.view()), &mut g);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (ti, t) in g.tensors().iter().enumerate() {
            for idx in ndarray::indices(t.raw_dim()) {
                let mut plus = enc.clone();
                plus.params.tensors_mut().nth(ti).unwrap()[idx] += h;
                let mut minus = enc.clone();
                minus.params.tensors_mut().nth(ti).unwrap()[idx] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = t[idx];
                let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "{:?} worst relative error {worst}", cfg.kind);
    }

    #[test]
    fn gradients_mlp_pool() {
        check_gradients(small(EncoderKind::MlpPool, 2, true));
    }

    #[test]
    fn gradients_hierarchical() {
        check_gradients(small(EncoderKind::Hierarchical, 2, false));
    }
}
